#include "dfsar/nn.hpp"

#include <cmath>
#include <cstring>

#include "dfsar/error.hpp"

namespace dfsar::nn {

// ---------------------------------------------------------------- ParameterSet

ag::Var ParameterSet::add_param(const std::string& name, Tensor init) {
  DFSAR_REQUIRE(!params_.count(name) && !buffers_.count(name), "duplicate parameter name " + name);
  ag::Var v(std::move(init), true);
  params_.emplace(name, v);
  return v;
}

Tensor* ParameterSet::add_buffer(const std::string& name, Tensor init) {
  DFSAR_REQUIRE(!params_.count(name) && !buffers_.count(name), "duplicate buffer name " + name);
  return &buffers_.emplace(name, std::move(init)).first->second;
}

void ParameterSet::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value().size();
  return n;
}

namespace {

void fnv_mix(std::uint64_t& h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
}

}  // namespace

std::uint64_t ParameterSet::digest(bool include_buffers) const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_tensor = [&](const std::string& name, const Tensor& t) {
    fnv_mix(h, name.data(), name.size());
    fnv_mix(h, t.data(), t.size() * sizeof(double));
  };
  for (const auto& [name, p] : params_) mix_tensor(name, p.value());
  if (include_buffers)
    for (const auto& [name, b] : buffers_) mix_tensor(name, b);
  return h;
}

Tensor gaussian(const Shape& shape, double stddev, std::mt19937_64& rng) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(ParameterSet& ps, const std::string& name, const ConvOptions& o, std::mt19937_64& rng)
    : opts_(o), geom_{o.stride, o.pad, o.dilation} {
  DFSAR_REQUIRE(o.in > 0 && o.out > 0 && o.kernel > 0, "Conv2d " + name + ": invalid channel/kernel sizes");
  Tensor w = o.init_std > 0.0 ? gaussian({o.out, o.in, o.kernel, o.kernel}, o.init_std, rng)
                              : Tensor({o.out, o.in, o.kernel, o.kernel});
  weight_ = ps.add_param(name + ".weight", std::move(w));
  if (o.bias) bias_ = ps.add_param(name + ".bias", Tensor({o.out}));
}

ag::Var Conv2d::operator()(const ag::Var& x) const { return apply(x, weight_); }

ag::Var Conv2d::apply(const ag::Var& x, const ag::Var& weight) const {
  ag::Var y = ag::conv2d(x, weight, geom_);
  return bias_.defined() ? ag::add_bias(y, bias_) : y;
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(ParameterSet& ps, const std::string& name, int channels, double momentum, double eps)
    : momentum_(momentum), eps_(eps) {
  gamma_ = ps.add_param(name + ".gamma", Tensor({channels}, 1.0));
  beta_ = ps.add_param(name + ".beta", Tensor({channels}, 0.0));
  running_mean_ = ps.add_buffer(name + ".running_mean", Tensor({channels}, 0.0));
  running_var_ = ps.add_buffer(name + ".running_var", Tensor({channels}, 1.0));
}

ag::Var BatchNorm2d::operator()(const ag::Var& x, BatchStats mode) const {
  const Shape& s = x.shape();
  DFSAR_REQUIRE((s.size() == 4 || s.size() == 2) && s[1] == gamma_.dim(0),
                "BatchNorm2d: input " + shape_str(s) + " does not match " + std::to_string(gamma_.dim(0)) +
                    " channels");
  const int batch = s[0], channels = s[1];
  const std::size_t plane = s.size() == 4 ? static_cast<std::size_t>(s[2]) * s[3] : 1;
  const double count = static_cast<double>(batch) * static_cast<double>(plane);
  auto index = [=](int n, int c, std::size_t p) { return (static_cast<std::size_t>(n) * channels + c) * plane + p; };

  std::vector<double> mean(channels), inv_std(channels);
  const Tensor& xv = x.value();
  if (mode == BatchStats::running) {
    for (int c = 0; c < channels; ++c) {
      mean[c] = (*running_mean_)[c];
      inv_std[c] = 1.0 / std::sqrt((*running_var_)[c] + eps_);
    }
  } else {
    for (int c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (int n = 0; n < batch; ++n)
        for (std::size_t p = 0; p < plane; ++p) acc += xv[index(n, c, p)];
      const double mu = acc / count;
      double var = 0.0;
      for (int n = 0; n < batch; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = xv[index(n, c, p)] - mu;
          var += d * d;
        }
      var /= count;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + eps_);
      if (mode == BatchStats::batch_update) {
        const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
        (*running_mean_)[c] = (1.0 - momentum_) * (*running_mean_)[c] + momentum_ * mu;
        (*running_var_)[c] = (1.0 - momentum_) * (*running_var_)[c] + momentum_ * unbiased;
      }
    }
  }

  Tensor xhat(s);
  Tensor y(s);
  const Tensor& gv = gamma_.value();
  const Tensor& bv = beta_.value();
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = index(n, c, p);
        xhat[i] = (xv[i] - mean[c]) * inv_std[c];
        y[i] = gv[c] * xhat[i] + bv[c];
      }

  const bool batch_stats = mode != BatchStats::running;
  return ag::make_result(
      std::move(y), {x, gamma_, beta_},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](ag::Node& self) {
        const Tensor& g = self.grad;
        const Tensor& gamma = self.inputs[1]->value;
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
        for (int n = 0; n < batch; ++n)
          for (int c = 0; c < channels; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t i = index(n, c, p);
              sum_g[c] += g[i];
              sum_gx[c] += g[i] * xhat[i];
            }
        if (self.inputs[0]->requires_grad) {
          Tensor gx(g.shape());
          for (int n = 0; n < batch; ++n)
            for (int c = 0; c < channels; ++c)
              for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = index(n, c, p);
                gx[i] = batch_stats
                            ? gamma[c] * inv_std[c] * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                            : gamma[c] * inv_std[c] * g[i];
              }
          self.inputs[0]->accumulate(gx);
        }
        if (self.inputs[1]->requires_grad) self.inputs[1]->accumulate(Tensor({channels}, sum_gx));
        if (self.inputs[2]->requires_grad) self.inputs[2]->accumulate(Tensor({channels}, sum_g));
      });
}

// ---------------------------------------------------------------- Linear

Linear::Linear(ParameterSet& ps, const std::string& name, int in, int out, double init_std, std::mt19937_64& rng) {
  weight_ = ps.add_param(name + ".weight", gaussian({out, in}, init_std, rng));
  bias_ = ps.add_param(name + ".bias", Tensor({out}));
}

ag::Var Linear::operator()(const ag::Var& x) const { return ag::add_bias(ag::linear(x, weight_), bias_); }

// ---------------------------------------------------------------- SpectralNorm

namespace {

bool normalize_in_place(std::vector<double>& v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double n = std::sqrt(ss);
  if (n < 1e-30) return false;
  for (double& x : v) x /= n;
  return true;
}

}  // namespace

SpectralNorm::SpectralNorm(ParameterSet& ps, const std::string& name, const ag::Var& weight, std::mt19937_64& rng,
                           int warmup_iterations)
    : weight_(weight) {
  const int rows = weight.dim(0);
  const int cols = static_cast<int>(weight.value().size() / rows);
  Tensor u = gaussian({rows}, 1.0, rng);
  Tensor v = gaussian({cols}, 1.0, rng);
  normalize_in_place(u.storage());
  normalize_in_place(v.storage());
  u_ = ps.add_buffer(name + ".sn_u", std::move(u));
  v_ = ps.add_buffer(name + ".sn_v", std::move(v));
  for (int i = 0; i < warmup_iterations; ++i) power_iteration();
}

void SpectralNorm::power_iteration() {
  const Tensor& w = weight_.value();
  const std::size_t rows = u_->size(), cols = v_->size();
  std::vector<double> v(cols, 0.0), u(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) v[c] += w[r * cols + c] * (*u_)[r];
  if (!normalize_in_place(v)) return;
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += w[r * cols + c] * v[c];
    u[r] = acc;
  }
  if (!normalize_in_place(u)) return;
  v_->storage() = std::move(v);
  u_->storage() = std::move(u);
}

double SpectralNorm::sigma() const {
  const Tensor& w = weight_.value();
  const std::size_t rows = u_->size(), cols = v_->size();
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) s += (*u_)[r] * w[r * cols + c] * (*v_)[c];
  return s;
}

ag::Var SpectralNorm::normalized() const {
  constexpr double kMinSigma = 1e-12;
  const std::size_t rows = u_->size(), cols = v_->size();
  Tensor outer(weight_.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) outer[r * cols + c] = (*u_)[r] * (*v_)[c];
  ag::Var sigma = ag::dot_const(weight_, outer);
  if (std::abs(sigma.item()) < kMinSigma) return ag::scale(weight_, 1.0 / kMinSigma);
  return ag::div_scalar(weight_, sigma);
}

SNConv2d::SNConv2d(ParameterSet& ps, const std::string& name, const ConvOptions& o, std::mt19937_64& rng,
                   int warmup_iterations)
    : conv_(ps, name, o, rng), sn_(ps, name, conv_.weight(), rng, warmup_iterations) {}

ag::Var SNConv2d::operator()(const ag::Var& x, bool update_estimate) const {
  if (update_estimate) sn_.power_iteration();
  return conv_.apply(x, sn_.normalized());
}

// ---------------------------------------------------------------- Adam

Adam::Adam(ParameterSet& params, AdamOptions opts) : params_(params), opts_(opts) {
  DFSAR_REQUIRE(opts.lr > 0.0 && opts.beta1 >= 0.0 && opts.beta1 < 1.0 && opts.beta2 >= 0.0 && opts.beta2 < 1.0,
                "Adam: invalid hyperparameters");
  for (const auto& [name, p] : params_.params()) {
    m_.emplace(name, Tensor(p.shape()));
    v_.emplace(name, Tensor(p.shape()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params_.params()) {
    if (!p.has_grad()) continue;
    Tensor& w = p.mutable_value();
    const Tensor& g = p.grad();
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
    }
  }
}

}  // namespace dfsar::nn
