#include "dfsar/losses.hpp"

#include <cmath>
#include <complex>

#include "dfsar/archive.hpp"
#include "dfsar/error.hpp"
#include "dfsar/imageops.hpp"

namespace dfsar::loss {

void LossWeights::validate() const {
  for (double w : {adv, pix, ffl, perc, style, feat})
    DFSAR_REQUIRE(std::isfinite(w) && w >= 0.0, "loss weights must be finite and non-negative");
}

ag::Var adversarial(const ag::Var& pred, double target) {
  DFSAR_REQUIRE(target >= 0.0 && target <= 1.0, "adversarial: target must lie in [0, 1]");
  const Tensor& p = pred.value();
  DFSAR_REQUIRE(!p.empty(), "adversarial: empty prediction");
  double acc = 0.0;
  for (double v : p.values()) {
    DFSAR_REQUIRE(v > 0.0 && v < 1.0, "adversarial: prediction " + std::to_string(v) + " outside (0, 1)");
    acc -= target * std::log(v) + (1.0 - target) * std::log1p(-v);
  }
  const double count = static_cast<double>(p.size());
  return ag::make_result(Tensor({1}, acc / count), {pred}, [target, count](ag::Node& self) {
    const Tensor& pv = self.inputs[0]->value;
    Tensor g(pv.shape());
    const double up = self.grad[0] / count;
    for (std::size_t i = 0; i < pv.size(); ++i) g[i] = up * (pv[i] - target) / (pv[i] * (1.0 - pv[i]));
    self.inputs[0]->accumulate(g);
  });
}

ag::Var pixel(const ag::Var& gen, const ag::Var& real) {
  DFSAR_REQUIRE(gen.shape() == real.shape(),
                "pixel loss: shape " + shape_str(gen.shape()) + " vs " + shape_str(real.shape()));
  return ag::mse(gen, real);
}

// ---------------------------------------------------------------- focal frequency

ag::Var focal_frequency(const ag::Var& gen, const ag::Var& real, double alpha) {
  const Shape& s = gen.shape();
  DFSAR_REQUIRE(s == real.shape(), "focal frequency loss: shape " + shape_str(s) + " vs " + shape_str(real.shape()));
  DFSAR_REQUIRE(s.size() == 4, "focal frequency loss: NCHW input expected");
  DFSAR_REQUIRE(alpha >= 0.0, "focal frequency loss: alpha must be non-negative");
  const int h = s[2], w = s[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t maps = static_cast<std::size_t>(s[0]) * s[1];
  const double count = static_cast<double>(maps * plane);

  // Per map the loss is Σ d^(a+1) / d_k^a with a = α/2 and k the peak bin, so
  // ∂L/∂d_i = (a+1)(d_i/d_k)^a, less a·Σ(d_j/d_k)^(a+1) at the peak.
  // The backward pass needs (∂L/∂d)⊙F(Δ) per map.
  std::vector<std::complex<double>> weighted(maps * plane);
  double acc = 0.0;
  const double a = alpha / 2.0;
  const Tensor& gv = gen.value();
  const Tensor& rv = real.value();
  for (std::size_t m = 0; m < maps; ++m) {
    std::vector<std::complex<double>> diff(plane);
    for (std::size_t i = 0; i < plane; ++i) diff[i] = gv[m * plane + i] - rv[m * plane + i];
    const auto freq = imageops::dft2(diff, h, w, false);
    std::vector<double> d(plane);
    std::size_t peak = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      d[i] = std::norm(freq[i]);
      if (d[i] > d[peak]) peak = i;
    }
    if (d[peak] == 0.0) continue;
    double ratio_sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double r = d[i] / d[peak];
      const double wi = a == 0.0 ? 1.0 : std::pow(r, a);
      acc += wi * d[i];
      ratio_sum += wi * r;
      weighted[m * plane + i] = (a + 1.0) * wi * freq[i];
    }
    weighted[m * plane + peak] -= a * ratio_sum * freq[peak];
  }
  return ag::make_result(Tensor({1}, acc / count), {gen, real},
                         [weighted = std::move(weighted), maps, plane, h, w, count](ag::Node& self) {
                           Tensor g(self.inputs[0]->value.shape());
                           const double up = 2.0 * self.grad[0] / count;
                           for (std::size_t m = 0; m < maps; ++m) {
                             std::vector<std::complex<double>> wd(weighted.begin() + m * plane,
                                                                  weighted.begin() + (m + 1) * plane);
                             const auto back = imageops::dft2(wd, h, w, true);
                             for (std::size_t i = 0; i < plane; ++i) g[m * plane + i] = up * back[i].real();
                           }
                           if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(g);
                           if (self.inputs[1]->requires_grad) {
                             for (auto& v : g.values()) v = -v;
                             self.inputs[1]->accumulate(g);
                           }
                         });
}

// ---------------------------------------------------------------- extractors

ConvExtractor::ConvExtractor(const std::vector<std::vector<int>>& stage_widths, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  build(stage_widths, rng);
}

void ConvExtractor::build(const std::vector<std::vector<int>>& stage_widths, std::mt19937_64& rng) {
  DFSAR_REQUIRE(!stage_widths.empty(), "extractor: at least one stage required");
  stages_ = stage_widths;
  int in = 3;
  for (std::size_t s = 0; s < stage_widths.size(); ++s) {
    DFSAR_REQUIRE(!stage_widths[s].empty(), "extractor: empty stage");
    std::vector<nn::Conv2d> convs;
    for (std::size_t i = 0; i < stage_widths[s].size(); ++i) {
      const int out = stage_widths[s][i];
      const double fan_in = 9.0 * in;
      convs.emplace_back(params_, "stage" + std::to_string(s) + ".conv" + std::to_string(i),
                         nn::ConvOptions{.in = in, .out = out, .init_std = std::sqrt(2.0 / fan_in)}, rng);
      in = out;
    }
    convs_.push_back(std::move(convs));
  }
  // Frozen: parameters never request gradients.
  for (auto& [name, p] : params_.params()) p.node()->requires_grad = false;
}

void ConvExtractor::save(const std::string& path) const {
  io::Archive a;
  a.manifest = {{"kind", "feature_extractor"}, {"stages", stages_}};
  io::put_parameters(a, "extractor.", params_);
  io::save_archive(path, a);
}

std::unique_ptr<ConvExtractor> ConvExtractor::load(const std::string& path) {
  const io::Archive a = io::load_archive(path, "perceptual extractor");
  DFSAR_REQUIRE(a.manifest.value("kind", "") == "feature_extractor",
                "perceptual extractor " + path + " is not a feature-extractor archive");
  std::unique_ptr<ConvExtractor> e(new ConvExtractor());
  std::mt19937_64 rng(0);
  e->build(a.manifest.at("stages").get<std::vector<std::vector<int>>>(), rng);
  io::get_parameters(a, "extractor.", e->params_);
  return e;
}

std::vector<ag::Var> ConvExtractor::features(const ag::Var& images) const {
  std::vector<ag::Var> out;
  ag::Var h = images;
  for (std::size_t s = 0; s < convs_.size(); ++s) {
    if (s > 0) h = ag::max_pool2x2(h);
    for (std::size_t i = 0; i < convs_[s].size(); ++i) {
      h = ag::relu(convs_[s][i](h));
      if (i == 0 && out.size() < 4) out.push_back(h);
    }
  }
  return out;
}

ag::Var perceptual(const ag::Var& gen, const ag::Var& real, const FeatureExtractor& extractor) {
  DFSAR_REQUIRE(gen.shape() == real.shape(),
                "perceptual loss: shape " + shape_str(gen.shape()) + " vs " + shape_str(real.shape()));
  const std::vector<ag::Var> fg = extractor.features(gen);
  std::vector<ag::Var> fr;
  {
    ag::NoGradGuard guard;
    fr = extractor.features(real.detach());
  }
  ag::Var total;
  for (std::size_t i = 0; i < fg.size(); ++i) {
    const ag::Var term = ag::mse(fg[i], fr[i]);
    total = i == 0 ? term : ag::add(total, term);
  }
  return total;
}

ag::Var style(const std::vector<ag::Var>& gen_feats, const std::vector<ag::Var>& real_feats) {
  DFSAR_REQUIRE(!gen_feats.empty() && gen_feats.size() == real_feats.size(), "style loss: layer lists differ");
  ag::Var total;
  for (std::size_t i = 0; i < gen_feats.size(); ++i) {
    DFSAR_REQUIRE(gen_feats[i].shape() == real_feats[i].shape(),
                  "style loss: layer " + std::to_string(i) + " shape " + shape_str(gen_feats[i].shape()) + " vs " +
                      shape_str(real_feats[i].shape()));
    const ag::Var term = ag::mse(ag::gram(gen_feats[i]), ag::gram(real_feats[i]));
    total = i == 0 ? term : ag::add(total, term);
  }
  return total;
}

ag::Var feature(const ag::Var& texture_head, const ag::Var& structure_head, const Tensor& eo_target,
                const Tensor& eo_edges) {
  DFSAR_REQUIRE(!eo_target.empty(), "feature loss: EO target missing");
  DFSAR_REQUIRE(texture_head.shape() == eo_target.shape(), "feature loss: texture head " +
                                                               shape_str(texture_head.shape()) + " vs target " +
                                                               shape_str(eo_target.shape()));
  DFSAR_REQUIRE(structure_head.shape() == eo_edges.shape(), "feature loss: structure head " +
                                                                shape_str(structure_head.shape()) + " vs edges " +
                                                                shape_str(eo_edges.shape()));
  return ag::add(ag::mse(texture_head, ag::Var(eo_target)), ag::mse(structure_head, ag::Var(eo_edges)));
}

double contrastive(double d, bool same_pair, double margin) {
  DFSAR_REQUIRE(d >= 0.0, "contrastive loss: distance must be non-negative");
  DFSAR_REQUIRE(margin > 0.0, "contrastive loss: margin must be positive");
  if (same_pair) return d * d;
  const double gap = std::max(0.0, margin - d);
  return gap * gap;
}

ag::Var contrastive(const ag::Var& d, const std::vector<bool>& same_pair, double margin) {
  DFSAR_REQUIRE(margin > 0.0, "contrastive loss: margin must be positive");
  DFSAR_REQUIRE(d.shape().size() == 1 && static_cast<std::size_t>(d.dim(0)) == same_pair.size(),
                "contrastive loss: distances and labels differ in length");
  for (double v : d.value().values()) DFSAR_REQUIRE(v >= 0.0, "contrastive loss: distance must be non-negative");
  Tensor same({d.dim(0)}), diff({d.dim(0)});
  for (std::size_t i = 0; i < same_pair.size(); ++i) (same_pair[i] ? same : diff)[i] = 1.0;
  const ag::Var pos = ag::mul_const(ag::square(d), same);
  const ag::Var neg = ag::mul_const(ag::square(ag::relu(ag::add_scalar(ag::scale(d, -1.0), margin))), diff);
  return ag::mean(ag::add(pos, neg));
}

TotalLoss total_generator(const GeneratorTerms& terms, const LossWeights& weights) {
  weights.validate();
  const std::pair<const char*, std::pair<const ag::Var*, double>> table[] = {
      {"g_adv", {&terms.adv, weights.adv}},       {"g_pix", {&terms.pix, weights.pix}},
      {"g_ffl", {&terms.ffl, weights.ffl}},       {"g_perc", {&terms.perc, weights.perc}},
      {"g_style", {&terms.style, weights.style}}, {"g_feat", {&terms.feat, weights.feat}},
  };
  TotalLoss out;
  double total = 0.0;
  for (const auto& [key, entry] : table) {
    const auto& [term, w] = entry;
    const double v = term->defined() ? term->item() : 0.0;
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite loss term ") + key);
    out.values[key] = v;
    if (!term->defined() || w == 0.0) continue;
    total += w * v;
    const ag::Var weighted = ag::scale(*term, w);
    out.total = out.total.defined() ? ag::add(out.total, weighted) : weighted;
  }
  if (!out.total.defined()) out.total = ag::Var(Tensor({1}, 0.0));
  out.values["total"] = total;
  return out;
}

}  // namespace dfsar::loss
