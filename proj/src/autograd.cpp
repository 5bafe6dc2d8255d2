#include "dfsar/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "dfsar/error.hpp"

namespace dfsar::ag {

namespace {

thread_local bool g_grad_enabled = true;

bool needs(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

Tensor& input_value(Node& self, std::size_t i) { return self.inputs[i]->value; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  DFSAR_REQUIRE(a.shape() == b.shape(),
                std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor scalar_tensor(double v) { return Tensor({1}, v); }

// Product of dims from `from` onward.
std::size_t inner_size(const Shape& s, std::size_t from) {
  std::size_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= static_cast<std::size_t>(s[i]);
  return n;
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
    return;
  }
  DFSAR_REQUIRE(grad.same_shape(g), "gradient shape mismatch " + shape_str(grad.shape()) + " vs " +
                                        shape_str(g.shape()));
  double* dst = grad.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  DFSAR_REQUIRE(value().size() == 1, "item() on non-scalar " + shape_str(shape()));
  return value()[0];
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled &&
      std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); })) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& v : inputs) node->inputs.push_back(v.node());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  DFSAR_REQUIRE(root.defined() && root.requires_grad(), "backward: root does not require grad");
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, bool>> stack{{root.node().get(), false}};
  while (!stack.empty()) {
    auto [node, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      order.push_back(node);
      continue;
    }
    if (!visited.insert(node).second) continue;
    stack.emplace_back(node, true);
    for (auto& in : node->inputs)
      if (in->requires_grad && !visited.count(in.get())) stack.emplace_back(in.get(), false);
  }
  root.node()->accumulate(Tensor(root.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    if (needs(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (needs(self, 1)) self.inputs[1]->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    if (needs(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (needs(self, 1)) {
      Tensor g = self.grad;
      for (auto& v : g.values()) v = -v;
      self.inputs[1]->accumulate(g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    const Tensor& av = input_value(self, 0);
    const Tensor& bv = input_value(self, 1);
    if (needs(self, 0)) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= bv[i];
      self.inputs[0]->accumulate(g);
    }
    if (needs(self, 1)) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= av[i];
      self.inputs[1]->accumulate(g);
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor y = a.value();
  for (auto& v : y.values()) v *= s;
  return make_result(std::move(y), {a}, [s](Node& self) {
    Tensor g = self.grad;
    for (auto& v : g.values()) v *= s;
    self.inputs[0]->accumulate(g);
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor y = a.value();
  for (auto& v : y.values()) v += s;
  return make_result(std::move(y), {a}, [](Node& self) { self.inputs[0]->accumulate(self.grad); });
}

namespace {

// Index into c for element i of a, where c is either a-shaped or N×1×H×W.
struct ChannelBroadcast {
  bool full;
  std::size_t channels, plane;
  std::size_t operator()(std::size_t i) const {
    if (full) return i;
    const std::size_t n = i / (channels * plane);
    return n * plane + i % plane;
  }
};

ChannelBroadcast make_broadcast(const Shape& a, const Shape& c, const char* op) {
  if (a == c) return {true, 0, 0};
  DFSAR_REQUIRE(a.size() == 4 && c.size() == 4 && c[0] == a[0] && c[1] == 1 && c[2] == a[2] && c[3] == a[3],
                std::string(op) + ": cannot broadcast " + shape_str(c) + " onto " + shape_str(a));
  return {false, static_cast<std::size_t>(a[1]), static_cast<std::size_t>(a[2]) * a[3]};
}

}  // namespace

Var mul_const(const Var& a, const Tensor& c) {
  const ChannelBroadcast idx = make_broadcast(a.shape(), c.shape(), "mul_const");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[idx(i)];
  return make_result(std::move(y), {a}, [c, idx](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= c[idx(i)];
    self.inputs[0]->accumulate(g);
  });
}

Var mul_channel_map(const Var& x, const Var& m) {
  const ChannelBroadcast idx = make_broadcast(x.shape(), m.shape(), "mul_channel_map");
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= m.value()[idx(i)];
  return make_result(std::move(y), {x, m}, [idx](Node& self) {
    const Tensor& xv = input_value(self, 0);
    const Tensor& mv = input_value(self, 1);
    if (needs(self, 0)) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mv[idx(i)];
      self.inputs[0]->accumulate(g);
    }
    if (needs(self, 1)) {
      Tensor g(mv.shape());
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[idx(i)] += self.grad[i] * xv[i];
      self.inputs[1]->accumulate(g);
    }
  });
}

Var add_bias(const Var& x, const Var& b) {
  DFSAR_REQUIRE(x.shape().size() >= 2 && b.shape() == Shape({x.dim(1)}),
                "add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
  const std::size_t channels = static_cast<std::size_t>(x.dim(1));
  const std::size_t inner = inner_size(x.shape(), 2);
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[(i / inner) % channels];
  return make_result(std::move(y), {x, b}, [channels, inner](Node& self) {
    if (needs(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (needs(self, 1)) {
      Tensor g({static_cast<int>(channels)});
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[(i / inner) % channels] += self.grad[i];
      self.inputs[1]->accumulate(g);
    }
  });
}

Var square(const Var& a) {
  Tensor y = a.value();
  for (auto& v : y.values()) v *= v;
  return make_result(std::move(y), {a}, [](Node& self) {
    const Tensor& av = input_value(self, 0);
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 2.0 * av[i];
    self.inputs[0]->accumulate(g);
  });
}

Var relu(const Var& x) { return leaky_relu(x, 0.0); }

Var leaky_relu(const Var& x, double slope) {
  Tensor y = x.value();
  for (auto& v : y.values())
    if (v < 0.0) v *= slope;
  return make_result(std::move(y), {x}, [slope](Node& self) {
    const Tensor& xv = input_value(self, 0);
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] < 0.0) g[i] *= slope;
    self.inputs[0]->accumulate(g);
  });
}

Var tanh(const Var& x) {
  Tensor y = x.value();
  for (auto& v : y.values()) v = std::tanh(v);
  return make_result(std::move(y), {x}, [](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - self.value[i] * self.value[i];
    self.inputs[0]->accumulate(g);
  });
}

Var sigmoid(const Var& x) {
  constexpr double kEps = 1e-12;
  Tensor y = x.value();
  for (auto& v : y.values()) {
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    v = std::clamp(s, kEps, 1.0 - kEps);
  }
  return make_result(std::move(y), {x}, [](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= self.value[i] * (1.0 - self.value[i]);
    self.inputs[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& x) {
  return make_result(scalar_tensor(x.value().sum()), {x}, [](Node& self) {
    self.inputs[0]->accumulate(Tensor(self.inputs[0]->value.shape(), self.grad[0]));
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return make_result(scalar_tensor(x.value().sum() / n), {x}, [n](Node& self) {
    self.inputs[0]->accumulate(Tensor(self.inputs[0]->value.shape(), self.grad[0] / n));
  });
}

Var mse(const Var& a, const Var& b) {
  require_same_shape(a, b, "mse");
  const std::size_t n = a.value().size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return make_result(scalar_tensor(acc / static_cast<double>(n)), {a, b}, [n](Node& self) {
    const Tensor& av = input_value(self, 0);
    const Tensor& bv = input_value(self, 1);
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    Tensor g(av.shape());
    for (std::size_t i = 0; i < n; ++i) g[i] = k * (av[i] - bv[i]);
    if (needs(self, 0)) self.inputs[0]->accumulate(g);
    if (needs(self, 1)) {
      for (auto& v : g.values()) v = -v;
      self.inputs[1]->accumulate(g);
    }
  });
}

Var dot_const(const Var& a, const Tensor& c) {
  DFSAR_REQUIRE(a.value().size() == c.size(), "dot_const: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) acc += a.value()[i] * c[i];
  return make_result(scalar_tensor(acc), {a}, [c](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for (std::size_t i = 0; i < c.size(); ++i) g[i] = self.grad[0] * c[i];
    self.inputs[0]->accumulate(g);
  });
}

Var div_scalar(const Var& x, const Var& s) {
  DFSAR_REQUIRE(s.value().size() == 1, "div_scalar: divisor must be scalar");
  const double sv = s.value()[0];
  Tensor y = x.value();
  for (auto& v : y.values()) v /= sv;
  return make_result(std::move(y), {x, s}, [sv](Node& self) {
    if (needs(self, 0)) {
      Tensor g = self.grad;
      for (auto& v : g.values()) v /= sv;
      self.inputs[0]->accumulate(g);
    }
    if (needs(self, 1)) {
      const Tensor& xv = input_value(self, 0);
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.size(); ++i) acc += self.grad[i] * xv[i];
      self.inputs[1]->accumulate(scalar_tensor(-acc / (sv * sv)));
    }
  });
}

// ---------------------------------------------------------------- shape

Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return make_result(std::move(y), {x}, [](Node& self) {
    self.inputs[0]->accumulate(self.grad.reshaped(self.inputs[0]->value.shape()));
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  DFSAR_REQUIRE(!parts.empty(), "concat_channels: no inputs");
  Shape out = parts.front().shape();
  DFSAR_REQUIRE(out.size() >= 2, "concat_channels: rank must be >= 2");
  const std::size_t inner = inner_size(out, 2);
  int channels = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    Shape s = p.shape();
    DFSAR_REQUIRE(s.size() == out.size() && s[0] == out[0] && inner_size(s, 2) == inner &&
                      std::equal(s.begin() + 2, s.end(), out.begin() + 2),
                  "concat_channels: incompatible " + shape_str(s) + " vs " + shape_str(out));
    offsets.push_back(channels);
    channels += s[1];
  }
  out[1] = channels;
  Tensor y(out);
  const int batch = out[0];
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& src = parts[k].value();
    const std::size_t block = static_cast<std::size_t>(src.dim(1)) * inner;
    for (int n = 0; n < batch; ++n)
      std::copy_n(src.data() + n * block, block,
                  y.data() + (static_cast<std::size_t>(n) * channels + offsets[k]) * inner);
  }
  return make_result(std::move(y), parts, [offsets, channels, inner, batch](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (!needs(self, k)) continue;
      const Shape& s = self.inputs[k]->value.shape();
      Tensor g(s);
      const std::size_t block = static_cast<std::size_t>(s[1]) * inner;
      for (int n = 0; n < batch; ++n)
        std::copy_n(self.grad.data() + (static_cast<std::size_t>(n) * channels + offsets[k]) * inner, block,
                    g.data() + n * block);
      self.inputs[k]->accumulate(g);
    }
  });
}

Var slice_channels(const Var& x, int begin, int end) {
  const Shape& s = x.shape();
  DFSAR_REQUIRE(s.size() >= 2 && 0 <= begin && begin < end && end <= s[1], "slice_channels: bad range");
  const std::size_t inner = inner_size(s, 2);
  Shape out = s;
  out[1] = end - begin;
  Tensor y(out);
  const std::size_t block = static_cast<std::size_t>(end - begin) * inner;
  for (int n = 0; n < s[0]; ++n)
    std::copy_n(x.value().data() + (static_cast<std::size_t>(n) * s[1] + begin) * inner, block,
                y.data() + n * block);
  return make_result(std::move(y), {x}, [begin, inner, block](Node& self) {
    const Shape& s = self.inputs[0]->value.shape();
    Tensor g(s);
    for (int n = 0; n < s[0]; ++n)
      std::copy_n(self.grad.data() + n * block, block,
                  g.data() + (static_cast<std::size_t>(n) * s[1] + begin) * inner);
    self.inputs[0]->accumulate(g);
  });
}

Var upsample_nearest2x(const Var& x) {
  const Shape& s = x.shape();
  DFSAR_REQUIRE(s.size() == 4, "upsample_nearest2x: expects NCHW");
  const int h = s[2], w = s[3];
  Tensor y({s[0], s[1], 2 * h, 2 * w});
  const std::size_t planes = static_cast<std::size_t>(s[0]) * s[1];
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.value().data() + p * h * w;
    double* dst = y.data() + p * 4 * h * w;
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
  }
  return make_result(std::move(y), {x}, [planes, h, w](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for (std::size_t p = 0; p < planes; ++p) {
      const double* src = self.grad.data() + p * 4 * h * w;
      double* dst = g.data() + p * h * w;
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
    }
    self.inputs[0]->accumulate(g);
  });
}

Var max_pool2x2(const Var& x) {
  const Shape& s = x.shape();
  DFSAR_REQUIRE(s.size() == 4 && s[2] >= 2 && s[3] >= 2, "max_pool2x2: expects NCHW with H,W >= 2");
  const int h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  Tensor y({s[0], s[1], ho, wo});
  std::vector<std::size_t> arg(y.size());
  const std::size_t planes = static_cast<std::size_t>(s[0]) * s[1];
  const Tensor& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        std::size_t best = p * h * w + static_cast<std::size_t>(2 * i) * w + 2 * j;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            const std::size_t idx = p * h * w + static_cast<std::size_t>(2 * i + a) * w + 2 * j + b;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = p * ho * wo + static_cast<std::size_t>(i) * wo + j;
        y[o] = xv[best];
        arg[o] = best;
      }
  return make_result(std::move(y), {x}, [arg = std::move(arg)](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
    self.inputs[0]->accumulate(g);
  });
}

Var avg_pool(const Var& x, int k) {
  const Shape& s = x.shape();
  DFSAR_REQUIRE(s.size() == 4 && k >= 1 && s[2] >= k && s[3] >= k, "avg_pool: bad input");
  const int h = s[2], w = s[3], ho = h / k, wo = w / k;
  Tensor y({s[0], s[1], ho, wo});
  const std::size_t planes = static_cast<std::size_t>(s[0]) * s[1];
  const double inv = 1.0 / (k * k);
  for (std::size_t p = 0; p < planes; ++p)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        double acc = 0.0;
        for (int a = 0; a < k; ++a)
          for (int b = 0; b < k; ++b) acc += x.value()[p * h * w + static_cast<std::size_t>(i * k + a) * w + j * k + b];
        y[p * ho * wo + static_cast<std::size_t>(i) * wo + j] = acc * inv;
      }
  return make_result(std::move(y), {x}, [planes, h, w, ho, wo, k, inv](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for (std::size_t p = 0; p < planes; ++p)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          const double go = self.grad[p * ho * wo + static_cast<std::size_t>(i) * wo + j] * inv;
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) g[p * h * w + static_cast<std::size_t>(i * k + a) * w + j * k + b] += go;
        }
    self.inputs[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------- linear algebra

Var conv2d(const Var& x, const Var& w, const kernels::ConvGeometry& g) {
  Tensor y = kernels::conv2d_forward(x.value(), w.value(), g);
  return make_result(std::move(y), {x, w}, [g](Node& self) {
    const Tensor& xv = input_value(self, 0);
    const Tensor& wv = input_value(self, 1);
    if (needs(self, 0)) self.inputs[0]->accumulate(kernels::conv2d_backward_input(self.grad, wv, xv.shape(), g));
    if (needs(self, 1)) self.inputs[1]->accumulate(kernels::conv2d_backward_weight(self.grad, xv, wv.shape(), g));
  });
}

Var linear(const Var& x, const Var& w) {
  DFSAR_REQUIRE(x.shape().size() == 2 && w.shape().size() == 2 && x.dim(1) == w.dim(1),
                "linear: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const int n = x.dim(0), f = x.dim(1), o = w.dim(0);
  Tensor y({n, o});
  kernels::gemm(x.value().data(), n, f, false, w.value().data(), o, f, true, y.data(), false);
  return make_result(std::move(y), {x, w}, [n, f, o](Node& self) {
    const Tensor& xv = input_value(self, 0);
    const Tensor& wv = input_value(self, 1);
    if (needs(self, 0)) {
      Tensor g({n, f});
      kernels::gemm(self.grad.data(), n, o, false, wv.data(), o, f, false, g.data(), false);
      self.inputs[0]->accumulate(g);
    }
    if (needs(self, 1)) {
      Tensor g({o, f});
      kernels::gemm(self.grad.data(), n, o, true, xv.data(), n, f, false, g.data(), false);
      self.inputs[1]->accumulate(g);
    }
  });
}

Var bmm(const Var& a, const Var& b, bool trans_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  DFSAR_REQUIRE(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0], "bmm: expects matching 3-D inputs");
  const int batch = sa[0], m = sa[1], k = sa[2];
  const int n = trans_b ? sb[1] : sb[2];
  DFSAR_REQUIRE((trans_b ? sb[2] : sb[1]) == k, "bmm: inner dimension mismatch");
  Tensor y({batch, m, n});
  const std::size_t as = static_cast<std::size_t>(m) * k, bs = static_cast<std::size_t>(k) * n,
                    ys = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < batch; ++i)
    kernels::gemm(a.value().data() + i * as, m, k, false, b.value().data() + i * bs, sb[1], sb[2], trans_b,
                  y.data() + i * ys, false);
  return make_result(std::move(y), {a, b}, [=](Node& self) {
    const Tensor& av = input_value(self, 0);
    const Tensor& bv = input_value(self, 1);
    if (needs(self, 0)) {
      Tensor g(av.shape());
      for (int i = 0; i < batch; ++i)
        kernels::gemm(self.grad.data() + i * ys, m, n, false, bv.data() + i * bs, sb[1], sb[2], !trans_b,
                      g.data() + i * as, false);
      self.inputs[0]->accumulate(g);
    }
    if (needs(self, 1)) {
      Tensor g(bv.shape());
      for (int i = 0; i < batch; ++i) {
        if (trans_b)
          kernels::gemm(self.grad.data() + i * ys, m, n, true, av.data() + i * as, m, k, false, g.data() + i * bs,
                        false);
        else
          kernels::gemm(av.data() + i * as, m, k, true, self.grad.data() + i * ys, m, n, false, g.data() + i * bs,
                        false);
      }
      self.inputs[1]->accumulate(g);
    }
  });
}

Var softmax_lastdim(const Var& x) {
  const Shape& s = x.shape();
  DFSAR_REQUIRE(!s.empty(), "softmax_lastdim: scalar input");
  const std::size_t len = static_cast<std::size_t>(s.back());
  const std::size_t rows = x.value().size() / len;
  Tensor y = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = y.data() + r * len;
    const double mx = *std::max_element(row, row + len);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += (row[i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < len; ++i) row[i] /= z;
  }
  return make_result(std::move(y), {x}, [rows, len](Node& self) {
    Tensor g(self.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = self.value.data() + r * len;
      const double* gr = self.grad.data() + r * len;
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += gr[i] * yr[i];
      for (std::size_t i = 0; i < len; ++i) g[r * len + i] = yr[i] * (gr[i] - dot);
    }
    self.inputs[0]->accumulate(g);
  });
}

Var softmax_channels(const Var& x) {
  const Shape& s = x.shape();
  DFSAR_REQUIRE(s.size() == 4, "softmax_channels: expects NCHW");
  const int batch = s[0], k = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor y = x.value();
  for (int n = 0; n < batch; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      double* base = y.data() + static_cast<std::size_t>(n) * k * plane + p;
      double mx = base[0];
      for (int c = 1; c < k; ++c) mx = std::max(mx, base[c * plane]);
      double z = 0.0;
      for (int c = 0; c < k; ++c) z += (base[c * plane] = std::exp(base[c * plane] - mx));
      for (int c = 0; c < k; ++c) base[c * plane] /= z;
    }
  return make_result(std::move(y), {x}, [batch, k, plane](Node& self) {
    Tensor g(self.value.shape());
    for (int n = 0; n < batch; ++n)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t base = static_cast<std::size_t>(n) * k * plane + p;
        double dot = 0.0;
        for (int c = 0; c < k; ++c) dot += self.grad[base + c * plane] * self.value[base + c * plane];
        for (int c = 0; c < k; ++c)
          g[base + c * plane] = self.value[base + c * plane] * (self.grad[base + c * plane] - dot);
      }
    self.inputs[0]->accumulate(g);
  });
}

Var l2_normalize_lastdim(const Var& x, double eps) {
  const std::size_t len = static_cast<std::size_t>(x.shape().back());
  const std::size_t rows = x.value().size() / len;
  Tensor y = x.value();
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = y.data() + r * len;
    double ss = 0.0;
    for (std::size_t i = 0; i < len; ++i) ss += row[i] * row[i];
    norms[r] = std::sqrt(ss + eps);
    for (std::size_t i = 0; i < len; ++i) row[i] /= norms[r];
  }
  return make_result(std::move(y), {x}, [rows, len, norms = std::move(norms)](Node& self) {
    Tensor g(self.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = self.value.data() + r * len;
      const double* gr = self.grad.data() + r * len;
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += gr[i] * yr[i];
      for (std::size_t i = 0; i < len; ++i) g[r * len + i] = (gr[i] - yr[i] * dot) / norms[r];
    }
    self.inputs[0]->accumulate(g);
  });
}

Var channel_weighted_sum(const Var& x, const std::vector<double>& weights) {
  const Shape& s = x.shape();
  DFSAR_REQUIRE(s.size() == 4 && static_cast<std::size_t>(s[1]) == weights.size(),
                "channel_weighted_sum: weight count does not match channels of " + shape_str(s));
  const int batch = s[0], c = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor y({batch, 1, s[2], s[3]});
  for (int n = 0; n < batch; ++n)
    for (int k = 0; k < c; ++k) {
      const double* src = x.value().data() + (static_cast<std::size_t>(n) * c + k) * plane;
      double* dst = y.data() + n * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += weights[k] * src[p];
    }
  return make_result(std::move(y), {x}, [weights, batch, c, plane](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for (int n = 0; n < batch; ++n)
      for (int k = 0; k < c; ++k) {
        double* dst = g.data() + (static_cast<std::size_t>(n) * c + k) * plane;
        const double* src = self.grad.data() + n * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = weights[k] * src[p];
      }
    self.inputs[0]->accumulate(g);
  });
}

namespace {

struct PatchLayout {
  int n, c, h, w, p, ph, pw;
  std::size_t patches() const { return static_cast<std::size_t>(ph) * pw; }
  std::size_t dim() const { return static_cast<std::size_t>(c) * p * p; }
};

PatchLayout patch_layout(const Shape& s, int p) {
  DFSAR_REQUIRE(s.size() == 4 && p >= 1, "patches: expects NCHW and p >= 1");
  return {s[0], s[1], s[2], s[3], p, (s[2] + p - 1) / p, (s[3] + p - 1) / p};
}

// Calls f(image_index, patch_index) for every in-bounds element.
template <typename F>
void for_each_patch_element(const PatchLayout& L, F&& f) {
  const std::size_t pd = L.dim(), np = L.patches();
  for (int n = 0; n < L.n; ++n)
    for (int py = 0; py < L.ph; ++py)
      for (int px = 0; px < L.pw; ++px)
        for (int c = 0; c < L.c; ++c)
          for (int i = 0; i < L.p; ++i) {
            const int y = py * L.p + i;
            if (y >= L.h) continue;
            for (int j = 0; j < L.p; ++j) {
              const int x = px * L.p + j;
              if (x >= L.w) continue;
              const std::size_t img = ((static_cast<std::size_t>(n) * L.c + c) * L.h + y) * L.w + x;
              const std::size_t pat = (static_cast<std::size_t>(n) * np + static_cast<std::size_t>(py) * L.pw + px) * pd +
                                      (static_cast<std::size_t>(c) * L.p + i) * L.p + j;
              f(img, pat);
            }
          }
}

}  // namespace

Var extract_patches(const Var& x, int p) {
  const PatchLayout L = patch_layout(x.shape(), p);
  Tensor y({L.n, static_cast<int>(L.patches()), static_cast<int>(L.dim())});
  const Tensor& xv = x.value();
  for_each_patch_element(L, [&](std::size_t img, std::size_t pat) { y[pat] = xv[img]; });
  return make_result(std::move(y), {x}, [L](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for_each_patch_element(L, [&](std::size_t img, std::size_t pat) { g[img] = self.grad[pat]; });
    self.inputs[0]->accumulate(g);
  });
}

Var fold_patches(const Var& patches, const Shape& image_shape, int p) {
  const PatchLayout L = patch_layout(image_shape, p);
  DFSAR_REQUIRE(patches.shape() == Shape({L.n, static_cast<int>(L.patches()), static_cast<int>(L.dim())}),
                "fold_patches: patch tensor " + shape_str(patches.shape()) + " does not match image " +
                    shape_str(image_shape));
  Tensor y(image_shape);
  const Tensor& pv = patches.value();
  for_each_patch_element(L, [&](std::size_t img, std::size_t pat) { y[img] = pv[pat]; });
  return make_result(std::move(y), {patches}, [L](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for_each_patch_element(L, [&](std::size_t img, std::size_t pat) { g[pat] = self.grad[img]; });
    self.inputs[0]->accumulate(g);
  });
}

Var gram(const Var& x) {
  const Shape& s = x.shape();
  DFSAR_REQUIRE(s.size() == 4 && shape_numel(s) > 0, "gram: expects a nonempty NCHW feature");
  const int batch = s[0], c = s[1];
  const int hw = s[2] * s[3];
  const double norm = static_cast<double>(c) * hw;
  Tensor y({batch, c, c});
  for (int n = 0; n < batch; ++n) {
    const double* f = x.value().data() + static_cast<std::size_t>(n) * c * hw;
    double* g = y.data() + static_cast<std::size_t>(n) * c * c;
    kernels::gemm(f, c, hw, false, f, c, hw, true, g, false);
    for (int i = 0; i < c * c; ++i) g[i] /= norm;
  }
  return make_result(std::move(y), {x}, [batch, c, hw, norm](Node& self) {
    Tensor gx(self.inputs[0]->value.shape());
    std::vector<double> sym(static_cast<std::size_t>(c) * c);
    for (int n = 0; n < batch; ++n) {
      const double* gg = self.grad.data() + static_cast<std::size_t>(n) * c * c;
      for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) sym[i * c + j] = (gg[i * c + j] + gg[j * c + i]) / norm;
      const double* f = self.inputs[0]->value.data() + static_cast<std::size_t>(n) * c * hw;
      kernels::gemm(sym.data(), c, c, false, f, c, hw, false, gx.data() + static_cast<std::size_t>(n) * c * hw,
                    false);
    }
    self.inputs[0]->accumulate(gx);
  });
}

Var row_distance(const Var& a, const Var& b) {
  require_same_shape(a, b, "row_distance");
  DFSAR_REQUIRE(a.shape().size() == 2, "row_distance: expects N×D");
  const int n = a.dim(0), d = a.dim(1);
  Tensor y({n});
  for (int i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int k = 0; k < d; ++k) {
      const double diff = a.value()[i * d + k] - b.value()[i * d + k];
      ss += diff * diff;
    }
    y[i] = std::sqrt(ss);
  }
  return make_result(std::move(y), {a, b}, [n, d](Node& self) {
    const Tensor& av = input_value(self, 0);
    const Tensor& bv = input_value(self, 1);
    Tensor g(av.shape());
    for (int i = 0; i < n; ++i) {
      if (self.value[i] == 0.0) continue;
      const double k = self.grad[i] / self.value[i];
      for (int j = 0; j < d; ++j) g[i * d + j] = k * (av[i * d + j] - bv[i * d + j]);
    }
    if (needs(self, 0)) self.inputs[0]->accumulate(g);
    if (needs(self, 1)) {
      for (auto& v : g.values()) v = -v;
      self.inputs[1]->accumulate(g);
    }
  });
}

Var gather_rows(const Var& x, const std::vector<int>& index) {
  DFSAR_REQUIRE(x.shape().size() == 2, "gather_rows: expects N×D");
  const int n = x.dim(0), d = x.dim(1);
  for (int i : index) DFSAR_REQUIRE(i >= 0 && i < n, "gather_rows: index out of range");
  Tensor y({static_cast<int>(index.size()), d});
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(x.value().data() + static_cast<std::size_t>(index[r]) * d, d, y.data() + r * d);
  return make_result(std::move(y), {x}, [index, d](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    for (std::size_t r = 0; r < index.size(); ++r)
      for (int k = 0; k < d; ++k) g[static_cast<std::size_t>(index[r]) * d + k] += self.grad[r * d + k];
    self.inputs[0]->accumulate(g);
  });
}

Var dropout(const Var& x, double p, std::mt19937_64& rng) {
  DFSAR_REQUIRE(p >= 0.0 && p < 1.0, "dropout: rate must be in [0, 1)");
  if (p == 0.0) return x;
  Tensor mask(x.shape());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& m : mask.values()) m = u(rng) >= p ? keep_scale : 0.0;
  return mul_const(x, mask);
}

}  // namespace dfsar::ag
