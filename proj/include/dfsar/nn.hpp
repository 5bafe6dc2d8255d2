#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "dfsar/autograd.hpp"

namespace dfsar::nn {

/// Named trainable parameters plus non-trainable state buffers (running
/// statistics, power-iteration vectors). Element addresses are stable for the
/// lifetime of the set, so layers keep raw pointers into it.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  ag::Var add_param(const std::string& name, Tensor init);
  Tensor* add_buffer(const std::string& name, Tensor init);

  std::map<std::string, ag::Var>& params() { return params_; }
  const std::map<std::string, ag::Var>& params() const { return params_; }
  std::map<std::string, Tensor>& buffers() { return buffers_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }

  void zero_grad();
  std::size_t parameter_count() const;
  /// Order-stable 64-bit digest of parameter values and, optionally, buffers.
  std::uint64_t digest(bool include_buffers = true) const;

 private:
  std::map<std::string, ag::Var> params_;
  std::map<std::string, Tensor> buffers_;
};

Tensor gaussian(const Shape& shape, double stddev, std::mt19937_64& rng);

struct ConvOptions {
  int in = 0, out = 0, kernel = 3, stride = 1, pad = 1, dilation = 1;
  bool bias = true;
  double init_std = 0.02;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet& ps, const std::string& name, const ConvOptions& o, std::mt19937_64& rng);
  ag::Var operator()(const ag::Var& x) const;
  /// Convolution with an externally supplied (e.g. spectrally normalized) weight.
  ag::Var apply(const ag::Var& x, const ag::Var& weight) const;

  const ag::Var& weight() const { return weight_; }
  const ag::Var& bias() const { return bias_; }
  const kernels::ConvGeometry& geometry() const { return geom_; }
  int in_channels() const { return opts_.in; }
  int out_channels() const { return opts_.out; }
  int kernel() const { return opts_.kernel; }

 private:
  ConvOptions opts_;
  kernels::ConvGeometry geom_;
  ag::Var weight_;
  ag::Var bias_;
};

enum class BatchStats {
  batch_update,  ///< batch statistics, running averages updated
  batch_frozen,  ///< batch statistics, running averages untouched
  running,       ///< evaluation: running averages
};

/// Per-channel batch normalization over N, H, W (also accepts N×C).
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParameterSet& ps, const std::string& name, int channels, double momentum = 0.1, double eps = 1e-5);
  ag::Var operator()(const ag::Var& x, BatchStats mode) const;

 private:
  ag::Var gamma_, beta_;
  Tensor* running_mean_ = nullptr;
  Tensor* running_var_ = nullptr;
  double momentum_ = 0.1, eps_ = 1e-5;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& ps, const std::string& name, int in, int out, double init_std, std::mt19937_64& rng);
  ag::Var operator()(const ag::Var& x) const;

 private:
  ag::Var weight_, bias_;
};

/// Divides a weight by its largest singular value, estimated by power
/// iteration on the Cout×(Cin·k·k) matrix view. The left/right singular
/// vector estimates persist as buffers.
class SpectralNorm {
 public:
  SpectralNorm() = default;
  SpectralNorm(ParameterSet& ps, const std::string& name, const ag::Var& weight, std::mt19937_64& rng,
               int warmup_iterations = 50);

  /// One power-iteration step on the current weight (no gradient).
  void power_iteration();
  /// Current estimate uᵀ W v.
  double sigma() const;
  /// W / σ with σ = uᵀ W v, u and v held constant.
  ag::Var normalized() const;

  const Tensor& u() const { return *u_; }
  const Tensor& v() const { return *v_; }

 private:
  ag::Var weight_;
  Tensor* u_ = nullptr;
  Tensor* v_ = nullptr;
};

class SNConv2d {
 public:
  SNConv2d() = default;
  SNConv2d(ParameterSet& ps, const std::string& name, const ConvOptions& o, std::mt19937_64& rng,
           int warmup_iterations = 50);
  /// update_estimate runs one power iteration before normalizing.
  ag::Var operator()(const ag::Var& x, bool update_estimate) const;
  SpectralNorm& spectral_norm() { return sn_; }
  const SpectralNorm& spectral_norm() const { return sn_; }
  const Conv2d& conv() const { return conv_; }

 private:
  Conv2d conv_;
  mutable SpectralNorm sn_;
};

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over every parameter of one ParameterSet. Moments live in the
/// optimizer so they can be checkpointed alongside the parameters.
class Adam {
 public:
  Adam(ParameterSet& params, AdamOptions opts);
  /// Applies one update using the accumulated gradients; parameters without a
  /// gradient are skipped.
  void step();
  long long steps_taken() const { return t_; }

  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }
  void set_steps_taken(long long t) { t_ = t; }

 private:
  ParameterSet& params_;
  AdamOptions opts_;
  std::map<std::string, Tensor> m_, v_;
  long long t_ = 0;
};

}  // namespace dfsar::nn
