#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "dfsar/nn.hpp"

namespace dfsar::disc {

struct DiscriminatorArch {
  int input_size = 256;
  int width_divisor = 1;
  /// Spectral-norm power iterations run once at construction.
  int sn_warmup = 50;

  static DiscriminatorArch reference();
  static DiscriminatorArch toy();

  void validate() const;
  std::vector<int> block_channels() const;  ///< 64,128,256,512 at reference width
  int map_size() const { return input_size / 16; }

  nlohmann::json to_json() const;
  static DiscriminatorArch from_json(const nlohmann::json& j);
  bool operator==(const DiscriminatorArch&) const = default;
};

enum class Mode {
  train,   ///< one power iteration per conv, batch statistics with running update
  frozen,  ///< parameters and buffers untouched: used while the generator learns
  eval,    ///< running statistics, no power iteration
};

/// Two spectrally normalized 3×3 convolutions with BN and LeakyReLU plus an
/// additive shortcut (1×1 projection when the shape changes).
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(nn::ParameterSet& ps, const std::string& name, int in, int out, int stride, std::mt19937_64& rng,
                int sn_warmup = 50, bool zero_residual = false);
  ag::Var operator()(const ag::Var& x, Mode mode) const;

  bool has_projection() const { return projection_; }
  std::vector<const nn::SNConv2d*> convs() const;
  /// Shortcut path alone.
  ag::Var shortcut(const ag::Var& x, Mode mode) const;

 private:
  nn::SNConv2d conv1_, conv2_, proj_;
  nn::BatchNorm2d bn1_, bn2_;
  bool projection_ = false;
};

/// Per-cell real-image probabilities, 1×h×w, strictly inside (0, 1).
struct ProbabilityMap {
  Tensor probs;
  int height() const { return probs.dim(1); }
  int width() const { return probs.dim(2); }
};

class Discriminator {
 public:
  Discriminator(const DiscriminatorArch& arch, std::uint64_t seed);

  const DiscriminatorArch& arch() const { return arch_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  /// image N×3×S×S, edge N×1×S×S (binary), gray N×1×S×S → N×1×S/16×S/16 probabilities.
  ag::Var forward(const ag::Var& image, const ag::Var& edge, const ag::Var& gray, Mode mode) const;

  /// Evaluation-mode map for one image given as C×H×W tensors.
  ProbabilityMap discriminate(const Tensor& image, const Tensor& edge, const Tensor& gray) const;

  /// Every spectrally normalized convolution (for tests and diagnostics).
  std::vector<const nn::SNConv2d*> spectral_convs() const;

 private:
  DiscriminatorArch arch_;
  nn::ParameterSet params_;
  std::vector<ResidualBlock> texture_, structure_;
  nn::SNConv2d gray_fuse_, final_;
};

}  // namespace dfsar::disc
