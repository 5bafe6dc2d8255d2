#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dfsar/nn.hpp"

namespace dfsar::loss {

struct LossWeights {
  double adv = 1.0;
  double pix = 10.0;
  double ffl = 1.0;
  double perc = 1.0;
  double style = 10.0;
  double feat = 1.0;

  /// Throws ValidationError unless every weight is finite and ≥ 0.
  void validate() const;
};

/// Mean binary cross-entropy of probabilities against a constant target
/// (1 for real, 0 for fake, or a smoothed label).
ag::Var adversarial(const ag::Var& pred, double target);
inline ag::Var adversarial(const ag::Var& pred, bool target_is_real) {
  return adversarial(pred, target_is_real ? 1.0 : 0.0);
}

/// Mean squared error.
ag::Var pixel(const ag::Var& gen, const ag::Var& real);

/// Focal frequency loss over N×C×H×W batches: per image and channel the
/// spectrum difference d = |F(gen) - F(real)|² is weighted by d^(α/2) scaled to
/// a maximum of 1; the loss is the mean of w·d. Gradients flow through the
/// weights as well.
ag::Var focal_frequency(const ag::Var& gen, const ag::Var& real, double alpha = 1.0);

/// Frozen feature network exposing a fixed list of intermediate activations.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<ag::Var> features(const ag::Var& images) const = 0;
  virtual std::string name() const = 0;
};

/// Degenerate extractor returning its input as the only layer.
class IdentityExtractor final : public FeatureExtractor {
 public:
  std::vector<ag::Var> features(const ag::Var& images) const override { return {images}; }
  std::string name() const override { return "identity"; }
};

/// Plain convolutional classifier trunk (3×3 conv + ReLU blocks separated by
/// 2×2 max pooling). The first activation of each of the first four stages is
/// exposed.
class ConvExtractor final : public FeatureExtractor {
 public:
  /// stage_widths[s] lists the output channels of the convolutions in stage s.
  ConvExtractor(const std::vector<std::vector<int>>& stage_widths, std::uint64_t seed);
  /// Loads weights saved by `save`; throws MissingAssetError("perceptual extractor") if absent.
  static std::unique_ptr<ConvExtractor> load(const std::string& path);
  void save(const std::string& path) const;

  std::vector<ag::Var> features(const ag::Var& images) const override;
  std::string name() const override { return "conv"; }
  const nn::ParameterSet& params() const { return params_; }

 private:
  ConvExtractor() = default;
  void build(const std::vector<std::vector<int>>& stage_widths, std::mt19937_64& rng);

  std::vector<std::vector<int>> stages_;
  nn::ParameterSet params_;
  std::vector<std::vector<nn::Conv2d>> convs_;
};

/// Σ over layers of the feature MSE. Features of `real` carry no gradient.
ag::Var perceptual(const ag::Var& gen, const ag::Var& real, const FeatureExtractor& extractor);

/// Σ over layers of the MSE between Gram matrices.
ag::Var style(const std::vector<ag::Var>& gen_feats, const std::vector<ag::Var>& real_feats);

/// MSE(texture head, EO) + MSE(structure head, edges of the EO grayscale).
ag::Var feature(const ag::Var& texture_head, const ag::Var& structure_head, const Tensor& eo_target,
                const Tensor& eo_edges);

/// Scalar form: same → d², different → max(0, margin - d)².
double contrastive(double d, bool same_pair, double margin);
/// Batch mean of the contrastive loss over distances d[N].
ag::Var contrastive(const ag::Var& d, const std::vector<bool>& same_pair, double margin);

/// Loss terms of one generator step; undefined terms count as zero.
struct GeneratorTerms {
  ag::Var adv, pix, ffl, perc, style, feat;
};

struct TotalLoss {
  ag::Var total;
  /// Unweighted value of each term keyed g_adv, g_pix, ... plus "total".
  std::map<std::string, double> values;
};

/// Σ wᵢ·termᵢ. Throws NumericalError naming the first non-finite term.
TotalLoss total_generator(const GeneratorTerms& terms, const LossWeights& weights);

}  // namespace dfsar::loss
