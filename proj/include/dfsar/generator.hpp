#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfsar/nn.hpp"

namespace dfsar::gen {

enum class Branch { texture, structure };

/// Layer-count and width configuration. Every channel count and spatial size
/// of the network is derived from this one struct.
struct GeneratorArch {
  int input_size = 256;
  int levels = 7;
  /// Divides every channel count; 1 for the reference network.
  int width_divisor = 1;
  int texture_channels = 3;
  int structure_channels = 2;
  double dropout = 0.5;
  int cfa_patch = 3;
  double cfa_memory_budget_mb = 1024.0;
  /// Bi-GFF gates multiply the opposite branch (true) or their own branch.
  bool bigff_cross = true;

  static GeneratorArch reference();
  /// 64×64 input, five encoder levels, channels divided by 8.
  static GeneratorArch toy();

  /// Throws ValidationError when the stride chain does not reach ≥ 1 pixel or
  /// the input is not divisible by 2^levels.
  void validate() const;

  std::vector<int> encoder_channels() const;
  std::vector<int> encoder_kernels() const;
  std::vector<int> encoder_sizes() const;
  int feature_channels() const;  ///< decoder output width (64 at reference)

  nlohmann::json to_json() const;
  static GeneratorArch from_json(const nlohmann::json& j);
  bool operator==(const GeneratorArch&) const = default;
};

struct DecoderStage {
  int size = 0;          ///< spatial size after upsampling
  int up_channels = 0;   ///< channels of the upsampled previous feature
  int skip_channels = 0;
  int out_channels = 0;
  Branch skip_branch = Branch::texture;
  int skip_level = 0;  ///< 0 is the branch input, i the output of PConv i
  int concat_channels() const { return up_channels + skip_channels; }
  std::string skip_label() const;  ///< e.g. "T.enc5", "S.input"
};

struct EncoderLevel {
  int in_channels = 0, out_channels = 0, kernel = 0, pad = 0, out_size = 0;
  bool batch_norm = false;
};

/// Shape-only description of the whole network.
struct GeneratorPlan {
  std::vector<EncoderLevel> texture_encoder, structure_encoder;
  std::vector<DecoderStage> texture_decoder, structure_decoder;
  int fused_channels = 0;
  int cfa_channels = 0;
};

GeneratorPlan make_plan(const GeneratorArch& arch);

// ---------------------------------------------------------------- partial conv

/// Feature batch N×C×H×W plus a same-shaped binary validity mask.
struct MaskedFeature {
  ag::Var values;
  Tensor mask;

  static MaskedFeature dense(ag::Var values);
};

/// Partial convolution. Sites whose window holds any valid input are
/// renormalized by k²·Cin / Σmask; the others produce 0 with mask 0. Padding is
/// zero for values and valid for the mask, so a full mask equals a standard
/// convolution.
MaskedFeature partial_conv(const MaskedFeature& in, const ag::Var& weight, const ag::Var& bias,
                           const kernels::ConvGeometry& g);

class PartialConv2d {
 public:
  PartialConv2d() = default;
  PartialConv2d(nn::ParameterSet& ps, const std::string& name, const nn::ConvOptions& o, std::mt19937_64& rng);
  MaskedFeature operator()(const MaskedFeature& in) const;
  const nn::Conv2d& conv() const { return conv_; }

 private:
  nn::Conv2d conv_;
};

// ---------------------------------------------------------------- Bi-GFF

class BiGFF {
 public:
  BiGFF() = default;
  BiGFF(nn::ParameterSet& ps, const std::string& name, int channels, bool cross, std::mt19937_64& rng);
  /// [Fs + G_s⊙Ft ; Ft + G_t⊙Fs] with G = conv([Fs; Ft]).
  ag::Var operator()(const ag::Var& fs, const ag::Var& ft) const;

 private:
  nn::Conv2d gate_s_, gate_t_;
  bool cross_ = true;
};

// ---------------------------------------------------------------- CFA

struct AttentionResult {
  ag::Var reconstructed;  ///< same shape as the input feature
  ag::Var attention;      ///< N×P×P, rows sum to 1
};

/// Cosine-similarity attention between non-overlapping p×p patches; each patch
/// is rebuilt as the attention-weighted sum of all raw patches.
AttentionResult patch_attention(const ag::Var& feature, int patch);

/// Bytes held by one N×P×P attention matrix for an N×C×H×W feature.
double attention_bytes(int batch, int height, int width, int patch);

class CFA {
 public:
  CFA() = default;
  CFA(nn::ParameterSet& ps, const std::string& name, int in_channels, int channels, int patch,
      double memory_budget_mb, std::mt19937_64& rng);

  struct Result {
    ag::Var output;
    ag::Var attention;
    ag::Var branch_weights;  ///< N×4×H×W softmax over the dilation branches
  };
  Result operator()(const ag::Var& x, nn::BatchStats stats) const;

  static constexpr std::array<int, 4> kDilations{1, 2, 4, 8};

 private:
  std::array<nn::Conv2d, 3> pre_;
  std::array<nn::BatchNorm2d, 3> pre_bn_;
  std::array<nn::Conv2d, 4> dilated_;
  nn::Conv2d select_;
  std::array<nn::Conv2d, 3> post_;
  std::array<nn::BatchNorm2d, 3> post_bn_;
  int patch_ = 3;
  double budget_mb_ = 1024.0;
};

// ---------------------------------------------------------------- generator

enum class Mode { train, eval };

struct EncoderStack {
  std::vector<MaskedFeature> levels;  ///< levels[0] is the input, levels[i] the output of PConv i
};

struct GeneratorOutput {
  ag::Var texture_feature;
  ag::Var structure_feature;
  ag::Var fused;
  ag::Var refined;
  ag::Var image;
  ag::Var aux_texture;    ///< 3-channel reconstruction from the texture feature
  ag::Var aux_structure;  ///< 1-channel edge reconstruction from the structure feature
  ag::Var attention;
};

class Generator {
 public:
  Generator(const GeneratorArch& arch, std::uint64_t seed);

  const GeneratorArch& arch() const { return arch_; }
  const GeneratorPlan& plan() const { return plan_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  /// structure: N×2×S×S, texture: N×3×S×S. Dropout draws from `rng` in train mode.
  GeneratorOutput forward(const ag::Var& structure, const ag::Var& texture, Mode mode,
                          std::mt19937_64* rng = nullptr) const;

  EncoderStack encode(const MaskedFeature& input, Branch which, nn::BatchStats stats) const;
  ag::Var decode(const EncoderStack& texture, const EncoderStack& structure, Branch which, Mode mode,
                 std::mt19937_64* rng) const;

 private:
  struct Encoder {
    std::vector<PartialConv2d> conv;
    std::vector<nn::BatchNorm2d> bn;
  };
  struct Decoder {
    std::vector<nn::Conv2d> conv;
    std::vector<nn::BatchNorm2d> bn;
  };

  GeneratorArch arch_;
  GeneratorPlan plan_;
  nn::ParameterSet params_;
  Encoder enc_t_, enc_s_;
  Decoder dec_t_, dec_s_;
  BiGFF bigff_;
  CFA cfa_;
  nn::Conv2d head_, aux_texture_, aux_structure_;
};

}  // namespace dfsar::gen
