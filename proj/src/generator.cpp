#include "dfsar/generator.hpp"

#include <algorithm>
#include <cmath>

#include "dfsar/error.hpp"

namespace dfsar::gen {

namespace {

constexpr std::array<int, 7> kBaseChannels{64, 128, 256, 512, 512, 512, 512};
constexpr std::array<int, 7> kBaseKernels{7, 5, 5, 3, 3, 3, 3};
constexpr int kBaseFeature = 64;
constexpr double kLeakySlope = 0.2;

nn::BatchStats stats_for(Mode m) { return m == Mode::train ? nn::BatchStats::batch_update : nn::BatchStats::running; }

ag::Var conv_bn_lrelu(const nn::Conv2d& conv, const nn::BatchNorm2d& bn, const ag::Var& x, nn::BatchStats stats) {
  return ag::leaky_relu(bn(conv(x), stats), kLeakySlope);
}

}  // namespace

// ---------------------------------------------------------------- arch

GeneratorArch GeneratorArch::reference() { return GeneratorArch{}; }

GeneratorArch GeneratorArch::toy() {
  GeneratorArch a;
  a.input_size = 64;
  a.levels = 5;
  a.width_divisor = 8;
  return a;
}

void GeneratorArch::validate() const {
  DFSAR_REQUIRE(levels >= 1 && levels <= static_cast<int>(kBaseChannels.size()),
                "generator: levels must be in [1, 7], got " + std::to_string(levels));
  DFSAR_REQUIRE(width_divisor >= 1 && kBaseFeature % width_divisor == 0,
                "generator: width_divisor must divide 64, got " + std::to_string(width_divisor));
  DFSAR_REQUIRE(input_size > 0 && input_size % (1 << levels) == 0,
                "generator: input size " + std::to_string(input_size) + " halved " + std::to_string(levels) +
                    " times does not stay a whole number of pixels >= 1");
  DFSAR_REQUIRE(texture_channels == 3 && structure_channels == 2,
                "generator: texture/structure inputs must have 3/2 channels");
  DFSAR_REQUIRE(dropout >= 0.0 && dropout < 1.0, "generator: dropout must be in [0, 1)");
  DFSAR_REQUIRE(cfa_patch >= 1, "generator: cfa_patch must be positive");
  DFSAR_REQUIRE(cfa_memory_budget_mb > 0.0, "generator: cfa memory budget must be positive");
}

std::vector<int> GeneratorArch::encoder_channels() const {
  std::vector<int> c;
  for (int i = 0; i < levels; ++i) c.push_back(std::max(1, kBaseChannels[i] / width_divisor));
  return c;
}

std::vector<int> GeneratorArch::encoder_kernels() const {
  return {kBaseKernels.begin(), kBaseKernels.begin() + levels};
}

std::vector<int> GeneratorArch::encoder_sizes() const {
  std::vector<int> s;
  for (int i = 1; i <= levels; ++i) s.push_back(input_size >> i);
  return s;
}

int GeneratorArch::feature_channels() const { return kBaseFeature / width_divisor; }

nlohmann::json GeneratorArch::to_json() const {
  return {{"input_size", input_size},
          {"levels", levels},
          {"width_divisor", width_divisor},
          {"texture_channels", texture_channels},
          {"structure_channels", structure_channels},
          {"dropout", dropout},
          {"cfa_patch", cfa_patch},
          {"cfa_memory_budget_mb", cfa_memory_budget_mb},
          {"bigff_cross", bigff_cross},
          {"encoder_channels", encoder_channels()}};
}

GeneratorArch GeneratorArch::from_json(const nlohmann::json& j) {
  GeneratorArch a;
  try {
    a.input_size = j.at("input_size").get<int>();
    a.levels = j.at("levels").get<int>();
    a.width_divisor = j.at("width_divisor").get<int>();
    a.texture_channels = j.at("texture_channels").get<int>();
    a.structure_channels = j.at("structure_channels").get<int>();
    a.dropout = j.at("dropout").get<double>();
    a.cfa_patch = j.at("cfa_patch").get<int>();
    a.cfa_memory_budget_mb = j.at("cfa_memory_budget_mb").get<double>();
    a.bigff_cross = j.at("bigff_cross").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("generator architecture manifest: ") + e.what());
  }
  a.validate();
  return a;
}

std::string DecoderStage::skip_label() const {
  const std::string b = skip_branch == Branch::texture ? "T" : "S";
  return skip_level == 0 ? b + ".input" : b + ".enc" + std::to_string(skip_level);
}

GeneratorPlan make_plan(const GeneratorArch& arch) {
  arch.validate();
  const std::vector<int> ch = arch.encoder_channels();
  const std::vector<int> ks = arch.encoder_kernels();
  const std::vector<int> sz = arch.encoder_sizes();
  const int L = arch.levels;
  GeneratorPlan p;

  auto encoder = [&](int in_channels) {
    std::vector<EncoderLevel> levels;
    for (int i = 0; i < L; ++i) {
      EncoderLevel e;
      e.in_channels = i == 0 ? in_channels : ch[i - 1];
      e.out_channels = ch[i];
      e.kernel = ks[i];
      e.pad = (ks[i] - 1) / 2;
      e.out_size = sz[i];
      e.batch_norm = i >= 1 && i <= L - 2;
      levels.push_back(e);
    }
    return levels;
  };
  p.texture_encoder = encoder(arch.texture_channels);
  p.structure_encoder = encoder(arch.structure_channels);

  auto level_channels = [&](Branch b, int level) {
    if (level == 0) return b == Branch::texture ? arch.texture_channels : arch.structure_channels;
    return ch[level - 1];
  };
  // Stage 0 starts from the opposite encoder's deepest level; its first skip
  // comes from the own encoder, later skips from the texture encoder, and the
  // last one from the own branch input.
  auto decoder = [&](Branch own) {
    std::vector<DecoderStage> stages;
    int up = ch[L - 1];
    for (int j = 0; j < L; ++j) {
      DecoderStage d;
      d.skip_level = L - 1 - j;
      d.skip_branch = (j == 0 || d.skip_level == 0) ? own : Branch::texture;
      d.size = arch.input_size >> d.skip_level;
      d.up_channels = up;
      d.skip_channels = level_channels(d.skip_branch, d.skip_level);
      d.out_channels = d.skip_level == 0 ? arch.feature_channels() : ch[d.skip_level - 1];
      up = d.out_channels;
      stages.push_back(d);
    }
    return stages;
  };
  p.texture_decoder = decoder(Branch::texture);
  p.structure_decoder = decoder(Branch::structure);
  p.fused_channels = 2 * arch.feature_channels();
  p.cfa_channels = arch.feature_channels();
  return p;
}

// ---------------------------------------------------------------- partial conv

MaskedFeature MaskedFeature::dense(ag::Var values) {
  Tensor mask(values.shape(), 1.0);
  return MaskedFeature{std::move(values), std::move(mask)};
}

MaskedFeature partial_conv(const MaskedFeature& in, const ag::Var& weight, const ag::Var& bias,
                           const kernels::ConvGeometry& g) {
  const Shape& xs = in.values.shape();
  const Shape& ws = weight.shape();
  DFSAR_REQUIRE(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1] && ws[2] == ws[3],
                "partial_conv: input " + shape_str(xs) + " incompatible with kernel " + shape_str(ws));
  DFSAR_REQUIRE(in.mask.shape() == xs, "partial_conv: mask shape " + shape_str(in.mask.shape()) +
                                           " differs from values " + shape_str(xs));
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3], cout = ws[0], k = ws[2];
  const int ho = kernels::conv_out_size(h, k, g), wo = kernels::conv_out_size(w, k, g);
  DFSAR_REQUIRE(ho > 0 && wo > 0, "partial_conv: output would be empty");

  const bool full = std::all_of(in.mask.values().begin(), in.mask.values().end(), [](double m) { return m == 1.0; });
  if (full) {
    ag::Var y = ag::conv2d(in.values, weight, g);
    if (bias.defined()) y = ag::add_bias(y, bias);
    return MaskedFeature{y, Tensor({n, cout, ho, wo}, 1.0)};
  }

  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> valid_count(static_cast<std::size_t>(n) * plane, 0.0);
  for (int b = 0; b < n; ++b)
    for (int ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < plane; ++i)
        valid_count[b * plane + i] += in.mask[(static_cast<std::size_t>(b) * c + ci) * plane + i];

  const double full_count = static_cast<double>(k) * k * c;
  Tensor ratio({n, 1, ho, wo}), new_mask({n, 1, ho, wo});
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int iy = oy * g.stride - g.pad + ky * g.dilation;
            const int ix = ox * g.stride - g.pad + kx * g.dilation;
            s += (iy < 0 || iy >= h || ix < 0 || ix >= w) ? c : valid_count[b * plane + static_cast<std::size_t>(iy) * w + ix];
          }
        const std::size_t o = (static_cast<std::size_t>(b) * ho + oy) * wo + ox;
        if (s > 0.0) {
          ratio[o] = full_count / s;
          new_mask[o] = 1.0;
        }
      }

  ag::Var y = ag::mul_const(ag::conv2d(ag::mul_const(in.values, in.mask), weight, g), ratio);
  if (bias.defined()) y = ag::add_bias(y, bias);
  y = ag::mul_const(y, new_mask);

  Tensor mask_out({n, cout, ho, wo});
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  for (int b = 0; b < n; ++b)
    for (int co = 0; co < cout; ++co)
      std::copy_n(new_mask.data() + b * out_plane, out_plane, mask_out.data() + (static_cast<std::size_t>(b) * cout + co) * out_plane);
  return MaskedFeature{y, std::move(mask_out)};
}

PartialConv2d::PartialConv2d(nn::ParameterSet& ps, const std::string& name, const nn::ConvOptions& o,
                             std::mt19937_64& rng)
    : conv_(ps, name, o, rng) {}

MaskedFeature PartialConv2d::operator()(const MaskedFeature& in) const {
  return partial_conv(in, conv_.weight(), conv_.bias(), conv_.geometry());
}

// ---------------------------------------------------------------- Bi-GFF

BiGFF::BiGFF(nn::ParameterSet& ps, const std::string& name, int channels, bool cross, std::mt19937_64& rng)
    : cross_(cross) {
  nn::ConvOptions o{.in = 2 * channels, .out = channels, .kernel = 3, .stride = 1, .pad = 1, .init_std = 0.0};
  gate_s_ = nn::Conv2d(ps, name + ".gate_s", o, rng);
  gate_t_ = nn::Conv2d(ps, name + ".gate_t", o, rng);
}

ag::Var BiGFF::operator()(const ag::Var& fs, const ag::Var& ft) const {
  DFSAR_REQUIRE(fs.shape() == ft.shape(), "bigff: structure " + shape_str(fs.shape()) + " vs texture " +
                                              shape_str(ft.shape()));
  DFSAR_REQUIRE(fs.dim(1) == gate_s_.out_channels(), "bigff: expected " + std::to_string(gate_s_.out_channels()) +
                                                         " channels, got " + std::to_string(fs.dim(1)));
  const ag::Var both = ag::concat_channels({fs, ft});
  const ag::Var gs = gate_s_(both);
  const ag::Var gt = gate_t_(both);
  const ag::Var fs2 = ag::add(fs, ag::mul(gs, cross_ ? ft : fs));
  const ag::Var ft2 = ag::add(ft, ag::mul(gt, cross_ ? fs : ft));
  return ag::concat_channels({fs2, ft2});
}

// ---------------------------------------------------------------- CFA

double attention_bytes(int batch, int height, int width, int patch) {
  const double p = std::ceil(static_cast<double>(height) / patch) * std::ceil(static_cast<double>(width) / patch);
  return static_cast<double>(batch) * p * p * sizeof(double);
}

AttentionResult patch_attention(const ag::Var& feature, int patch) {
  DFSAR_REQUIRE(feature.shape().size() == 4, "patch_attention: NCHW feature expected");
  const ag::Var raw = ag::extract_patches(feature, patch);
  const ag::Var unit = ag::l2_normalize_lastdim(raw);
  const ag::Var attention = ag::softmax_lastdim(ag::bmm(unit, unit, true));
  const ag::Var rebuilt = ag::bmm(attention, raw, false);
  return {ag::fold_patches(rebuilt, feature.shape(), patch), attention};
}

CFA::CFA(nn::ParameterSet& ps, const std::string& name, int in_channels, int channels, int patch,
         double memory_budget_mb, std::mt19937_64& rng)
    : patch_(patch), budget_mb_(memory_budget_mb) {
  for (int i = 0; i < 3; ++i) {
    const std::string id = std::to_string(i);
    pre_[i] = nn::Conv2d(ps, name + ".pre" + id, {.in = i == 0 ? in_channels : channels, .out = channels}, rng);
    pre_bn_[i] = nn::BatchNorm2d(ps, name + ".pre_bn" + id, channels);
  }
  for (std::size_t i = 0; i < kDilations.size(); ++i) {
    const int d = kDilations[i];
    dilated_[i] = nn::Conv2d(ps, name + ".dilated" + std::to_string(d),
                             {.in = channels, .out = channels, .kernel = 3, .stride = 1, .pad = d, .dilation = d}, rng);
  }
  select_ = nn::Conv2d(ps, name + ".select",
                       {.in = 4 * channels, .out = static_cast<int>(kDilations.size()), .kernel = 1, .stride = 1, .pad = 0},
                       rng);
  for (int i = 0; i < 3; ++i) {
    const std::string id = std::to_string(i);
    post_[i] = nn::Conv2d(ps, name + ".post" + id, {.in = i == 0 ? channels + in_channels : channels, .out = channels}, rng);
    post_bn_[i] = nn::BatchNorm2d(ps, name + ".post_bn" + id, channels);
  }
}

CFA::Result CFA::operator()(const ag::Var& x, nn::BatchStats stats) const {
  const Shape& s = x.shape();
  DFSAR_REQUIRE(s.size() == 4 && s[1] == pre_[0].in_channels(),
                "cfa: expected N×" + std::to_string(pre_[0].in_channels()) + "×H×W input, got " + shape_str(s));
  const double need_mb = attention_bytes(s[0], s[2], s[3], patch_) / (1024.0 * 1024.0);
  DFSAR_REQUIRE(need_mb <= budget_mb_, "cfa: attention matrix needs " + std::to_string(need_mb) +
                                           " MB, over the configured budget of " + std::to_string(budget_mb_) + " MB");

  ag::Var h = x;
  for (int i = 0; i < 3; ++i) h = conv_bn_lrelu(pre_[i], pre_bn_[i], h, stats);
  AttentionResult att = patch_attention(h, patch_);

  std::vector<ag::Var> branches;
  for (const auto& conv : dilated_) branches.push_back(ag::leaky_relu(conv(att.reconstructed), kLeakySlope));
  const ag::Var weights = ag::softmax_channels(select_(ag::concat_channels(branches)));
  ag::Var mixed;
  for (std::size_t i = 0; i < branches.size(); ++i) {
    const int c = static_cast<int>(i);
    const ag::Var term = ag::mul_channel_map(branches[i], ag::slice_channels(weights, c, c + 1));
    mixed = i == 0 ? term : ag::add(mixed, term);
  }

  ag::Var y = ag::concat_channels({mixed, x});
  for (int i = 0; i < 3; ++i) y = conv_bn_lrelu(post_[i], post_bn_[i], y, stats);
  return {y, att.attention, weights};
}

// ---------------------------------------------------------------- generator

Generator::Generator(const GeneratorArch& arch, std::uint64_t seed) : arch_(arch), plan_(make_plan(arch)) {
  std::mt19937_64 rng(seed);

  auto build_encoder = [&](Encoder& enc, const std::vector<EncoderLevel>& levels, const std::string& prefix) {
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const EncoderLevel& e = levels[i];
      const std::string name = prefix + std::to_string(i + 1);
      enc.conv.emplace_back(params_, name,
                            nn::ConvOptions{.in = e.in_channels, .out = e.out_channels, .kernel = e.kernel, .stride = 2, .pad = e.pad},
                            rng);
      enc.bn.push_back(e.batch_norm ? nn::BatchNorm2d(params_, name + ".bn", e.out_channels) : nn::BatchNorm2d());
    }
  };
  build_encoder(enc_t_, plan_.texture_encoder, "enc_t.pconv");
  build_encoder(enc_s_, plan_.structure_encoder, "enc_s.pconv");

  auto build_decoder = [&](Decoder& dec, const std::vector<DecoderStage>& stages, const std::string& prefix) {
    for (std::size_t j = 0; j < stages.size(); ++j) {
      const DecoderStage& d = stages[j];
      const std::string name = prefix + std::to_string(j + 1);
      dec.conv.emplace_back(params_, name, nn::ConvOptions{.in = d.concat_channels(), .out = d.out_channels}, rng);
      dec.bn.emplace_back(params_, name + ".bn", d.out_channels);
    }
  };
  build_decoder(dec_t_, plan_.texture_decoder, "dec_t.conv");
  build_decoder(dec_s_, plan_.structure_decoder, "dec_s.conv");

  const int f = arch_.feature_channels();
  bigff_ = BiGFF(params_, "bigff", f, arch_.bigff_cross, rng);
  cfa_ = CFA(params_, "cfa", plan_.fused_channels, plan_.cfa_channels, arch_.cfa_patch, arch_.cfa_memory_budget_mb, rng);
  head_ = nn::Conv2d(params_, "head", {.in = plan_.cfa_channels, .out = 3}, rng);
  aux_texture_ = nn::Conv2d(params_, "aux_texture", {.in = f, .out = 3}, rng);
  aux_structure_ = nn::Conv2d(params_, "aux_structure", {.in = f, .out = 1}, rng);
}

EncoderStack Generator::encode(const MaskedFeature& input, Branch which, nn::BatchStats stats) const {
  const Encoder& enc = which == Branch::texture ? enc_t_ : enc_s_;
  const std::vector<EncoderLevel>& plan = which == Branch::texture ? plan_.texture_encoder : plan_.structure_encoder;
  DFSAR_REQUIRE(input.values.shape().size() == 4 && input.values.dim(1) == plan[0].in_channels,
                std::string(which == Branch::texture ? "texture" : "structure") + " encoder expects " +
                    std::to_string(plan[0].in_channels) + " input channels, got " + shape_str(input.values.shape()));
  EncoderStack stack;
  stack.levels.push_back(input);
  for (std::size_t i = 0; i < enc.conv.size(); ++i) {
    MaskedFeature f = enc.conv[i](stack.levels.back());
    ag::Var v = plan[i].batch_norm ? enc.bn[i](f.values, stats) : f.values;
    v = ag::relu(v);
    const bool full = std::all_of(f.mask.values().begin(), f.mask.values().end(), [](double m) { return m == 1.0; });
    f.values = full ? v : ag::mul_const(v, f.mask);
    stack.levels.push_back(std::move(f));
  }
  return stack;
}

ag::Var Generator::decode(const EncoderStack& texture, const EncoderStack& structure, Branch which, Mode mode,
                          std::mt19937_64* rng) const {
  const Decoder& dec = which == Branch::texture ? dec_t_ : dec_s_;
  const std::vector<DecoderStage>& plan = which == Branch::texture ? plan_.texture_decoder : plan_.structure_decoder;
  const int L = arch_.levels;
  DFSAR_REQUIRE(static_cast<int>(texture.levels.size()) == L + 1 && static_cast<int>(structure.levels.size()) == L + 1,
                "decode: encoder stacks must hold " + std::to_string(L + 1) + " levels");
  const EncoderStack& opposite = which == Branch::texture ? structure : texture;
  const bool drop = mode == Mode::train && arch_.dropout > 0.0;
  DFSAR_REQUIRE(!drop || rng != nullptr, "decode: training mode needs a dropout generator");

  ag::Var h = opposite.levels[L].values;
  for (std::size_t j = 0; j < plan.size(); ++j) {
    const DecoderStage& d = plan[j];
    const EncoderStack& src = d.skip_branch == Branch::texture ? texture : structure;
    const ag::Var& skip = src.levels[d.skip_level].values;
    h = ag::upsample_nearest2x(h);
    DFSAR_REQUIRE(h.dim(1) == d.up_channels && skip.dim(1) == d.skip_channels && h.dim(2) == d.size &&
                      skip.dim(2) == d.size,
                  "decode: stage " + std::to_string(j + 1) + " shape mismatch against " + d.skip_label());
    h = conv_bn_lrelu(dec.conv[j], dec.bn[j], ag::concat_channels({h, skip}), stats_for(mode));
    if (drop && j < 2) h = ag::dropout(h, arch_.dropout, *rng);
  }
  return h;
}

GeneratorOutput Generator::forward(const ag::Var& structure, const ag::Var& texture, Mode mode,
                                   std::mt19937_64* rng) const {
  const Shape& ss = structure.shape();
  const Shape& ts = texture.shape();
  DFSAR_REQUIRE(ss.size() == 4 && ts.size() == 4 && ss[0] == ts[0] && ss[2] == ts[2] && ss[3] == ts[3],
                "generate: structure " + shape_str(ss) + " and texture " + shape_str(ts) + " inputs disagree");
  const int step = 1 << arch_.levels;
  DFSAR_REQUIRE(ts[2] % step == 0 && ts[3] % step == 0,
                "generate: input " + std::to_string(ts[2]) + "x" + std::to_string(ts[3]) + " halved " +
                    std::to_string(arch_.levels) + " times does not stay a whole number of pixels >= 1");

  const nn::BatchStats stats = stats_for(mode);
  const EncoderStack enc_t = encode(MaskedFeature::dense(texture), Branch::texture, stats);
  const EncoderStack enc_s = encode(MaskedFeature::dense(structure), Branch::structure, stats);

  GeneratorOutput out;
  out.texture_feature = decode(enc_t, enc_s, Branch::texture, mode, rng);
  out.structure_feature = decode(enc_t, enc_s, Branch::structure, mode, rng);
  out.fused = bigff_(out.structure_feature, out.texture_feature);
  CFA::Result refined = cfa_(out.fused, stats);
  out.refined = refined.output;
  out.attention = refined.attention;
  out.image = ag::tanh(head_(out.refined));
  out.aux_texture = aux_texture_(out.texture_feature);
  out.aux_structure = aux_structure_(out.structure_feature);
  return out;
}

}  // namespace dfsar::gen
