#include "dfsar/discriminator.hpp"

#include "dfsar/error.hpp"

namespace dfsar::disc {

namespace {

constexpr int kBaseChannels[] = {64, 128, 256, 512};
constexpr int kBlocks = 4;
constexpr int kGrayAfterBlock = 2;
constexpr double kLeakySlope = 0.2;

bool updates(Mode m) { return m == Mode::train; }

nn::BatchStats stats_for(Mode m) {
  switch (m) {
    case Mode::train: return nn::BatchStats::batch_update;
    case Mode::frozen: return nn::BatchStats::batch_frozen;
    case Mode::eval: return nn::BatchStats::running;
  }
  return nn::BatchStats::running;
}

}  // namespace

DiscriminatorArch DiscriminatorArch::reference() { return DiscriminatorArch{}; }

DiscriminatorArch DiscriminatorArch::toy() {
  DiscriminatorArch a;
  a.input_size = 64;
  a.width_divisor = 8;
  return a;
}

void DiscriminatorArch::validate() const {
  DFSAR_REQUIRE(input_size > 0 && input_size % 16 == 0,
                "discriminator: input size must be a positive multiple of 16, got " + std::to_string(input_size));
  DFSAR_REQUIRE(width_divisor >= 1 && 64 % width_divisor == 0, "discriminator: width_divisor must divide 64");
  DFSAR_REQUIRE(sn_warmup >= 0, "discriminator: sn_warmup must be non-negative");
}

std::vector<int> DiscriminatorArch::block_channels() const {
  std::vector<int> c;
  for (int b : kBaseChannels) c.push_back(b / width_divisor);
  return c;
}

nlohmann::json DiscriminatorArch::to_json() const {
  return {{"input_size", input_size}, {"width_divisor", width_divisor}, {"sn_warmup", sn_warmup},
          {"block_channels", block_channels()}};
}

DiscriminatorArch DiscriminatorArch::from_json(const nlohmann::json& j) {
  DiscriminatorArch a;
  try {
    a.input_size = j.at("input_size").get<int>();
    a.width_divisor = j.at("width_divisor").get<int>();
    a.sn_warmup = j.at("sn_warmup").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("discriminator architecture manifest: ") + e.what());
  }
  a.validate();
  return a;
}

// ---------------------------------------------------------------- residual block

ResidualBlock::ResidualBlock(nn::ParameterSet& ps, const std::string& name, int in, int out, int stride,
                             std::mt19937_64& rng, int sn_warmup, bool zero_residual)
    : projection_(in != out || stride != 1) {
  conv1_ = nn::SNConv2d(ps, name + ".conv1", {.in = in, .out = out, .kernel = 3, .stride = stride, .pad = 1}, rng, sn_warmup);
  bn1_ = nn::BatchNorm2d(ps, name + ".bn1", out);
  conv2_ = nn::SNConv2d(ps, name + ".conv2",
                        {.in = out, .out = out, .kernel = 3, .stride = 1, .pad = 1, .init_std = zero_residual ? 0.0 : 0.02},
                        rng, sn_warmup);
  bn2_ = nn::BatchNorm2d(ps, name + ".bn2", out);
  if (projection_)
    proj_ = nn::SNConv2d(ps, name + ".proj", {.in = in, .out = out, .kernel = 1, .stride = stride, .pad = 0}, rng, sn_warmup);
}

ag::Var ResidualBlock::shortcut(const ag::Var& x, Mode mode) const {
  return projection_ ? proj_(x, updates(mode)) : x;
}

ag::Var ResidualBlock::operator()(const ag::Var& x, Mode mode) const {
  const nn::BatchStats stats = stats_for(mode);
  ag::Var h = ag::leaky_relu(bn1_(conv1_(x, updates(mode)), stats), kLeakySlope);
  h = bn2_(conv2_(h, updates(mode)), stats);
  return ag::add(h, shortcut(x, mode));
}

std::vector<const nn::SNConv2d*> ResidualBlock::convs() const {
  std::vector<const nn::SNConv2d*> out{&conv1_, &conv2_};
  if (projection_) out.push_back(&proj_);
  return out;
}

// ---------------------------------------------------------------- discriminator

Discriminator::Discriminator(const DiscriminatorArch& arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  std::mt19937_64 rng(seed);
  const std::vector<int> ch = arch_.block_channels();
  for (int i = 0; i < kBlocks; ++i) {
    const int in_t = i == 0 ? 3 : ch[i - 1];
    const int in_s = i == 0 ? 1 : ch[i - 1];
    texture_.emplace_back(params_, "texture.block" + std::to_string(i + 1), in_t, ch[i], 2, rng, arch_.sn_warmup);
    structure_.emplace_back(params_, "structure.block" + std::to_string(i + 1), in_s, ch[i], 2, rng, arch_.sn_warmup);
  }
  const int c2 = ch[kGrayAfterBlock - 1];
  gray_fuse_ = nn::SNConv2d(params_, "structure.gray_fuse", {.in = c2 + 1, .out = c2, .kernel = 1, .stride = 1, .pad = 0},
                            rng, arch_.sn_warmup);
  final_ = nn::SNConv2d(params_, "final", {.in = 2 * ch.back(), .out = 1, .kernel = 3, .stride = 1, .pad = 1}, rng,
                        arch_.sn_warmup);
}

ag::Var Discriminator::forward(const ag::Var& image, const ag::Var& edge, const ag::Var& gray, Mode mode) const {
  const Shape& is = image.shape();
  DFSAR_REQUIRE(is.size() == 4 && is[1] == 3, "discriminate: image must be N×3×H×W, got " + shape_str(is));
  DFSAR_REQUIRE(edge.shape() == Shape({is[0], 1, is[2], is[3]}) && gray.shape() == edge.shape(),
                "discriminate: edge " + shape_str(edge.shape()) + " / gray " + shape_str(gray.shape()) +
                    " do not match image " + shape_str(is));
  DFSAR_REQUIRE(is[2] % 16 == 0 && is[3] % 16 == 0, "discriminate: spatial size must be a multiple of 16");

  ag::Var t = image;
  for (const auto& block : texture_) t = block(t, mode);

  ag::Var s = edge;
  for (int i = 0; i < kBlocks; ++i) {
    s = structure_[i](s, mode);
    if (i + 1 == kGrayAfterBlock) {
      const ag::Var g = ag::avg_pool(gray, 1 << kGrayAfterBlock);
      s = gray_fuse_(ag::concat_channels({s, g}), updates(mode));
    }
  }
  return ag::sigmoid(final_(ag::concat_channels({t, s}), updates(mode)));
}

ProbabilityMap Discriminator::discriminate(const Tensor& image, const Tensor& edge, const Tensor& gray) const {
  ag::NoGradGuard guard;
  auto batch = [](const Tensor& t) {
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return ag::Var(t.reshaped(s));
  };
  const ag::Var p = forward(batch(image), batch(edge), batch(gray), Mode::eval);
  return ProbabilityMap{p.value().reshaped({1, p.dim(2), p.dim(3)})};
}

std::vector<const nn::SNConv2d*> Discriminator::spectral_convs() const {
  std::vector<const nn::SNConv2d*> out;
  for (const auto* branch : {&texture_, &structure_})
    for (const auto& block : *branch)
      for (const auto* c : block.convs()) out.push_back(c);
  out.push_back(&gray_fuse_);
  out.push_back(&final_);
  return out;
}

}  // namespace dfsar::disc
