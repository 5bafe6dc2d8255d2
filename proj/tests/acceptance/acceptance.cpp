// Runs every acceptance criterion at its stated tolerance and prints one
// PASS/FAIL line each. Pass criterion numbers to run a subset.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dfsar/archive.hpp"
#include "dfsar/cli.hpp"
#include "dfsar/dataio.hpp"
#include "dfsar/generator.hpp"
#include "dfsar/imageops.hpp"
#include "dfsar/interpretability.hpp"
#include "dfsar/losses.hpp"
#include "dfsar/training.hpp"
#include "support/gradcheck.hpp"
#include "support/synthetic.hpp"
#include "support/tempdir.hpp"

using namespace dfsar;
using testsupport::gradcheck;
using testsupport::random_tensor;
namespace fs = std::filesystem;
namespace tr = dfsar::training;

namespace {

/// Collects failed expectations; a criterion passes when none failed.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok && failures_.size() < 8) failures_.push_back(what);
    failed_ += !ok;
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool ok() const { return failed_ == 0; }
  std::string summary() const {
    std::ostringstream os;
    os << total_ - failed_ << "/" << total_ << " checks";
    for (const auto& n : notes_) os << "; " << n;
    for (const auto& f : failures_) os << "; FAILED " << f;
    return os.str();
  }

 private:
  int total_ = 0, failed_ = 0;
  std::vector<std::string> failures_, notes_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cli_run(const std::vector<std::string>& args, std::string* err = nullptr) {
  std::ostringstream out, e;
  const int code = cli::run(args, out, e);
  if (err) *err = e.str();
  return code;
}

Eigen::MatrixXd matrix_view(const Tensor& w) {
  const int rows = w.dim(0);
  const int cols = static_cast<int>(w.size() / rows);
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = w[static_cast<std::size_t>(r) * cols + c];
  return m;
}

double sigma_max(const Tensor& w) { return Eigen::BDCSVD<Eigen::MatrixXd>(matrix_view(w)).singularValues()(0); }

// ------------------------------------------------------------------ 1

void architecture(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const gen::GeneratorPlan plan = gen::make_plan(gen::GeneratorArch::reference());
  const int enc_channels[] = {64, 128, 256, 512, 512, 512, 512};
  const int enc_sizes[] = {128, 64, 32, 16, 8, 4, 2};
  const int enc_kernels[] = {7, 5, 5, 3, 3, 3, 3};
  for (const auto* enc : {&plan.texture_encoder, &plan.structure_encoder}) {
    c.expect(enc->size() == 7, "encoder depth 7");
    for (std::size_t i = 0; i < std::min<std::size_t>(7, enc->size()); ++i) {
      const auto& l = (*enc)[i];
      c.expect(l.out_channels == enc_channels[i], "encoder " + std::to_string(i + 1) + " channels");
      c.expect(l.out_size == enc_sizes[i], "encoder " + std::to_string(i + 1) + " size");
      c.expect(l.kernel == enc_kernels[i], "encoder " + std::to_string(i + 1) + " kernel");
    }
  }
  c.expect(plan.texture_encoder[0].in_channels == 3, "texture input 3 channels");
  c.expect(plan.structure_encoder[0].in_channels == 2, "structure input 2 channels");

  // Up-sampled width + skip width at each decoder stage.
  const std::pair<int, int> concat[] = {{512, 512}, {512, 512}, {512, 512}, {512, 256}, {256, 128}, {128, 64}};
  const int dec_sizes[] = {4, 8, 16, 32, 64, 128, 256};
  for (const auto* dec : {&plan.texture_decoder, &plan.structure_decoder}) {
    c.expect(dec->size() == 7, "decoder depth 7");
    for (std::size_t j = 0; j < std::min<std::size_t>(7, dec->size()); ++j) {
      const auto& s = (*dec)[j];
      c.expect(s.size == dec_sizes[j], "decoder " + std::to_string(j) + " size");
      if (j < 6) {
        c.expect(s.up_channels == concat[j].first && s.skip_channels == concat[j].second,
                 "decoder " + std::to_string(j) + " concat");
      }
    }
  }
  c.expect(plan.texture_decoder[6].up_channels == 64 && plan.texture_decoder[6].skip_channels == 3, "64+3");
  c.expect(plan.structure_decoder[6].up_channels == 64 && plan.structure_decoder[6].skip_channels == 2, "64+2");
  c.expect(plan.texture_decoder[6].out_channels == 64 && plan.structure_decoder[6].out_channels == 64,
           "64-channel decoder outputs");

  const auto d = disc::DiscriminatorArch::reference();
  c.expect(d.block_channels() == std::vector<int>{64, 128, 256, 512}, "discriminator widths");
  c.expect(d.map_size() == 16, "16×16 probability map");
  const double t = seconds_since(t0);
  c.expect(t < 1.0, "runtime < 1 s");
  c.note("runtime " + fmt(t, 3) + " s");
}

// ------------------------------------------------------------------ 2

void partial_conv(Check& c) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> kdist(3, 7), sdist(1, 2), cdist(1, 4), hdist(9, 14);
  std::bernoulli_distribution keep(0.7);
  double worst_dense = 0.0, worst_const = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const int k = kdist(rng), stride = sdist(rng), cin = cdist(rng), cout = cdist(rng), h = hdist(rng);
    const std::uint64_t s = rng();

    const kernels::ConvGeometry g{stride, k / 2, 1};
    const Tensor x = random_tensor({2, cin, h, h}, s);
    const Tensor w = random_tensor({cout, cin, k, k}, s + 1);
    const Tensor b = random_tensor({cout}, s + 2);
    const auto out = gen::partial_conv(gen::MaskedFeature::dense(ag::Var(x)), ag::Var(w), ag::Var(b), g);
    Tensor ref = kernels::reference::conv2d_forward(x, w, g);
    const int plane = ref.dim(2) * ref.dim(3);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ref[i] += b[(i / plane) % cout];
      worst_dense = std::max(worst_dense, std::abs(out.values.value()[i] - ref[i]));
    }

    // Constant input under a uniform kernel: the renormalized sum sees the
    // same mean whatever subset of the window is valid.
    const double value = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    const Tensor uw(Shape{cout, cin, k, k}, 0.1);
    const kernels::ConvGeometry valid{stride, 0, 1};
    const auto full = gen::partial_conv(gen::MaskedFeature::dense(ag::Var(Tensor({1, cin, h, h}, value))),
                                        ag::Var(uw), ag::Var(b), valid);
    Tensor mask({1, cin, h, h});
    for (double& m : mask.values()) m = keep(rng) ? 1.0 : 0.0;
    Tensor masked({1, cin, h, h});
    for (std::size_t i = 0; i < mask.size(); ++i) masked[i] = value * mask[i];
    const auto holes = gen::partial_conv({ag::Var(masked), mask}, ag::Var(uw), ag::Var(b), valid);
    for (std::size_t i = 0; i < holes.mask.size(); ++i)
      if (holes.mask[i] == 1.0)
        worst_const = std::max(worst_const, std::abs(holes.values.value()[i] - full.values.value()[i]));
  }
  c.expect(worst_dense <= 1e-6, "full mask vs dense convolution");
  c.expect(worst_const <= 1e-6, "constant input mask independence");
  c.note("max dense error " + fmt(worst_dense, 3) + ", max mask-dependence " + fmt(worst_const, 3));
}

// ------------------------------------------------------------------ 3

void gradients(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, testsupport::GradCheck>> results;
  const auto record = [&](const std::string& name, const testsupport::GradCheck& r) { results.emplace_back(name, r); };

  {
    Tensor mask({1, 2, 6, 6}, 1.0);
    for (int i = 0; i < 20; ++i) mask[(i * 7) % 72] = 0.0;
    record("partial conv", gradcheck(
                               [&](auto& v) {
                                 const auto out =
                                     gen::partial_conv({ag::mul_const(v[0], mask), mask}, v[1], v[2], {2, 1, 1});
                                 return ag::mean(ag::square(out.values));
                               },
                               {random_tensor({1, 2, 6, 6}, 1), random_tensor({3, 2, 3, 3}, 2), random_tensor({3}, 3)},
                               40, 4));
  }
  {
    nn::ParameterSet ps;
    std::mt19937_64 rng(1);
    gen::BiGFF g(ps, "bigff", 4, true, rng);
    for (auto& [name, p] : ps.params()) p.mutable_value() = random_tensor(p.shape(), name.size(), 0.3);
    const Tensor k = random_tensor({1, 8, 5, 5}, 11);
    record("Bi-GFF", gradcheck([&](auto& v) { return ag::dot_const(g(v[0], v[1]), k); },
                               {random_tensor({1, 4, 5, 5}, 12), random_tensor({1, 4, 5, 5}, 13)}, 40, 5));
  }
  {
    nn::ParameterSet ps;
    std::mt19937_64 rng(5);
    gen::CFA cfa(ps, "cfa", 4, 3, 3, 64.0, rng);
    for (auto& [name, p] : ps.params())
      if (name.find("bn") == std::string::npos) p.mutable_value() = random_tensor(p.shape(), name.size() * 31, 0.3);
    const Tensor k = random_tensor({1, 3, 6, 6}, 8);
    record("CFA", gradcheck([&](auto& v) { return ag::dot_const(cfa(v[0], nn::BatchStats::batch_frozen).output, k); },
                            {random_tensor({1, 4, 6, 6}, 9)}, 40, 6));
  }

  const Tensor real = random_tensor({1, 3, 8, 8}, 20);
  record("adversarial", gradcheck([&](auto& v) { return loss::adversarial(ag::sigmoid(v[0]), 0.9); },
                                  {random_tensor({1, 1, 4, 4}, 30)}, 16, 7));
  record("pixel", gradcheck([&](auto& v) { return loss::pixel(v[0], ag::Var(real)); },
                            {random_tensor({1, 3, 8, 8}, 21)}, 40, 8));
  record("focal frequency", gradcheck([&](auto& v) { return loss::focal_frequency(v[0], ag::Var(real)); },
                                      {random_tensor({1, 3, 8, 8}, 22)}, 40, 9));
  const loss::ConvExtractor ex({{3}, {4}, {4}}, 31);
  record("perceptual", gradcheck([&](auto& v) { return loss::perceptual(v[0], ag::Var(real), ex); },
                                 {random_tensor({1, 3, 8, 8}, 23)}, 40, 10));
  const Tensor sf = random_tensor({1, 3, 4, 4}, 25);
  record("style", gradcheck([&](auto& v) { return loss::style({v[0]}, {ag::Var(sf)}); },
                            {random_tensor({1, 3, 4, 4}, 26)}, 40, 11));
  const Tensor edges({1, 1, 6, 6}, 1.0);
  const Tensor eo = random_tensor({1, 3, 6, 6}, 27);
  record("feature", gradcheck([&](auto& v) { return loss::feature(v[0], v[1], eo, edges); },
                              {random_tensor({1, 3, 6, 6}, 28), random_tensor({1, 1, 6, 6}, 29)}, 40, 12));
  record("contrastive", gradcheck([&](auto& v) { return loss::contrastive(v[0], {true, false, false, true}, 1.0); },
                                  {Tensor({4}, std::vector<double>{0.3, 0.4, 0.8, 1.2})}, 4, 13));

  for (const auto& [name, r] : results) {
    c.expect(r.sampled > 0 && r.fraction() >= 0.95, name + " " + fmt(100 * r.fraction(), 3) + "%");
    c.note(name + " " + std::to_string(r.passed) + "/" + std::to_string(r.sampled));
  }
  const double t = seconds_since(t0);
  c.expect(t < 120.0, "runtime < 2 min");
  c.note("runtime " + fmt(t, 3) + " s");
}

// ------------------------------------------------------------------ 4

void attention(Check& c) {
  double worst_row = 0.0, worst_uniform = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    nn::ParameterSet ps;
    std::mt19937_64 rng(s);
    gen::CFA cfa(ps, "cfa", 8, 4, 3, 64.0, rng);
    const auto res = cfa(ag::Var(random_tensor({2, 8, 9 + 3 * static_cast<int>(s % 2), 12}, 40 + s)),
                         nn::BatchStats::batch_update);
    const Tensor& a = res.attention.value();
    const int n = a.dim(0), p = a.dim(1);
    for (int b = 0; b < n; ++b)
      for (int i = 0; i < p; ++i) {
        double row = 0.0;
        for (int j = 0; j < p; ++j) row += a[(static_cast<std::size_t>(b) * p + i) * p + j];
        worst_row = std::max(worst_row, std::abs(row - 1.0));
      }
  }
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor patch = random_tensor({1, 4, 3, 3}, 60 + s);
    Tensor f({1, 4, 9, 12});
    for (int ch = 0; ch < 4; ++ch)
      for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 12; ++x) f.at(0, ch, y, x) = patch.at(0, ch, y % 3, x % 3);
    const auto r = gen::patch_attention(ag::Var(f), 3);
    const double uniform = 1.0 / r.attention.value().dim(1);
    for (double v : r.attention.value().values()) worst_uniform = std::max(worst_uniform, std::abs(v - uniform));
  }
  c.expect(worst_row <= 1e-6, "softmax rows sum to 1");
  c.expect(worst_uniform <= 1e-6, "identical patches attend uniformly");
  c.note("max row error " + fmt(worst_row, 3) + ", max uniformity error " + fmt(worst_uniform, 3));
}

// ------------------------------------------------------------------ 5

void ssim(Check& c) {
  double self = 0.0, sym = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const ImageTile a = testsupport::noise_image(3, 24, 24, 2 * s);
    const ImageTile b = testsupport::noise_image(3, 24, 24, 2 * s + 1);
    const auto o = imageops::SsimOptions::for_range(a.range());
    self = std::max(self, std::abs(imageops::ssim(a, a, o) - 1.0));
    sym = std::max(sym, std::abs(imageops::ssim(a, b, o) - imageops::ssim(b, a, o)));
  }
  c.expect(self <= 1e-9, "ssim(x, x) = 1");
  c.expect(sym <= 1e-12, "symmetry");

  // Zero variance: contrast/structure reduce to c2/c2, leaving the luminance term.
  double closed_err = 0.0;
  for (auto [va, vb] : {std::pair{0.5, 0.25}, {-0.3, 0.7}, {0.0, 0.0}, {-1.0, 1.0}}) {
    const auto o = imageops::SsimOptions::for_range({-1.0, 1.0});
    const ImageTile a = ImageTile::constant(1, 16, 16, va), b = ImageTile::constant(1, 16, 16, vb);
    const double m1 = va + o.offset, m2 = vb + o.offset;
    const double expected = ((2 * m1 * m2 + o.c1) * o.c2) / ((m1 * m1 + m2 * m2 + o.c1) * o.c2);
    closed_err = std::max(closed_err, std::abs(imageops::ssim(a, b, o) - expected));
  }
  c.expect(closed_err <= 1e-9, "constant-pair closed form");
  c.note("self " + fmt(self, 3) + ", symmetry " + fmt(sym, 3) + ", closed form " + fmt(closed_err, 3));
}

// ------------------------------------------------------------------ 6

void spectral(Check& c) {
  // The first twenty non-degenerate spectrally normalized weights of a toy
  // discriminator, each after its 50 construction-time power iterations.
  disc::DiscriminatorArch arch = disc::DiscriminatorArch::toy();
  arch.sn_warmup = 50;
  const disc::Discriminator d(arch, 0);
  int compared = 0, within = 0;
  double worst = 0.0;
  for (const auto* conv : d.spectral_convs()) {
    if (compared == 20) break;
    const Tensor& w = conv->conv().weight().value();
    if (std::all_of(w.values().begin(), w.values().end(), [](double v) { return v == 0.0; })) continue;
    const double err = std::abs(conv->spectral_norm().sigma() - sigma_max(w));
    worst = std::max(worst, err);
    within += err <= 1e-3;
    ++compared;
  }
  c.expect(compared == 20, "20 weights available");
  c.expect(within == compared, std::to_string(compared - within) + " estimates off by more than 1e-3");
  c.note(std::to_string(within) + "/" + std::to_string(compared) + " within 1e-3, worst " + fmt(worst, 3));

  disc::DiscriminatorArch small = disc::DiscriminatorArch::toy();
  small.input_size = 32;
  disc::Discriminator trained(small, 9);
  nn::Adam adam(trained.params(), {});
  double worst_sigma = 0.0;
  for (int step = 0; step < 5; ++step) {
    trained.params().zero_grad();
    Tensor edge = random_tensor({2, 1, 32, 32}, step + 20);
    for (double& v : edge.values()) v = v > 0.8 ? 1.0 : 0.0;
    const ag::Var p = trained.forward(ag::Var(random_tensor({2, 3, 32, 32}, step, 0.5)), ag::Var(edge),
                                      ag::Var(random_tensor({2, 1, 32, 32}, step + 40, 0.5)), disc::Mode::train);
    ag::backward(ag::mean(p));
    adam.step();
    for (const auto* conv : trained.spectral_convs())
      worst_sigma = std::max(worst_sigma, sigma_max(conv->spectral_norm().normalized().value()));
  }
  c.expect(worst_sigma <= 1.0 + 1e-2, "post-step σ_max ≤ 1.01");
  c.note("post-step σ_max " + fmt(worst_sigma, 6));
}

// ------------------------------------------------------------------ 7

void overfit(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  Config cfg;
  cfg.apply_overrides({"model.toy_mode=true", "train.batch_size=8", "train.steps=500", "seed=0"});
  const tr::TrainConfig tc = tr::TrainConfig::from_config(cfg);
  std::vector<std::pair<ImageTile, ImageTile>> pairs;
  for (int i = 0; i < 8; ++i) pairs.push_back(testsupport::synthetic_pair(64, 700 + i));
  tr::Trainer trainer(tc, tr::PairDataset(pairs));

  std::vector<double> pix;
  double d_min = 1.0, d_max = 0.0;
  bool finite = true;
  for (long long s = 0; s < tc.steps; ++s) {
    const tr::StepMetrics m = trainer.step();
    pix.push_back(m.terms.at("g_pix"));
    d_min = std::min(d_min, m.d_min);
    d_max = std::max(d_max, m.d_max);
    finite = finite && std::isfinite(m.d_loss);
    for (const auto& [k, v] : m.terms) finite = finite && std::isfinite(v);
  }
  const auto window_mean = [&](std::size_t end) {
    double s = 0.0;
    for (std::size_t i = end - 10; i < end; ++i) s += pix[i];
    return s / 10.0;
  };
  const double start = window_mean(10), finish = window_mean(pix.size());
  c.expect(finish <= 0.5 * start, "pixel loss halves");
  c.expect(d_min > 0.0 && d_max < 1.0, "discriminator outputs in (0, 1)");
  c.expect(finite, "all losses finite");
  const double t = seconds_since(t0);
  c.note("g_pix moving average " + fmt(start) + " → " + fmt(finish) + " (" + fmt(100 * (1 - finish / start), 3) +
         "% drop)");
  c.note("D min " + fmt(d_min) + ", 1 − D max " + fmt(1.0 - d_max));
  c.note("runtime " + fmt(t, 4) + " s (target < 600 s)");
}

// ------------------------------------------------------------------ 8

void siamese(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<ImageTile, ImageTile>> train, held;
  for (int i = 0; i < 50; ++i) train.push_back(testsupport::synthetic_pair(64, 1000 + i));
  for (int i = 0; i < 10; ++i) held.push_back(testsupport::synthetic_pair(64, 5000 + i));
  tr::SiameseConfig sc;
  sc.input_size = 32;
  sc.steps = 200;
  sc.batch_size = 16;
  sc.learning_rate = 1e-3;
  const auto embedder = tr::train_siamese(tr::PairDataset(train), sc);

  double matched = 0.0, mismatched = 0.0;
  int n_mismatched = 0;
  bool in_range = true;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) {
      const double score = interp::confidence_score(held[i].first, held[j].second, *embedder);
      in_range = in_range && score >= 0.0 && score <= 100.0;
      if (i == j) {
        matched += score;
      } else {
        mismatched += score;
        ++n_mismatched;
      }
    }
  matched /= 10.0;
  mismatched /= n_mismatched;
  c.expect(matched > mismatched, "matched > mismatched");
  c.expect(in_range, "scores in [0, 100]");
  const double t = seconds_since(t0);
  c.expect(t < 300.0, "runtime < 5 min");
  c.note("matched " + fmt(matched) + ", mismatched " + fmt(mismatched) + ", runtime " + fmt(t, 4) + " s");
}

// ------------------------------------------------------------------ 9

void consistency(Check& c) {
  const ImageTile scene = dataio::load_tile(DFSAR_TEST_DATA_DIR "/astronaut.png");
  const imageops::PatchGrid grid = imageops::partition(scene, 64, 0);
  const double intact = interp::spatial_consistency(grid, 16).mean;
  std::mt19937_64 rng(9);
  double best = -1.0;
  for (int k = 0; k < 10; ++k) {
    imageops::PatchGrid shuffled = grid;
    do {
      std::shuffle(shuffled.patches.begin(), shuffled.patches.end(), rng);
    } while (std::equal(shuffled.patches.begin(), shuffled.patches.end(), grid.patches.begin(),
                        [](const ImageTile& a, const ImageTile& b) {
                          return a.pixels().storage() == b.pixels().storage();
                        }));
    const double m = interp::spatial_consistency(shuffled, 16).mean;
    best = std::max(best, m);
    c.expect(m < intact, "shuffle " + std::to_string(k) + " scored " + fmt(m));
  }
  c.note("intact " + fmt(intact) + ", best shuffled " + fmt(best));

  for (int r = 1; r <= 5; ++r)
    for (int s = 1; s <= 5; ++s) {
      imageops::PatchGrid g = imageops::partition(testsupport::smooth_image(r * 16, s * 16, 31), 16, 0);
      const auto graph = interp::spatial_consistency(g, 11);
      c.expect(static_cast<int>(graph.edges.size()) == r * (s - 1) + (r - 1) * s,
               "edge count " + std::to_string(r) + "×" + std::to_string(s));
    }
}

// ------------------------------------------------------------------ 10, 11

/// An untrained 256-tile toy checkpoint and a Siamese checkpoint, made once.
struct Models {
  testsupport::TempDir dir{"accept"};
  std::string checkpoint, siamese;
  bool ready = false;
  std::string error;

  Models() {
    std::ofstream m(dir.file("pairs.jsonl"));
    for (int i = 0; i < 2; ++i) {
      const auto [sar, eo] = testsupport::synthetic_pair(256, 40 + i);
      dataio::save_tile(dir.file("sar" + std::to_string(i) + ".png"), sar);
      dataio::save_tile(dir.file("eo" + std::to_string(i) + ".png"), eo);
      m << nlohmann::json{{"sar_path", "sar" + std::to_string(i) + ".png"},
                          {"eo_path", "eo" + std::to_string(i) + ".png"},
                          {"split", "train"},
                          {"acquisition_gap_days", 0}}
               .dump()
        << "\n";
    }
    m.close();
    const int code = cli_run({"train", "--manifest", dir.file("pairs.jsonl"), "--out", dir.file("run"), "--overrides",
                              "model.toy_mode=true", "--overrides", "model.input_size=256", "--overrides",
                              "disc.width_divisor=8", "--overrides", "train.steps=0"},
                             &error);
    checkpoint = dir.file("run/" + tr::checkpoint_name(0));
    interp::SiameseEmbedder(32, 5).save(dir.file("siamese.dfsar"));
    siamese = dir.file("siamese.dfsar");
    ready = code == 0 && fs::is_regular_file(checkpoint);
  }
};

Models& models() {
  static Models m;
  return m;
}

void round_trips(Check& c) {
  int sizes_ok = 0;
  for (auto [h, w] : {std::pair{256, 256}, {300, 300}, {513, 260}, {384, 700}, {768, 1024}}) {
    const ImageTile x = testsupport::noise_image(3, h, w, static_cast<std::uint64_t>(h * 7 + w));
    const bool same = imageops::stitch(imageops::partition(x, 256, 0)).pixels().storage() == x.pixels().storage();
    sizes_ok += same;
    c.expect(same, "stitch∘partition at " + std::to_string(h) + "×" + std::to_string(w));
  }
  c.note(std::to_string(sizes_ok) + "/5 sizes bit-identical");

  Models& m = models();
  c.expect(m.ready, "fixture checkpoint: " + m.error);
  if (!m.ready) return;
  dataio::save_tile(m.dir.file("scene.png"), testsupport::noise_image(1, 300, 280, 77));
  std::string err;
  const int a = cli_run({"translate", "--checkpoint", m.checkpoint, "--input", m.dir.file("scene.png"), "--output",
                         m.dir.file("t1.png")},
                        &err);
  const int b = cli_run({"translate", "--checkpoint", m.checkpoint, "--input", m.dir.file("scene.png"), "--output",
                         m.dir.file("t2.png")});
  c.expect(a == 0 && b == 0, "translate exit codes: " + err);
  if (a == 0 && b == 0)
    c.expect(io::read_bytes(m.dir.file("t1.png"), "t1") == io::read_bytes(m.dir.file("t2.png"), "t2"),
             "translate output bytes identical");

  // Save, load, and compare evaluation-mode forward passes.
  const auto g = tr::load_generator(m.checkpoint);
  const auto d = tr::load_discriminator(m.checkpoint);
  io::Archive copy;
  io::put_parameters(copy, "generator.", g->params());
  io::put_parameters(copy, "discriminator.", d->params());
  io::save_archive(m.dir.file("copy.dfsar"), copy);
  const io::Archive back = io::load_archive(m.dir.file("copy.dfsar"), "copy");
  gen::Generator g2(g->arch(), 999);
  disc::Discriminator d2(d->arch(), 999);
  io::get_parameters(back, "generator.", g2.params());
  io::get_parameters(back, "discriminator.", d2.params());

  const ag::Var s(random_tensor({1, 2, 256, 256}, 1, 0.5)), t(random_tensor({1, 3, 256, 256}, 2, 0.5));
  const auto o1 = g->forward(s, t, gen::Mode::eval), o2 = g2.forward(s, t, gen::Mode::eval);
  c.expect(o1.image.value().storage() == o2.image.value().storage(), "generator forward bit-identical");
  const ag::Var img(random_tensor({1, 3, 256, 256}, 3, 0.5)), gray(random_tensor({1, 1, 256, 256}, 4, 0.5));
  Tensor edge = random_tensor({1, 1, 256, 256}, 5);
  for (double& v : edge.values()) v = v > 0.8 ? 1.0 : 0.0;
  const ag::Var p1 = d->forward(img, ag::Var(edge), gray, disc::Mode::eval);
  const ag::Var p2 = d2.forward(img, ag::Var(edge), gray, disc::Mode::eval);
  c.expect(p1.value().storage() == p2.value().storage(), "discriminator forward bit-identical");
}

void report(Check& c) {
  Models& m = models();
  c.expect(m.ready, "fixture checkpoint: " + m.error);
  if (!m.ready) return;
  dataio::save_tile(m.dir.file("big.png"), testsupport::noise_image(1, 512, 512, 11));
  std::string err;
  const int code = cli_run({"assess", "--checkpoint", m.checkpoint, "--siamese", m.siamese, "--input",
                            m.dir.file("big.png"), "--out", m.dir.file("report")},
                           &err);
  c.expect(code == 0, "assess exit code " + std::to_string(code) + ": " + err);
  if (code != 0) return;
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(m.dir.file("report"))) names.insert(e.path().filename().string());
  c.expect(names == std::set<std::string>(interp::kReportFiles.begin(), interp::kReportFiles.end()),
           "exactly the five report files");
  std::ifstream in(m.dir.file("report/report.json"));
  const nlohmann::json j = nlohmann::json::parse(in);
  const double conf = j["confidence_percent"].get<double>();
  c.expect(conf >= 0.0 && conf <= 100.0, "confidence in [0, 100]");
  c.expect(j["consistency_summary"]["edge_count"] == 4, "edge count 4");
  c.note("confidence " + fmt(conf) + "%, edges " + j["consistency_summary"]["edge_count"].dump());
}

struct Criterion {
  int id;
  const char* name;
  std::function<void(Check&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "architecture fidelity", architecture},
      {2, "partial convolution oracle", partial_conv},
      {3, "gradient checks", gradients},
      {4, "CFA attention", attention},
      {5, "SSIM kernel", ssim},
      {6, "spectral normalization", spectral},
      {7, "overfit smoke test", overfit},
      {8, "Siamese separation", siamese},
      {9, "spatial consistency ranking", consistency},
      {10, "pipeline round trips", round_trips},
      {11, "report contract", report},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& cr : criteria) {
    if (!only.empty() && !only.count(cr.id)) continue;
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.run(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    failed += !c.ok();
    std::cout << (c.ok() ? "PASS" : "FAIL") << " criterion " << cr.id << " (" << cr.name << ", "
              << fmt(seconds_since(t0), 3) << " s): " << c.summary() << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
