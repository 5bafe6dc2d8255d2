#include "dfsar/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "dfsar/archive.hpp"
#include "dfsar/error.hpp"
#include "dfsar/imageops.hpp"

namespace dfsar::training {

namespace fs = std::filesystem;

namespace {

constexpr int kCheckpointFormat = 1;
constexpr const char* kCheckpointKind = "training_checkpoint";
constexpr const char* kLogName = "train_log.jsonl";

// Stream tags for mix_seed.
constexpr std::uint64_t kGeneratorInit = 0x67656e;
constexpr std::uint64_t kDiscriminatorInit = 0x646973;
constexpr std::uint64_t kDropoutStream = 0x64726f70;
constexpr std::uint64_t kSiameseInit = 0x7369616d;

int auto_levels(int input_size) {
  int levels = 0;
  while ((input_size >> (levels + 1)) >= 2 && input_size % (1 << (levels + 1)) == 0) ++levels;
  return std::min(levels, gen::GeneratorArch::reference().levels);
}

std::string batch_label(const std::vector<int>& idx) {
  std::string s = "[";
  for (std::size_t i = 0; i < idx.size(); ++i) s += (i ? "," : "") + std::to_string(idx[i]);
  return s + "]";
}

Tensor gray_edges_batch(const Tensor& gray, const preprocess::CannyOptions& canny) {
  Tensor out(gray.shape());
  const std::size_t plane = static_cast<std::size_t>(gray.dim(2)) * gray.dim(3);
  for (int n = 0; n < gray.dim(0); ++n) {
    const ImageTile e = preprocess::canny_edges(ImageTile::from_batch(gray, n), canny);
    std::copy_n(e.pixels().data(), plane, out.data() + n * plane);
  }
  return out;
}

// Disables gradients of a parameter set for one scope.
class FreezeGuard {
 public:
  explicit FreezeGuard(nn::ParameterSet& ps) : ps_(ps) {
    for (auto& [name, p] : ps_.params()) p.node()->requires_grad = false;
  }
  ~FreezeGuard() {
    for (auto& [name, p] : ps_.params()) p.node()->requires_grad = true;
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  nn::ParameterSet& ps_;
};

nlohmann::json adam_state(const nn::Adam& a) { return {{"steps", a.steps_taken()}}; }

void put_adam(io::Archive& a, const std::string& prefix, const nn::Adam& opt) {
  io::put_tensor_map(a, prefix + "m.", opt.first_moments());
  io::put_tensor_map(a, prefix + "v.", opt.second_moments());
}

void get_adam(const io::Archive& a, const std::string& prefix, nn::Adam& opt, const nlohmann::json& state) {
  io::get_tensor_map(a, prefix + "m.", opt.first_moments());
  io::get_tensor_map(a, prefix + "v.", opt.second_moments());
  opt.set_steps_taken(state.at("steps").get<long long>());
}

io::Archive load_checkpoint(const std::string& path, const std::string& asset) {
  io::Archive a = io::load_archive(path, asset);
  DFSAR_REQUIRE(a.manifest.value("kind", "") == kCheckpointKind, path + " is not a training checkpoint");
  DFSAR_REQUIRE(a.manifest.value("format", 0) == kCheckpointFormat,
                path + ": unsupported checkpoint format " + std::to_string(a.manifest.value("format", 0)));
  return a;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  DFSAR_REQUIRE(std::isfinite(learning_rate) && learning_rate > 0.0, "train: learning_rate must be positive");
  DFSAR_REQUIRE(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "train: adam_beta1 must lie in [0, 1)");
  DFSAR_REQUIRE(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "train: adam_beta2 must lie in [0, 1)");
  DFSAR_REQUIRE(batch_size >= 1, "train: batch_size must be positive");
  DFSAR_REQUIRE(steps >= 0, "train: steps must be non-negative");
  DFSAR_REQUIRE(checkpoint_every >= 1, "train: checkpoint_every must be positive");
  DFSAR_REQUIRE(label_smoothing >= 0.0 && label_smoothing < 0.5, "train: label_smoothing must lie in [0, 0.5)");
  DFSAR_REQUIRE(ffl_alpha >= 0.0, "train: ffl_alpha must be non-negative");
  weights.validate();
  generator.validate();
  discriminator.validate();
  DFSAR_REQUIRE(generator.input_size == discriminator.input_size,
                "train: generator and discriminator input sizes differ");
  DFSAR_REQUIRE(augment.crop == generator.input_size, "train: augment.crop must equal the model input size");
  DFSAR_REQUIRE(augment.resize_to >= augment.crop, "train: augment.resize must be at least augment.crop");
  DFSAR_REQUIRE(augment.flip_probability >= 0.0 && augment.flip_probability <= 1.0,
                "train: augment.flip_probability must lie in [0, 1]");
}

preprocess::PreprocessConfig preprocess_from_config(const Config& cfg) {
  preprocess::PreprocessConfig p;
  p.despeckle_window = static_cast<int>(cfg.integer("despeckle.window"));
  p.canny.low = cfg.real("canny.low");
  p.canny.high = cfg.real("canny.high");
  p.canny.sigma = cfg.real("canny.sigma");
  const std::vector<double> w = cfg.reals("grayscale.weights");
  DFSAR_REQUIRE(w.size() == 3, "grayscale.weights needs three values");
  std::copy(w.begin(), w.end(), p.gray_weights.begin());
  return p;
}

TrainConfig TrainConfig::from_config(const Config& cfg) {
  TrainConfig t;
  t.toy_mode = cfg.boolean("model.toy_mode");
  t.seed = static_cast<std::uint64_t>(cfg.integer("seed"));

  gen::GeneratorArch g = t.toy_mode ? gen::GeneratorArch::toy() : gen::GeneratorArch::reference();
  if (!cfg.is_auto("model.input_size")) {
    g.input_size = static_cast<int>(cfg.integer("model.input_size"));
    g.levels = auto_levels(g.input_size);
  }
  if (!cfg.is_auto("model.levels")) g.levels = static_cast<int>(cfg.integer("model.levels"));
  if (!cfg.is_auto("model.width_divisor")) g.width_divisor = static_cast<int>(cfg.integer("model.width_divisor"));
  g.dropout = cfg.real("model.dropout");
  g.bigff_cross = cfg.boolean("model.bigff_cross");
  g.cfa_patch = static_cast<int>(cfg.integer("cfa.patch"));
  g.cfa_memory_budget_mb = cfg.real("cfa.memory_budget_mb");
  t.generator = g;

  disc::DiscriminatorArch d = t.toy_mode ? disc::DiscriminatorArch::toy() : disc::DiscriminatorArch::reference();
  d.input_size = g.input_size;
  if (!cfg.is_auto("disc.width_divisor")) d.width_divisor = static_cast<int>(cfg.integer("disc.width_divisor"));
  d.sn_warmup = static_cast<int>(cfg.integer("disc.sn_warmup"));
  t.discriminator = d;

  t.learning_rate = cfg.real("train.learning_rate");
  t.adam_beta1 = cfg.real("train.adam_beta1");
  t.adam_beta2 = cfg.real("train.adam_beta2");
  t.batch_size = cfg.is_auto("train.batch_size") ? (t.toy_mode ? 16 : 4)
                                                 : static_cast<int>(cfg.integer("train.batch_size"));
  t.steps = cfg.integer("train.steps");
  t.checkpoint_every = cfg.integer("train.checkpoint_every");
  t.label_smoothing = cfg.real("train.label_smoothing");

  t.weights.adv = cfg.real("loss.w_adv");
  t.weights.pix = cfg.real("loss.w_pix");
  t.weights.ffl = cfg.real("loss.w_ffl");
  t.weights.perc = cfg.real("loss.w_perc");
  t.weights.style = cfg.real("loss.w_style");
  t.weights.feat = cfg.real("loss.w_feat");
  t.ffl_alpha = cfg.real("loss.ffl_alpha");
  t.perceptual_extractor = cfg.str("loss.perceptual_extractor");

  t.preprocess = preprocess_from_config(cfg);
  t.augment_enabled = cfg.boolean("augment.enabled");
  t.augment.crop = cfg.is_auto("augment.crop") ? g.input_size : static_cast<int>(cfg.integer("augment.crop"));
  t.augment.resize_to = cfg.is_auto("augment.resize")
                            ? static_cast<int>(std::lround(g.input_size * 286.0 / 256.0))
                            : static_cast<int>(cfg.integer("augment.resize"));
  t.augment.flip_probability = cfg.real("augment.flip_probability");
  t.validate();
  return t;
}

// ---------------------------------------------------------------- data

PairDataset::PairDataset(std::vector<std::pair<ImageTile, ImageTile>> pairs) : pairs_(std::move(pairs)) {
  for (auto& [sar, eo] : pairs_) {
    DFSAR_REQUIRE(sar.height() == eo.height() && sar.width() == eo.width(), "dataset: SAR/EO sizes differ");
    sar = preprocess::ensure_rgb(sar);
    eo = preprocess::ensure_rgb(eo);
  }
}

PairDataset PairDataset::from_manifest(const dataio::Manifest& manifest, dataio::Split split) {
  std::vector<std::pair<ImageTile, ImageTile>> pairs;
  for (const auto& e : manifest.split(split))
    pairs.emplace_back(dataio::load_tile(e.sar_path), dataio::load_tile(e.eo_path));
  return PairDataset(std::move(pairs));
}

nlohmann::json StepMetrics::to_json() const {
  nlohmann::json j = {{"step", step}, {"d_loss", d_loss}};
  for (const char* k : {"g_adv", "g_pix", "g_ffl", "g_perc", "g_style", "g_feat", "total"}) {
    auto it = terms.find(k);
    j[k] = it == terms.end() ? 0.0 : it->second;
  }
  return j;
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(TrainConfig cfg, PairDataset data) : cfg_(std::move(cfg)), data_(std::move(data)) {
  cfg_.validate();
  DFSAR_REQUIRE(data_.size() >= 1, "train: the dataset has no training pairs");
  gen_ = std::make_unique<gen::Generator>(cfg_.generator, mix_seed(cfg_.seed, kGeneratorInit));
  disc_ = std::make_unique<disc::Discriminator>(cfg_.discriminator, mix_seed(cfg_.seed, kDiscriminatorInit));
  const nn::AdamOptions opts{.lr = cfg_.learning_rate, .beta1 = cfg_.adam_beta1, .beta2 = cfg_.adam_beta2};
  adam_g_ = std::make_unique<nn::Adam>(gen_->params(), opts);
  adam_d_ = std::make_unique<nn::Adam>(disc_->params(), opts);
  if (!cfg_.perceptual_extractor.empty()) {
    extractor_ = loss::ConvExtractor::load(cfg_.perceptual_extractor);
  } else if (cfg_.weights.perc > 0.0 || cfg_.weights.style > 0.0) {
    warnings_.push_back(
        "no perceptual extractor configured: the perceptual term is disabled and the style term compares raw images");
  }
}

Trainer::~Trainer() = default;

Batch Trainer::draw_batch(long long step) const {
  std::mt19937_64 rng(mix_seed(cfg_.seed, static_cast<std::uint64_t>(step)));
  std::vector<int> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  const int n = cfg_.batch_size;
  const int s = cfg_.generator.input_size;
  Batch b;
  std::vector<ImageTile> structure, texture, target, gray, edges;
  for (int i = 0; i < n; ++i) {
    const int idx = order[static_cast<std::size_t>(i) % order.size()];
    b.indices.push_back(idx);
    const std::uint64_t aug_seed = rng();
    auto [sar, eo] = data_[idx];
    if (cfg_.augment_enabled) {
      std::tie(sar, eo) = dataio::augment(sar, eo, aug_seed, cfg_.augment);
    } else if (sar.height() != s || sar.width() != s) {
      sar = imageops::resize_bilinear(sar, s, s);
      eo = imageops::resize_bilinear(eo, s, s);
    }
    preprocess::SampleTriplet t = preprocess::assemble_triplet(sar, eo, cfg_.preprocess);
    ImageTile g = preprocess::to_grayscale(*t.target, cfg_.preprocess.gray_weights);
    edges.push_back(preprocess::canny_edges(g, cfg_.preprocess.canny));
    gray.push_back(std::move(g));
    structure.push_back(std::move(t.structure));
    texture.push_back(std::move(t.texture));
    target.push_back(std::move(*t.target));
  }
  b.structure = stack_tiles(structure);
  b.texture = stack_tiles(texture);
  b.target = stack_tiles(target);
  b.target_gray = stack_tiles(gray);
  b.target_edges = stack_tiles(edges);
  return b;
}

Trainer::Prepared Trainer::prepare(const Batch& batch, long long step) {
  std::mt19937_64 rng(mix_seed(mix_seed(cfg_.seed, static_cast<std::uint64_t>(step)), kDropoutStream));
  Prepared p;
  p.batch = batch;
  p.out = gen_->forward(ag::Var(batch.structure), ag::Var(batch.texture), gen::Mode::train, &rng);
  const auto& w = cfg_.preprocess.gray_weights;
  p.fake_gray = ag::channel_weighted_sum(p.out.image, {w.begin(), w.end()});
  p.fake_edges = gray_edges_batch(p.fake_gray.value(), cfg_.preprocess.canny);
  return p;
}

void Trainer::update_discriminator(const Prepared& p, StepMetrics& m) {
  disc_->params().zero_grad();
  const ag::Var real = disc_->forward(ag::Var(p.batch.target), ag::Var(p.batch.target_edges),
                                      ag::Var(p.batch.target_gray), disc::Mode::train);
  const ag::Var fake = disc_->forward(p.out.image.detach(), ag::Var(p.fake_edges), p.fake_gray.detach(),
                                      disc::Mode::train);
  for (const ag::Var* v : {&real, &fake})
    for (double x : v->value().values()) {
      m.d_min = std::min(m.d_min, x);
      m.d_max = std::max(m.d_max, x);
    }
  const ag::Var d = ag::scale(
      ag::add(loss::adversarial(real, 1.0 - cfg_.label_smoothing), loss::adversarial(fake, 0.0)), 0.5);
  m.d_loss = d.item();
  if (!std::isfinite(m.d_loss))
    throw NumericalError("non-finite discriminator loss at step " + std::to_string(m.step) + ", batch " +
                         batch_label(p.batch.indices));
  ag::backward(d);
  adam_d_->step();
}

void Trainer::update_generator(const Prepared& p, StepMetrics& m) {
  gen_->params().zero_grad();
  loss::TotalLoss total;
  {
    FreezeGuard frozen(disc_->params());
    const ag::Var pred = disc_->forward(p.out.image, ag::Var(p.fake_edges), p.fake_gray, disc::Mode::frozen);
    for (double x : pred.value().values()) {
      m.d_min = std::min(m.d_min, x);
      m.d_max = std::max(m.d_max, x);
    }
    const ag::Var target(p.batch.target);
    loss::GeneratorTerms terms;
    terms.adv = loss::adversarial(pred, 1.0);
    terms.pix = loss::pixel(p.out.image, target);
    terms.ffl = loss::focal_frequency(p.out.image, target, cfg_.ffl_alpha);
    if (extractor_) {
      terms.perc = loss::perceptual(p.out.image, target, *extractor_);
      std::vector<ag::Var> real_feats;
      {
        ag::NoGradGuard guard;
        real_feats = extractor_->features(target);
      }
      terms.style = loss::style(extractor_->features(p.out.image), real_feats);
    } else {
      terms.style = loss::style({p.out.image}, {target});
    }
    terms.feat = loss::feature(p.out.aux_texture, p.out.aux_structure, p.batch.target, p.batch.target_edges);
    try {
      total = loss::total_generator(terms, cfg_.weights);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " at step " + std::to_string(m.step) + ", batch " +
                           batch_label(p.batch.indices));
    }
    ag::backward(total.total);
  }
  adam_g_->step();
  m.terms = total.values;
}

StepMetrics Trainer::step() {
  StepMetrics m;
  m.step = step_ + 1;
  const Prepared p = prepare(draw_batch(m.step), m.step);
  update_discriminator(p, m);
  update_generator(p, m);
  step_ = m.step;
  return m;
}

void Trainer::save_checkpoint(const std::string& path, const std::string& config_dump) const {
  io::Archive a;
  a.manifest = {{"kind", kCheckpointKind},
                {"format", kCheckpointFormat},
                {"step", step_},
                {"seed", cfg_.seed},
                {"generator", cfg_.generator.to_json()},
                {"discriminator", cfg_.discriminator.to_json()},
                {"config", config_dump},
                {"config_hash", io::sha256_hex(config_dump)},
                {"rng", {{"seed", cfg_.seed}, {"step", step_}}},
                {"adam", {{"g", adam_state(*adam_g_)}, {"d", adam_state(*adam_d_)}}}};
  io::put_parameters(a, "generator.", gen_->params());
  io::put_parameters(a, "discriminator.", disc_->params());
  put_adam(a, "adam.g.", *adam_g_);
  put_adam(a, "adam.d.", *adam_d_);
  io::save_archive(path, a);
}

void Trainer::restore(const std::string& path) {
  const io::Archive a = load_checkpoint(path, "training checkpoint");
  const gen::GeneratorArch g = gen::GeneratorArch::from_json(a.manifest.at("generator"));
  const disc::DiscriminatorArch d = disc::DiscriminatorArch::from_json(a.manifest.at("discriminator"));
  DFSAR_REQUIRE(g == cfg_.generator, "architecture mismatch: checkpoint generator differs from the configuration");
  DFSAR_REQUIRE(d == cfg_.discriminator,
                "architecture mismatch: checkpoint discriminator differs from the configuration");
  io::get_parameters(a, "generator.", gen_->params());
  io::get_parameters(a, "discriminator.", disc_->params());
  get_adam(a, "adam.g.", *adam_g_, a.manifest.at("adam").at("g"));
  get_adam(a, "adam.d.", *adam_d_, a.manifest.at("adam").at("d"));
  cfg_.seed = a.manifest.at("rng").at("seed").get<std::uint64_t>();
  step_ = a.manifest.at("rng").at("step").get<long long>();
}

// ---------------------------------------------------------------- train

std::string checkpoint_name(long long step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "checkpoint_%06lld.dfsar", step);
  return buf;
}

std::vector<long long> checkpoint_schedule(long long steps, long long every) {
  DFSAR_REQUIRE(steps >= 0 && every >= 1, "checkpoint schedule: bad arguments");
  std::vector<long long> s;
  for (long long k = every; k <= steps; k += every) s.push_back(k);
  if (s.empty() || s.back() != steps) s.push_back(steps);
  return s;
}

std::optional<std::string> latest_checkpoint(const std::string& dir) {
  if (!fs::is_directory(dir)) return std::nullopt;
  static const std::regex pattern(R"(checkpoint_(\d+)\.dfsar)");
  long long best = -1;
  std::optional<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch match;
    const std::string name = entry.path().filename().string();
    if (!std::regex_match(name, match, pattern)) continue;
    const long long step = std::stoll(match[1].str());
    if (step > best) {
      best = step;
      out = entry.path().string();
    }
  }
  return out;
}

namespace {

// Keeps only log lines whose step is at most `last`.
void truncate_log(const fs::path& log, long long last) {
  std::ifstream in(log);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.value("step", 0LL) <= last) keep.push_back(line);
  }
  in.close();
  std::ofstream out(log, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

}  // namespace

TrainResult train(const PairDataset& data, const TrainConfig& cfg, const std::string& out_dir, bool resume,
                  const std::string& config_dump, const std::function<void(const StepMetrics&)>& on_step) {
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  const fs::path log_path = dir / kLogName;

  Trainer trainer(cfg, data);
  const std::optional<std::string> last = resume ? latest_checkpoint(out_dir) : std::nullopt;
  if (last) {
    trainer.restore(*last);
    truncate_log(log_path, trainer.steps_done());
  } else {
    std::ofstream(log_path, std::ios::trunc);
  }

  TrainResult result;
  result.warnings = trainer.warnings();
  result.first_step = trainer.steps_done() + 1;
  const std::vector<long long> schedule = checkpoint_schedule(cfg.steps, cfg.checkpoint_every);
  const std::set<long long> at(schedule.begin(), schedule.end());

  auto save = [&] {
    const std::string path = (dir / checkpoint_name(trainer.steps_done())).string();
    trainer.save_checkpoint(path, config_dump);
    result.checkpoints.push_back(path);
    result.final_checkpoint = path;
  };

  if (cfg.steps == 0 && trainer.steps_done() == 0) save();
  std::ofstream log(log_path, std::ios::app);
  while (trainer.steps_done() < cfg.steps) {
    StepMetrics m = trainer.step();
    log << m.to_json().dump() << "\n";
    log.flush();
    if (on_step) on_step(m);
    if (at.count(m.step)) save();
    result.metrics.push_back(std::move(m));
  }
  if (result.final_checkpoint.empty() && last) result.final_checkpoint = *last;
  return result;
}

std::unique_ptr<gen::Generator> load_generator(const std::string& path) {
  const io::Archive a = load_checkpoint(path, "generator checkpoint");
  auto g = std::make_unique<gen::Generator>(gen::GeneratorArch::from_json(a.manifest.at("generator")), 0);
  io::get_parameters(a, "generator.", g->params());
  return g;
}

std::unique_ptr<disc::Discriminator> load_discriminator(const std::string& path) {
  const io::Archive a = load_checkpoint(path, "discriminator checkpoint");
  disc::DiscriminatorArch arch = disc::DiscriminatorArch::from_json(a.manifest.at("discriminator"));
  // Stored singular vectors replace the warm-up estimate.
  arch.sn_warmup = 0;
  auto d = std::make_unique<disc::Discriminator>(arch, 0);
  io::get_parameters(a, "discriminator.", d->params());
  return d;
}

// ---------------------------------------------------------------- Siamese

void SiameseConfig::validate() const {
  DFSAR_REQUIRE(input_size >= 4 && input_size % 4 == 0, "siamese: input_size must be a positive multiple of 4");
  DFSAR_REQUIRE(margin > 0.0, "siamese: margin must be positive");
  DFSAR_REQUIRE(steps >= 0, "siamese: steps must be non-negative");
  DFSAR_REQUIRE(batch_size >= 2, "siamese: batch_size must be at least 2");
  DFSAR_REQUIRE(learning_rate > 0.0, "siamese: learning_rate must be positive");
  DFSAR_REQUIRE(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
                "siamese: Adam betas must lie in [0, 1)");
}

SiameseConfig SiameseConfig::from_config(const Config& cfg) {
  SiameseConfig s;
  s.input_size = static_cast<int>(cfg.integer("siamese.input_size"));
  s.margin = cfg.real("siamese.margin");
  s.steps = cfg.integer("siamese.steps");
  s.batch_size = static_cast<int>(cfg.integer("siamese.batch_size"));
  s.learning_rate = cfg.real("siamese.learning_rate");
  s.adam_beta1 = cfg.real("train.adam_beta1");
  s.adam_beta2 = cfg.real("train.adam_beta2");
  s.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  s.validate();
  return s;
}

std::unique_ptr<interp::SiameseEmbedder> train_siamese(const PairDataset& data, const SiameseConfig& cfg,
                                                       const std::function<void(const SiameseStep&)>& on_step) {
  cfg.validate();
  DFSAR_REQUIRE(data.size() >= 2, "train-siamese: at least two pairs are needed to form negatives");
  auto embedder = std::make_unique<interp::SiameseEmbedder>(cfg.input_size, mix_seed(cfg.seed, kSiameseInit));
  nn::Adam adam(embedder->params(),
                {.lr = cfg.learning_rate, .beta1 = cfg.adam_beta1, .beta2 = cfg.adam_beta2});

  std::vector<Tensor> sar, eo;
  for (std::size_t i = 0; i < data.size(); ++i) {
    sar.push_back(embedder->prepare(data[i].first));
    eo.push_back(embedder->prepare(data[i].second));
  }
  auto stack = [](const std::vector<Tensor>& all, const std::vector<int>& idx) {
    const Shape& s = all.front().shape();
    const std::size_t len = all.front().size();
    Tensor out({static_cast<int>(idx.size()), s[1], s[2], s[3]});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(all[idx[i]].data(), len, out.data() + i * len);
    return out;
  };

  const int b = static_cast<int>(std::min<std::size_t>(cfg.batch_size, data.size()));
  for (long long step = 1; step <= cfg.steps; ++step) {
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step)));
    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(b);
    // A cyclic shift by 1..b-1 leaves no sample paired with itself.
    const int shift = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(b - 1));
    std::vector<int> derange(b);
    for (int i = 0; i < b; ++i) derange[i] = (i + shift) % b;

    embedder->params().zero_grad();
    const ag::Var ea = embedder->embed(ag::Var(stack(sar, order)));
    const ag::Var eb = embedder->embed(ag::Var(stack(eo, order)));
    const ag::Var d_pos = ag::row_distance(ea, eb);
    const ag::Var d_neg = ag::row_distance(ea, ag::gather_rows(eb, derange));
    const ag::Var l = ag::scale(ag::add(loss::contrastive(d_pos, std::vector<bool>(b, true), cfg.margin),
                                        loss::contrastive(d_neg, std::vector<bool>(b, false), cfg.margin)),
                                0.5);
    SiameseStep rec{step, l.item(), 0.0, 0.0};
    if (!std::isfinite(rec.loss)) throw NumericalError("non-finite Siamese loss at step " + std::to_string(step));
    for (int i = 0; i < b; ++i) {
      rec.mean_positive += d_pos.value()[i] / b;
      rec.mean_negative += d_neg.value()[i] / b;
    }
    ag::backward(l);
    adam.step();
    if (on_step) on_step(rec);
  }
  return embedder;
}

}  // namespace dfsar::training
