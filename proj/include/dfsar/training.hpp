#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfsar/config.hpp"
#include "dfsar/dataio.hpp"
#include "dfsar/discriminator.hpp"
#include "dfsar/generator.hpp"
#include "dfsar/interpretability.hpp"
#include "dfsar/losses.hpp"
#include "dfsar/preprocess.hpp"

namespace dfsar::training {

/// SplitMix64 finalizer; derives independent streams from (seed, counter).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter);

struct TrainConfig {
  double learning_rate = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  int batch_size = 4;
  long long steps = 1000;
  loss::LossWeights weights;
  std::uint64_t seed = 0;
  long long checkpoint_every = 100;
  bool toy_mode = false;
  double label_smoothing = 0.0;
  double ffl_alpha = 1.0;
  std::string perceptual_extractor;

  gen::GeneratorArch generator;
  disc::DiscriminatorArch discriminator;
  preprocess::PreprocessConfig preprocess;
  dataio::AugmentConfig augment;
  bool augment_enabled = true;

  void validate() const;
  /// Resolves every "auto" key from toy_mode and the input size.
  static TrainConfig from_config(const Config& cfg);
};

preprocess::PreprocessConfig preprocess_from_config(const Config& cfg);

/// Raw SAR/EO pairs held in memory, both as 3-channel tiles in [-1, 1].
class PairDataset {
 public:
  PairDataset() = default;
  explicit PairDataset(std::vector<std::pair<ImageTile, ImageTile>> pairs);
  /// Loads the train split; rejected manifest rows are ignored.
  static PairDataset from_manifest(const dataio::Manifest& manifest, dataio::Split split = dataio::Split::train);

  std::size_t size() const { return pairs_.size(); }
  const std::pair<ImageTile, ImageTile>& operator[](std::size_t i) const { return pairs_[i]; }

 private:
  std::vector<std::pair<ImageTile, ImageTile>> pairs_;
};

/// Network-ready tensors for one step.
struct Batch {
  std::vector<int> indices;
  Tensor structure;     ///< N×2×S×S
  Tensor texture;       ///< N×3×S×S
  Tensor target;        ///< N×3×S×S
  Tensor target_edges;  ///< N×1×S×S
  Tensor target_gray;   ///< N×1×S×S
};

struct StepMetrics {
  long long step = 0;
  double d_loss = 0.0;
  std::map<std::string, double> terms;  ///< g_adv … g_feat, total
  double d_min = 1.0, d_max = 0.0;      ///< range of every discriminator probability seen

  /// The training-log record.
  nlohmann::json to_json() const;
};

/// Owns both networks and their optimizers; one `step()` is one discriminator
/// update followed by one generator update.
class Trainer {
 public:
  Trainer(TrainConfig cfg, PairDataset data);
  ~Trainer();

  const TrainConfig& config() const { return cfg_; }
  long long steps_done() const { return step_; }
  gen::Generator& generator() { return *gen_; }
  disc::Discriminator& discriminator() { return *disc_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  StepMetrics step();

  // Phases of one step, exposed for isolation tests.
  struct Prepared {
    Batch batch;
    gen::GeneratorOutput out;
    ag::Var fake_gray;  ///< differentiable luma of the generated image
    Tensor fake_edges;
  };
  Batch draw_batch(long long step) const;
  Prepared prepare(const Batch& batch, long long step);
  void update_discriminator(const Prepared& p, StepMetrics& m);
  void update_generator(const Prepared& p, StepMetrics& m);

  void save_checkpoint(const std::string& path, const std::string& config_dump = "") const;
  /// Restores networks, optimizer moments and the step counter.
  void restore(const std::string& path);

 private:
  TrainConfig cfg_;
  PairDataset data_;
  std::unique_ptr<gen::Generator> gen_;
  std::unique_ptr<disc::Discriminator> disc_;
  std::unique_ptr<nn::Adam> adam_g_, adam_d_;
  std::unique_ptr<loss::FeatureExtractor> extractor_;
  std::vector<std::string> warnings_;
  long long step_ = 0;
};

/// checkpoint_000123.dfsar
std::string checkpoint_name(long long step);
/// Steps at which `train` writes a checkpoint.
std::vector<long long> checkpoint_schedule(long long steps, long long every);
/// Highest-numbered checkpoint in `dir`, if any.
std::optional<std::string> latest_checkpoint(const std::string& dir);

struct TrainResult {
  std::vector<std::string> checkpoints;
  std::string final_checkpoint;
  long long first_step = 1;
  std::vector<StepMetrics> metrics;
  std::vector<std::string> warnings;
};

/// Runs the remaining steps, writing checkpoints and train_log.jsonl into
/// `out_dir`. With `resume` the latest checkpoint there is restored first and
/// the log is cut back to its step.
TrainResult train(const PairDataset& data, const TrainConfig& cfg, const std::string& out_dir, bool resume = false,
                  const std::string& config_dump = "",
                  const std::function<void(const StepMetrics&)>& on_step = nullptr);

/// Generator or discriminator stored in a training checkpoint. Missing files
/// raise MissingAssetError("generator checkpoint") / ("discriminator checkpoint").
std::unique_ptr<gen::Generator> load_generator(const std::string& path);
std::unique_ptr<disc::Discriminator> load_discriminator(const std::string& path);

// ---------------------------------------------------------------- Siamese

struct SiameseConfig {
  int input_size = 128;
  double margin = 1.0;
  long long steps = 1000;
  int batch_size = 16;
  double learning_rate = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  std::uint64_t seed = 0;

  void validate() const;
  static SiameseConfig from_config(const Config& cfg);
};

struct SiameseStep {
  long long step = 0;
  double loss = 0.0;
  double mean_positive = 0.0;  ///< mean matched-pair distance
  double mean_negative = 0.0;  ///< mean mismatched-pair distance
};

/// Contrastive training on matched pairs; negatives pair each SAR with the EO
/// of another batch member (a derangement). Requires at least two pairs.
std::unique_ptr<interp::SiameseEmbedder> train_siamese(
    const PairDataset& data, const SiameseConfig& cfg,
    const std::function<void(const SiameseStep&)>& on_step = nullptr);

}  // namespace dfsar::training
