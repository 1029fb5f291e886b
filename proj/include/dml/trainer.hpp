#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dml/cdvae.hpp"
#include "dml/corpus.hpp"
#include "dml/model.hpp"

namespace dml {

struct TrainConfig {
  std::string preset = "desk";
  std::size_t total_steps = 1500;
  std::size_t images_per_batch = 16;
  std::size_t sampled_caps_per_image = 1;
  double learning_rate = 2e-4;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 100;
  double grad_clip_norm = 1.0;
  double label_smoothing = 0.1;
  double beta = 0.25;
  MaskingStrategy masking;
  AssignStrategy assign = AssignStrategy::kHungarian;
  std::uint64_t seed = 1;
  std::size_t usage_interval = 100;
  std::size_t checkpoint_interval = 0;  // 0: final checkpoint only

  void validate(std::size_t caps_per_image) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

TrainConfig desk_train_preset();
// 100k iterations, 64 images, lr 2e-4, warmup 2000.
TrainConfig paper_train_preset();

// Linear warmup to the base rate, then cosine decay reaching 0 at total_steps.
double learning_rate_at(const TrainConfig& cfg, std::size_t step);

// Rescales all gradients to global norm `max_norm` when above it. Returns the
// factor applied (1 when untouched).
double clip_gradients(std::vector<std::span<double>> grads, double max_norm);
double clip_gradients(ParameterStore& params, double max_norm);

class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };
  struct State {
    std::vector<double> m, v;
  };

  AdamW() = default;
  explicit AdamW(Options options) : opt_(options) {}

  // One update of every parameter holding a gradient. Decay applies to
  // matrices other than the codebook.
  void step(ParameterStore& params, double lr);
  // Same rule on a bare buffer; `decay` selects decoupled weight decay.
  void update(const std::string& name, std::span<double> value, std::span<const double> grad, double lr,
              bool decay);
  void advance() { ++t_; }

  std::uint64_t steps_taken() const { return t_; }
  void set_steps_taken(std::uint64_t t) { t_ = t; }
  const Options& options() const { return opt_; }
  std::map<std::string, State>& state() { return state_; }
  const std::map<std::string, State>& state() const { return state_; }

 private:
  Options opt_;
  std::uint64_t t_ = 0;
  std::map<std::string, State> state_;
};

struct StepMetrics {
  std::size_t step = 0;
  double cdvae_loss = 0.0;
  double mic_loss = 0.0;
  double nat_loss = 0.0;
  double vq_loss = 0.0;
  double commit_loss = 0.0;
  double total_loss = 0.0;
  double lr = 0.0;
  double grad_norm_scale = 1.0;
  std::size_t effective_modes = 0;

  nlohmann::json to_json() const;
};

class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, std::vector<TrainingExample> data);
  // Continues from a saved checkpoint directory.
  static Trainer resume(const std::filesystem::path& checkpoint_dir, std::vector<TrainingExample> data);

  // Runs the next step. Throws NumericError on a non-finite loss or gradient.
  StepMetrics train_step();

  // Trains until `stop_at` (default total_steps), writing logs and
  // checkpoints under `out_dir`. Returns the last step's metrics.
  StepMetrics run(const std::filesystem::path& out_dir, std::optional<std::size_t> stop_at = std::nullopt);

  void save(const std::filesystem::path& dir) const;

  DmlModel& model() { return *model_; }
  const DmlModel& model() const { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  AdamW& optimizer() { return opt_; }
  std::size_t step() const { return step_; }
  std::size_t injectivity_checks() const { return injectivity_checks_; }
  std::size_t isolation_checks() const { return isolation_checks_; }
  void set_vocabulary(Vocabulary vocab) { vocab_ = std::move(vocab); }
  const StepMetrics& last_metrics() const { return last_; }

  // Image indices of the batch used at `step`.
  std::vector<std::size_t> batch_indices(std::size_t step) const;
  // Caption indices fed to the captioning branch for one image.
  std::vector<std::size_t> sampled_captions(std::size_t step, std::size_t image, std::size_t n_caps) const;

 private:
  Trainer() = default;
  StepMetrics checked_step();
  void write_diagnostic(const StepMetrics& partial, const std::string& reason) const;

  std::unique_ptr<DmlModel> model_;
  TrainConfig cfg_;
  std::vector<TrainingExample> data_;
  AdamW opt_;
  std::size_t step_ = 0;
  std::size_t injectivity_checks_ = 0;
  std::size_t isolation_checks_ = 0;
  std::optional<Vocabulary> vocab_;
  StepMetrics last_;
  StepMetrics pending_;
  std::filesystem::path out_dir_;
};

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + tensors.bin (little-endian float64, row-major)
// + optional vocab.json.

constexpr int kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointContents {
  ModelConfig model_config;
  TrainConfig train_config;
  std::size_t step = 0;
  nlohmann::json metrics;
  std::vector<std::uint64_t> usage_counts;
  std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
  std::optional<Vocabulary> vocab;
};

void write_checkpoint(const std::filesystem::path& dir, const CheckpointContents& contents);
CheckpointContents read_checkpoint(const std::filesystem::path& dir);

// Model-only loading for generation and analysis.
std::unique_ptr<DmlModel> load_model(const std::filesystem::path& dir, std::optional<Vocabulary>* vocab = nullptr);

}  // namespace dml
