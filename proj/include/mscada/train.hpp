#pragma once

// Training loop, optimiser, evaluation metrics and run configuration.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mscada/mixing.hpp"
#include "mscada/pseudo.hpp"
#include "mscada/segnet.hpp"
#include "mscada/synthdata.hpp"

namespace mscada {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::size_t line, std::size_t column)
      : std::runtime_error(what), line_(line), column_(column) {}
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

struct TrainConfig {
  std::string scenario = "equality2";
  std::string data;  // dataset root; empty → generate the scenario in memory
  std::size_t iterations = 2000;
  std::size_t batch_size = 4;
  double lr_backbone = 6e-5;
  double lr_head = 6e-4;
  double alpha = 1.0;
  double beta = 1.0;
  double tau = 0.968;
  double class_ratio = 0.5;
  double region_ratio = 0.4;
  double ema_decay = 0.999;
  std::size_t K_s = 64;
  std::size_t K_f = 8;
  std::size_t N_f = 16;
  std::size_t backbone_channels = 16;
  std::size_t backbone_depth = 4;
  std::size_t head_pool = 2;
  std::size_t spatial_width = 16;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;

  bool disable_mixing = false;
  bool disable_hgcn = false;
  bool combined_source = false;
  bool best_expert = false;
  bool summation_fusion = false;
  bool strong_transform = true;
  double colour_jitter = 0.2;  // strong-view gain range ±j, bias ±j/2
  bool eval_teacher = false;

  std::size_t eval_every = 500;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only

  // Throws ContractError.
  void validate() const;
  FusionMode fusion() const;
  ModelConfig model_config(const Scenario& scenario) const;
};

// JSON text with TrainConfig field names; unknown fields are rejected.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string dump_train_config(const TrainConfig& config);

// full | no-mixing | no-hgcn | combined-source | best-expert | summation
void apply_ablation(TrainConfig& config, const std::string& name);
const std::vector<std::string>& ablation_names();

// ---------------------------------------------------------------------------
// Optimiser

struct AdamOptions {
  double lr_backbone = 6e-5;
  double lr_head = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(const std::vector<Parameter>& params, AdamOptions options);

  // One bias-corrected step using each parameter's accumulated gradient.
  // Parameters that received no gradient keep their moments and value.
  void step();
  double rate(ParamGroup group) const;
  // Learning rate applied to each parameter on the last step, by name.
  const std::vector<std::pair<std::string, double>>& last_rates() const { return last_rates_; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<Parameter> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::vector<std::pair<std::string, double>> last_rates_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Metrics

class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : n_(classes), counts_(classes * classes, 0) {}

  // Ground truth 255 is skipped; other values must be < classes.
  void add(std::uint8_t truth, std::uint8_t predicted);
  void add(const LabelMap& truth, const LabelMap& predicted);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * n_ + predicted]; }
  std::uint64_t& at(std::size_t truth, std::size_t predicted) { return counts_[truth * n_ + predicted]; }
  std::size_t classes() const { return n_; }

 private:
  std::size_t n_ = 0;
  std::vector<std::uint64_t> counts_;
};

struct MetricsReport {
  std::vector<std::optional<double>> iou;  // empty when TP+FP+FN = 0
  std::vector<std::optional<double>> f1;
  double miou = 0.0;
  double mf1 = 0.0;
  ConfusionMatrix confusion;
  std::size_t iteration = 0;
  double wall_seconds = 0.0;
};

MetricsReport metrics_from_confusion(const ConfusionMatrix& confusion);
std::string format_report(const MetricsReport& report, const ClassRegistry& registry);

// Target-space predictions of the model's final output on B×3×H×W images.
LabelMap predict_target(const MultiBranchModel& model, const Tensor& images, const ClassRegistry& registry);
MetricsReport evaluate(const MultiBranchModel& model, const std::vector<SceneSample>& test,
                       const ClassRegistry& registry);

// Fraction of test pixels each expert branch assigns to each union class.
std::vector<std::vector<double>> expert_class_fractions(const MultiBranchModel& model,
                                                        const std::vector<SceneSample>& test);

// ---------------------------------------------------------------------------
// Training

struct LossBreakdown {
  double sup = 0.0;
  double ssl = 0.0;
  double ssl_m = 0.0;
  double total = 0.0;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, LossBreakdown losses)
      : std::runtime_error(what), losses_(losses) {}
  const LossBreakdown& losses() const { return losses_; }

 private:
  LossBreakdown losses_;
};

struct SourceBatch {
  Tensor images;  // B×3×H×W
  LabelMap labels;
};

struct StepBatches {
  std::vector<SourceBatch> sources;  // one per branch
  Tensor target;                     // B×3×H×W, unlabelled
};

// Cross entropy of branch i on source batch i.
std::vector<Var> supervised_losses(const MultiBranchModel& model, const std::vector<SourceBatch>& batches);

struct TrainState {
  TrainConfig config;
  ClassRegistry registry;
  MultiBranchModel student;
  EmaTeacher teacher;
  Adam optimizer;
  Rng rng;
  std::size_t iteration = 0;
};

TrainState init_train_state(const TrainConfig& config, const Scenario& scenario);

// One iteration: supervised, mixed self-supervised and integration losses,
// an Adam step on the student and an EMA step on the teacher.
LossBreakdown train_step(TrainState& state, const StepBatches& batches);

// Draws one batch per branch and a target batch from the training data.
StepBatches sample_batches(TrainState& state, const ScenarioData& data);

struct RunResult {
  TrainState state;
  MetricsReport final_report;
  std::vector<LossBreakdown> losses;
};

struct RunOptions {
  std::filesystem::path out;  // empty: nothing is written
  std::function<void(std::size_t, const LossBreakdown&, const MetricsReport*)> on_row;
};

// Full training run; writes metrics.csv, config.json and model.msct into `out`.
RunResult run_training(const TrainConfig& config, const ScenarioData& data, const RunOptions& options = {});

ScenarioData load_or_generate(const TrainConfig& config);

std::vector<NamedTensor> checkpoint_entries(const TrainState& state);
// Rebuilds the student from a run directory's config.json and model.msct.
MultiBranchModel load_student(const TrainConfig& config, const Scenario& scenario,
                              const std::filesystem::path& checkpoint);

// Worker count from MSCADA_THREADS (unset: library default).
void configure_threads_from_env();

}  // namespace mscada
