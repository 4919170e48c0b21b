#pragma once

// Deterministic toy-scale fine-tuning of stacked LoraLinear layers.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gsq/lora.hpp"
#include "gsq/matrix.hpp"
#include "gsq/nf4.hpp"

namespace gsq {

enum class TaskKind { kLowRankRegression, kBlobClassification };

std::string_view to_string(TaskKind kind) noexcept;
TaskKind parse_task_kind(std::string_view text);

/// Layer 0 maps ic -> oc, every later layer oc -> oc.
struct TaskDims {
  std::size_t ic = 16;
  std::size_t oc = 16;
  std::size_t depth = 1;
  bool operator==(const TaskDims&) const = default;
};

struct TaskOptions {
  std::size_t train_size = 512;
  std::size_t eval_size = 256;
  std::size_t teacher_rank = 2;  ///< r* for regression
  double noise_std = 0.0;        ///< target noise (regression) or blob spread (classification)
  std::size_t nf4_block = kNf4DefaultBlock;
};

/// Synthetic dataset plus the frozen base the student starts from.
///
/// Regression: targets come from a teacher stack whose layer l computes
/// x·(DQ(NF4(W_l)) + B*_l·A*_l)^T through the identity-mode forward, so a
/// student holding (A*, B*) reproduces the clean targets exactly.
/// Classification: Gaussian blobs, one per class (classes == oc).
struct ToyTask {
  TaskKind kind = TaskKind::kLowRankRegression;
  TaskDims dims;
  std::uint64_t teacher_seed = 0;
  TaskOptions options;

  std::vector<Nf4Tensor> frozen;      ///< per layer, oc_l x ic_l
  std::vector<Matrix> teacher_a;      ///< regression only, r* x ic_l
  std::vector<Matrix> teacher_b;      ///< regression only, oc_l x r*
  Matrix train_x, train_y;            ///< y: targets or one-hot labels
  Matrix eval_x, eval_y;

  std::size_t layer_in(std::size_t l) const noexcept { return l == 0 ? dims.ic : dims.oc; }
};

ToyTask make_task(TaskKind kind, TaskDims dims, std::uint64_t seed, const TaskOptions& options = {});

/// Fresh student: frozen weights from the task, A ~ N(0, a_std^2), B = 0.
std::vector<LoraLinear> make_student(const ToyTask& task, std::size_t rank, std::uint64_t seed,
                                     double a_std = 0.02);
/// Student carrying the teacher's adapters (regression only).
std::vector<LoraLinear> make_teacher(const ToyTask& task);

/// Runs the stack forward (caching inputs in every layer).
Matrix forward_stack(std::vector<LoraLinear>& layers, const Matrix& x, const QuantConfig& cfg);

struct LossResult {
  double loss = 0.0;
  Matrix d_y;  ///< dLoss/dY
};

/// Mean squared error over all elements, or mean softmax cross-entropy.
LossResult task_loss(TaskKind kind, const Matrix& y, const Matrix& target);

/// Loss of the stack on the eval split.
double evaluate(std::vector<LoraLinear>& layers, const ToyTask& task, const QuantConfig& cfg);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  Matrix m;
  Matrix v;
  std::uint64_t step = 0;
};

/// One decoupled-weight-decay Adam update (bias-corrected moments).
void optimizer_step(Matrix& param, const Matrix& grad, AdamState& state, double lr,
                    const AdamWConfig& adam = {});

struct TrainOptions {
  double lr = 1e-2;
  std::size_t steps = 500;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  std::size_t warmup_steps = 0;  ///< linear warm-up, then constant
  /// Power of two applied to dY before the quantized backward and divided
  /// out of the gradients; keeps small gradients above the exponent floor.
  double loss_scale = 65536.0;
  double a_std = 0.02;
  AdamWConfig adam;
};

struct StepMetric {
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct TrainRun {
  static constexpr int kSchemaVersion = 1;

  QuantConfig config;
  TrainOptions options;
  TaskKind task_kind = TaskKind::kLowRankRegression;
  TaskDims task_dims;
  std::uint64_t task_seed = 0;
  double noise_std = 0.0;

  std::vector<StepMetric> metrics;  ///< one per completed step
  double initial_eval = 0.0;
  double final_eval = 0.0;
  double final_train_loss = 0.0;  ///< loss on the whole train split after the last step
  bool failed = false;
  std::optional<std::size_t> failed_step;
  std::string failure;
  double wall_ms = 0.0;
};

/// Divergence guard: a step loss above this (or non-finite) fails the run.
inline constexpr double kDivergenceLoss = 1e6;

TrainRun train(const ToyTask& task, const QuantConfig& cfg, const TrainOptions& options);

/// Same as train() but also returns the trained layers.
TrainRun train(const ToyTask& task, const QuantConfig& cfg, const TrainOptions& options,
               std::vector<LoraLinear>& layers_out);

/// JSON form; `include_timing` = false drops wall_ms for byte comparisons.
nlohmann::ordered_json to_json(const TrainRun& run, bool include_timing = true);

}  // namespace gsq
