#pragma once

// Error statistics, locality statistics, the memory model, Pareto sweeps,
// format comparison and the finite-difference gradient check.

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gsq/formats.hpp"
#include "gsq/lora.hpp"
#include "gsq/matrix.hpp"
#include "gsq/trainer.hpp"

namespace gsq {

// ---------------------------------------------------------------------------
// Error statistics

/// 10·log10(Σx² / Σ(x−x̂)²) in dB; +infinity when the reconstruction is
/// exact. Throws ShapeError on a length mismatch and Error on an all-zero
/// original.
double sqnr_db(std::span<const double> original, std::span<const double> reconstructed);

struct ErrorStats {
  double sqnr_db = std::numeric_limits<double>::infinity();
  double max_abs_err = 0.0;
  double mean_abs_err = 0.0;
  bool degenerate = false;  ///< original is all zero (SQNR undefined, reported as +inf if exact)
};

ErrorStats error_stats(std::span<const double> original, std::span<const double> reconstructed);

// ---------------------------------------------------------------------------
// Locality

struct LocalityReport {
  std::vector<double> per_group_std;
  double fraction_below_threshold = 0.0;
  double threshold = 0.0;
  std::size_t group_size = 0;
};

/// Sample standard deviation of every contiguous length-N slice of the
/// row-major values. A trailing partial slice is kept when it holds at
/// least two values.
LocalityReport locality_stats(const Matrix& tensor, std::size_t group, double threshold);

// ---------------------------------------------------------------------------
// Memory model

/// Bit widths as seen by the memory model. Widths 5..8 mean GSE-INT-b with
/// the given group size; 16 means plain 16-bit floats.
struct MemoryConfig {
  int act_bits = 8;
  int grad_bits = 8;
  int adapter_bits = 8;
  std::size_t group_size = 32;
  std::size_t rank = 8;

  static MemoryConfig from(const QuantConfig& cfg);
  /// "4-<act>-<grad>[:a<adapter>][:n<group>][:r<rank>]", widths in {5..8, 16}.
  static MemoryConfig parse(std::string_view text);
  std::string to_string() const;
  void validate() const;
};

struct LinearShape {
  std::string name;
  std::size_t out = 0;
  std::size_t in = 0;
  /// False when the input tensor is shared with a previous linear (q/k/v,
  /// gate/up) and therefore cached once.
  bool saves_input = true;
};

struct ModelShape {
  std::string name;
  std::vector<LinearShape> block;  ///< linears of one repeated block
  std::size_t blocks = 1;
  std::size_t other_params = 0;  ///< embeddings, norms: kept at 16 bits, frozen
};

/// 32 decoder blocks, hidden 4096, MLP 11008, vocabulary 32000.
ModelShape llama_7b_shape();
/// One linear per layer of a toy task stack.
ModelShape toy_shape(const TaskDims& dims);

struct MemoryComponent {
  std::uint64_t bytes = 0;
  std::string formula;
};

struct MemoryEstimate {
  MemoryComponent frozen_weights;
  MemoryComponent adapters;
  MemoryComponent activations;
  MemoryComponent gradients;
  MemoryComponent optimizer;
  std::uint64_t total_bytes = 0;
};

/// Bits to store `elements` values of width `bits`, grouped in lines of
/// `line_len` (GSE groups never straddle lines).
std::uint64_t tensor_storage_bits(std::uint64_t lines, std::uint64_t line_len, int bits,
                                  std::size_t group_size);

MemoryEstimate memory_estimate(const ModelShape& shape, const MemoryConfig& cfg,
                               std::size_t batch, std::size_t seq_tokens);

// ---------------------------------------------------------------------------
// Pareto analysis

struct ParetoPoint {
  int bits = 8;
  std::size_t rank = 8;
  double metric = 0.0;  ///< seed-mean final eval loss, lower is better
  std::uint64_t memory_bytes = 0;
  bool dominated = false;
  std::size_t seeds_ok = 0;
};

/// Sets `dominated` on every point: another point has memory ≤ and metric ≤
/// with at least one strict.
void mark_dominated(std::vector<ParetoPoint>& points);

struct SweepSpec {
  std::vector<int> bits;            ///< act = grad = adapter bits
  std::vector<std::size_t> ranks;
  std::size_t group_size = 32;
  std::vector<std::uint64_t> seeds;  ///< run seed s trains on task seed task_seed + s
  TaskKind task_kind = TaskKind::kLowRankRegression;
  TaskDims dims;
  TaskOptions task_options;
  std::uint64_t task_seed = 0;
  TrainOptions train;  ///< train.seed is replaced by each run seed
  std::size_t workers = 1;
};

struct SweepRow {
  int bits = 8;
  std::size_t rank = 8;
  std::size_t group = 32;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  std::uint64_t memory_bytes = 0;
  bool dominated = false;
  double wall_ms = 0.0;
  bool failed = false;
  std::string failure;
};

struct SweepResult {
  std::vector<ParetoPoint> points;  ///< grid order: bits outer, rank inner; failed points excluded
  std::vector<SweepRow> rows;       ///< one per (point, seed), same order
  std::vector<std::string> excluded;  ///< reasons for points with no successful run
};

SweepResult pareto_sweep(const SweepSpec& spec);

struct PairedStat {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t pairs = 0;
};

/// Per seed: loss(bits, rank_lo) − loss(bits, rank_hi); mean and standard error.
PairedStat rank_gain(const SweepResult& result, int bits, std::size_t rank_lo, std::size_t rank_hi);

/// "bits,rank,group,seed,final_loss,memory_bytes,dominated,wall_ms" plus rows.
std::string sweep_csv(const SweepResult& result, bool include_timing = true);

// ---------------------------------------------------------------------------
// Format comparison

enum class FpScaling { kNone, kPerTensor };

struct FormatRow {
  std::string format;  ///< "GSE-INT8", "FP8-E4M3", ...
  int bits = 0;
  ErrorStats stats;
};

/// Runs `values` (rows of `cols`) through GSE-INT{5..8} with group size N
/// along rows and through FP8 E4M3/E5M2, FP7 E3M3, FP6 E3M2.
std::vector<FormatRow> compare_formats(const Matrix& tensor, std::size_t group_size,
                                       FpScaling scaling = FpScaling::kPerTensor);

/// Reconstruction of `tensor` through `fmt`, optionally after scaling the
/// tensor's max magnitude onto the format's largest finite value.
Matrix fp_roundtrip(const Matrix& tensor, const FpFormat& fmt, FpScaling scaling);

/// Gaussian values whose per-group scale is 2^u, u ~ U[−spread_log2, 0]:
/// spread 0 gives one global scale, larger spreads make magnitude vary
/// between groups while staying similar within each group.
Matrix locality_tensor(std::size_t rows, std::size_t cols, std::size_t group, double spread_log2,
                       double base_std, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
  double max_rel_a = 0.0;
  double max_rel_b = 0.0;
  double mean_rel_a = 0.0;
  double mean_rel_b = 0.0;
  double max_rel = 0.0;
  double mean_rel = 0.0;
  std::size_t entries = 0;
  double loss = 0.0;
  std::vector<double> rel_a;  ///< per entry of A, row-major
  std::vector<double> rel_b;
};

/// Central differences of the task loss (full-precision forward) with
/// respect to every entry of A and B, compared with backward() under cfg.
/// Relative error per entry: |fd − an| / max(|fd|, |an|, 1e-6).
/// eps must lie in [1e-6, 1e-3].
GradCheckReport grad_check(const LoraLinear& layer, const Matrix& x, const Matrix& target,
                           TaskKind loss_kind, const QuantConfig& cfg, double eps = 1e-4);

}  // namespace gsq
