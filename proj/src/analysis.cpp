#include "gsq/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <thread>

#include "gsq/error.hpp"
#include "gsq/gse.hpp"
#include "gsq/rng.hpp"

namespace gsq {

namespace {

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

std::uint64_t bits_to_bytes(std::uint64_t bits) { return ceil_div(bits, 8); }

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_width(int bits, const char* what) {
  if (bits != 16 && (bits < 5 || bits > 8))
    throw ConfigError(std::string("memory model: ") + what + " bits must be 5..8 or 16");
}

}  // namespace

// ---------------------------------------------------------------------------
// Error statistics

double sqnr_db(std::span<const double> original, std::span<const double> reconstructed) {
  if (original.size() != reconstructed.size()) throw ShapeError("sqnr: length mismatch");
  double signal = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    signal += original[i] * original[i];
    const double d = original[i] - reconstructed[i];
    noise += d * d;
  }
  if (signal == 0.0) throw Error("sqnr: original tensor is all zero");
  if (noise == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(signal / noise);
}

ErrorStats error_stats(std::span<const double> original, std::span<const double> reconstructed) {
  if (original.size() != reconstructed.size()) throw ShapeError("error_stats: length mismatch");
  ErrorStats s;
  double sum = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    const double e = std::fabs(original[i] - reconstructed[i]);
    s.max_abs_err = std::max(s.max_abs_err, e);
    sum += e;
  }
  s.mean_abs_err = original.empty() ? 0.0 : sum / double(original.size());
  s.degenerate = max_abs(original) == 0.0;
  if (s.degenerate)
    s.sqnr_db = s.max_abs_err == 0.0 ? std::numeric_limits<double>::infinity()
                                     : -std::numeric_limits<double>::infinity();
  else
    s.sqnr_db = sqnr_db(original, reconstructed);
  return s;
}

// ---------------------------------------------------------------------------
// Locality

LocalityReport locality_stats(const Matrix& tensor, std::size_t group, double threshold) {
  if (group < 2) throw ConfigError("locality_stats: group size must be >= 2");
  LocalityReport r;
  r.threshold = threshold;
  r.group_size = group;
  const auto v = tensor.values();
  for (std::size_t start = 0; start < v.size(); start += group) {
    const std::size_t n = std::min(group, v.size() - start);
    if (n < 2) break;
    // Shift by the first value so constant slices give exactly zero.
    const double x0 = v[start];
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += v[start + i] - x0;
    mean /= double(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (v[start + i] - x0) - mean;
      ss += d * d;
    }
    r.per_group_std.push_back(std::sqrt(ss / double(n - 1)));
  }
  if (!r.per_group_std.empty()) {
    const auto below = std::count_if(r.per_group_std.begin(), r.per_group_std.end(),
                                     [&](double s) { return s < threshold; });
    r.fraction_below_threshold = double(below) / double(r.per_group_std.size());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Memory model

MemoryConfig MemoryConfig::from(const QuantConfig& cfg) {
  MemoryConfig m;
  m.act_bits = cfg.act_bits;
  m.grad_bits = cfg.grad_bits;
  m.adapter_bits = cfg.adapter_bits;
  m.group_size = cfg.group_size;
  m.rank = cfg.rank;
  return m;
}

MemoryConfig MemoryConfig::parse(std::string_view text) {
  // Same grammar as QuantConfig, with 16 allowed as a width.
  auto num = [&](std::string_view s, const char* what) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw ConfigError(std::string("memory config: bad ") + what + " in '" + std::string(text) + "'");
    return v;
  };
  MemoryConfig m;
  const auto colon = text.find(':');
  const std::string_view wag = text.substr(0, colon);
  const auto d1 = wag.find('-');
  const auto d2 = d1 == std::string_view::npos ? d1 : wag.find('-', d1 + 1);
  if (d2 == std::string_view::npos)
    throw ConfigError("memory config: expected W-A-G notation, got '" + std::string(text) + "'");
  if (num(wag.substr(0, d1), "weight bits") != 4)
    throw ConfigError("memory config: weight bits are fixed at 4 (NF4)");
  m.act_bits = int(num(wag.substr(d1 + 1, d2 - d1 - 1), "activation bits"));
  m.grad_bits = int(num(wag.substr(d2 + 1), "gradient bits"));
  m.adapter_bits = m.act_bits;
  std::string_view rest = colon == std::string_view::npos ? "" : text.substr(colon + 1);
  while (!rest.empty()) {
    const auto next = rest.find(':');
    const std::string_view f = rest.substr(0, next);
    rest = next == std::string_view::npos ? "" : rest.substr(next + 1);
    if (f.size() > 1 && f[0] == 'a')
      m.adapter_bits = int(num(f.substr(1), "adapter bits"));
    else if (f.size() > 1 && f[0] == 'n')
      m.group_size = num(f.substr(1), "group size");
    else if (f.size() > 1 && f[0] == 'r')
      m.rank = num(f.substr(1), "rank");
    else
      throw ConfigError("memory config: unknown field '" + std::string(f) + "'");
  }
  m.validate();
  return m;
}

std::string MemoryConfig::to_string() const {
  return "4-" + std::to_string(act_bits) + "-" + std::to_string(grad_bits) + ":a" +
         std::to_string(adapter_bits) + ":n" + std::to_string(group_size) + ":r" +
         std::to_string(rank);
}

void MemoryConfig::validate() const {
  check_width(act_bits, "activation");
  check_width(grad_bits, "gradient");
  check_width(adapter_bits, "adapter");
  if (group_size < 1 || group_size > 65536) throw ConfigError("memory model: bad group size");
  if (rank < 1) throw ConfigError("memory model: rank must be >= 1");
}

ModelShape llama_7b_shape() {
  ModelShape s;
  s.name = "llama-7b";
  const std::size_t d = 4096, ff = 11008, vocab = 32000;
  s.block = {
      {"q_proj", d, d, true},      {"k_proj", d, d, false},   {"v_proj", d, d, false},
      {"o_proj", d, d, true},      {"gate_proj", ff, d, true}, {"up_proj", ff, d, false},
      {"down_proj", d, ff, true},
  };
  s.blocks = 32;
  // Token embedding, output head, two norms per block and the final norm.
  s.other_params = 2 * vocab * d + 32 * 2 * d + d;
  return s;
}

ModelShape toy_shape(const TaskDims& dims) {
  ModelShape s;
  s.name = "toy";
  for (std::size_t l = 0; l < dims.depth; ++l)
    s.block.push_back({"layer" + std::to_string(l), dims.oc, l == 0 ? dims.ic : dims.oc, true});
  return s;
}

std::uint64_t tensor_storage_bits(std::uint64_t lines, std::uint64_t line_len, int bits,
                                  std::size_t group_size) {
  if (bits == 16) return lines * line_len * 16;
  return lines * ceil_div(line_len, group_size) * (group_size * std::uint64_t(bits) + 5);
}

MemoryEstimate memory_estimate(const ModelShape& shape, const MemoryConfig& cfg, std::size_t batch,
                               std::size_t seq_tokens) {
  cfg.validate();
  if (shape.block.empty() || shape.blocks == 0 || batch == 0 || seq_tokens == 0)
    throw ConfigError("memory model: dims must be positive");
  const std::uint64_t tokens = std::uint64_t(batch) * seq_tokens;
  const std::uint64_t r = cfg.rank;
  const std::size_t n = cfg.group_size;

  std::uint64_t frozen = 0, adapter = 0, act = 0, grad_params = 0, grad_peak = 0, params = 0;
  for (const auto& l : shape.block) {
    const std::uint64_t w = std::uint64_t(l.out) * l.in;
    const std::uint64_t blocks = ceil_div(w, kNf4DefaultBlock);
    frozen += 4 * kNf4DefaultBlock * blocks + 8 * blocks + 32 * ceil_div(blocks, 256);
    const std::uint64_t p = r * (l.in + l.out);
    params += p;
    // A is grouped along ic, B^T along r.
    adapter += 32 * p + tensor_storage_bits(r, l.in, cfg.adapter_bits, n) +
               tensor_storage_bits(l.out, r, cfg.adapter_bits, n);
    if (l.saves_input) act += tensor_storage_bits(tokens, l.in, cfg.act_bits, n);
    grad_params += tensor_storage_bits(r, l.in, cfg.grad_bits, n) +
                   tensor_storage_bits(l.out, r, cfg.grad_bits, n);
    grad_peak = std::max(grad_peak, tensor_storage_bits(tokens, std::max(l.in, l.out), cfg.grad_bits, n));
  }
  const std::uint64_t k = shape.blocks;
  auto width = [&](int bits) {
    return bits == 16 ? std::string("16 (plain float)") : "(N*" + std::to_string(bits) + "+5)/N";
  };

  MemoryEstimate e;
  e.frozen_weights.bytes = bits_to_bytes(k * frozen + 16 * std::uint64_t(shape.other_params));
  e.frozen_weights.formula =
      "blocks x sum_linear(4*64*ceil(oc*ic/64) + 8*ceil(oc*ic/64) + 32*ceil(ceil(oc*ic/64)/256)) "
      "+ 16*other_params bits";
  e.adapters.bytes = bits_to_bytes(k * adapter);
  e.adapters.formula = "blocks x sum_linear(32*r*(ic+oc) + gse(r x ic) + gse(oc x r)) bits, gse at " +
                       width(cfg.adapter_bits) + " bits/elem";
  e.activations.bytes = bits_to_bytes(k * act);
  e.activations.formula = "blocks x sum_saved_inputs(gse(tokens x ic)) bits, tokens=" +
                          std::to_string(tokens) + ", gse at " + width(cfg.act_bits) + " bits/elem";
  e.gradients.bytes = bits_to_bytes(k * grad_params + grad_peak);
  e.gradients.formula = "blocks x sum_linear(gse(r x ic) + gse(oc x r)) + max_linear(gse(tokens x "
                        "max(ic,oc))) bits, gse at " + width(cfg.grad_bits) + " bits/elem";
  e.optimizer.bytes = bits_to_bytes(k * 64 * params);
  e.optimizer.formula = "blocks x sum_linear(2*32*r*(ic+oc)) bits";
  e.total_bytes = e.frozen_weights.bytes + e.adapters.bytes + e.activations.bytes +
                  e.gradients.bytes + e.optimizer.bytes;
  return e;
}

// ---------------------------------------------------------------------------
// Pareto analysis

void mark_dominated(std::vector<ParetoPoint>& points) {
  for (auto& p : points) {
    p.dominated = false;
    for (const auto& q : points) {
      if (&q == &p) continue;
      if (q.memory_bytes <= p.memory_bytes && q.metric <= p.metric &&
          (q.memory_bytes < p.memory_bytes || q.metric < p.metric)) {
        p.dominated = true;
        break;
      }
    }
  }
}

SweepResult pareto_sweep(const SweepSpec& spec) {
  if (spec.bits.empty() || spec.ranks.empty()) throw ConfigError("sweep: empty grid");
  if (spec.seeds.empty()) throw ConfigError("sweep: at least one seed required");

  struct Job {
    std::size_t point;
    int bits;
    std::size_t rank;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  std::vector<QuantConfig> cfgs;
  for (int b : spec.bits)
    for (std::size_t r : spec.ranks) {
      QuantConfig cfg;
      cfg.act_bits = cfg.grad_bits = cfg.adapter_bits = b;
      cfg.group_size = spec.group_size;
      cfg.rank = r;
      cfg.validate();
      for (auto s : spec.seeds) jobs.push_back({cfgs.size(), b, r, s});
      cfgs.push_back(cfg);
    }

  SweepResult out;
  out.rows.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& j = jobs[i];
      SweepRow& row = out.rows[i];
      row.bits = j.bits;
      row.rank = j.rank;
      row.group = spec.group_size;
      row.seed = j.seed;
      row.memory_bytes =
          memory_estimate(toy_shape(spec.dims), MemoryConfig::from(cfgs[j.point]), spec.train.batch, 1)
              .total_bytes;
      try {
        const ToyTask task = make_task(spec.task_kind, spec.dims, spec.task_seed + j.seed, spec.task_options);
        TrainOptions opts = spec.train;
        opts.seed = j.seed;
        const TrainRun run = train(task, cfgs[j.point], opts);
        row.final_loss = run.final_eval;
        row.wall_ms = run.wall_ms;
        row.failed = run.failed;
        row.failure = run.failure;
      } catch (const std::exception& e) {
        row.failed = true;
        row.failure = e.what();
      }
      if (row.failed) row.final_loss = std::numeric_limits<double>::quiet_NaN();
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t n = std::max<std::size_t>(1, std::min(spec.workers, jobs.size()));
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
  }

  std::vector<std::optional<std::size_t>> slot(cfgs.size());
  for (std::size_t p = 0; p < cfgs.size(); ++p) {
    ParetoPoint pt;
    pt.bits = cfgs[p].act_bits;
    pt.rank = cfgs[p].rank;
    double sum = 0.0;
    std::string reasons;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].point != p) continue;
      const auto& row = out.rows[i];
      pt.memory_bytes = row.memory_bytes;
      if (row.failed) {
        reasons += (reasons.empty() ? "" : "; ") + ("seed " + std::to_string(row.seed) + ": " + row.failure);
      } else {
        sum += row.final_loss;
        ++pt.seeds_ok;
      }
    }
    if (pt.seeds_ok == 0) {
      out.excluded.push_back("bits " + std::to_string(pt.bits) + " rank " + std::to_string(pt.rank) +
                             ": " + reasons);
      continue;
    }
    pt.metric = sum / double(pt.seeds_ok);
    slot[p] = out.points.size();
    out.points.push_back(pt);
  }
  mark_dominated(out.points);
  for (std::size_t i = 0; i < jobs.size(); ++i)
    if (slot[jobs[i].point]) out.rows[i].dominated = out.points[*slot[jobs[i].point]].dominated;
  return out;
}

PairedStat rank_gain(const SweepResult& result, int bits, std::size_t rank_lo, std::size_t rank_hi) {
  std::map<std::uint64_t, double> lo, hi;
  for (const auto& row : result.rows) {
    if (row.bits != bits || row.failed) continue;
    if (row.rank == rank_lo) lo[row.seed] = row.final_loss;
    if (row.rank == rank_hi) hi[row.seed] = row.final_loss;
  }
  std::vector<double> d;
  for (const auto& [seed, v] : lo)
    if (auto it = hi.find(seed); it != hi.end()) d.push_back(v - it->second);
  PairedStat s;
  s.pairs = d.size();
  if (d.empty()) return s;
  for (double v : d) s.mean += v;
  s.mean /= double(d.size());
  if (d.size() > 1) {
    double ss = 0.0;
    for (double v : d) ss += (v - s.mean) * (v - s.mean);
    s.std_error = std::sqrt(ss / double(d.size() - 1) / double(d.size()));
  }
  return s;
}

std::string sweep_csv(const SweepResult& result, bool include_timing) {
  std::string csv = "bits,rank,group,seed,final_loss,memory_bytes,dominated,wall_ms\n";
  for (const auto& r : result.rows) {
    csv += std::to_string(r.bits) + "," + std::to_string(r.rank) + "," + std::to_string(r.group) +
           "," + std::to_string(r.seed) + "," + (r.failed ? std::string("nan") : fmt_double(r.final_loss)) +
           "," + std::to_string(r.memory_bytes) + "," + (r.dominated ? "true" : "false") + "," +
           (include_timing ? fmt_double(r.wall_ms) : std::string("0")) + "\n";
  }
  return csv;
}

// ---------------------------------------------------------------------------
// Format comparison

Matrix fp_roundtrip(const Matrix& tensor, const FpFormat& fmt, FpScaling scaling) {
  double scale = 1.0;
  if (scaling == FpScaling::kPerTensor) {
    const double m = max_abs(tensor.values());
    if (m > 0.0) scale = m / fmt.max_finite();
  }
  Matrix out = tensor;
  for (double& v : out.values()) v = fp_encode(v / scale, fmt) * scale;
  return out;
}

std::vector<FormatRow> compare_formats(const Matrix& tensor, std::size_t group_size, FpScaling scaling) {
  if (!all_finite(tensor.values())) throw NonFiniteError("compare_formats: non-finite input");
  std::vector<FormatRow> rows;
  for (int b = 8; b >= 5; --b) {
    const Matrix r = dequantize_matrix(
        quantize_matrix(tensor, GroupAxis::kAlongRows, GseSpec::make(b, group_size)));
    rows.push_back({"GSE-INT" + std::to_string(b), b, error_stats(tensor.values(), r.values())});
  }
  for (const FpFormat& f : {fp8_e4m3(), fp8_e5m2(), fp7_e3m3(), fp6_e3m2()}) {
    const Matrix r = fp_roundtrip(tensor, f, scaling);
    rows.push_back({"FP" + std::to_string(f.total_bits()) + "-" + f.name(), f.total_bits(),
                    error_stats(tensor.values(), r.values())});
  }
  return rows;
}

Matrix locality_tensor(std::size_t rows, std::size_t cols, std::size_t group, double spread_log2,
                       double base_std, std::uint64_t seed) {
  if (group == 0) throw ConfigError("locality_tensor: group must be >= 1");
  Rng rng(seed);
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c0 = 0; c0 < cols; c0 += group) {
      const double scale = base_std * std::exp2(-spread_log2 * rng.uniform());
      for (std::size_t c = c0; c < std::min(cols, c0 + group); ++c) m(r, c) = scale * rng.normal();
    }
  return m;
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport grad_check(const LoraLinear& layer, const Matrix& x, const Matrix& target,
                           TaskKind loss_kind, const QuantConfig& cfg, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw ConfigError("grad_check: eps must lie in [1e-6, 1e-3]");
  LoraLinear an = layer;
  const Matrix y = an.forward(x, cfg);
  const LossResult lr = task_loss(loss_kind, y, target);
  const GradBundle g = an.backward(lr.d_y, cfg);

  LoraLinear probe = layer;
  probe.clear_cache();
  const QuantConfig fp = identity_quantizer_mode(cfg);
  auto loss = [&] {
    const double l = task_loss(loss_kind, probe.forward(x, fp), target).loss;
    if (!std::isfinite(l)) throw NonFiniteError("grad_check: non-finite loss under perturbation");
    return l;
  };

  GradCheckReport rep;
  rep.loss = loss();
  auto sweep = [&](Matrix& param, const Matrix& analytic, double& max_rel, double& mean_rel,
                   std::vector<double>& rels) {
    double sum = 0.0;
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double saved = param.values()[i];
      param.values()[i] = saved + eps;
      const double up = loss();
      param.values()[i] = saved - eps;
      const double down = loss();
      param.values()[i] = saved;
      const double fd = (up - down) / (2 * eps);
      const double a = analytic.values()[i];
      const double rel = std::fabs(fd - a) / std::max({std::fabs(fd), std::fabs(a), 1e-6});
      max_rel = std::max(max_rel, rel);
      rels.push_back(rel);
      sum += rel;
    }
    mean_rel = param.size() ? sum / double(param.size()) : 0.0;
    rep.entries += param.size();
    return sum;
  };
  const double sa = sweep(probe.a_mut(), g.d_a, rep.max_rel_a, rep.mean_rel_a, rep.rel_a);
  const double sb = sweep(probe.b_mut(), g.d_b, rep.max_rel_b, rep.mean_rel_b, rep.rel_b);
  rep.max_rel = std::max(rep.max_rel_a, rep.max_rel_b);
  rep.mean_rel = rep.entries ? (sa + sb) / double(rep.entries) : 0.0;
  return rep;
}

}  // namespace gsq
