#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <thread>

#include "cli.hpp"
#include "config.hpp"
#include "gsq/analysis.hpp"
#include "gsq/error.hpp"
#include "gsq/gse_pack.hpp"
#include "gsq/io.hpp"
#include "gsq/tensor_file.hpp"
#include "gsq/trainer.hpp"

namespace gsq::cli {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Json jnum(double v) { return std::isfinite(v) ? Json(v) : Json(num(v)); }

void write_text(const std::string& path, const std::string& text) {
  if (!path.empty()) io::write_file_atomic(path, text);
}

void write_json(const std::string& path, const Json& j) {
  if (!path.empty()) io::write_file_atomic(path, j.dump(2) + "\n");
}

template <typename T>
T get(const Json& cfg, const char* key) {
  return cfg.at(key).get<T>();
}

std::string require_path(const Json& cfg, const char* key) {
  auto s = get<std::string>(cfg, key);
  if (s.empty()) throw ConfigError(std::string("'") + key + "' is required");
  return s;
}

std::size_t env_workers() {
  const char* env = std::getenv("GSQ_WORKERS");
  if (env == nullptr || *env == '\0') return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("GSQ_WORKERS must be a positive integer");
  return std::size_t(v);
}

TaskDims dims_from(const Json& cfg) {
  return {get<std::size_t>(cfg, "ic"), get<std::size_t>(cfg, "oc"), get<std::size_t>(cfg, "depth")};
}

TaskOptions task_options_from(const Json& cfg) {
  TaskOptions o;
  o.train_size = get<std::size_t>(cfg, "train_size");
  o.eval_size = get<std::size_t>(cfg, "eval_size");
  o.teacher_rank = get<std::size_t>(cfg, "teacher_rank");
  o.noise_std = get<double>(cfg, "noise_std");
  return o;
}

TrainOptions train_options_from(const Json& cfg) {
  TrainOptions o;
  o.lr = get<double>(cfg, "lr");
  o.steps = get<std::size_t>(cfg, "steps");
  o.batch = get<std::size_t>(cfg, "batch");
  o.warmup_steps = get<std::size_t>(cfg, "warmup_steps");
  o.loss_scale = get<double>(cfg, "loss_scale");
  o.a_std = get<double>(cfg, "a_std");
  o.adam.weight_decay = get<double>(cfg, "weight_decay");
  return o;
}

Json task_defaults(std::size_t ic, std::size_t oc, std::uint64_t seed) {
  return Json{{"task_kind", "lowrank_regression"},
              {"ic", ic},
              {"oc", oc},
              {"depth", std::size_t(1)},
              {"task_seed", seed},
              {"noise_std", 0.0},
              {"train_size", std::size_t(512)},
              {"eval_size", std::size_t(256)},
              {"teacher_rank", std::size_t(2)}};
}

Json train_defaults(double lr, std::size_t steps) {
  return Json{{"lr", lr},
              {"steps", steps},
              {"batch", std::size_t(32)},
              {"warmup_steps", std::size_t(0)},
              {"loss_scale", 65536.0},
              {"weight_decay", 0.0},
              {"a_std", 0.02}};
}

Json merged(std::initializer_list<Json> parts) {
  Json out = Json::object();
  for (const auto& p : parts)
    for (const auto& [k, v] : p.items()) out[k] = v;
  return out;
}

/// Rank-1 tensors become one row; higher ranks fold leading dimensions.
Matrix as_matrix(const Tensor& t) {
  if (t.dims.empty()) return Matrix(1, 1, t.values);
  const std::size_t cols = t.dims.back();
  return Matrix(cols == 0 ? 0 : t.values.size() / cols, cols, t.values);
}

// ---------------------------------------------------------------------------

int cmd_formats_compare(const Json& cfg) {
  const std::size_t group = get<std::size_t>(cfg, "group_size");
  const auto scaling_s = get<std::string>(cfg, "fp_scaling");
  FpScaling scaling;
  if (scaling_s == "per_tensor")
    scaling = FpScaling::kPerTensor;
  else if (scaling_s == "none")
    scaling = FpScaling::kNone;
  else
    throw ConfigError("fp_scaling must be 'per_tensor' or 'none'");
  GseSpec::make(8, group);
  const double threshold = get<double>(cfg, "locality_threshold");
  if (!(threshold > 0.0)) throw ConfigError("locality_threshold must be > 0");

  std::vector<std::pair<std::string, Matrix>> tensors;
  if (get<bool>(cfg, "synthetic")) {
    const auto rows = get<std::size_t>(cfg, "rows"), cols = get<std::size_t>(cfg, "cols");
    if (rows == 0 || cols == 0) throw ConfigError("rows and cols must be positive");
    std::uint64_t seed = get<std::uint64_t>(cfg, "seed");
    for (double spread : cfg.at("spreads")) {
      if (!(spread >= 0.0)) throw ConfigError("spreads must be >= 0");
      tensors.emplace_back("locality_spread" + num(spread),
                           locality_tensor(rows, cols, group, spread, get<double>(cfg, "base_std"), seed++));
    }
  }
  for (const auto& in : cfg.at("inputs")) {
    const auto path = in.get<std::string>();
    tensors.emplace_back(std::filesystem::path(path).filename().string(), as_matrix(load_tensor(path)));
  }
  if (tensors.empty()) throw ConfigError("nothing to compare: enable synthetic or give inputs");

  std::string csv = "tensor,format,bits,sqnr_db,max_abs_err,mean_abs_err,degenerate\n";
  std::string plot = "series,x,y\n";
  Json report = {{"command", "formats-compare"}, {"config", cfg}, {"tensors", Json::array()}};
  for (const auto& [name, m] : tensors) {
    const auto rows = compare_formats(m, group, scaling);
    Json jt = {{"name", name},
               {"rows", m.rows()},
               {"cols", m.cols()},
               {"degenerate", max_abs(m.values()) == 0.0},
               {"formats", Json::array()}};
    if (m.size() >= 2) {
      const LocalityReport loc = locality_stats(m, std::max<std::size_t>(group, 2), threshold);
      double worst = 0.0;
      for (double v : loc.per_group_std) worst = std::max(worst, v);
      jt["locality"] = {{"groups", loc.per_group_std.size()},
                        {"max_group_std", worst},
                        {"fraction_below_threshold", loc.fraction_below_threshold}};
      std::printf("%s%s  group std max %.3g, %.1f%% below %g\n", name.c_str(),
                  jt["degenerate"].get<bool>() ? " (degenerate: all zero)" : "", worst,
                  100.0 * loc.fraction_below_threshold, threshold);
    } else {
      std::cout << name << "\n";
    }
    for (const auto& r : rows) {
      csv += name + "," + r.format + "," + std::to_string(r.bits) + "," + num(r.stats.sqnr_db) + "," +
             num(r.stats.max_abs_err) + "," + num(r.stats.mean_abs_err) + "," +
             (r.stats.degenerate ? "true" : "false") + "\n";
      const std::string family = r.format.rfind("GSE", 0) == 0 ? "GSE" : "FP";
      plot += name + ":" + family + "," + std::to_string(r.bits) + "," + num(r.stats.sqnr_db) + "\n";
      jt["formats"].push_back({{"format", r.format},
                               {"bits", r.bits},
                               {"sqnr_db", jnum(r.stats.sqnr_db)},
                               {"max_abs_err", r.stats.max_abs_err},
                               {"mean_abs_err", r.stats.mean_abs_err}});
      std::printf("  %-10s %2d bits  SQNR %8.2f dB  max err %.3g\n", r.format.c_str(), r.bits,
                  r.stats.sqnr_db, r.stats.max_abs_err);
    }
    report["tensors"].push_back(jt);
  }
  write_text(get<std::string>(cfg, "out_csv"), csv);
  write_json(get<std::string>(cfg, "out_json"), report);
  write_text(get<std::string>(cfg, "out_plot"), plot);
  return kOk;
}

int cmd_quantize(const Json& cfg) {
  const auto in = require_path(cfg, "in");
  const auto out = require_path(cfg, "out");
  const auto axis_s = get<std::string>(cfg, "axis");
  if (axis_s != "rows" && axis_s != "cols") throw ConfigError("axis must be 'rows' or 'cols'");
  const GroupAxis axis = axis_s == "rows" ? GroupAxis::kAlongRows : GroupAxis::kAlongCols;
  const GseSpec spec = GseSpec::make(get<int>(cfg, "bits"), get<std::size_t>(cfg, "group_size"),
                                     get<int>(cfg, "exponent_bias"));

  const Matrix m = tensor_to_matrix(load_tensor(in));
  const GseTensor q = quantize_matrix(m, axis, spec);
  save_gseb(out, q);
  const Matrix back = dequantize_matrix(q);
  const ErrorStats st = error_stats(m.values(), back.values());

  // Half-ulp bound on every element of groups that were neither saturated
  // nor carry-clamped.
  std::size_t violations = 0, checked = 0;
  for (std::size_t l = 0; l < q.lines(); ++l)
    for (std::size_t g = 0; g < q.groups_per_line(); ++g) {
      const GseGroup grp = q.group(l, g);
      if (grp.saturated || grp.carry_clamped) continue;
      const double half = std::ldexp(1.0, grp.exponent - 1);
      for (std::size_t k = g * spec.group_size; k < std::min(q.reduction_len(), (g + 1) * spec.group_size); ++k) {
        const std::size_t r = axis == GroupAxis::kAlongRows ? l : k;
        const std::size_t c = axis == GroupAxis::kAlongRows ? k : l;
        ++checked;
        if (std::fabs(back(r, c) - m(r, c)) > half) ++violations;
      }
    }

  Json report = {{"command", "quantize"},
                 {"config", cfg},
                 {"rows", m.rows()},
                 {"cols", m.cols()},
                 {"groups", q.group_count()},
                 {"pad_len", q.pad_len()},
                 {"saturated_groups", q.saturated_groups()},
                 {"carry_clamped_groups", q.carry_clamped_groups()},
                 {"max_abs_err", st.max_abs_err},
                 {"mean_abs_err", st.mean_abs_err},
                 {"sqnr_db", jnum(st.sqnr_db)},
                 {"elements_checked", checked},
                 {"half_ulp_violations", violations}};
  write_json(get<std::string>(cfg, "stats_json"), report);
  std::printf("%zux%zu -> %s (%zu groups, pad %zu)\n", m.rows(), m.cols(), out.c_str(), q.group_count(),
              q.pad_len());
  std::printf("max err %.6g  mean err %.6g  SQNR %.2f dB  half-ulp violations %zu\n", st.max_abs_err,
              st.mean_abs_err, st.sqnr_db, violations);
  return violations == 0 ? kOk : kFailure;
}

int cmd_dequantize(const Json& cfg) {
  const auto in = require_path(cfg, "in");
  const auto out = require_path(cfg, "out");
  const auto dtype_s = get<std::string>(cfg, "dtype");
  if (dtype_s != "f32" && dtype_s != "f64") throw ConfigError("dtype must be 'f32' or 'f64'");
  const GseTensor q = load_gseb(in);
  save_tensor(out, matrix_to_tensor(dequantize_matrix(q)), dtype_s == "f32" ? DType::kF32 : DType::kF64);
  std::printf("%zux%zu GSE-INT%d (N=%zu) -> %s\n", q.rows(), q.cols(), q.spec().total_bits,
              q.spec().group_size, out.c_str());
  return kOk;
}

QuantConfig quant_from(const Json& cfg) {
  QuantConfig q;
  q.act_bits = get<int>(cfg, "act_bits");
  q.grad_bits = get<int>(cfg, "grad_bits");
  q.adapter_bits = get<int>(cfg, "adapter_bits");
  q.group_size = get<std::size_t>(cfg, "group_size");
  q.rank = get<std::size_t>(cfg, "rank");
  q.identity = get<bool>(cfg, "identity");
  q.validate();
  return q;
}

int cmd_train(const Json& cfg) {
  const QuantConfig q = quant_from(cfg);
  const ToyTask task = make_task(parse_task_kind(get<std::string>(cfg, "task_kind")), dims_from(cfg),
                                 get<std::uint64_t>(cfg, "task_seed"), task_options_from(cfg));
  TrainOptions opts = train_options_from(cfg);
  opts.seed = get<std::uint64_t>(cfg, "seed");
  const bool timing = get<bool>(cfg, "timing");

  std::vector<LoraLinear> layers;
  const TrainRun run = train(task, q, opts, layers);

  Json report = {{"command", "train"}, {"config", cfg}, {"run", to_json(run, timing)}};
  write_json(get<std::string>(cfg, "out_json"), report);
  std::string plot = "series,x,y\n";
  for (std::size_t i = 0; i < run.metrics.size(); ++i)
    plot += "loss," + std::to_string(i) + "," + num(run.metrics[i].loss) + "\n";
  for (std::size_t i = 0; i < run.metrics.size(); ++i)
    plot += "grad_norm," + std::to_string(i) + "," + num(run.metrics[i].grad_norm) + "\n";
  write_text(get<std::string>(cfg, "out_plot"), plot);

  const auto ckpt = get<std::string>(cfg, "checkpoint_dir");
  if (!ckpt.empty() && !run.failed) {
    std::filesystem::create_directories(ckpt);
    for (const auto& layer : layers)
      io::write_file_atomic(std::filesystem::path(ckpt) / (layer.name() + ".gsql"), encode_checkpoint(layer, q));
  }

  std::printf("%s %s: initial eval %.6g, final eval %.6g, train %.6g\n", q.to_string().c_str(),
              std::string(to_string(task.kind)).c_str(), run.initial_eval, run.final_eval,
              run.final_train_loss);
  if (run.failed) {
    std::fprintf(stderr, "run failed at step %zu: %s\n", *run.failed_step, run.failure.c_str());
    return kFailure;
  }
  return kOk;
}

int cmd_sweep(const Json& cfg) {
  SweepSpec spec;
  for (const auto& b : cfg.at("bits")) spec.bits.push_back(b.get<int>());
  for (const auto& r : cfg.at("ranks")) spec.ranks.push_back(r.get<std::size_t>());
  spec.group_size = get<std::size_t>(cfg, "group_size");
  for (std::uint64_t s = 0; s < get<std::uint64_t>(cfg, "seeds"); ++s) spec.seeds.push_back(s);
  spec.task_kind = parse_task_kind(get<std::string>(cfg, "task_kind"));
  spec.dims = dims_from(cfg);
  spec.task_options = task_options_from(cfg);
  spec.task_seed = get<std::uint64_t>(cfg, "task_seed");
  spec.train = train_options_from(cfg);
  spec.workers = env_workers();
  const bool timing = get<bool>(cfg, "timing");

  const SweepResult res = pareto_sweep(spec);
  write_text(get<std::string>(cfg, "out_csv"), sweep_csv(res, timing));

  Json points = Json::array();
  std::string plot = "series,x,y\n";
  for (const auto& p : res.points) {
    points.push_back({{"bits", p.bits},
                      {"rank", p.rank},
                      {"metric", p.metric},
                      {"memory_bytes", p.memory_bytes},
                      {"dominated", p.dominated},
                      {"seeds_ok", p.seeds_ok}});
    plot += "bits=" + std::to_string(p.bits) + "," + std::to_string(p.memory_bytes) + "," + num(p.metric) + "\n";
  }
  Json gains = Json::array();
  if (!spec.ranks.empty()) {
    const auto [lo, hi] = std::minmax_element(spec.ranks.begin(), spec.ranks.end());
    for (int b : spec.bits) {
      const PairedStat g = rank_gain(res, b, *lo, *hi);
      gains.push_back({{"bits", b}, {"rank_lo", *lo}, {"rank_hi", *hi}, {"mean_gain", g.mean},
                       {"std_error", g.std_error}, {"pairs", g.pairs}});
    }
  }
  Json report = {{"command", "sweep"},
                 {"config", cfg},
                 {"metric", "seed-mean final eval loss (lower is better)"},
                 {"points", points},
                 {"excluded", res.excluded},
                 {"rank_gains", gains}};
  write_json(get<std::string>(cfg, "out_json"), report);
  write_text(get<std::string>(cfg, "out_plot"), plot);

  for (const auto& p : res.points)
    std::printf("bits %d rank %3zu  loss %.6g  memory %llu B%s\n", p.bits, p.rank, p.metric,
                static_cast<unsigned long long>(p.memory_bytes), p.dominated ? "" : "  (frontier)");
  for (const auto& e : res.excluded) std::fprintf(stderr, "excluded: %s\n", e.c_str());
  return res.points.empty() ? kFailure : kOk;
}

int cmd_gradcheck(const Json& cfg) {
  const std::size_t ic = get<std::size_t>(cfg, "ic"), oc = get<std::size_t>(cfg, "oc");
  const std::size_t rank = get<std::size_t>(cfg, "rank"), batch = get<std::size_t>(cfg, "batch");
  if (ic == 0 || oc == 0 || batch == 0) throw ConfigError("ic, oc and batch must be positive");
  QuantConfig q;
  q.act_bits = q.grad_bits = q.adapter_bits = get<int>(cfg, "bits");
  q.group_size = get<std::size_t>(cfg, "group_size");
  q.rank = rank;
  q.identity = get<bool>(cfg, "identity");
  q.validate();
  const auto loss_s = get<std::string>(cfg, "loss");
  if (loss_s != "mse" && loss_s != "xent") throw ConfigError("loss must be 'mse' or 'xent'");
  const TaskKind kind = loss_s == "mse" ? TaskKind::kLowRankRegression : TaskKind::kBlobClassification;

  Rng rng(get<std::uint64_t>(cfg, "seed"));
  const Matrix w = rng.normal_matrix(oc, ic, 1.0 / std::sqrt(double(ic)));
  LoraLinear layer("gradcheck", oc, ic, nf4_quantize(w.values()), rng.normal_matrix(rank, ic, 0.3),
                   rng.normal_matrix(oc, rank, 0.3));
  const Matrix x = rng.normal_matrix(batch, ic, 1.0);
  Matrix target = rng.normal_matrix(batch, oc, 1.0);
  if (kind == TaskKind::kBlobClassification) {
    target = Matrix(batch, oc);
    for (std::size_t i = 0; i < batch; ++i) target(i, rng.below(oc)) = 1.0;
  }
  const GradCheckReport rep = grad_check(layer, x, target, kind, q, get<double>(cfg, "eps"));

  // Identity mode is judged on the worst entry, quantized modes on the mean.
  static constexpr double kQuantizedBound[4] = {0.27, 0.16, 0.10, 0.055};
  double tol = get<double>(cfg, "tolerance");
  if (tol < 0) tol = q.identity ? 1e-5 : kQuantizedBound[q.act_bits - 5];
  const double measured = q.identity ? rep.max_rel : rep.mean_rel;
  const bool pass = measured <= tol;

  Json report = {{"command", "gradcheck"},
                 {"config", cfg},
                 {"mode", q.identity ? "identity" : "quantized"},
                 {"entries", rep.entries},
                 {"loss", rep.loss},
                 {"max_rel_a", rep.max_rel_a},
                 {"max_rel_b", rep.max_rel_b},
                 {"mean_rel_a", rep.mean_rel_a},
                 {"mean_rel_b", rep.mean_rel_b},
                 {"max_rel", rep.max_rel},
                 {"mean_rel", rep.mean_rel},
                 {"tolerance", tol},
                 {"judged_on", q.identity ? "max_rel" : "mean_rel"},
                 {"pass", pass}};
  write_json(get<std::string>(cfg, "out_json"), report);
  std::string plot = "series,x,y\n";
  for (std::size_t i = 0; i < rep.rel_a.size(); ++i) plot += "d_a," + std::to_string(i) + "," + num(rep.rel_a[i]) + "\n";
  for (std::size_t i = 0; i < rep.rel_b.size(); ++i) plot += "d_b," + std::to_string(i) + "," + num(rep.rel_b[i]) + "\n";
  write_text(get<std::string>(cfg, "out_plot"), plot);

  std::printf("%s mode, %zu entries: max rel err %.3g, mean rel err %.3g (tolerance %.3g on %s) %s\n",
              q.identity ? "identity" : "quantized", rep.entries, rep.max_rel, rep.mean_rel, tol,
              q.identity ? "max" : "mean", pass ? "PASS" : "FAIL");
  return pass ? kOk : kFailure;
}

int cmd_mem(const Json& cfg) {
  const auto model = get<std::string>(cfg, "model");
  ModelShape shape;
  if (model == "llama-7b")
    shape = llama_7b_shape();
  else if (model == "toy")
    shape = toy_shape(dims_from(cfg));
  else
    throw ConfigError("model must be 'llama-7b' or 'toy'");
  const auto batch = get<std::size_t>(cfg, "batch"), seq = get<std::size_t>(cfg, "seq");

  std::vector<std::pair<std::string, MemoryEstimate>> est;
  for (const auto& c : cfg.at("configs")) {
    const MemoryConfig mc = MemoryConfig::parse(c.get<std::string>());
    est.emplace_back(c.get<std::string>(), memory_estimate(shape, mc, batch, seq));
  }
  if (est.empty()) throw ConfigError("configs must not be empty");

  std::string csv = "config,frozen_weights,adapters,activations,gradients,optimizer,total,ratio_vs_first\n";
  std::string plot = "series,x,y\n";
  Json list = Json::array();
  const double first = double(est.front().second.total_bytes);
  std::printf("%-16s %12s %12s %12s %12s %12s %12s %8s\n", "config", "frozen", "adapters", "activations",
              "gradients", "optimizer", "total", "ratio");
  for (const auto& [name, e] : est) {
    const double ratio = first / double(e.total_bytes);
    csv += name + "," + std::to_string(e.frozen_weights.bytes) + "," + std::to_string(e.adapters.bytes) + "," +
           std::to_string(e.activations.bytes) + "," + std::to_string(e.gradients.bytes) + "," +
           std::to_string(e.optimizer.bytes) + "," + std::to_string(e.total_bytes) + "," + num(ratio) + "\n";
    Json comps = Json::object();
    const std::pair<const char*, const MemoryComponent*> parts[] = {
        {"frozen_weights", &e.frozen_weights}, {"adapters", &e.adapters}, {"activations", &e.activations},
        {"gradients", &e.gradients},           {"optimizer", &e.optimizer}};
    for (const auto& [k, c] : parts) {
      comps[k] = {{"bytes", c->bytes}, {"formula", c->formula}};
      plot += name + "," + k + "," + std::to_string(c->bytes) + "\n";
    }
    list.push_back({{"config", name}, {"components", comps}, {"total_bytes", e.total_bytes},
                    {"first_over_this", ratio}});
    auto gb = [](std::uint64_t b) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3fG", double(b) / 1e9);
      return std::string(buf);
    };
    std::printf("%-16s %12s %12s %12s %12s %12s %12s %8.3f\n", name.c_str(), gb(e.frozen_weights.bytes).c_str(),
                gb(e.adapters.bytes).c_str(), gb(e.activations.bytes).c_str(), gb(e.gradients.bytes).c_str(),
                gb(e.optimizer.bytes).c_str(), gb(e.total_bytes).c_str(), ratio);
  }
  for (const auto& [k, c] : {std::pair{"frozen_weights", &est.front().second.frozen_weights},
                             {"adapters", &est.front().second.adapters},
                             {"activations", &est.front().second.activations},
                             {"gradients", &est.front().second.gradients},
                             {"optimizer", &est.front().second.optimizer}})
    std::printf("  %s = %s\n", k, c->formula.c_str());

  Json report = {{"command", "mem"}, {"config", cfg}, {"model", shape.name}, {"estimates", list}};
  write_json(get<std::string>(cfg, "out_json"), report);
  write_text(get<std::string>(cfg, "out_csv"), csv);
  write_text(get<std::string>(cfg, "out_plot"), plot);
  return kOk;
}

struct Command {
  const char* name;
  const char* help;
  Json defaults;
  int (*run)(const Json&);
};

std::vector<Command> commands() {
  std::vector<Command> cmds;
  cmds.push_back({"formats-compare", "SQNR and error of GSE-INT5..8 vs FP8/FP7/FP6 on tensors",
                  Json{{"inputs", Json::array()},
                       {"synthetic", true},
                       {"rows", std::size_t(64)},
                       {"cols", std::size_t(256)},
                       {"group_size", std::size_t(32)},
                       {"spreads", Json::array({0.0, 2.0, 4.0, 8.0})},
                       {"base_std", 0.02},
                       {"seed", std::uint64_t(0)},
                       {"fp_scaling", "per_tensor"},
                       {"locality_threshold", 0.25},
                       {"out_csv", "formats.csv"},
                       {"out_json", "formats.json"},
                       {"out_plot", "formats_plot.csv"}},
                  cmd_formats_compare});
  cmds.push_back({"quantize", "Quantize a 2-D tensor file (GSQT) into a packed GSE file (GSEB)",
                  Json{{"in", ""},
                       {"out", ""},
                       {"bits", 8},
                       {"group_size", std::size_t(32)},
                       {"exponent_bias", 15},
                       {"axis", "rows"},
                       {"stats_json", ""}},
                  cmd_quantize});
  cmds.push_back({"dequantize", "Expand a packed GSE file (GSEB) into a tensor file (GSQT)",
                  Json{{"in", ""}, {"out", ""}, {"dtype", "f64"}}, cmd_dequantize});
  cmds.push_back({"train", "Fine-tune LoRA adapters on a synthetic task",
                  merged({task_defaults(16, 16, 1), train_defaults(1e-2, 2000),
                          Json{{"seed", std::uint64_t(0)},
                               {"act_bits", 8},
                               {"grad_bits", 8},
                               {"adapter_bits", 8},
                               {"group_size", std::size_t(16)},
                               {"rank", std::size_t(4)},
                               {"identity", false},
                               {"timing", true},
                               {"checkpoint_dir", ""},
                               {"out_json", "train.json"},
                               {"out_plot", "train_plot.csv"}}}),
                  cmd_train});
  cmds.push_back({"sweep", "Pareto sweep over (bits, rank) with seed averaging",
                  merged({task_defaults(64, 32, 100), train_defaults(1e-3, 3000),
                          Json{{"bits", Json::array({5, 6, 8})},
                               {"ranks", Json::array({std::size_t(2), std::size_t(4), std::size_t(8),
                                                      std::size_t(16)})},
                               {"group_size", std::size_t(32)},
                               {"seeds", std::uint64_t(5)},
                               {"timing", true},
                               {"out_csv", "sweep.csv"},
                               {"out_json", "sweep.json"},
                               {"out_plot", "sweep_plot.csv"}}}),
                  cmd_sweep});
  cmds.push_back({"gradcheck", "Finite-difference check of the LoRA backward",
                  Json{{"ic", std::size_t(8)},
                       {"oc", std::size_t(8)},
                       {"rank", std::size_t(4)},
                       {"batch", std::size_t(4)},
                       {"seed", std::uint64_t(0)},
                       {"identity", true},
                       {"bits", 8},
                       {"group_size", std::size_t(8)},
                       {"eps", 1e-4},
                       {"loss", "mse"},
                       {"tolerance", -1.0},
                       {"out_json", "gradcheck.json"},
                       {"out_plot", "gradcheck_plot.csv"}},
                  cmd_gradcheck});
  cmds.push_back({"mem", "Memory estimate per component for one or more W-A-G configs",
                  Json{{"model", "llama-7b"},
                       {"ic", std::size_t(64)},
                       {"oc", std::size_t(32)},
                       {"depth", std::size_t(1)},
                       {"configs", Json::array({"4-16-16:r64", "4-5-5:r64"})},
                       {"batch", std::size_t(1)},
                       {"seq", std::size_t(4096)},
                       {"out_json", "mem.json"},
                       {"out_csv", "mem.csv"},
                       {"out_plot", "mem_plot.csv"}},
                  cmd_mem});
  return cmds;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Group-shared-exponent quantization toolkit", "gsq"};
  app.require_subcommand(1);
  auto cmds = commands();
  std::vector<std::unique_ptr<CommandConfig>> configs;
  std::vector<CLI::App*> subs;
  for (auto& c : cmds) {
    configs.push_back(std::make_unique<CommandConfig>(c.defaults));
    subs.push_back(app.add_subcommand(c.name, c.help));
    configs.back()->bind(*subs.back());
  }

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      return cmds[i].run(configs[i]->resolve());
    } catch (const ConfigError& e) {
      std::fprintf(stderr, "config error: %s\n", e.what());
      return kUsage;
    } catch (const ParseError& e) {
      std::fprintf(stderr, "parse error at byte %zu: %s\n", e.offset(), e.what());
      return kFailure;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return kFailure;
    }
  }
  return kUsage;
}

}  // namespace gsq::cli
