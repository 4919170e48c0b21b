#include "gsq/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "gsq/error.hpp"
#include "gsq/rng.hpp"

namespace gsq {

namespace {

// Independent streams derived from one task seed.
constexpr std::uint64_t kBaseStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kTeacherStream = 0xbf58476d1ce4e5b9ULL;
constexpr std::uint64_t kDataStream = 0x94d049bb133111ebULL;

void check_dims(const TaskDims& d) {
  if (d.ic == 0 || d.oc == 0 || d.depth == 0)
    throw ConfigError("task dims must be positive and depth >= 1");
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(m.row(idx[i]).begin(), m.row(idx[i]).end(), out.row(i).begin());
  return out;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

double sum_squares(const Matrix& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return s;
}

}  // namespace

std::string_view to_string(TaskKind kind) noexcept {
  return kind == TaskKind::kLowRankRegression ? "lowrank_regression" : "blob_classification";
}

TaskKind parse_task_kind(std::string_view text) {
  if (text == "lowrank_regression") return TaskKind::kLowRankRegression;
  if (text == "blob_classification") return TaskKind::kBlobClassification;
  throw ConfigError("unknown task kind '" + std::string(text) + "'");
}

ToyTask make_task(TaskKind kind, TaskDims dims, std::uint64_t seed, const TaskOptions& options) {
  check_dims(dims);
  if (options.train_size == 0 || options.eval_size == 0)
    throw ConfigError("task split sizes must be positive");
  if (!(options.noise_std >= 0.0) || !std::isfinite(options.noise_std))
    throw ConfigError("noise_std must be finite and >= 0");
  if (kind == TaskKind::kLowRankRegression && options.teacher_rank == 0)
    throw ConfigError("teacher rank must be >= 1");
  if (kind == TaskKind::kBlobClassification && dims.oc < 2)
    throw ConfigError("classification needs at least two classes (oc >= 2)");

  ToyTask task;
  task.kind = kind;
  task.dims = dims;
  task.teacher_seed = seed;
  task.options = options;

  Rng base_rng(seed ^ kBaseStream);
  for (std::size_t l = 0; l < dims.depth; ++l) {
    const std::size_t in = task.layer_in(l);
    const Matrix w = base_rng.normal_matrix(dims.oc, in, 1.0 / std::sqrt(double(in)));
    task.frozen.push_back(nf4_quantize(w.values(), options.nf4_block));
  }

  const std::size_t n = options.train_size + options.eval_size;
  Rng data_rng(seed ^ kDataStream);
  Matrix x(n, dims.ic);
  Matrix y;

  if (kind == TaskKind::kLowRankRegression) {
    Rng teacher_rng(seed ^ kTeacherStream);
    const std::size_t r = options.teacher_rank;
    for (std::size_t l = 0; l < dims.depth; ++l) {
      const std::size_t in = task.layer_in(l);
      task.teacher_a.push_back(teacher_rng.normal_matrix(r, in, 1.0 / std::sqrt(double(in))));
      task.teacher_b.push_back(teacher_rng.normal_matrix(dims.oc, r, 0.5 / std::sqrt(double(r))));
    }
    for (double& v : x.values()) v = data_rng.normal();
    auto teacher = make_teacher(task);
    QuantConfig id;
    id.rank = r;
    id.identity = true;
    y = forward_stack(teacher, x, id);
    if (options.noise_std > 0.0)
      for (double& v : y.values()) v += options.noise_std * data_rng.normal();
  } else {
    const std::size_t classes = dims.oc;
    const Matrix centers = data_rng.normal_matrix(classes, dims.ic, 1.0);
    const double spread = options.noise_std;
    y = Matrix(n, classes);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = data_rng.below(classes);
      y(i, c) = 1.0;
      for (std::size_t j = 0; j < dims.ic; ++j) x(i, j) = centers(c, j) + spread * data_rng.normal();
    }
  }

  std::vector<std::size_t> tr(options.train_size), ev(options.eval_size);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(ev.begin(), ev.end(), options.train_size);
  task.train_x = gather_rows(x, tr);
  task.train_y = gather_rows(y, tr);
  task.eval_x = gather_rows(x, ev);
  task.eval_y = gather_rows(y, ev);
  return task;
}

std::vector<LoraLinear> make_student(const ToyTask& task, std::size_t rank, std::uint64_t seed,
                                     double a_std) {
  if (rank == 0) throw ConfigError("rank must be >= 1");
  Rng rng(seed);
  std::vector<LoraLinear> layers;
  for (std::size_t l = 0; l < task.dims.depth; ++l) {
    const std::size_t in = task.layer_in(l);
    layers.emplace_back("layer" + std::to_string(l), task.dims.oc, in, task.frozen[l],
                        rng.normal_matrix(rank, in, a_std), Matrix(task.dims.oc, rank));
  }
  return layers;
}

std::vector<LoraLinear> make_teacher(const ToyTask& task) {
  if (task.kind != TaskKind::kLowRankRegression)
    throw ConfigError("only the regression task has a teacher");
  std::vector<LoraLinear> layers;
  for (std::size_t l = 0; l < task.dims.depth; ++l)
    layers.emplace_back("layer" + std::to_string(l), task.dims.oc, task.layer_in(l), task.frozen[l],
                        task.teacher_a[l], task.teacher_b[l]);
  return layers;
}

Matrix forward_stack(std::vector<LoraLinear>& layers, const Matrix& x, const QuantConfig& cfg) {
  Matrix h = x;
  for (auto& layer : layers) h = layer.forward(h, cfg);
  return h;
}

LossResult task_loss(TaskKind kind, const Matrix& y, const Matrix& target) {
  if (y.rows() != target.rows() || y.cols() != target.cols())
    throw ShapeError("loss: prediction and target shapes differ");
  LossResult r;
  r.d_y = Matrix(y.rows(), y.cols());
  if (kind == TaskKind::kLowRankRegression) {
    const double n = double(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double d = y.values()[i] - target.values()[i];
      r.loss += d * d;
      r.d_y.values()[i] = 2.0 * d / n;
    }
    r.loss /= n;
    return r;
  }
  const double n = double(y.rows());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const auto row = y.row(i);
    const double top = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - top);
    const double log_z = top + std::log(z);
    for (std::size_t c = 0; c < y.cols(); ++c) {
      const double p = std::exp(row[c] - log_z);
      r.d_y(i, c) = (p - target(i, c)) / n;
      if (target(i, c) != 0.0) r.loss -= target(i, c) * (row[c] - log_z);
    }
  }
  r.loss /= n;
  return r;
}

double evaluate(std::vector<LoraLinear>& layers, const ToyTask& task, const QuantConfig& cfg) {
  return task_loss(task.kind, forward_stack(layers, task.eval_x, cfg), task.eval_y).loss;
}

void optimizer_step(Matrix& param, const Matrix& grad, AdamState& state, double lr,
                    const AdamWConfig& adam) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols())
    throw ShapeError("optimizer_step: gradient shape differs from parameter");
  if (state.m.size() == 0) {
    state.m = Matrix(param.rows(), param.cols());
    state.v = Matrix(param.rows(), param.cols());
  }
  if (state.m.rows() != param.rows() || state.m.cols() != param.cols())
    throw ShapeError("optimizer_step: state shape differs from parameter");
  ++state.step;
  const double c1 = 1.0 - std::pow(adam.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(adam.beta2, double(state.step));
  const double decay = 1.0 - lr * adam.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.values()[i];
    double& m = state.m.values()[i];
    double& v = state.v.values()[i];
    m = adam.beta1 * m + (1.0 - adam.beta1) * g;
    v = adam.beta2 * v + (1.0 - adam.beta2) * g * g;
    double& p = param.values()[i];
    p *= decay;
    p -= lr * (m / c1) / (std::sqrt(v / c2) + adam.eps);
  }
}

TrainRun train(const ToyTask& task, const QuantConfig& cfg, const TrainOptions& options) {
  std::vector<LoraLinear> layers;
  return train(task, cfg, options, layers);
}

TrainRun train(const ToyTask& task, const QuantConfig& cfg, const TrainOptions& options,
               std::vector<LoraLinear>& layers_out) {
  cfg.validate();
  if (!(options.lr > 0.0) || !std::isfinite(options.lr)) throw ConfigError("lr must be > 0");
  if (options.batch == 0) throw ConfigError("batch must be >= 1");
  if (!(options.loss_scale > 0.0) || std::ilogb(options.loss_scale) < -1000 ||
      std::ldexp(1.0, std::ilogb(options.loss_scale)) != options.loss_scale)
    throw ConfigError("loss_scale must be a positive power of two");

  const auto t0 = std::chrono::steady_clock::now();
  TrainRun run;
  run.config = cfg;
  run.options = options;
  run.task_kind = task.kind;
  run.task_dims = task.dims;
  run.task_seed = task.teacher_seed;
  run.noise_std = task.options.noise_std;

  auto layers = make_student(task, cfg.rank, options.seed, options.a_std);
  std::vector<AdamState> states(2 * layers.size());
  Rng order_rng(options.seed ^ 0x2545f4914f6cdd1dULL);
  std::vector<std::size_t> order(task.train_x.rows());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  auto fail = [&](std::size_t step, std::string why) {
    run.failed = true;
    run.failed_step = step;
    run.failure = std::move(why);
  };

  try {
    run.initial_eval = evaluate(layers, task, cfg);
  } catch (const NonFiniteError& e) {
    fail(0, e.what());
  }

  std::vector<std::size_t> idx(options.batch);
  for (std::size_t step = 0; step < options.steps && !run.failed; ++step) {
    for (auto& i : idx) {
      if (cursor == order.size()) {
        shuffle(order, order_rng);
        cursor = 0;
      }
      i = order[cursor++];
    }
    const Matrix x = gather_rows(task.train_x, idx);
    const Matrix t = gather_rows(task.train_y, idx);
    try {
      const Matrix y = forward_stack(layers, x, cfg);
      LossResult lr = task_loss(task.kind, y, t);
      if (!std::isfinite(lr.loss) || lr.loss > kDivergenceLoss) {
        fail(step, "diverged: loss " + std::to_string(lr.loss));
        break;
      }
      Matrix d = options.loss_scale * lr.d_y;
      std::vector<GradBundle> grads(layers.size());
      for (std::size_t l = layers.size(); l-- > 0;) {
        grads[l] = layers[l].backward(d, cfg);
        if (l > 0) d = std::move(grads[l].d_x);
      }
      const double unscale = 1.0 / options.loss_scale;
      double norm2 = 0.0;
      for (auto& g : grads) {
        g.d_a = unscale * g.d_a;
        g.d_b = unscale * g.d_b;
        norm2 += sum_squares(g.d_a) + sum_squares(g.d_b);
      }
      if (!std::isfinite(norm2)) {
        fail(step, "non-finite gradient");
        break;
      }
      double rate = options.lr;
      if (options.warmup_steps > 0)
        rate *= std::min(1.0, double(step + 1) / double(options.warmup_steps));
      for (std::size_t l = 0; l < layers.size(); ++l) {
        optimizer_step(layers[l].a_mut(), grads[l].d_a, states[2 * l], rate, options.adam);
        optimizer_step(layers[l].b_mut(), grads[l].d_b, states[2 * l + 1], rate, options.adam);
      }
      run.metrics.push_back({lr.loss, std::sqrt(norm2)});
    } catch (const NonFiniteError& e) {
      fail(step, e.what());
    }
  }

  if (!run.failed) {
    try {
      run.final_eval = evaluate(layers, task, cfg);
      run.final_train_loss =
          task_loss(task.kind, forward_stack(layers, task.train_x, cfg), task.train_y).loss;
      if (!std::isfinite(run.final_eval)) fail(options.steps, "non-finite eval loss");
    } catch (const NonFiniteError& e) {
      fail(options.steps, e.what());
    }
  }
  for (auto& layer : layers) layer.clear_cache();
  layers_out = std::move(layers);
  run.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

nlohmann::ordered_json to_json(const TrainRun& run, bool include_timing) {
  nlohmann::ordered_json j;
  j["schema_version"] = TrainRun::kSchemaVersion;
  j["config"] = {
      {"quant", run.config.to_string()},
      {"notation", run.config.notation()},
      {"act_bits", run.config.act_bits},
      {"grad_bits", run.config.grad_bits},
      {"adapter_bits", run.config.adapter_bits},
      {"group_size", run.config.group_size},
      {"rank", run.config.rank},
      {"identity", run.config.identity},
  };
  j["task"] = {
      {"kind", to_string(run.task_kind)},
      {"ic", run.task_dims.ic},
      {"oc", run.task_dims.oc},
      {"depth", run.task_dims.depth},
      {"seed", run.task_seed},
      {"noise_std", run.noise_std},
  };
  const auto& o = run.options;
  j["hyperparameters"] = {
      {"lr", o.lr},
      {"steps", o.steps},
      {"batch", o.batch},
      {"seed", o.seed},
      {"warmup_steps", o.warmup_steps},
      {"loss_scale", o.loss_scale},
      {"a_std", o.a_std},
      {"beta1", o.adam.beta1},
      {"beta2", o.adam.beta2},
      {"eps", o.adam.eps},
      {"weight_decay", o.adam.weight_decay},
  };
  auto loss = nlohmann::ordered_json::array();
  auto norm = nlohmann::ordered_json::array();
  for (const auto& m : run.metrics) {
    loss.push_back(m.loss);
    norm.push_back(m.grad_norm);
  }
  j["metrics"] = {{"loss", loss}, {"grad_norm", norm}};
  j["initial_eval"] = run.initial_eval;
  j["final_eval"] = run.final_eval;
  j["final_train_loss"] = run.final_train_loss;
  j["failed"] = run.failed;
  if (run.failed) {
    j["failed_step"] = *run.failed_step;
    j["failure"] = run.failure;
  }
  if (include_timing) j["wall_ms"] = run.wall_ms;
  return j;
}

}  // namespace gsq
