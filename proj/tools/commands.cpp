// Copyright 2026 The zosparse Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "zosparse/errors.hpp"

namespace zosparse::cli {

namespace {

using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

// Substreams of the run seed.
constexpr std::uint64_t kStreamRandomMask = 2;
constexpr std::uint64_t kStreamPerturb = 3;
constexpr std::uint64_t kStreamBatches = 4;
// Substreams of the init seed.
constexpr std::uint64_t kStreamInit = 0;
constexpr std::uint64_t kStreamPretrain = 1;

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot write '" + path.string() + "'");
  return os;
}

void write_json(const std::filesystem::path& path, const json& doc) {
  open_out(path) << doc.dump(2) << '\n';
}

std::uint64_t micros_since(Clock::time_point t0) {
  return std::uint64_t(std::chrono::duration_cast<std::chrono::microseconds>(
                           Clock::now() - t0)
                           .count());
}

bool is_quantized_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  return io::read_header(is) == kQuantizedCheckpointVersion;
}

EvalPoint evaluate(const Workspace& ws, const ParamStore& params,
                   LossKind loss, std::size_t step) {
  EvalPoint e{step, forward_loss(ws.spec, params, ws.validation, loss), {}};
  if (ws.validation.is_classification()) {
    e.accuracy = accuracy(ws.spec, params, ws.validation);
  }
  return e;
}

json eval_record(const EvalPoint& e) {
  json j = {{"step", e.step}, {"eval_loss", e.loss}};
  if (e.accuracy) j["eval_accuracy"] = *e.accuracy;
  return j;
}

const Dataset& scoring_data(const ExperimentConfig& config,
                            const Workspace& ws) {
  if (config.mask.source == MaskSource::kSurrogate) {
    if (!ws.surrogate) {
      throw UsageError("surrogate masks need mask.surrogate_path or the "
                       "two_moons task pair");
    }
    return *ws.surrogate;
  }
  return ws.train;
}

// The quantized checkpoint with its sparse values replaced by `packed`.
QuantizedCheckpoint with_sparse_values(QuantizedCheckpoint ckpt,
                                       const PackedParams& packed,
                                       const ParamStore& working) {
  std::size_t j = 0;
  for (const auto& [name, idx] : packed.layout.layers) {
    if (ckpt.quantized.contains(name)) {
      Tensor v({idx.size()});
      for (std::size_t i = 0; i < idx.size(); ++i) v[i] = packed.values[j + i];
      ckpt.floats[name + kSparseSuffix] = std::move(v);
    } else {
      ckpt.floats[name] = working.at(name);
    }
    j += idx.size();
  }
  return ckpt;
}

}  // namespace

Workspace build_workspace(const ExperimentConfig& config) {
  Workspace ws;
  ws.spec = config.model;
  Dataset pretrain;
  if (config.task.source == "two_moons") {
    const std::size_t n = config.task.size;
    const TaskPair pair =
        make_tasks(config.task.seed, n + config.task.validation_size);
    const Dataset& target = config.task.which == "a" ? pair.task_a : pair.task_b;
    const Dataset& other = config.task.which == "a" ? pair.task_b : pair.task_a;
    ws.train = target.slice(0, n);
    ws.validation = target.slice(n, target.size());
    ws.surrogate = other.slice(0, n);
    pretrain = (config.init.pretrain_task == "a" ? pair.task_a : pair.task_b)
                   .slice(0, n);
  } else {
    ws.train = read_dataset_jsonl(*config.task.path);
    ws.validation = config.task.validation_path
                        ? read_dataset_jsonl(*config.task.validation_path)
                        : ws.train;
    if (config.mask.surrogate_path) {
      ws.surrogate = read_dataset_jsonl(*config.mask.surrogate_path);
    }
    pretrain = ws.surrogate ? *ws.surrogate : ws.train;
  }

  if (config.init.checkpoint && !is_quantized_checkpoint(*config.init.checkpoint)) {
    ws.params = read_checkpoint(*config.init.checkpoint);
    check_mlp_params(ws.spec, ws.params);
  } else if (config.init.checkpoint) {
    // The sparse positions live in the mask written next to the checkpoint.
    if (!config.mask.path) {
      throw UsageError("a quantized init.checkpoint needs mask.path (the "
                       "mask.json written by quantize)");
    }
    const QuantizedCheckpoint ckpt =
        read_quantized_checkpoint(*config.init.checkpoint);
    const SparseMask mask =
        read_mask_json(*config.mask.path, checkpoint_layout(ckpt));
    auto [dense, packed] = load_decomposed(ckpt, mask);
    PackedModel model(std::move(dense), mask);
    model.load(packed.values);
    ws.params = model.working();
    check_mlp_params(ws.spec, ws.params);
  } else {
    RngStream init(config.init.seed, kStreamInit);
    MlpModel model = MlpModel::initialize(ws.spec, init);
    if (config.init.pretrain_steps > 0) {
      RngStream s(config.init.seed, kStreamPretrain);
      train_first_order(model, pretrain, config.loss,
                        config.init.pretrain_steps, config.init.pretrain_lr,
                        config.init.pretrain_batch_size, s);
    }
    ws.params = model.params();
  }
  return ws;
}

SparseMask build_mask(const ExperimentConfig& config, const Workspace& ws) {
  const MaskConfig& m = config.mask;
  switch (m.source) {
    case MaskSource::kTask:
    case MaskSource::kSurrogate: {
      SparseMask mask = select_topk(
          score_sensitivity(ws.spec, ws.params, scoring_data(config, ws),
                            config.loss, m.score_batches),
          m.fraction, m.scope);
      mask.source = m.source;
      return mask;
    }
    case MaskSource::kRandom: {
      RngStream s(config.seed, kStreamRandomMask);
      return random_mask(ws.params, m.fraction, s);
    }
    case MaskSource::kOutlier:
      return outlier_mask(ws.params, m.fraction, m.scope);
  }
  throw UsageError("unhandled mask source");
}

TrainOutcome run_training(const ExperimentConfig& config, const Workspace& ws,
                          const std::optional<std::filesystem::path>& out) {
  const ZoConfig& zo = config.zo;
  zo.validate();
  const MaskMode mode = zo.mask_mode;
  const bool quantized_init =
      config.init.checkpoint && is_quantized_checkpoint(*config.init.checkpoint);
  if ((config.quantize || quantized_init) && mode != MaskMode::kPacked) {
    throw UsageError("quantized models train only their sparse values; use "
                     "zo.mask_mode 'packed'");
  }
  if (mode == MaskMode::kDynamicMask && config.mask.source != MaskSource::kTask &&
      config.mask.source != MaskSource::kSurrogate) {
    throw UsageError("dynamic masks are rescored; mask.source must be 'task' "
                     "or 'surrogate'");
  }

  TrainOutcome result;
  if (mode == MaskMode::kFull) {
    result.mask = SparseMask::full(ws.params);
  } else if (config.mask.path) {
    result.mask = read_mask_json(*config.mask.path, ws.params);
  } else {
    result.mask = build_mask(config, ws);
  }

  // Working parameters; the packed modes keep theirs inside PackedModel.
  ParamStore params = ws.params;
  std::optional<PackedModel> packed_model;
  PackedParams packed;
  std::optional<QuantizedCheckpoint> qckpt;
  if (mode == MaskMode::kPacked) {
    ParamStore dense;
    if (quantized_init) {
      qckpt = read_quantized_checkpoint(*config.init.checkpoint);
      std::tie(dense, packed) = load_decomposed(*qckpt, result.mask);
    } else if (config.quantize) {
      qckpt = quantize_store(ws.params, result.mask, nullptr);
      std::tie(dense, packed) = load_decomposed(*qckpt, result.mask);
    } else {
      packed = PackedParams::extract(ws.params, result.mask);
      dense = ws.params;
      for (auto& [name, t] : dense) {
        for (auto i : result.mask.indices(name)) t[i] = 0.0;
      }
    }
    packed_model.emplace(std::move(dense), result.mask);
    packed_model->load(packed.values);
  }
  auto current = [&]() -> const ParamStore& {
    return packed_model ? packed_model->working() : params;
  };

  std::ofstream metrics, evals;
  if (out) {
    std::filesystem::create_directories(*out);
    metrics = open_out(*out / "metrics.jsonl");
    evals = open_out(*out / "eval.jsonl");
  }

  ParamStore best = current();
  auto record_eval = [&](std::size_t step) {
    const EvalPoint e = evaluate(ws, current(), config.loss, step);
    if (result.evals.empty() || e.loss < result.best_eval_loss) {
      result.best_eval_loss = e.loss;
      result.best_step = step;
      best = current();
    }
    if (config.eval.target_loss && !result.steps_to_target &&
        e.loss <= *config.eval.target_loss) {
      result.steps_to_target = step;
    }
    result.evals.push_back(e);
    if (out) evals << eval_record(e).dump() << '\n';
  };

  RngStream perturb(config.seed, kStreamPerturb);
  RngStream batches(config.seed, kStreamBatches);
  record_eval(0);
  result.initial_eval_loss = result.evals.front().loss;

  for (std::size_t step = 1; step <= zo.steps; ++step) {
    const Batch batch = sample_batch(ws.train, zo.batch_size, batches);
    const Objective objective = mlp_objective(ws.spec, batch, config.loss);
    const auto t0 = Clock::now();
    StepResult r;
    try {
      if (mode == MaskMode::kDynamicMask) {
        // Refresh on multiples of the interval, scored at current weights.
        result.mask = refresh_mask(ws.spec, params, scoring_data(config, ws),
                                   config.loss, config.mask.fraction,
                                   config.mask.refresh_every, step - 1,
                                   result.mask, config.mask.scope,
                                   config.mask.score_batches);
      }
      if (packed_model) {
        r = packed_step(packed, *packed_model, objective, perturb, zo);
      } else {
        r = seed_trick_step(params, objective, perturb, result.mask, zo);
      }
    } catch (const NumericError& e) {
      result.error = e.what();
      if (out) {
        metrics << json{{"step", step}, {"error", result.error}}.dump() << '\n';
      }
      break;
    }
    const std::uint64_t wall = config.timing ? micros_since(t0) : 0;
    if (out) {
      metrics << json{{"step", step},       {"loss", r.loss()},
                      {"proj_grad", r.scale}, {"lr", zo.lr},
                      {"eps", zo.eps},       {"wall_us", wall}}
                     .dump()
              << '\n';
    }
    if (step % config.eval.interval == 0 || step == zo.steps) record_eval(step);
  }

  result.final_eval_loss = result.evals.back().loss;
  result.final_params = current();
  if (out) {
    if (qckpt) {
      write_quantized_checkpoint(*out / "checkpoint.zosf",
                                 with_sparse_values(*qckpt, packed, current()));
    } else {
      write_checkpoint(*out / "checkpoint.zosf", current());
    }
    write_checkpoint(*out / "best.zosf", best);
    json summary = {
        {"mask_mode", to_string(mode)},
        {"k", result.mask.k()},
        {"fraction", result.mask.fraction()},
        {"initial_eval_loss", result.initial_eval_loss},
        {"final_eval_loss", result.final_eval_loss},
        {"best_eval_loss", result.best_eval_loss},
        {"best_step", result.best_step},
        {"steps_to_target",
         result.steps_to_target ? json(*result.steps_to_target) : json(nullptr)},
        {"error", result.error.empty() ? json(nullptr) : json(result.error)},
    };
    write_json(*out / "summary.json", summary);
  }
  return result;
}

int cmd_select_mask(const ExperimentConfig& config,
                    const std::filesystem::path& out) {
  const Workspace ws = build_workspace(config);
  const SparseMask mask = build_mask(config, ws);
  const SensitivityScores scores =
      score_sensitivity(ws.spec, ws.params, ws.train, config.loss,
                        config.mask.score_batches);
  const double c = coverage_fraction(scores.scores, mask);
  std::filesystem::create_directories(out);
  write_mask_json(out / "mask.json", mask);
  write_curve_csv(out / "curve.csv", coverage_curve(scores.scores));
  write_json(out / "select_mask.json", {{"source", to_string(mask.source)},
                                        {"k", mask.k()},
                                        {"total_dim", mask.total_dim()},
                                        {"fraction", mask.fraction()},
                                        {"coverage", c}});
  std::fprintf(stderr, "mask: source=%s k=%zu/%zu coverage c=%.6f\n",
               to_string(mask.source).c_str(), mask.k(), mask.total_dim(), c);
  return kExitOk;
}

int cmd_train(const ExperimentConfig& config, const std::filesystem::path& out) {
  const Workspace ws = build_workspace(config);
  const TrainOutcome r = run_training(config, ws, out);
  if (!r.error.empty()) {
    std::fprintf(stderr, "training aborted: %s\n", r.error.c_str());
    return kExitNumeric;
  }
  std::fprintf(stderr, "eval loss %.6f -> %.6f (best %.6f at step %zu)\n",
               r.initial_eval_loss, r.final_eval_loss, r.best_eval_loss,
               r.best_step);
  return kExitOk;
}

int cmd_quantize(const ExperimentConfig& config,
                 const std::filesystem::path& out) {
  const Workspace ws = build_workspace(config);
  const SparseMask mask = config.mask.path
                              ? read_mask_json(*config.mask.path, ws.params)
                              : build_mask(config, ws);
  std::vector<LayerQuantStats> stats;
  const QuantizedCheckpoint ckpt = quantize_store(ws.params, mask, &stats);
  std::filesystem::create_directories(out);
  write_quantized_checkpoint(out / "quantized.zosf", ckpt);
  write_mask_json(out / "mask.json", mask);
  json layers = json::array();
  double worst = 0.0, worst_half_scale = 0.0;
  for (const auto& s : stats) {
    layers.push_back({{"name", s.name},
                      {"quantized", s.quantized},
                      {"sparse_count", s.sparse_count},
                      {"mean_abs_error", s.mean_abs_error},
                      {"max_abs_error", s.max_abs_error},
                      {"max_half_scale", s.max_half_scale}});
    worst = std::max(worst, s.max_abs_error);
    worst_half_scale = std::max(worst_half_scale, s.max_half_scale);
  }
  write_json(out / "quantize_report.json",
             {{"k", mask.k()},
              {"max_abs_error", worst},
              {"max_half_scale", worst_half_scale},
              {"layers", layers}});
  std::fprintf(stderr, "quantized %zu tensors; max error %.3g (half scale %.3g)\n",
               ckpt.quantized.size(), worst, worst_half_scale);
  return kExitOk;
}

int cmd_verify_theory(const ExperimentConfig& config,
                      const std::filesystem::path& out) {
  const auto rows = run_default_suite(config.theory);
  std::filesystem::create_directories(out);
  write_suite_csv(out / "suite.csv", rows);
  nlohmann::json all = nlohmann::json::array();
  std::size_t failed = 0;
  for (const auto& r : rows) {
    all.push_back(to_json(r));
    if (!r.satisfied) {
      ++failed;
      std::fprintf(stderr, "FAILED %s/%s: lhs %.6g > rhs %.6g\n",
                   r.trial.c_str(), r.form.c_str(), r.measured_lhs,
                   r.bound_rhs);
    }
  }
  open_out(out / "suite.json") << all.dump(2) << '\n';
  std::fprintf(stderr, "theory suite: %zu/%zu rows satisfied\n",
               rows.size() - failed, rows.size());
  return failed == 0 ? kExitOk : kExitTheory;
}

namespace {

// Median microseconds of four masked axpy passes (perturb, unperturb,
// restore, update) over k of d coordinates.
double time_perturb_update(std::size_t d, std::size_t k, std::size_t repeats,
                           std::uint64_t seed) {
  ParamStore p;
  p.add("w", Tensor({d}));
  SparseMask mask = SparseMask::full(p);
  if (k < d) {
    RngStream s(seed, 7);
    mask = random_mask(p, double(k) / double(d), s);
  }
  std::vector<double> times;
  const RngStream start(seed, 8);
  for (std::size_t r = 0; r <= repeats; ++r) {
    const auto t0 = Clock::now();
    for (double alpha : {1e-3, -2e-3, 1e-3, -1e-4}) {
      replay_axpy(p, start, mask, alpha);
    }
    const double us = std::chrono::duration<double, std::micro>(
                          Clock::now() - t0)
                          .count();
    if (r > 0) times.push_back(us);  // first pass warms up
  }
  std::nth_element(times.begin(), times.begin() + times.size() / 2, times.end());
  return times[times.size() / 2];
}

}  // namespace

int cmd_bench(const ExperimentConfig& config, const std::filesystem::path& out) {
  BenchOptions opt;
  opt.sizes = config.bench.sizes;
  opt.batches = config.bench.batches;
  opt.sparsities = config.bench.sparsities;
  opt.repeats = config.bench.repeats;
  opt.warmup = config.bench.warmup;
  opt.seed = config.seed;
  const auto rows = bench_crossover(opt);
  std::filesystem::create_directories(out);
  write_bench_csv(out / "bench.csv", rows);

  const std::size_t d = config.bench.packed_dim;
  const std::size_t k = count_for_fraction(config.bench.packed_fraction, d);
  const double full_us = time_perturb_update(d, d, opt.repeats, config.seed);
  const double packed_us = time_perturb_update(d, k, opt.repeats, config.seed);

  std::ofstream summary = open_out(out / "bench_summary.txt");
  summary << "forward paths (median us):\n";
  for (std::size_t i = 0; i + 1 < rows.size(); i += 2) {
    const BenchRow& a = rows[i];
    const BenchRow& b = rows[i + 1];
    char line[256];
    std::snprintf(line, sizeof line,
                  "  %zux%zu batch %zu sparsity %.4g: %s %.1f, %s %.1f -> %s "
                  "faster\n",
                  a.rows, a.cols, a.batch, a.sparsity, a.path.c_str(),
                  a.median_us, b.path.c_str(), b.median_us,
                  (a.median_us <= b.median_us ? a.path : b.path).c_str());
    summary << line;
  }
  char line[256];
  std::snprintf(line, sizeof line,
                "perturb+update at d=%zu: full %.1f us, packed k=%zu %.1f us "
                "(%.2f%%)\n",
                d, full_us, k, packed_us, 100.0 * packed_us / full_us);
  summary << line;
  std::fputs(line, stderr);
  return kExitOk;
}

int cmd_export_curve(const ExperimentConfig& config,
                     const std::filesystem::path& out) {
  const Workspace ws = build_workspace(config);
  const Dataset& data = config.mask.source == MaskSource::kSurrogate
                            ? scoring_data(config, ws)
                            : ws.train;
  const SensitivityScores scores = score_sensitivity(
      ws.spec, ws.params, data, config.loss, config.mask.score_batches);
  std::filesystem::create_directories(out);
  write_curve_csv(out / "curve.csv", coverage_curve(scores.scores));
  return kExitOk;
}

int run_guarded(int (*command)(const ExperimentConfig&,
                               const std::filesystem::path&),
                const ExperimentConfig& config,
                const std::filesystem::path& out) {
  try {
    return command(config, out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const StructuralError& e) {
    std::fprintf(stderr, "structural error: %s\n", e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const IntegrityError& e) {
    std::fprintf(stderr, "integrity error: %s\n", e.what());
    return kExitNumeric;
  }
}

}  // namespace zosparse::cli
