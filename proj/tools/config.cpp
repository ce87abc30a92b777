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

#include "config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "zosparse/errors.hpp"

namespace zosparse::cli {

namespace {

using nlohmann::json;

// Reads fields of one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw UsageError(where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw UsageError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename T>
  void get_optional(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!obj_.contains(key) || obj_.at(key).is_null()) return;
    T v{};
    get(key, v);
    out = std::move(v);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.contains(key)) {
        throw UsageError("unknown config key " + where_ + "." + key);
      }
    }
  }

 private:
  const json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename Enum, typename Parse>
void get_enum(Fields& f, const char* key, Enum& out, Parse parse) {
  std::optional<std::string> s;
  f.get_optional(key, s);
  if (s) out = parse(*s);
}

void require_file(const std::optional<std::filesystem::path>& p,
                  const std::string& what) {
  if (p && !std::filesystem::is_regular_file(*p)) {
    throw UsageError(what + " '" + p->string() + "' does not exist");
  }
}

json optional_path(const std::optional<std::filesystem::path>& p) {
  return p ? json(p->string()) : json(nullptr);
}

}  // namespace

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  zo.seed = s;
  theory.seed = s;
}

void ExperimentConfig::validate() const {
  if (model.widths.size() < 2) {
    throw UsageError("model.widths needs input and output sizes");
  }
  for (auto w : model.widths) {
    if (w == 0) throw UsageError("model.widths entries must be positive");
  }
  if (task.source != "two_moons" && task.source != "file") {
    throw UsageError("task.source must be 'two_moons' or 'file'");
  }
  if (task.source == "two_moons") {
    if (task.which != "a" && task.which != "b") {
      throw UsageError("task.which must be 'a' or 'b'");
    }
    if (task.size == 0 || task.validation_size == 0) {
      throw UsageError("task.size and task.validation_size must be positive");
    }
  } else if (!task.path) {
    throw UsageError("task.source 'file' needs task.path");
  }
  if (init.pretrain_task != "a" && init.pretrain_task != "b") {
    throw UsageError("init.pretrain_task must be 'a' or 'b'");
  }
  zo.validate();
  if (!(mask.fraction > 0.0 && mask.fraction <= 1.0)) {
    throw UsageError("mask.fraction must lie in (0, 1]");
  }
  if (mask.refresh_every == 0 || mask.score_batches == 0) {
    throw UsageError("mask.refresh_every and mask.score_batches must be >= 1");
  }
  if (eval.interval == 0) throw UsageError("eval.interval must be >= 1");
  if (bench.repeats < 3) throw UsageError("bench.repeats must be >= 3");
  if (!(bench.packed_fraction > 0.0 && bench.packed_fraction <= 1.0)) {
    throw UsageError("bench.packed_fraction must lie in (0, 1]");
  }
  require_file(task.path, "task.path");
  require_file(task.validation_path, "task.validation_path");
  require_file(init.checkpoint, "init.checkpoint");
  require_file(mask.path, "mask.path");
  require_file(mask.surrogate_path, "mask.surrogate_path");
}

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig c;
  Fields top(doc, "config");
  std::uint64_t seed = 0;
  top.get("seed", seed);

  if (const json* m = top.child("model")) {
    Fields f(*m, top.path("model"));
    f.get("widths", c.model.widths);
    get_enum(f, "activation", c.model.activation, parse_activation);
    f.finish();
  }
  if (const json* t = top.child("task")) {
    Fields f(*t, top.path("task"));
    f.get("source", c.task.source);
    f.get("which", c.task.which);
    f.get("seed", c.task.seed);
    f.get("size", c.task.size);
    f.get("validation_size", c.task.validation_size);
    f.get_optional("path", c.task.path);
    f.get_optional("validation_path", c.task.validation_path);
    f.finish();
  }
  get_enum(top, "loss", c.loss, parse_loss_kind);
  if (const json* i = top.child("init")) {
    Fields f(*i, top.path("init"));
    f.get_optional("checkpoint", c.init.checkpoint);
    f.get("seed", c.init.seed);
    f.get("pretrain_task", c.init.pretrain_task);
    f.get("pretrain_steps", c.init.pretrain_steps);
    f.get("pretrain_lr", c.init.pretrain_lr);
    f.get("pretrain_batch_size", c.init.pretrain_batch_size);
    f.finish();
  }
  if (const json* z = top.child("zo")) {
    Fields f(*z, top.path("zo"));
    f.get("eps", c.zo.eps);
    f.get("lr", c.zo.lr);
    f.get("steps", c.zo.steps);
    f.get("batch_size", c.zo.batch_size);
    get_enum(f, "mask_mode", c.zo.mask_mode, parse_mask_mode);
    f.finish();
  }
  if (const json* m = top.child("mask")) {
    Fields f(*m, top.path("mask"));
    get_enum(f, "source", c.mask.source, parse_mask_source);
    f.get("fraction", c.mask.fraction);
    get_enum(f, "scope", c.mask.scope, parse_mask_scope);
    f.get("refresh_every", c.mask.refresh_every);
    f.get("score_batches", c.mask.score_batches);
    f.get_optional("path", c.mask.path);
    f.get_optional("surrogate_path", c.mask.surrogate_path);
    f.finish();
  }
  top.get("quantize", c.quantize);
  if (const json* e = top.child("eval")) {
    Fields f(*e, top.path("eval"));
    f.get("interval", c.eval.interval);
    f.get_optional("target_loss", c.eval.target_loss);
    f.finish();
  }
  top.get("timing", c.timing);
  std::string out = c.out.string();
  top.get("out", out);
  c.out = out;
  if (const json* t = top.child("theory")) {
    Fields f(*t, top.path("theory"));
    f.get("T", c.theory.T);
    f.get("seeds", c.theory.seeds);
    f.get("lr_multiplier", c.theory.lr_multiplier);
    f.get("mc_samples", c.theory.mc_samples);
    f.finish();
  }
  if (const json* b = top.child("bench")) {
    Fields f(*b, top.path("bench"));
    f.get("sizes", c.bench.sizes);
    f.get("batches", c.bench.batches);
    f.get("sparsities", c.bench.sparsities);
    f.get("repeats", c.bench.repeats);
    f.get("warmup", c.bench.warmup);
    f.get("packed_dim", c.bench.packed_dim);
    f.get("packed_fraction", c.bench.packed_fraction);
    f.finish();
  }
  top.finish();
  c.set_seed(seed);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw UsageError("config '" + path.string() + "': " + e.what());
  }
  return parse_config(doc);
}

json to_json(const ExperimentConfig& c) {
  json target = c.eval.target_loss ? json(*c.eval.target_loss) : json(nullptr);
  return {
      {"seed", c.seed},
      {"model",
       {{"widths", c.model.widths},
        {"activation", to_string(c.model.activation)}}},
      {"task",
       {{"source", c.task.source},
        {"which", c.task.which},
        {"seed", c.task.seed},
        {"size", c.task.size},
        {"validation_size", c.task.validation_size},
        {"path", optional_path(c.task.path)},
        {"validation_path", optional_path(c.task.validation_path)}}},
      {"loss", to_string(c.loss)},
      {"init",
       {{"checkpoint", optional_path(c.init.checkpoint)},
        {"seed", c.init.seed},
        {"pretrain_task", c.init.pretrain_task},
        {"pretrain_steps", c.init.pretrain_steps},
        {"pretrain_lr", c.init.pretrain_lr},
        {"pretrain_batch_size", c.init.pretrain_batch_size}}},
      {"zo",
       {{"eps", c.zo.eps},
        {"lr", c.zo.lr},
        {"steps", c.zo.steps},
        {"batch_size", c.zo.batch_size},
        {"mask_mode", to_string(c.zo.mask_mode)}}},
      {"mask",
       {{"source", to_string(c.mask.source)},
        {"fraction", c.mask.fraction},
        {"scope", to_string(c.mask.scope)},
        {"refresh_every", c.mask.refresh_every},
        {"score_batches", c.mask.score_batches},
        {"path", optional_path(c.mask.path)},
        {"surrogate_path", optional_path(c.mask.surrogate_path)}}},
      {"quantize", c.quantize},
      {"eval", {{"interval", c.eval.interval}, {"target_loss", target}}},
      {"timing", c.timing},
      {"out", c.out.string()},
      {"theory",
       {{"T", c.theory.T},
        {"seeds", c.theory.seeds},
        {"lr_multiplier", c.theory.lr_multiplier},
        {"mc_samples", c.theory.mc_samples}}},
      {"bench",
       {{"sizes", c.bench.sizes},
        {"batches", c.bench.batches},
        {"sparsities", c.bench.sparsities},
        {"repeats", c.bench.repeats},
        {"warmup", c.bench.warmup},
        {"packed_dim", c.bench.packed_dim},
        {"packed_fraction", c.bench.packed_fraction}}},
  };
}

}  // namespace zosparse::cli
