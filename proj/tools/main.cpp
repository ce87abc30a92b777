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

#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"
#include "zosparse/errors.hpp"

namespace {

using zosparse::cli::ExperimentConfig;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config (JSON)");
  sub->add_option("--out", c.out, "output directory (overrides config.out)");
  sub->add_option("--seed", c.seed, "run seed (overrides config.seed)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse zeroth-order fine-tuning toolkit"};
  app.require_subcommand(1);

  using Command = int (*)(const ExperimentConfig&, const std::filesystem::path&);
  struct Entry {
    const char* name;
    const char* help;
    Command run;
  };
  const Entry entries[] = {
      {"select-mask", "score sensitivity and write a sparse mask",
       zosparse::cli::cmd_select_mask},
      {"train", "zeroth-order fine-tuning run", zosparse::cli::cmd_train},
      {"quantize", "decompose and 4-bit quantize a checkpoint",
       zosparse::cli::cmd_quantize},
      {"verify-theory", "run the convergence and moment checks",
       zosparse::cli::cmd_verify_theory},
      {"bench", "time the sparse forward paths", zosparse::cli::cmd_bench},
      {"export-curve", "write the cumulative sensitivity curve",
       zosparse::cli::cmd_export_curve},
  };

  Common common;
  Command chosen = nullptr;
  for (const Entry& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    add_common(sub, common);
    sub->callback([&chosen, run = e.run] { chosen = run; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : zosparse::cli::kExitUsage;
  }

  ExperimentConfig config;
  try {
    if (!common.config.empty()) config = zosparse::cli::load_config(common.config);
    if (common.seed) config.set_seed(*common.seed);
    if (!common.out.empty()) config.out = common.out;
    config.validate();
  } catch (const zosparse::UsageError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return zosparse::cli::kExitUsage;
  }
  return zosparse::cli::run_guarded(chosen, config, config.out);
}
