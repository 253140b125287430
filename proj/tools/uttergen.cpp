// Copyright 2026 The Uttergen Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <iostream>

#include "CLI11.hpp"
#include "uttergen/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"uttergen: generate, adapt and evaluate intent-conditioned utterances"};
  app.require_subcommand(1);

  uttergen::CommandOptions opts;
  bool quiet = false;
  std::uint64_t seed = 0;
  std::string profile;
  std::string strategy;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "Pipeline config (JSON)")->required();
    sub->add_option("--seed", seed, "Global seed (overrides the config)");
    sub->add_option("--profile", profile, "Fine-tuning profile")
        ->check(CLI::IsMember({"paper-faithful", "desk"}));
    sub->add_flag("--force", opts.force, "Overwrite artifacts newer than their inputs");
    sub->add_flag("-q,--quiet", quiet, "No progress output");
  };

  const std::vector<std::pair<std::string, std::string>> stages{
      {"ingest", "Normalize the corpus and build the vocabulary"},
      {"split", "Split into train and test intents"},
      {"pretrain", "Train the unconditional base model"},
      {"finetune", "Fine-tune the conditional (zero-shot) model"},
      {"adapt", "One-shot adaptation for every test intent"},
      {"generate", "Generate utterances for test intents"},
      {"evaluate", "Compute metrics for generated and reference data"},
      {"report", "Write the comparison table and plot points"},
      {"all", "Run every stage in order"},
  };
  for (const auto& [name, help] : stages) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    if (name == "generate" || name == "all") {
      sub->add_option("--strategy", strategy, "Only this configured strategy");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  auto* sub = app.get_subcommands().front();
  if (sub->count("--seed")) opts.seed = seed;
  if (!profile.empty()) opts.profile = profile;
  if (!strategy.empty()) opts.strategy = strategy;

  try {
    auto log = quiet ? uttergen::Logger([](const std::string&) {}) : uttergen::stderr_logger();
    const auto ctx = uttergen::make_context(opts, std::move(log));
    uttergen::run_stage(sub->get_name(), ctx, opts.strategy);
  } catch (const std::exception& e) {
    std::cerr << "uttergen " << sub->get_name() << ": error: " << e.what() << '\n';
    return uttergen::exit_code_for(e);
  }
  return 0;
}
