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

// Pipeline stages over a work directory:
//
//   ingest    corpus.jsonl, vocab.json
//   split     train.jsonl, test.jsonl, split_report.json
//   pretrain  base.ckpt, pretrain_log.json          (unconditional LM)
//   finetune  zeroshot.ckpt, finetune_log.json      (conditional copy of base)
//   adapt     adapted/<service>__<intent>.ckpt + .trace.jsonl
//   generate  generated/<strategy>.jsonl + .stats.json
//   evaluate  reports/<strategy>.metrics.json, reports/reference.metrics.json
//   report    reports/comparison.{txt,json}, reports/fig2_points.csv
//
// Every stage is a pure function of the config, the seed and the previous
// stages' artifacts.

#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "uttergen/checkpoint.hpp"
#include "uttergen/corpus.hpp"
#include "uttergen/decoding.hpp"
#include "uttergen/metrics.hpp"
#include "uttergen/oneshot.hpp"
#include "uttergen/train.hpp"

namespace uttergen {

namespace fs = std::filesystem;

/// A named decoding setup to compare; `model` is "zero_shot" or "one_shot".
struct StrategySpec {
  std::string name;
  std::string model = "zero_shot";
  GenerationConfig generation;
};

struct PipelineConfig {
  fs::path config_path;  // empty when built in code
  fs::path corpus;
  fs::path split_plan;
  fs::path references;
  fs::path work_dir;

  int vocab_min_freq = 1;
  LmConfig lm;
  TrainHyper pretrain = [] {
    TrainHyper h;
    h.batch_size = 8;
    h.learning_rate = 3e-4;
    h.epochs = 40;
    return h;
  }();
  std::map<std::string, TrainHyper> profiles{{"paper-faithful", TrainHyper::paper_faithful()},
                                             {"desk", TrainHyper::desk()}};
  std::string profile = "desk";
  std::vector<StrategySpec> strategies;
  PpoConfig ppo;
  std::vector<ShiftProbe> probes;
  double classifier_split = 0.5;
  std::uint64_t seed = 0;

  const TrainHyper& finetune_hyper() const {
    auto it = profiles.find(profile);
    if (it == profiles.end()) throw ConfigError("unknown training profile \"" + profile + "\"");
    return it->second;
  }

  const StrategySpec& strategy(const std::string& name) const {
    for (const auto& s : strategies) {
      if (s.name == name) return s;
    }
    std::string valid;
    for (const auto& s : strategies) valid += (valid.empty() ? "" : ", ") + s.name;
    throw ConfigError("unknown strategy \"" + name + "\"; valid strategies: " + valid);
  }

  /// Stage seeds are all derived from the global seed.
  std::uint64_t stage_seed(std::string_view stage) const { return derive_seed(seed, stage); }

  void validate() const {
    if (corpus.empty() || work_dir.empty()) throw ConfigError("config needs paths.corpus and paths.work_dir");
    if (vocab_min_freq < 1) throw ConfigError("vocab.min_freq must be >= 1");
    finetune_hyper().validate();
    pretrain.validate();
    ppo.validate();
    std::set<std::string> names;
    for (const auto& s : strategies) {
      if (s.name.empty()) throw ConfigError("strategy with empty name");
      if (!names.insert(s.name).second) throw ConfigError("duplicate strategy name " + s.name);
      if (s.model != "zero_shot" && s.model != "one_shot") {
        throw ConfigError("strategy " + s.name + ": model must be zero_shot or one_shot");
      }
    }
    if (!(classifier_split > 0.0 && classifier_split < 1.0)) throw ConfigError("classifier_split must be in (0, 1)");
  }

  fs::path work(const std::string& rel) const { return work_dir / rel; }
};

/// Default strategy list: the configurations compared in the report.
inline std::vector<StrategySpec> default_strategies() {
  auto make = [](std::string name, std::string model, Strategy s, auto tweak) {
    StrategySpec spec{std::move(name), std::move(model), {}};
    spec.generation.strategy = s;
    tweak(spec.generation);
    return spec;
  };
  return {
      make("top_k-4", "zero_shot", Strategy::kTopK, [](GenerationConfig& g) { g.k = 4; }),
      make("nucleus-0.6+pdc", "zero_shot", Strategy::kNucleus,
           [](GenerationConfig& g) {
             g.p = 0.6;
             g.pdc_enabled = true;
           }),
      make("beam-8+pdc", "zero_shot", Strategy::kBeam,
           [](GenerationConfig& g) {
             g.beam_width = 8;
             g.pdc_enabled = true;
           }),
      make("beam-8", "zero_shot", Strategy::kBeam, [](GenerationConfig& g) { g.beam_width = 8; }),
      make("nucleus-0.4", "zero_shot", Strategy::kNucleus, [](GenerationConfig& g) { g.p = 0.4; }),
      make("oneshot-nucleus-0.4", "one_shot", Strategy::kNucleus, [](GenerationConfig& g) { g.p = 0.4; }),
  };
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const fs::path& config_path) {
  PipelineConfig c;
  c.config_path = config_path;
  c.strategies = default_strategies();
  const fs::path base = config_path.empty() ? fs::path(".") : config_path.parent_path();
  auto resolve = [&](const std::string& p) { return p.empty() ? fs::path() : (base / p).lexically_normal(); };
  try {
    c.seed = j.value("seed", c.seed);
    const auto paths = j.value("paths", nlohmann::json::object());
    c.corpus = resolve(paths.value("corpus", ""));
    c.split_plan = resolve(paths.value("split_plan", ""));
    c.references = resolve(paths.value("references", ""));
    c.work_dir = resolve(paths.value("work_dir", ""));
    if (paths.contains("probes")) {
      const auto probe_path = resolve(paths.at("probes").get<std::string>());
      std::ifstream in(probe_path);
      if (!in) throw DataError("cannot open probe file " + probe_path.string());
      c.probes = nlohmann::json::parse(in).get<std::vector<ShiftProbe>>();
    }
    if (j.contains("probes")) c.probes = j.at("probes").get<std::vector<ShiftProbe>>();
    c.vocab_min_freq = j.value("vocab", nlohmann::json::object()).value("min_freq", c.vocab_min_freq);
    if (j.contains("lm")) c.lm = j.at("lm").get<LmConfig>();
    if (j.contains("pretrain")) from_json(j.at("pretrain"), c.pretrain);
    if (j.contains("profiles")) {
      for (const auto& [name, h] : j.at("profiles").items()) {
        TrainHyper base_h = c.profiles.contains(name) ? c.profiles.at(name) : TrainHyper::desk();
        from_json(h, base_h);
        c.profiles[name] = base_h;
      }
    }
    c.profile = j.value("profile", c.profile);
    if (j.contains("strategies")) {
      c.strategies.clear();
      for (const auto& s : j.at("strategies")) {
        StrategySpec spec;
        spec.name = s.at("name").get<std::string>();
        spec.model = s.value("model", spec.model);
        from_json(s, spec.generation);
        c.strategies.push_back(std::move(spec));
      }
    }
    if (j.contains("ppo")) from_json(j.at("ppo"), c.ppo);
    c.classifier_split = j.value("classifier_split", c.classifier_split);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return pipeline_config_from_json(j, path);
}

/// Writes stage outputs. Identical content leaves the file untouched. An
/// existing file that is newer than every input and would change is only
/// replaced with `force`.
class ArtifactWriter {
 public:
  explicit ArtifactWriter(bool force = false) : force_(force) {}

  void write(const fs::path& path, const std::string& bytes, const std::vector<fs::path>& inputs) const {
    if (fs::exists(path)) {
      if (read_file_bytes(path.string()) == bytes) return;
      if (!force_) {
        const auto out_time = fs::last_write_time(path);
        bool newer_than_inputs = true;
        for (const auto& in : inputs) {
          if (!in.empty() && fs::exists(in) && fs::last_write_time(in) >= out_time) newer_than_inputs = false;
        }
        if (newer_than_inputs) {
          throw DataError("refusing to overwrite " + path.string() +
                          ": it is newer than its inputs and the new output differs; rerun with --force");
        }
      }
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing " + path.string());
  }

 private:
  bool force_;
};

using Logger = std::function<void(const std::string&)>;

inline Logger stderr_logger() {
  return [](const std::string& msg) { std::clog << "[uttergen] " << msg << '\n'; };
}

struct StageContext {
  PipelineConfig config;
  ArtifactWriter writer;
  Logger log = [](const std::string&) {};

  std::vector<fs::path> with_config(std::vector<fs::path> inputs) const {
    if (!config.config_path.empty()) inputs.push_back(config.config_path);
    return inputs;
  }
};

namespace detail {

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline std::string records_bytes(const Corpus& c) {
  std::ostringstream os;
  write_records(c, os);
  return os.str();
}

inline void require_file(const fs::path& p, const std::string& produced_by) {
  if (!fs::exists(p)) {
    throw DataError("missing " + p.string() + (produced_by.empty() ? "" : "; run `" + produced_by + "` first"));
  }
}

inline Vocabulary load_vocab(const fs::path& p) {
  require_file(p, "uttergen ingest");
  std::ifstream in(p);
  try {
    return Vocabulary::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad vocabulary file " + p.string() + ": " + e.what());
  }
}

inline std::string intent_slug(const IntentSpec& s) { return s.service + "__" + s.intent; }

inline std::string loss_log(const std::string& stage, const std::vector<double>& losses, std::size_t examples,
                            const TrainHyper& h) {
  return dump_json({{"stage", stage}, {"examples", examples}, {"hyper", h}, {"epoch_mean_nll", losses}});
}

}  // namespace detail

inline void run_ingest(const StageContext& ctx) {
  const auto& c = ctx.config;
  const Corpus corpus = load_records(c.corpus.string());
  const Vocabulary vocab = build_vocabulary(corpus, c.vocab_min_freq, {.include_descriptions = true});
  const auto inputs = ctx.with_config({c.corpus});
  ctx.writer.write(c.work("corpus.jsonl"), detail::records_bytes(corpus), inputs);
  ctx.writer.write(c.work("vocab.json"), detail::dump_json(vocab.to_json()), inputs);
  ctx.log("ingested " + std::to_string(corpus.size()) + " records, " + std::to_string(corpus.intents().size()) +
          " intents, vocabulary " + std::to_string(vocab.size()));
}

inline void run_split(const StageContext& ctx) {
  const auto& c = ctx.config;
  detail::require_file(c.work("corpus.jsonl"), "uttergen ingest");
  if (c.split_plan.empty()) throw ConfigError("config needs paths.split_plan");
  const Corpus corpus = load_records(c.work("corpus.jsonl").string());
  const SplitPlan plan = load_split_plan(c.split_plan.string());
  const SplitResult split = make_split(corpus, plan);
  if (split.train.empty() || split.test.empty()) throw DataError("split leaves one side empty");
  const auto inputs = ctx.with_config({c.work("corpus.jsonl"), c.split_plan});
  ctx.writer.write(c.work("train.jsonl"), detail::records_bytes(split.train), inputs);
  ctx.writer.write(c.work("test.jsonl"), detail::records_bytes(split.test), inputs);
  nlohmann::json report{{"train_records", split.train.size()},
                        {"test_records", split.test.size()},
                        {"train_intents", split.train.intents().size()},
                        {"test_intents", split.test.intents().size()},
                        {"dropped", split.dropped}};
  ctx.writer.write(c.work("split_report.json"), detail::dump_json(report), inputs);
  ctx.log("split: " + std::to_string(split.train.size()) + " train / " + std::to_string(split.test.size()) +
          " test records");
}

inline LmConfig model_config(const PipelineConfig& c, const Vocabulary& vocab) {
  LmConfig lm = c.lm;
  lm.vocab_size = static_cast<int>(vocab.size());
  lm.seed = c.stage_seed("lm-init");
  lm.validate();
  return lm;
}

/// Trains the unconditional base model on every ingested utterance.
inline void run_pretrain(const StageContext& ctx) {
  const auto& c = ctx.config;
  const Vocabulary vocab = detail::load_vocab(c.work("vocab.json"));
  detail::require_file(c.work("corpus.jsonl"), "uttergen ingest");
  const Corpus corpus = load_records(c.work("corpus.jsonl").string());
  const LmConfig lm = model_config(c, vocab);
  std::vector<TrainingExample> data;
  for (const auto& r : corpus.records()) {
    if (r.words.empty()) continue;
    data.push_back(encode_unconditional(r.words, vocab, static_cast<std::size_t>(lm.context_length)));
  }
  TrainHyper h = c.pretrain;
  h.seed = c.stage_seed("pretrain");
  const auto res = train(init_params<float>(lm), lm, data, h, [&](int e, double loss) {
    ctx.log("pretrain epoch " + std::to_string(e) + " nll " + std::to_string(loss));
  });
  const auto inputs = ctx.with_config({c.work("vocab.json"), c.work("corpus.jsonl")});
  ctx.writer.write(c.work("base.ckpt"), serialize_checkpoint(res.params, lm), inputs);
  ctx.writer.write(c.work("pretrain_log.json"), detail::loss_log("pretrain", res.epoch_losses, data.size(), h), inputs);
}

/// Conditional fine-tuning of a copy of the base model on the train split.
inline void run_finetune(const StageContext& ctx) {
  const auto& c = ctx.config;
  const Vocabulary vocab = detail::load_vocab(c.work("vocab.json"));
  detail::require_file(c.work("base.ckpt"), "uttergen pretrain");
  detail::require_file(c.work("train.jsonl"), "uttergen split");
  const LmModel base = load_checkpoint(c.work("base.ckpt").string());
  const Corpus train_corpus = load_records(c.work("train.jsonl").string());
  std::vector<TrainingExample> data;
  std::size_t truncated = 0;
  for (const auto& r : train_corpus.records()) {
    if (r.words.empty()) continue;
    data.push_back(encode_example(train_corpus.intent_of(r), r.words, vocab,
                                  static_cast<std::size_t>(base.config.context_length)));
    truncated += data.back().truncated;
  }
  TrainHyper h = c.finetune_hyper();
  h.seed = c.stage_seed("finetune");
  const auto res = train(base.params, base.config, data, h, [&](int e, double loss) {
    ctx.log("finetune epoch " + std::to_string(e) + " nll " + std::to_string(loss));
  });
  if (truncated) ctx.log(std::to_string(truncated) + " training utterances were truncated");
  const auto inputs = ctx.with_config({c.work("base.ckpt"), c.work("train.jsonl"), c.work("vocab.json")});
  ctx.writer.write(c.work("zeroshot.ckpt"), serialize_checkpoint(res.params, base.config), inputs);
  ctx.writer.write(c.work("finetune_log.json"), detail::loss_log("finetune", res.epoch_losses, data.size(), h),
                   inputs);
}

struct ReferenceExample {
  IntentSpec intent;
  std::string text;
  std::vector<std::string> words;
};

/// Reads {service, intent, reference_utterance} lines.
inline std::vector<ReferenceExample> load_references(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open reference file " + path.string());
  std::vector<ReferenceExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": malformed reference: " + e.what());
    }
    ReferenceExample r;
    r.intent.service = detail::required_string(obj, "service", where);
    r.intent.intent = detail::required_string(obj, "intent", where);
    r.text = detail::required_string(obj, "reference_utterance", where);
    r.words = normalize_tokens(r.text);
    if (r.words.empty()) throw DataError(where + ": empty reference utterance");
    out.push_back(std::move(r));
  }
  return out;
}

inline const ReferenceExample& find_reference(const std::vector<ReferenceExample>& refs, const IntentSpec& intent) {
  for (const auto& r : refs) {
    if (r.intent.service == intent.service && r.intent.intent == intent.intent) return r;
  }
  throw DataError("no reference utterance for intent " + intent.service + "/" + intent.intent);
}

/// Test-split intents, in order of first appearance.
inline std::vector<IntentSpec> test_intents(const PipelineConfig& c) {
  detail::require_file(c.work("test.jsonl"), "uttergen split");
  return load_records(c.work("test.jsonl").string()).intents();
}

inline fs::path adapted_checkpoint_path(const PipelineConfig& c, const IntentSpec& intent) {
  return c.work("adapted/" + detail::intent_slug(intent) + ".ckpt");
}

/// One-shot PPO adaptation of the zero-shot model for every test intent.
inline void run_adapt(const StageContext& ctx) {
  const auto& c = ctx.config;
  const Vocabulary vocab = detail::load_vocab(c.work("vocab.json"));
  detail::require_file(c.work("base.ckpt"), "uttergen pretrain");
  detail::require_file(c.work("zeroshot.ckpt"), "uttergen finetune");
  if (c.references.empty()) throw ConfigError("config needs paths.references");
  const LmModel base = load_checkpoint(c.work("base.ckpt").string());
  const LmModel zero = load_checkpoint(c.work("zeroshot.ckpt").string());
  if (!(base.config == zero.config)) throw DataError("base and zero-shot checkpoints have different configs");
  const auto refs = load_references(c.references);
  const auto intents = test_intents(c);
  for (const auto& intent : intents) find_reference(refs, intent);  // fail before any work

  const auto inputs =
      ctx.with_config({c.work("base.ckpt"), c.work("zeroshot.ckpt"), c.references, c.work("test.jsonl")});
  for (std::size_t i = 0; i < intents.size(); ++i) {
    const auto& intent = intents[i];
    const auto& ref = find_reference(refs, intent);
    PpoConfig ppo = c.ppo;
    ppo.seed = derive_seed(c.stage_seed("adapt"), static_cast<std::uint64_t>(i));
    const TokenSeq reference = vocab.encode(ref.words);
    const auto res = adapt_one_shot(zero.params, base.params, base.config, intent, reference, vocab, ppo);
    std::ostringstream trace;
    for (const auto& t : res.trace) trace << nlohmann::json(t).dump() << '\n';
    ctx.writer.write(adapted_checkpoint_path(c, intent), serialize_checkpoint(res.params, base.config), inputs);
    ctx.writer.write(c.work("adapted/" + detail::intent_slug(intent) + ".trace.jsonl"), trace.str(), inputs);
    const double first = res.trace.empty() ? 0.0 : res.trace.front().mean_reward;
    const double last = res.trace.empty() ? 0.0 : res.trace.back().mean_reward;
    ctx.log("adapted " + intent.service + "/" + intent.intent + ": mean reward " + std::to_string(first) + " -> " +
            std::to_string(last));
  }
}

/// Generates with one configured strategy for every test intent.
inline GenerationResult generate_with_strategy(const PipelineConfig& c, const StrategySpec& spec,
                                               const Vocabulary& vocab, const std::vector<IntentSpec>& intents,
                                               const LmModel& base, const LmModel& zero,
                                               const std::vector<LmModel>& adapted) {
  GenerationConfig g = spec.generation;
  g.seed = c.stage_seed("generate:" + spec.name);
  const ContextualEmbedder embedder(base.params, base.config);
  auto embed = [&](const TokenSeq& u) { return embedder.sentence_embedding(u); };
  auto model_for = [&](std::size_t i) {
    const LmModel& m = spec.model == "one_shot" ? adapted.at(i) : zero;
    return TransformerLm(m.params, m.config);
  };
  return generate_dataset(model_for, intents, vocab, g, embed);
}

inline void run_generate(const StageContext& ctx, const std::optional<std::string>& only = std::nullopt) {
  const auto& c = ctx.config;
  std::vector<const StrategySpec*> specs;
  if (only) {
    specs.push_back(&c.strategy(*only));
  } else {
    for (const auto& s : c.strategies) specs.push_back(&s);
  }
  const Vocabulary vocab = detail::load_vocab(c.work("vocab.json"));
  detail::require_file(c.work("base.ckpt"), "uttergen pretrain");
  detail::require_file(c.work("zeroshot.ckpt"), "uttergen finetune");
  const LmModel base = load_checkpoint(c.work("base.ckpt").string());
  const LmModel zero = load_checkpoint(c.work("zeroshot.ckpt").string());
  const auto intents = test_intents(c);
  std::vector<LmModel> adapted;
  std::vector<fs::path> adapted_paths;
  const bool need_adapted =
      std::any_of(specs.begin(), specs.end(), [](const StrategySpec* s) { return s->model == "one_shot"; });
  if (need_adapted) {
    for (const auto& intent : intents) {
      const auto p = adapted_checkpoint_path(c, intent);
      detail::require_file(p, "uttergen adapt");
      adapted.push_back(load_checkpoint(p.string()));
      adapted_paths.push_back(p);
    }
  }
  for (const auto* spec : specs) {
    const auto result = generate_with_strategy(c, *spec, vocab, intents, base, zero, adapted);
    std::ostringstream os;
    write_generated(result.samples, c.stage_seed("generate:" + spec->name), os);
    nlohmann::json stats = nlohmann::json::array();
    std::size_t raw = 0, kept = 0;
    for (const auto& s : result.stats) {
      stats.push_back({{"service", s.intent.service},
                       {"intent", s.intent.intent},
                       {"requested", s.requested},
                       {"raw", s.raw},
                       {"kept", s.kept},
                       {"duplicates", s.duplicates},
                       {"shortfall", s.shortfall}});
      raw += s.raw;
      kept += s.kept;
    }
    nlohmann::json meta{{"name", spec->name},
                        {"model", spec->model},
                        {"tag", spec->generation.tag()},
                        {"generation", spec->generation},
                        {"per_intent", stats},
                        {"raw", raw},
                        {"kept", kept}};
    auto inputs = ctx.with_config({c.work("base.ckpt"), c.work("zeroshot.ckpt"), c.work("test.jsonl")});
    if (spec->model == "one_shot") inputs.insert(inputs.end(), adapted_paths.begin(), adapted_paths.end());
    ctx.writer.write(c.work("generated/" + spec->name + ".jsonl"), os.str(), inputs);
    ctx.writer.write(c.work("generated/" + spec->name + ".stats.json"), detail::dump_json(meta), inputs);
    ctx.log("generated " + spec->name + ": " + std::to_string(raw) + " raw, " + std::to_string(kept) + " kept");
  }
}

/// Per-intent diversity plus the mean over intents (the headline numbers).
struct DiversityBreakdown {
  std::vector<std::pair<IntentSpec, DiversityStats>> per_intent;
  std::map<int, double> mean_dist;
  std::map<int, double> mean_ent;
  DiversityStats pooled;
};

inline DiversityBreakdown diversity_by_intent(const Corpus& corpus) {
  DiversityBreakdown b;
  std::vector<std::vector<Utterance>> groups(corpus.intents().size());
  std::vector<Utterance> all;
  for (const auto& r : corpus.records()) {
    groups[r.intent].push_back(r.words);
    all.push_back(r.words);
  }
  std::map<int, int> counts;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto s = diversity_stats(groups[i]);
    for (const auto& [k, v] : s.dist) {
      b.mean_dist[k] += v;
      ++counts[k];
    }
    for (const auto& [k, v] : s.ent) b.mean_ent[k] += v;
    b.per_intent.emplace_back(corpus.intents()[i], std::move(s));
  }
  for (auto& [k, v] : b.mean_dist) v /= counts[k];
  for (auto& [k, v] : b.mean_ent) v /= counts[k];
  b.pooled = diversity_stats(all);
  return b;
}

inline nlohmann::json to_json_value(const DiversityBreakdown& b) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& [spec, s] : b.per_intent) {
    per.push_back({{"service", spec.service}, {"intent", spec.intent}, {"diversity", s}});
  }
  nlohmann::json md = nlohmann::json::object(), me = nlohmann::json::object();
  for (const auto& [k, v] : b.mean_dist) md["dist_" + std::to_string(k)] = v;
  for (const auto& [k, v] : b.mean_ent) me["ent_" + std::to_string(k)] = v;
  return {{"per_intent", per}, {"mean_over_intents", {{"dist", md}, {"ent", me}}}, {"pooled", b.pooled}};
}

/// Everything computed for one set of utterances (generated or human).
struct MetricsReport {
  std::string name;
  std::string model;
  std::string tag;
  std::size_t samples = 0;
  DiversityBreakdown diversity;
  std::optional<double> acc_clsf;
  std::optional<double> acc_clsf_train;
  std::string classifier_note;
  std::map<std::string, std::size_t> fluency_counts;
  std::size_t fluent_samples = 0;
  std::vector<ProbeResult> probes;

  double dist4() const { return diversity.mean_dist.contains(4) ? diversity.mean_dist.at(4) : 0.0; }
  double ent4() const { return diversity.mean_ent.contains(4) ? diversity.mean_ent.at(4) : 0.0; }
};

inline nlohmann::json to_json_value(const MetricsReport& r) {
  return {{"name", r.name},
          {"model", r.model},
          {"tag", r.tag},
          {"samples", r.samples},
          {"diversity", to_json_value(r.diversity)},
          {"acc_clsf", r.acc_clsf ? nlohmann::json(*r.acc_clsf) : nlohmann::json()},
          {"acc_clsf_train", r.acc_clsf_train ? nlohmann::json(*r.acc_clsf_train) : nlohmann::json()},
          {"classifier_note", r.classifier_note},
          {"fluency", {{"violations", r.fluency_counts}, {"fluent_samples", r.fluent_samples}}},
          {"probes", r.probes},
          {"entropy_log_base", "e"}};
}

/// Scores a corpus of labeled utterances: diversity by intent, held-out
/// intent-classifier accuracy, fluency-rule counts and keyword probes.
inline MetricsReport evaluate_corpus(const Corpus& corpus, const std::string& name, const PipelineConfig& c,
                                     const Vocabulary* vocab) {
  MetricsReport r;
  r.name = name;
  r.samples = corpus.size();
  r.diversity = diversity_by_intent(corpus);

  std::vector<LabeledUtterance> labeled;
  std::vector<ProbeSample> probe_samples;
  for (const auto& rec : corpus.records()) {
    const auto& spec = corpus.intent_of(rec);
    labeled.push_back({spec.service + "/" + spec.intent, rec.words});
    probe_samples.push_back({spec.service, spec.intent, rec.words});
  }
  try {
    const auto cls = train_intent_classifier(labeled, c.classifier_split, c.stage_seed("classifier"));
    r.acc_clsf = cls.accuracy;
    r.acc_clsf_train = cls.train_accuracy;
  } catch (const DataError& e) {
    r.classifier_note = e.what();
  }

  const FluencyChecker checker(vocab);
  for (auto rule : all_fluency_rules()) r.fluency_counts[to_string(rule)] = 0;
  for (const auto& rec : corpus.records()) {
    const auto v = checker.check(rec.text);
    if (v.empty()) ++r.fluent_samples;
    std::set<FluencyRule> rules;
    for (const auto& x : v) rules.insert(x.rule);
    for (auto rule : rules) ++r.fluency_counts[to_string(rule)];
  }

  std::vector<ShiftProbe> present;
  for (const auto& p : c.probes) {
    if (corpus.find_intent(p.service, p.intent)) present.push_back(p);
  }
  r.probes = semantic_shift_probe(probe_samples, present);
  return r;
}

inline void run_evaluate(const StageContext& ctx) {
  const auto& c = ctx.config;
  const Vocabulary vocab = detail::load_vocab(c.work("vocab.json"));
  detail::require_file(c.work("test.jsonl"), "uttergen split");
  const Corpus test = load_records(c.work("test.jsonl").string());

  MetricsReport human = evaluate_corpus(test, "reference", c, &vocab);
  human.model = "human";
  human.tag = "test split";
  const auto pooled = evaluate_reference_corpus(test);
  auto human_json = to_json_value(human);
  human_json["pooled_reference"] = pooled;
  ctx.writer.write(c.work("reports/reference.metrics.json"), detail::dump_json(human_json),
                   ctx.with_config({c.work("test.jsonl"), c.work("vocab.json")}));

  for (const auto& spec : c.strategies) {
    const auto gen_path = c.work("generated/" + spec.name + ".jsonl");
    if (!fs::exists(gen_path)) {
      ctx.log("skipping " + spec.name + ": not generated");
      continue;
    }
    const Corpus generated = [&] {
      std::ifstream in(gen_path);
      return parse_records(in, gen_path.string());
    }();
    MetricsReport r = evaluate_corpus(generated, spec.name, c, &vocab);
    r.model = spec.model;
    r.tag = spec.generation.tag();
    ctx.writer.write(c.work("reports/" + spec.name + ".metrics.json"), detail::dump_json(to_json_value(r)),
                     ctx.with_config({gen_path, c.work("vocab.json")}));
    ctx.log("evaluated " + spec.name);
  }
}

/// One row of the comparison table.
struct ComparisonRow {
  std::string name;
  std::string model;
  std::string tag;
  std::optional<double> acc_clsf;
  double dist4 = 0;
  double ent4 = 0;
  std::size_t samples = 0;
};

inline std::string format_comparison_table(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "strategy" << std::setw(10) << "model" << std::setw(26) << "decoding"
     << std::right << std::setw(9) << "acc_clsf" << std::setw(9) << "Dist-4" << std::setw(9) << "Ent-4"
     << std::setw(9) << "samples" << '\n';
  os << std::string(96, '-') << '\n';
  os << std::fixed << std::setprecision(3);
  for (const auto& r : rows) {
    os << std::left << std::setw(24) << r.name << std::setw(10) << r.model << std::setw(26) << r.tag << std::right
       << std::setw(9);
    if (r.acc_clsf) {
      os << *r.acc_clsf;
    } else {
      os << "n/a";
    }
    os << std::setw(9) << r.dist4 << std::setw(9) << r.ent4 << std::setw(9) << r.samples << '\n';
  }
  os << "\nDist-4 and Ent-4 are means over intents; Ent-4 uses the natural log.\n";
  return os.str();
}

inline void run_report(const StageContext& ctx) {
  const auto& c = ctx.config;
  std::vector<ComparisonRow> rows;
  std::vector<fs::path> inputs;
  auto load = [&](const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
  };
  auto row_from = [](const nlohmann::json& j) {
    ComparisonRow r;
    r.name = j.at("name").get<std::string>();
    r.model = j.at("model").get<std::string>();
    r.tag = j.at("tag").get<std::string>();
    if (!j.at("acc_clsf").is_null()) r.acc_clsf = j.at("acc_clsf").get<double>();
    const auto& mean = j.at("diversity").at("mean_over_intents");
    r.dist4 = mean.at("dist").value("dist_4", 0.0);
    r.ent4 = mean.at("ent").value("ent_4", 0.0);
    r.samples = j.at("samples").get<std::size_t>();
    return r;
  };
  for (const auto& spec : c.strategies) {
    const auto p = c.work("reports/" + spec.name + ".metrics.json");
    if (!fs::exists(p)) continue;
    rows.push_back(row_from(load(p)));
    inputs.push_back(p);
  }
  const auto human_path = c.work("reports/reference.metrics.json");
  detail::require_file(human_path, "uttergen evaluate");
  rows.push_back(row_from(load(human_path)));
  inputs.push_back(human_path);
  if (rows.size() == 1) throw DataError("no strategy reports found; run `uttergen evaluate` first");

  nlohmann::json table = nlohmann::json::array();
  std::ostringstream csv;
  csv << "name,model,ent4,acc_clsf\n";
  for (const auto& r : rows) {
    table.push_back({{"name", r.name},
                     {"model", r.model},
                     {"tag", r.tag},
                     {"acc_clsf", r.acc_clsf ? nlohmann::json(*r.acc_clsf) : nlohmann::json()},
                     {"dist_4", r.dist4},
                     {"ent_4", r.ent4},
                     {"samples", r.samples}});
    if (r.acc_clsf) {
      std::ostringstream line;
      line << std::setprecision(17) << r.name << ',' << r.model << ',' << r.ent4 << ',' << *r.acc_clsf << '\n';
      csv << line.str();
    }
  }
  inputs = ctx.with_config(inputs);
  ctx.writer.write(c.work("reports/comparison.txt"), format_comparison_table(rows), inputs);
  ctx.writer.write(c.work("reports/comparison.json"), detail::dump_json({{"rows", table}}), inputs);
  ctx.writer.write(c.work("reports/fig2_points.csv"), csv.str(), inputs);
  ctx.log("\n" + format_comparison_table(rows));
}

/// Options shared by every CLI subcommand.
struct CommandOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> profile;
  std::optional<std::string> strategy;
  bool force = false;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"ingest",   "split",    "pretrain", "finetune",
                                              "adapt",    "generate", "evaluate", "report"};
  return names;
}

inline StageContext make_context(const CommandOptions& opts, Logger log) {
  StageContext ctx{load_pipeline_config(opts.config_path), ArtifactWriter(opts.force), std::move(log)};
  if (opts.seed) ctx.config.seed = *opts.seed;
  if (opts.profile) {
    ctx.config.profile = *opts.profile;
    ctx.config.finetune_hyper();
  }
  if (opts.strategy) ctx.config.strategy(*opts.strategy);
  return ctx;
}

/// Runs one named stage, or every stage in order for "all".
inline void run_stage(const std::string& stage, const StageContext& ctx,
                      const std::optional<std::string>& strategy = std::nullopt) {
  if (stage == "ingest") return run_ingest(ctx);
  if (stage == "split") return run_split(ctx);
  if (stage == "pretrain") return run_pretrain(ctx);
  if (stage == "finetune") return run_finetune(ctx);
  if (stage == "adapt") return run_adapt(ctx);
  if (stage == "generate") return run_generate(ctx, strategy);
  if (stage == "evaluate") return run_evaluate(ctx);
  if (stage == "report") return run_report(ctx);
  if (stage == "all") {
    for (const auto& s : stage_names()) run_stage(s, ctx, strategy);
    return;
  }
  throw ConfigError("unknown stage " + stage);
}

/// Exit code for an exception escaping a stage.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const DataError*>(&e)) return 2;
  if (dynamic_cast<const NumericalError*>(&e)) return 3;
  return 2;
}

}  // namespace uttergen
