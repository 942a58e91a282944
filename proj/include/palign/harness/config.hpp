#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "palign/common.hpp"
#include "palign/guidance.hpp"
#include "palign/metrics.hpp"
#include "palign/rmzoo/train.hpp"
#include "palign/harness/presets.hpp"

namespace palign::harness {

// Methods that only generate (no reward model).
inline const std::vector<std::string>& generation_only_methods() {
  static const std::vector<std::string> m = {"icl", "icl-rag", "zeroshot"};
  return m;
}

inline bool is_generation_only(const std::string& method) {
  const auto& g = generation_only_methods();
  return std::find(g.begin(), g.end(), method) != g.end();
}

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> m = {"generation", "policy_accuracy", "rm_accuracy", "win_rate"};
  return m;
}

struct DatasetSpec {
  std::string builder = "synthetic";  // synthetic | lamp5 | path
  std::string path;                   // lamp5 documents file or saved dataset dir
  int users = 50;
  int docs_per_user = 6;
  int neighbors_k = 16;
  std::uint64_t seed = 0;
  double adapt_fraction = 0.2;

  json to_json() const {
    json j = {{"builder", builder}, {"seed", seed}};
    if (builder == "synthetic") {
      j["users"] = users;
      j["docs_per_user"] = docs_per_user;
    } else {
      j["path"] = path;
    }
    if (builder != "path") {
      j["neighbors_k"] = neighbors_k;
      j["adapt_fraction"] = adapt_fraction;
    }
    return j;
  }
  static DatasetSpec from_json(const json& j) {
    DatasetSpec d;
    d.builder = j.value("builder", d.builder);
    d.path = j.value("path", d.path);
    d.users = j.value("users", d.users);
    d.docs_per_user = j.value("docs_per_user", d.docs_per_user);
    d.neighbors_k = j.value("neighbors_k", d.neighbors_k);
    d.seed = j.value("seed", d.seed);
    d.adapt_fraction = j.value("adapt_fraction", d.adapt_fraction);
    d.validate();
    return d;
  }
  void validate() const {
    if (builder != "synthetic" && builder != "lamp5" && builder != "path") {
      throw ConfigError("unknown dataset builder '" + builder + "'");
    }
    if (builder != "synthetic" && path.empty()) throw ConfigError("dataset builder '" + builder + "' needs a path");
    if (builder == "synthetic" && (users < 2 || docs_per_user < 1)) throw ConfigError("invalid synthetic corpus size");
    if (neighbors_k < 1) throw ConfigError("neighbors_k must be >= 1");
    if (!(adapt_fraction > 0.0 && adapt_fraction < 1.0)) throw ConfigError("adapt_fraction must lie in (0, 1)");
  }
};

// Titles are single lines: generation stops at EOS or a newline.
inline GenerationConfig default_generation() {
  GenerationConfig g;
  g.stop_tokens = {CharTokenizer::kEos, Token{'\n'}};
  return g;
}

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  ScaleSpec reward_backbone = *find_desk_scale("small");
  std::vector<ScaleSpec> policy_scales = {*find_desk_scale("tiny")};
  std::vector<std::string> methods = {"global", "global_v2", "pref_mod"};
  TrainingConfig training;
  AdaptationConfig adaptation;
  GenerationConfig generation = default_generation();
  std::size_t few_shot = 4;
  int icl_shots = 2;
  PromptTemplate icl_template;
  std::vector<std::string> metrics = known_metrics();
  std::vector<std::string> similarities = {"rouge1", "rougeL", "semantic"};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int embedding_dim = 256;
  std::size_t max_prompts_per_user = 0;  // 0: every held-out prompt
  std::string correlation_axis = "method";
  json targets = json::object();

  bool wants(const std::string& metric) const {
    return std::find(metrics.begin(), metrics.end(), metric) != metrics.end();
  }

  json to_json() const {
    json scales = json::array();
    for (const auto& s : policy_scales) scales.push_back(s.to_json());
    json t = training.to_json();
    t.erase("method");
    t.erase("seed");
    return json{{"name", name},
                {"dataset", dataset.to_json()},
                {"reward_backbone", reward_backbone.to_json()},
                {"policy_scales", scales},
                {"methods", methods},
                {"training", t},
                {"adaptation", adaptation.to_json()},
                {"generation", generation.to_json()},
                {"few_shot", few_shot},
                {"icl_shots", icl_shots},
                {"icl_template", icl_template.to_json()},
                {"metrics", metrics},
                {"similarities", similarities},
                {"seeds", seeds},
                {"embedding_dim", embedding_dim},
                {"max_prompts_per_user", max_prompts_per_user},
                {"correlation_axis", correlation_axis},
                {"targets", targets}};
  }

  static ScaleSpec resolve_scale(const json& j) {
    if (j.is_string()) {
      const auto name = j.get<std::string>();
      auto s = find_desk_scale(name);
      if (!s) throw ConfigError("unknown scale '" + name + "'");
      return *s;
    }
    return ScaleSpec::from_json(j);
  }

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    try {
      c.name = j.value("name", c.name);
      if (j.contains("dataset")) c.dataset = DatasetSpec::from_json(j.at("dataset"));
      if (j.contains("reward_backbone")) c.reward_backbone = resolve_scale(j.at("reward_backbone"));
      if (j.contains("policy_scales")) {
        c.policy_scales.clear();
        for (const auto& s : j.at("policy_scales")) c.policy_scales.push_back(resolve_scale(s));
      }
      c.methods = j.value("methods", c.methods);
      json t = j.value("training", json::object());
      t["method"] = "global";
      c.training = TrainingConfig::from_json(t);
      if (j.contains("adaptation")) c.adaptation = AdaptationConfig::from_json(j.at("adaptation"));
      if (j.contains("generation")) {
        json g = default_generation().to_json();
        g.update(j.at("generation"));
        c.generation = GenerationConfig::from_json(g);
      }
      c.few_shot = j.value("few_shot", c.few_shot);
      c.icl_shots = j.value("icl_shots", c.icl_shots);
      if (j.contains("icl_template")) {
        const auto& tj = j.at("icl_template");
        c.icl_template.version = tj.value("version", c.icl_template.version);
        c.icl_template.instruction = tj.value("instruction", c.icl_template.instruction);
        c.icl_template.demo_format = tj.value("demo_format", c.icl_template.demo_format);
        c.icl_template.query_format = tj.value("query_format", c.icl_template.query_format);
      }
      c.metrics = j.value("metrics", c.metrics);
      c.similarities = j.value("similarities", c.similarities);
      c.seeds = j.value("seeds", c.seeds);
      c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
      c.max_prompts_per_user = j.value("max_prompts_per_user", c.max_prompts_per_user);
      c.correlation_axis = j.value("correlation_axis", c.correlation_axis);
      c.targets = j.value("targets", json::object());
    } catch (const json::exception& e) {
      throw ConfigError(std::string("malformed experiment config: ") + e.what());
    }
    c.validate();
    return c;
  }

  /// Static checks only; nothing is loaded or trained.
  void validate() const {
    dataset.validate();
    reward_backbone.validate();
    if (methods.empty()) throw ConfigError("no methods configured");
    std::set<std::string> seen;
    for (const auto& m : methods) {
      if (!seen.insert(m).second) throw ConfigError("duplicate method '" + m + "'");
      if (is_generation_only(m)) continue;
      if (parse_method(m) == Method::plugin) throw ConfigError("plugin methods cannot be trained");
    }
    if (policy_scales.empty()) throw ConfigError("no policy scales configured");
    std::set<std::string> scale_names;
    for (const auto& s : policy_scales) {
      s.validate();
      if (!scale_names.insert(s.name).second) throw ConfigError("duplicate scale '" + s.name + "'");
      if (s.tokenizer_family != reward_backbone.tokenizer_family) {
        throw ConfigError("scale '" + s.name + "' tokenizer family '" + s.tokenizer_family +
                          "' differs from reward backbone '" + reward_backbone.tokenizer_family + "'");
      }
    }
    if (seeds.empty()) throw ConfigError("no seeds configured");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      throw ConfigError("duplicate seeds");
    }
    if (few_shot < 1) throw ConfigError("few_shot must be >= 1");
    if (icl_shots < 1) throw ConfigError("icl_shots must be >= 1");
    for (const auto& m : metrics) {
      const auto& k = known_metrics();
      if (std::find(k.begin(), k.end(), m) == k.end()) throw ConfigError("unknown metric '" + m + "'");
    }
    for (const auto& s : similarities) parse_similarity(s);
    if (!(generation.lambda >= 0.0) || generation.top_k < 1 || generation.max_new_tokens < 1) {
      throw ConfigError("invalid generation config");
    }
    if (embedding_dim < 1) throw ConfigError("embedding_dim must be >= 1");
    if (correlation_axis != "method" && correlation_axis != "user") {
      throw ConfigError("correlation_axis must be 'method' or 'user'");
    }
  }

  std::string hash() const { return hash_hex(to_json().dump()); }
};

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

}  // namespace palign::harness
