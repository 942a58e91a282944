#pragma once

// End-to-end runner: dataset -> reward models -> adaptation -> evaluation
// over (method, scale, seed) cells, with content-hash stage caching.

#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "palign/common.hpp"
#include "palign/corpus.hpp"
#include "palign/guidance.hpp"
#include "palign/metrics.hpp"
#include "palign/models.hpp"
#include "palign/rmzoo.hpp"
#include "palign/harness/cache.hpp"
#include "palign/harness/config.hpp"
#include "palign/harness/presets.hpp"
#include "palign/harness/report.hpp"
#include "palign/harness/synthetic.hpp"

namespace palign::harness {

inline constexpr const char* kToolkitVersion = "palign 0.1.0";

struct RunOptions {
  fs::path cache_dir;  // empty: caching off
  WarningSink sink = stderr_warning;
  std::function<void(const std::string&)> progress;
};

struct RunResult {
  EvaluationReport report;
  CacheStats stats;
};

// ---------------------------------------------------------------------------
// Dataset and models
// ---------------------------------------------------------------------------

inline PreferenceSet build_dataset(const DatasetSpec& spec, int embedding_dim,
                                   const WarningSink& sink = stderr_warning) {
  spec.validate();
  if (spec.builder == "path") {
    auto set = load_dataset(spec.path);
    if (!set.split()) throw ConfigError("dataset at " + spec.path + " has no user split");
    return set;
  }
  std::vector<Document> docs;
  PrefLampOptions opts;
  opts.sink = sink;
  if (spec.builder == "synthetic") {
    docs = synthetic::documents({spec.users, spec.docs_per_user, spec.seed});
    opts.name = "synthetic-pref-lamp";
    opts.source = "synthetic";
  } else {
    docs = load_documents(spec.path);
  }
  const HashingEmbedder embedder(embedding_dim);
  auto set = build_pref_lamp(docs, embedder, spec.neighbors_k, spec.seed, opts);
  set.set_split(split_users(set, spec.adapt_fraction, spec.seed));
  return set;
}

/// Training-user prompt/ground-truth texts; the n-gram statistics of every
/// desk model come from these only.
inline std::vector<std::string> fit_texts(const PreferenceSet& set) {
  std::vector<std::string> out;
  const auto& train = set.split()->train_users;
  for (const auto& g : set.ground_truth()) {
    if (train.count(g.user_id)) out.push_back(g.prompt + g.ground_truth);
  }
  return out;
}

inline std::size_t model_parameters(const LanguageModel& lm) {
  if (const auto* t = dynamic_cast<const TinyCharLM*>(&lm)) return t->parameter_count();
  return 0;
}

namespace detail {

inline std::string key_of(const json& j) { return hash_hex(j.dump()); }

using Generations = std::map<GenerationKey, std::string>;

inline json generations_to_json(const Generations& g) {
  json a = json::array();
  for (const auto& [k, v] : g) a.push_back({k.first, k.second, v});
  return a;
}

inline Generations generations_from_json(const json& a) {
  Generations g;
  for (const auto& e : a) g[{e.at(0).get<std::string>(), e.at(1).get<std::string>()}] = e.at(2).get<std::string>();
  return g;
}

inline json prompts_json(const std::vector<GroundTruthRecord>& prompts) {
  json a = json::array();
  for (const auto& g : prompts) a.push_back({g.user_id, g.prompt});
  return a;
}

template <class Compute>
Generations cached_generations(StageCache& cache, const std::string& stage, const json& key_material,
                               Compute compute) {
  const std::string key = key_of(key_material);
  if (auto hit = cache.get(stage, key)) return generations_from_json(json::parse(*hit));
  Generations g = compute();
  cache.put(stage, key, generations_to_json(g).dump());
  return g;
}

// Per-seed evaluation split of the adaptation users.
struct SeedSplit {
  std::map<std::string, FewShotSplit> by_user;
  std::vector<PreferenceRecord> eval;
  std::vector<GroundTruthRecord> prompts;  // held-out generation prompts
};

inline SeedSplit seed_split(const PreferenceSet& set, const ExperimentConfig& cfg, std::uint64_t seed,
                            const WarningSink& sink) {
  SeedSplit s;
  for (const auto& u : set.split()->adapt_users) {
    auto fs = sample_few_shot(set, u, cfg.few_shot, seed, sink);
    std::set<std::string> held;
    for (const auto& r : fs.eval) {
      s.eval.push_back(r);
      held.insert(r.prompt);
    }
    std::size_t taken = 0;
    for (const auto& g : set.ground_truth_for(u)) {
      if (!held.count(g.prompt)) continue;
      if (cfg.max_prompts_per_user && taken >= cfg.max_prompts_per_user) break;
      s.prompts.push_back(g);
      ++taken;
    }
    s.by_user.emplace(u, std::move(fs));
  }
  return s;
}

inline void add_alignment(CellResult& cell, const ExperimentConfig& cfg, const Generations& gens,
                          const std::vector<GroundTruthRecord>& prompts, const Embedder& embedder) {
  for (const auto& s : cfg.similarities) {
    const auto res = behavioral_alignment(gens, prompts, parse_similarity(s), &embedder);
    cell.metrics[metric::generation(s)] = res.macro;
    cell.per_user[metric::generation(s)] = res.per_user;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// run_experiment
// ---------------------------------------------------------------------------

inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  auto say = [&](const std::string& m) {
    if (opt.progress) opt.progress(m);
  };
  for (const ScaleSpec* s : [&] {
         std::vector<const ScaleSpec*> v{&cfg.reward_backbone};
         for (const auto& p : cfg.policy_scales) v.push_back(&p);
         return v;
       }()) {
    if (!BackendRegistry::instance().contains(s->backend)) {
      throw StageError("backend '" + s->backend + "' unavailable for scale '" + s->name + "'" +
                       (s->model_id.empty() ? "" : " (" + s->model_id + ")"));
    }
  }
  StageCache cache(opt.cache_dir);
  const PreferenceSet data = build_dataset(cfg.dataset, cfg.embedding_dim, opt.sink);
  const HashingEmbedder embedder(cfg.embedding_dim);
  const auto texts = fit_texts(data);

  const auto backbone = BackendRegistry::instance().make(cfg.reward_backbone, 0, texts);
  std::map<std::string, std::shared_ptr<LanguageModel>> policies;
  for (const auto& s : cfg.policy_scales) {
    policies[s.name] = BackendRegistry::instance().make(s, 0, texts);
    validate_pairing(*backbone, *policies[s.name]);
  }

  EvaluationReport report;
  report.name = cfg.name;
  report.config = cfg.to_json();
  report.config_hash = cfg.hash();
  report.correlation_axis = cfg.correlation_axis;
  for (const auto& s : cfg.policy_scales) report.scales.push_back(s.name);
  sort_scales(report.scales, cfg.policy_scales);

  json env = {{"toolkit", kToolkitVersion},
              {"dataset", {{"name", data.manifest().name}, {"checksum", data.manifest().checksum},
                           {"users", data.user_count()}, {"pairs", data.records().size()},
                           {"adapt_users", data.split()->adapt_users.size()}}},
              {"reward_backbone", {{"model_id", backbone->model_id()}, {"parameters", model_parameters(*backbone)}}},
              {"embedder", embedder.embedder_id()},
              {"embedder_role", "deterministic test backend"},
              {"rouge_normalization", kRougeNormalization},
              {"std", "sample"},
              {"tie_credit", 0.5},
              {"kendall", "tau-b"},
              {"seeds", cfg.seeds}};
  for (const auto& [name, p] : policies) {
    env["policies"][name] = {{"model_id", p->model_id()}, {"parameters", model_parameters(*p)}};
  }

  const std::string data_key = data.manifest().checksum;
  const json gen_json = cfg.generation.to_json();

  for (const auto seed : cfg.seeds) {
    const auto split = detail::seed_split(data, cfg, seed, opt.sink);
    const json prompts = detail::prompts_json(split.prompts);

    // Method-independent pieces, shared by every cell of this seed.
    std::map<std::string, AccuracyResult> prior;
    std::map<std::string, detail::Generations> zeroshot;
    auto zeroshot_for = [&](const std::string& scale) -> const detail::Generations& {
      if (!zeroshot.count(scale)) {
        const auto& policy = *policies.at(scale);
        zeroshot[scale] = detail::cached_generations(
            cache, "zeroshot", {policy.model_id(), gen_json, prompts, cfg.icl_template.to_json()}, [&] {
              detail::Generations g;
              for (const auto& p : split.prompts) {
                g[{p.user_id, p.prompt}] = greedy_decode(policy, zero_shot_prompt(p.prompt, cfg.icl_template),
                                                         cfg.generation.max_new_tokens, cfg.generation.stop_tokens);
              }
              return g;
            });
      }
      return zeroshot[scale];
    };

    for (const auto& method : cfg.methods) {
      auto fail_all = [&](const std::string& why) {
        for (const auto& scale : report.scales) {
          CellResult c{method, scale, seed, false, why, {}, {}, ""};
          report.cells.push_back(std::move(c));
        }
      };

      if (is_generation_only(method)) {
        for (const auto& scale : report.scales) {
          say(method + " / " + scale + " / seed " + std::to_string(seed));
          CellResult cell{method, scale, seed, true, "", {}, {}, ""};
          try {
            if (!cfg.wants("generation")) {
              report.cells.push_back(std::move(cell));
              continue;
            }
            const auto& policy = *policies.at(scale);
            detail::Generations gens;
            if (method == "zeroshot") {
              gens = zeroshot_for(scale);
            } else {
              gens = detail::cached_generations(
                  cache, "icl",
                  {method, policy.model_id(), gen_json, prompts, cfg.icl_template.to_json(), cfg.icl_shots, seed,
                   embedder.embedder_id()},
                  [&] {
                    detail::Generations g;
                    for (const auto& p : split.prompts) {
                      std::vector<Demo> history;
                      for (const auto& r : split.by_user.at(p.user_id).few_shot) history.push_back({r.prompt, r.chosen});
                      std::vector<Demo> demos;
                      if (method == "icl-rag") {
                        demos = icl_rag_retrieve(history, p.prompt, embedder, cfg.icl_shots);
                        std::reverse(demos.begin(), demos.end());  // nearest demo next to the query
                      } else {
                        std::vector<std::size_t> idx(history.size());
                        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
                        Rng rng(seed, "icl:" + p.user_id + ":" + p.prompt);
                        rng.shuffle(idx);
                        idx.resize(std::min(idx.size(), static_cast<std::size_t>(cfg.icl_shots)));
                        std::sort(idx.begin(), idx.end());
                        for (auto i : idx) demos.push_back(history[i]);
                      }
                      const auto prompt = build_icl_prompt(demos, p.prompt, cfg.icl_template, &policy,
                                                           static_cast<std::size_t>(cfg.generation.max_new_tokens));
                      g[{p.user_id, p.prompt}] = greedy_decode(policy, prompt, cfg.generation.max_new_tokens,
                                                               cfg.generation.stop_tokens);
                    }
                    return g;
                  });
            }
            detail::add_alignment(cell, cfg, gens, split.prompts, embedder);
          } catch (const std::exception& e) {
            cell.ok = false;
            cell.error = e.what();
            cell.metrics.clear();
            cell.per_user.clear();
          }
          report.cells.push_back(std::move(cell));
        }
        continue;
      }

      // Reward-model methods.
      say(method + " / seed " + std::to_string(seed) + ": train + adapt");
      RewardModelArtifact adapted;
      std::string train_key;
      try {
        TrainingConfig tc = cfg.training;
        tc.method = parse_method(method);
        tc.seed = seed;
        train_key = detail::key_of({"train", data_key, backbone->model_id(), tc.to_json()});
        RewardModelArtifact trained;
        if (auto hit = cache.get_artifact("train", train_key)) {
          trained = std::move(*hit);
        } else {
          trained = train_reward_model(data, *backbone, tc);
          cache.put_artifact("train", train_key, trained);
        }
        if (is_personalized(tc.method)) {
          json few = json::array();
          for (const auto& [u, fs] : split.by_user) {
            for (const auto& r : fs.few_shot) few.push_back(r.pair_id);
          }
          const std::string adapt_key =
              detail::key_of({"adapt", train_key, cfg.adaptation.to_json(), cfg.few_shot, seed, few});
          if (auto hit = cache.get_artifact("adapt", adapt_key)) {
            adapted = std::move(*hit);
          } else {
            adapted = trained;
            for (const auto& [u, fs] : split.by_user) {
              adapted = adapt_user(adapted, fs.few_shot, cfg.adaptation, *backbone, opt.sink);
            }
            cache.put_artifact("adapt", adapt_key, adapted);
          }
        } else {
          adapted = std::move(trained);
        }
      } catch (const std::exception& e) {
        fail_all(std::string("training/adaptation failed: ") + e.what());
        continue;
      }
      const auto rm = make_reward_model(adapted, *backbone);
      const std::string artifact_hash = artifact_checksum(adapted);

      std::optional<AccuracyResult> rm_acc;
      std::string rm_error;
      if (cfg.wants("rm_accuracy")) {
        try {
          const std::string key = detail::key_of({"rm_accuracy", artifact_hash, backbone->model_id(), prompts,
                                                  split.eval.size(), seed});
          if (auto hit = cache.get("rm_accuracy", key)) {
            const auto j = json::parse(*hit);
            AccuracyResult a;
            a.value = j.at("value").get<double>();
            a.n_pairs = j.at("n").get<std::size_t>();
            a.per_user = j.at("per_user").get<std::map<std::string, double>>();
            rm_acc = a;
          } else {
            rm_acc = rm_accuracy(*rm, split.eval);
            cache.put("rm_accuracy", key, rm_acc->to_json().dump());
          }
        } catch (const std::exception& e) {
          rm_error = e.what();
        }
      }

      for (const auto& scale : report.scales) {
        say(method + " / " + scale + " / seed " + std::to_string(seed));
        CellResult cell{method, scale, seed, true, "", {}, {}, artifact_hash};
        try {
          if (!rm_error.empty()) throw StageError("rm_accuracy: " + rm_error);
          if (rm_acc) {
            cell.metrics[metric::rm_accuracy] = rm_acc->value;
            cell.per_user[metric::rm_accuracy] = rm_acc->per_user;
          }
          const auto& policy = *policies.at(scale);
          if (cfg.wants("policy_accuracy")) {
            if (!prior.count(scale)) prior[scale] = policy_accuracy(ScorerKind{}, split.eval, policy);
            const ScorerKind post{rm->personalized() ? ScorerType::personalized_posterior
                                                     : ScorerType::global_posterior,
                                  cfg.generation.lambda, rm.get()};
            const std::string key = detail::key_of({"policy_accuracy", artifact_hash, policy.model_id(),
                                                    cfg.generation.lambda, prompts, split.eval.size(), seed});
            AccuracyResult pa;
            if (auto hit = cache.get("policy_accuracy", key)) {
              const auto j = json::parse(*hit);
              pa.value = j.at("value").get<double>();
              pa.per_user = j.at("per_user").get<std::map<std::string, double>>();
            } else {
              pa = policy_accuracy(post, split.eval, policy);
              cache.put("policy_accuracy", key, pa.to_json().dump());
            }
            cell.metrics[metric::policy_prior] = prior[scale].value;
            cell.per_user[metric::policy_prior] = prior[scale].per_user;
            cell.metrics[metric::policy_posterior] = pa.value;
            cell.per_user[metric::policy_posterior] = pa.per_user;
          }
          if (cfg.wants("generation") || cfg.wants("win_rate")) {
            const auto guided = detail::cached_generations(
                cache, "generate", {"args", artifact_hash, policy.model_id(), gen_json, prompts}, [&] {
                  detail::Generations g;
                  for (const auto& p : split.prompts) {
                    g[{p.user_id, p.prompt}] =
                        args_decode(policy, rm.get(), user_for(*rm, p.user_id), p.prompt, cfg.generation).first;
                  }
                  return g;
                });
            if (cfg.wants("generation")) detail::add_alignment(cell, cfg, guided, split.prompts, embedder);
            if (cfg.wants("win_rate")) {
              const auto& zs = zeroshot_for(scale);
              std::map<std::string, std::vector<WinPair>> by_user;
              std::vector<WinPair> all;
              std::size_t skipped = 0;
              for (const auto& p : split.prompts) {
                WinPair w{p.user_id, p.prompt, guided.at({p.user_id, p.prompt}), zs.at({p.user_id, p.prompt})};
                if (w.guided.empty() || w.zeroshot.empty()) {
                  ++skipped;
                  continue;
                }
                by_user[p.user_id].push_back(w);
                all.push_back(std::move(w));
              }
              if (!all.empty()) {
                cell.metrics[metric::win_rate] = win_rate(*rm, all).value;
                for (const auto& [u, ws] : by_user) cell.per_user[metric::win_rate][u] = win_rate(*rm, ws).value;
              }
              if (skipped) opt.sink(cell.label() + ": " + std::to_string(skipped) + " win-rate items with empty text skipped");
            }
          }
        } catch (const std::exception& e) {
          cell.ok = false;
          cell.error = e.what();
          cell.metrics.clear();
          cell.per_user.clear();
        }
        report.cells.push_back(std::move(cell));
      }
    }
  }
  report.environment = std::move(env);
  return {std::move(report), cache.stats()};
}

}  // namespace palign::harness
