// palign: command-line front end for datasets, reward models, guided
// generation, metrics and experiment runs.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "palign/palign.hpp"

namespace fs = std::filesystem;
using namespace palign;
using namespace palign::harness;

namespace {

struct Models {
  PreferenceSet data;
  std::vector<std::string> texts;

  explicit Models(const std::string& dir) : data(load_dataset(dir)) {
    if (!data.split()) throw ConfigError("dataset " + dir + " has no user split");
    texts = fit_texts(data);
  }
  std::shared_ptr<LanguageModel> model(const std::string& scale) const {
    auto s = find_desk_scale(scale);
    if (!s) throw ConfigError("unknown scale '" + scale + "'");
    return BackendRegistry::instance().make(*s, 0, texts);
  }
  // Desk scale whose model id matches the artifact's backbone when `scale`
  // is empty.
  std::shared_ptr<LanguageModel> backbone_for(const std::string& scale, const RewardModelArtifact& a) const {
    if (!scale.empty()) return model(scale);
    for (const auto& s : desk_scales()) {
      auto lm = BackendRegistry::instance().make(s, 0, texts);
      if (lm->model_id() == a.backbone_id) return lm;
    }
    throw ConfigError("no desk scale matches backbone '" + a.backbone_id + "'; pass --backbone");
  }
};

void emit(const json& j, const std::string& out) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_file(out, text);
  }
}

std::vector<PreferenceRecord> eval_records(const PreferenceSet& data, std::size_t few_shot, std::uint64_t seed,
                                           const RewardModel* rm = nullptr) {
  std::vector<PreferenceRecord> out;
  for (const auto& u : data.split()->adapt_users) {
    if (rm && !rm->has_user(u)) continue;
    for (auto& r : sample_few_shot(data, u, few_shot, seed).eval) out.push_back(std::move(r));
  }
  if (out.empty()) throw DataError("no evaluation records (no adapted users?)");
  return out;
}

// JSONL of {"user", "prompt", "text"} lines; trace step lines are skipped.
std::map<GenerationKey, std::string> read_generations(const std::string& path) {
  std::map<GenerationKey, std::string> out;
  palign::detail::for_each_jsonl(path, [&](const json& j, std::size_t) {
    if (!j.contains("text") || !j.contains("user")) return;
    out[{j.at("user").get<std::string>(), j.at("prompt").get<std::string>()}] = j.at("text").get<std::string>();
  });
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"personalized alignment toolkit"};
  app.require_subcommand(1);

  // build-dataset
  std::string source = "synthetic", input, out;
  int users = 50, docs_per_user = 6, neighbors_k = 16, embedding_dim = 256;
  std::uint64_t seed = 0;
  double adapt_fraction = 0.2;
  auto* build = app.add_subcommand("build-dataset", "build a preference dataset from documents");
  build->add_option("--source", source, "synthetic | lamp5")->check(CLI::IsMember({"synthetic", "lamp5"}));
  build->add_option("--input", input, "documents JSONL (user_id, abstract, title)");
  build->add_option("--users", users);
  build->add_option("--docs-per-user", docs_per_user);
  build->add_option("--neighbors-k", neighbors_k);
  build->add_option("--embedding-dim", embedding_dim);
  build->add_option("--seed", seed);
  build->add_option("--adapt-fraction", adapt_fraction);
  build->add_option("--out", out, "output directory")->required();

  // train-rm
  std::string data_dir, method = "global", backbone, artifact_dir;
  int epochs = 60;
  std::string train_config;
  auto* train = app.add_subcommand("train-rm", "train a reward model on the training users");
  train->add_option("--data", data_dir)->required();
  train->add_option("--method", method);
  train->add_option("--backbone", backbone, "desk scale of the reward backbone (default: small)");
  train->add_option("--epochs", epochs);
  train->add_option("--seed", seed);
  train->add_option("--config", train_config, "training config JSON (overrides method/epochs/seed)");
  train->add_option("--out", out)->required();

  // adapt-user
  std::string user;
  std::size_t few_shot = 4;
  auto* adapt = app.add_subcommand("adapt-user", "fit user parameters from few-shot pairs");
  adapt->add_option("--data", data_dir)->required();
  adapt->add_option("--artifact", artifact_dir)->required();
  adapt->add_option("--user", user, "adaptation user (default: all)");
  adapt->add_option("--few-shot", few_shot);
  adapt->add_option("--seed", seed);
  adapt->add_option("--backbone", backbone, "desk scale (default: the artifact's backbone)");
  adapt->add_option("--out", out)->required();

  // generate
  std::string gen_method = "args", policy = "tiny", prompt;
  double lambda = 1.0;
  int top_k = 10, max_new_tokens = 48, shots = 2;
  auto* gen = app.add_subcommand("generate", "guided, zero-shot or in-context generation");
  gen->add_option("--method", gen_method)->check(CLI::IsMember({"args", "zeroshot", "icl", "icl-rag"}));
  gen->add_option("--data", data_dir)->required();
  gen->add_option("--artifact", artifact_dir, "reward model (args only)");
  gen->add_option("--policy", policy);
  gen->add_option("--backbone", backbone, "desk scale (default: the artifact's backbone)");
  gen->add_option("--user", user, "user (default: every adaptation user)");
  gen->add_option("--prompt", prompt, "single prompt (default: held-out prompts)");
  gen->add_option("--lambda", lambda);
  gen->add_option("--top-k", top_k);
  gen->add_option("--max-new-tokens", max_new_tokens);
  gen->add_option("--few-shot", few_shot);
  gen->add_option("--shots", shots);
  gen->add_option("--seed", seed);
  gen->add_option("--out", out, "JSONL output (default: stdout)");

  // eval-rm-acc
  auto* eval_rm = app.add_subcommand("eval-rm-acc", "pairwise accuracy of a reward model on held-out pairs");
  eval_rm->add_option("--data", data_dir)->required();
  eval_rm->add_option("--artifact", artifact_dir)->required();
  eval_rm->add_option("--backbone", backbone, "desk scale (default: the artifact's backbone)");
  eval_rm->add_option("--few-shot", few_shot);
  eval_rm->add_option("--seed", seed);
  eval_rm->add_option("--out", out);

  // eval-policy-acc
  std::string scorer = "prior";
  auto* eval_pol = app.add_subcommand("eval-policy-acc", "pairwise accuracy of a policy scorer");
  eval_pol->add_option("--data", data_dir)->required();
  eval_pol->add_option("--scorer", scorer)->check(CLI::IsMember({"prior", "global", "personalized"}));
  eval_pol->add_option("--artifact", artifact_dir);
  eval_pol->add_option("--policy", policy);
  eval_pol->add_option("--backbone", backbone, "desk scale (default: the artifact's backbone)");
  eval_pol->add_option("--lambda", lambda);
  eval_pol->add_option("--few-shot", few_shot);
  eval_pol->add_option("--seed", seed);
  eval_pol->add_option("--out", out);

  // eval-generation
  std::string generations, similarity = "rouge1";
  auto* eval_gen = app.add_subcommand("eval-generation", "behavioral alignment of generations");
  eval_gen->add_option("--data", data_dir)->required();
  eval_gen->add_option("--generations", generations)->required();
  eval_gen->add_option("--similarity", similarity)->check(CLI::IsMember({"rouge1", "rougeL", "semantic"}));
  eval_gen->add_option("--embedding-dim", embedding_dim);
  eval_gen->add_option("--out", out);

  // winrate
  std::string guided, zeroshot;
  auto* winrate = app.add_subcommand("winrate", "reward-model preference for guided over zero-shot outputs");
  winrate->add_option("--data", data_dir)->required();
  winrate->add_option("--artifact", artifact_dir)->required();
  winrate->add_option("--backbone", backbone, "desk scale (default: the artifact's backbone)");
  winrate->add_option("--guided", guided)->required();
  winrate->add_option("--zeroshot", zeroshot)->required();
  winrate->add_option("--out", out);

  // correlate
  std::string report_path, axis = "method";
  auto* correlate = app.add_subcommand("correlate", "correlations between metrics of a stored report");
  correlate->add_option("--report", report_path)->required();
  correlate->add_option("--axis", axis)->check(CLI::IsMember({"method", "user"}));
  correlate->add_option("--out", out);

  // run
  std::string config_path, cache_dir;
  bool no_cache = false, quiet = false;
  auto* run = app.add_subcommand("run", "run an experiment config end to end");
  run->add_option("--config", config_path)->required();
  run->add_option("--out", out, "output directory")->required();
  run->add_option("--cache-dir", cache_dir, "stage cache (default: $PALIGN_CACHE_DIR or <out>/cache)");
  run->add_flag("--no-cache", no_cache);
  run->add_flag("--quiet", quiet);

  // validate-config
  auto* validate = app.add_subcommand("validate-config", "check an experiment config without running it");
  validate->add_option("--config", config_path)->required();

  // report
  std::string layout = "rm_table", format = "text";
  auto* report = app.add_subcommand("report", "render a stored report");
  report->add_option("--in", report_path)->required();
  report->add_option("--layout", layout)->check(CLI::IsMember(layout_names()));
  report->add_option("--format", format)->check(CLI::IsMember({"text", "csv"}));
  report->add_option("--out", out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*build) {
      DatasetSpec spec;
      spec.builder = source;
      spec.path = input;
      spec.users = users;
      spec.docs_per_user = docs_per_user;
      spec.neighbors_k = neighbors_k;
      spec.seed = seed;
      spec.adapt_fraction = adapt_fraction;
      const auto set = build_dataset(spec, embedding_dim);
      save_dataset(set, out);
      std::cout << "wrote " << set.records().size() << " pairs for " << set.user_count() << " users to " << out
                << " (checksum " << set.manifest().checksum << ")\n";
    } else if (*train) {
      const Models m(data_dir);
      TrainingConfig tc;
      if (!train_config.empty()) {
        tc = TrainingConfig::from_json(json::parse(read_file(train_config)));
      } else {
        tc.method = parse_method(method);
        tc.epochs = epochs;
        tc.seed = seed;
      }
      const auto bb = m.model(backbone.empty() ? "small" : backbone);
      const auto a = train_reward_model(m.data, *bb, tc);
      save_artifact(a, out);
      const auto& curve = a.training_manifest.loss_curve;
      std::cout << to_string(a.method) << ": loss " << (curve.empty() ? 0.0 : curve.front()) << " -> "
                << (curve.empty() ? 0.0 : curve.back()) << ", artifact " << artifact_checksum(a) << "\n";
    } else if (*adapt) {
      const Models m(data_dir);
      auto a = load_artifact(artifact_dir);
      const auto bb = m.backbone_for(backbone, a);
      std::vector<std::string> targets;
      if (user.empty()) {
        targets.assign(m.data.split()->adapt_users.begin(), m.data.split()->adapt_users.end());
      } else {
        targets.push_back(user);
      }
      for (const auto& u : targets) a = adapt_user(a, sample_few_shot(m.data, u, few_shot, seed).few_shot,
                                                   AdaptationConfig{}, *bb);
      save_artifact(a, out);
      std::cout << "adapted " << targets.size() << " users, artifact " << artifact_checksum(a) << "\n";
    } else if (*gen) {
      const Models m(data_dir);
      const auto pol = m.model(policy);
      GenerationConfig gc = default_generation();
      gc.lambda = lambda;
      gc.top_k = top_k;
      gc.max_new_tokens = max_new_tokens;
      gc.seed = seed;
      std::optional<RewardModelArtifact> art;
      std::shared_ptr<LanguageModel> bb;
      std::unique_ptr<RewardModel> rm;
      if (gen_method == "args") {
        if (artifact_dir.empty()) throw ConfigError("--method args needs --artifact");
        art = load_artifact(artifact_dir);
        bb = m.backbone_for(backbone, *art);
        validate_pairing(*bb, *pol);
        rm = make_reward_model(*art, *bb);
      }
      std::vector<std::string> targets;
      if (user.empty()) {
        targets.assign(m.data.split()->adapt_users.begin(), m.data.split()->adapt_users.end());
      } else {
        targets.push_back(user);
      }
      std::ofstream file;
      if (!out.empty()) {
        if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
        file.open(out);
      }
      std::ostream& os = out.empty() ? std::cout : file;
      const HashingEmbedder embedder(embedding_dim);
      for (const auto& u : targets) {
        const auto split = sample_few_shot(m.data, u, few_shot, seed);
        std::vector<std::string> prompts;
        if (!prompt.empty()) {
          prompts.push_back(prompt);
        } else {
          for (const auto& r : split.eval) prompts.push_back(r.prompt);
        }
        std::vector<Demo> history;
        for (const auto& r : split.few_shot) history.push_back({r.prompt, r.chosen});
        for (const auto& p : prompts) {
          const json extra = {{"user", u}, {"prompt", p}, {"method", gen_method}};
          if (gen_method == "args") {
            auto [text, trace] = args_decode(*pol, rm.get(), user_for(*rm, u), p, gc);
            write_trace_jsonl(os, trace, extra);
            continue;
          }
          std::string full = zero_shot_prompt(p);
          if (gen_method == "icl") {
            std::vector<Demo> demos(history.begin(), history.begin() + std::min<std::size_t>(history.size(), shots));
            full = build_icl_prompt(demos, p, {}, pol.get(), static_cast<std::size_t>(max_new_tokens));
          } else if (gen_method == "icl-rag") {
            auto demos = icl_rag_retrieve(history, p, embedder, shots);
            std::reverse(demos.begin(), demos.end());
            full = build_icl_prompt(demos, p, {}, pol.get(), static_cast<std::size_t>(max_new_tokens));
          }
          json line = extra;
          line["text"] = greedy_decode(*pol, full, max_new_tokens, gc.stop_tokens);
          os << line.dump() << "\n";
        }
      }
    } else if (*eval_rm) {
      const Models m(data_dir);
      const auto a = load_artifact(artifact_dir);
      const auto bb = m.backbone_for(backbone, a);
      const auto rm = make_reward_model(a, *bb);
      emit(rm_accuracy(*rm, eval_records(m.data, few_shot, seed, rm.get())).to_json(), out);
    } else if (*eval_pol) {
      const Models m(data_dir);
      const auto pol = m.model(policy);
      ScorerKind sk{parse_scorer(scorer), lambda, nullptr};
      std::optional<RewardModelArtifact> art;
      std::shared_ptr<LanguageModel> bb;
      std::unique_ptr<RewardModel> rm;
      if (sk.kind != ScorerType::prior) {
        if (artifact_dir.empty()) throw ConfigError(scorer + " scorer needs --artifact");
        art = load_artifact(artifact_dir);
        bb = m.backbone_for(backbone, *art);
        validate_pairing(*bb, *pol);
        rm = make_reward_model(*art, *bb);
        sk.reward = rm.get();
      }
      emit(policy_accuracy(sk, eval_records(m.data, few_shot, seed, rm.get()), *pol).to_json(), out);
    } else if (*eval_gen) {
      const Models m(data_dir);
      const auto gens = read_generations(generations);
      std::vector<GroundTruthRecord> gt;
      for (const auto& g : m.data.ground_truth()) {
        if (gens.count({g.user_id, g.prompt})) gt.push_back(g);
      }
      if (gt.empty()) throw CoverageError("no generation matches a ground-truth (user, prompt)");
      const HashingEmbedder embedder(embedding_dim);
      emit(behavioral_alignment(gens, gt, parse_similarity(similarity), &embedder).to_json(), out);
    } else if (*winrate) {
      const Models m(data_dir);
      const auto a = load_artifact(artifact_dir);
      const auto bb = m.backbone_for(backbone, a);
      const auto rm = make_reward_model(a, *bb);
      const auto g = read_generations(guided);
      const auto z = read_generations(zeroshot);
      std::vector<WinPair> pairs;
      for (const auto& [k, text] : g) {
        const auto it = z.find(k);
        if (it == z.end()) throw CoverageError("no zero-shot output for (" + k.first + ", " + k.second + ")");
        pairs.push_back({k.first, k.second, text, it->second});
      }
      emit(win_rate(*rm, pairs).to_json(), out);
    } else if (*correlate) {
      auto r = load_report(report_path);
      r.correlation_axis = axis;
      emit(correlations_to_json(r.correlations()), out);
    } else if (*run) {
      const auto cfg = load_config(config_path);
      RunOptions o;
      if (!no_cache) {
        if (!cache_dir.empty()) {
          o.cache_dir = cache_dir;
        } else if (const char* env = std::getenv("PALIGN_CACHE_DIR"); env && *env) {
          o.cache_dir = env;
        } else {
          o.cache_dir = fs::path(out) / "cache";
        }
      }
      if (!quiet) o.progress = [](const std::string& s) { std::cerr << "[run] " << s << "\n"; };
      const auto res = run_experiment(cfg, o);
      fs::create_directories(out);
      save_report(res.report, fs::path(out) / "report.json");
      for (const auto& name : layout_names()) {
        try {
          const auto t = render_report(res.report, parse_layout(name));
          write_file(fs::path(out) / "tables" / (name + ".csv"), t.csv());
          write_file(fs::path(out) / "tables" / (name + ".txt"), t.text());
        } catch (const RenderError& e) {
          std::cerr << "skipped " << e.what() << "\n";
        }
      }
      std::cout << "report " << res.report.checksum() << " cells " << res.report.cells.size() << " failed "
                << res.report.failed_cells().size() << " cache hits " << res.stats.total_hits() << " misses "
                << res.stats.total_misses() << "\n";
      for (const auto& f : res.report.failed_cells()) std::cout << "FAILED " << f << "\n";
      return res.report.incomplete() ? 3 : 0;
    } else if (*validate) {
      const auto cfg = load_config(config_path);
      std::cout << "ok " << cfg.name << " (" << cfg.methods.size() << " methods, " << cfg.policy_scales.size()
                << " scales, " << cfg.seeds.size() << " seeds) " << cfg.hash() << "\n";
    } else if (*report) {
      const auto r = load_report(report_path);
      const auto t = render_report(r, parse_layout(layout));
      const std::string text = format == "csv" ? t.csv() : t.text();
      if (out.empty()) {
        std::cout << text;
      } else {
        write_file(out, text);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
