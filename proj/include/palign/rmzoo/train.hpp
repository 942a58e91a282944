#pragma once

// Training of shared parameters on 𝒰_train and few-shot adaptation of user
// parameters for every built-in method.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "palign/corpus.hpp"
#include "palign/models.hpp"
#include "palign/rmzoo/artifact.hpp"
#include "palign/rmzoo/heads.hpp"
#include "palign/rmzoo/pref.hpp"
#include "palign/rmzoo/scoring.hpp"

namespace palign {

struct TrainingConfig {
  Method method = Method::global;
  int epochs = 60;
  std::size_t batch_size = 0;  // 0: full batch
  double step_size = 0.5;
  std::uint64_t seed = 0;
  int lore_bases = 5;
  int pref_rank = 8;
  int mlp_hidden = 16;
  double init_scale = 0.1;
  int lora_rank = 0;  // 0 at desk scale: heads are trained in full

  json to_json() const {
    return json{{"method", to_string(method)}, {"epochs", epochs},          {"batch_size", batch_size},
                {"step_size", step_size},      {"seed", seed},              {"lore_bases", lore_bases},
                {"pref_rank", pref_rank},      {"mlp_hidden", mlp_hidden},  {"init_scale", init_scale},
                {"lora_rank", lora_rank}};
  }
  static TrainingConfig from_json(const json& j) {
    TrainingConfig c;
    c.method = parse_method(j.at("method").get<std::string>());
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.step_size = j.value("step_size", c.step_size);
    c.seed = j.value("seed", c.seed);
    c.lore_bases = j.value("lore_bases", c.lore_bases);
    c.pref_rank = j.value("pref_rank", c.pref_rank);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.init_scale = j.value("init_scale", c.init_scale);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.validate();
    return c;
  }
  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(step_size > 0)) throw ConfigError("step_size must be > 0");
    if (lore_bases < 1) throw ConfigError("lore_bases must be >= 1");
    if (pref_rank < 1) throw ConfigError("pref_rank must be >= 1");
    if (mlp_hidden < 1) throw ConfigError("mlp_hidden must be >= 1");
    if (method == Method::plugin) throw ConfigError("plugin reward models are registered, not trained");
  }
};

struct AdaptationConfig {
  int steps = 100;
  double step_size = 1e-2;
  double plateau = 1e-4;

  json to_json() const { return json{{"steps", steps}, {"step_size", step_size}, {"plateau", plateau}}; }
  static AdaptationConfig from_json(const json& j) {
    AdaptationConfig c;
    c.steps = j.value("steps", c.steps);
    c.step_size = j.value("step_size", c.step_size);
    c.plateau = j.value("plateau", c.plateau);
    if (c.steps < 0 || !(c.step_size > 0)) throw ConfigError("invalid adaptation config");
    return c;
  }
};

// ---------------------------------------------------------------------------
// Monotone gradient descent: a step is accepted only if it does not raise the
// objective; otherwise the step is halved and retried.
// ---------------------------------------------------------------------------

struct DescentOptions {
  int iterations = 0;
  double step = 0.1;
  double grow = 1.0;      // step multiplier after an accepted step
  double plateau = 0.0;   // stop when the improvement falls below this
  int max_halvings = 40;
};

struct DescentResult {
  std::vector<double> losses;  // losses[0] is the initial objective
  int accepted_steps = 0;
};

/// `objective(grad)` evaluates at the view's current values and fills
/// `grad` when non-null.
template <class Objective>
DescentResult descend(const ParamView& view, Objective&& objective, const DescentOptions& opt) {
  DescentResult r;
  Vector g;
  double loss = objective(&g);
  r.losses.push_back(loss);
  double step = opt.step;
  for (int it = 0; it < opt.iterations; ++it) {
    const Vector x = view.get();
    bool accepted = false;
    double new_loss = loss;
    for (int h = 0; h <= opt.max_halvings; ++h) {
      view.set(x - step * g);
      new_loss = objective(nullptr);
      if (std::isfinite(new_loss) && new_loss <= loss) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      view.set(x);
      break;
    }
    ++r.accepted_steps;
    const double gain = loss - new_loss;
    loss = objective(&g);
    r.losses.push_back(loss);
    step *= opt.grow;
    if (gain < opt.plateau) break;
  }
  return r;
}

namespace detail {

/// Feature cache keyed by (prompt, response).
class FeatureCache {
 public:
  FeatureCache(Method m, const LanguageModel& lm) : method_(m), lm_(lm) {}
  const ResponseFeatures& get(const std::string& prompt, const std::string& response) {
    auto key = std::make_pair(prompt, response);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      const TokenSeq toks = lm_.encode(response);
      it = cache_.emplace(std::move(key), response_features(method_, lm_, prompt, toks)).first;
    }
    return it->second;
  }

 private:
  Method method_;
  const LanguageModel& lm_;
  std::map<std::pair<std::string, std::string>, ResponseFeatures> cache_;
};

inline std::vector<FeaturePair> feature_pairs(FeatureCache& cache,
                                              const std::vector<PreferenceRecord>& records) {
  std::vector<FeaturePair> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    // Insert both before taking pointers: std::map nodes are stable.
    const auto* c = &cache.get(r.prompt, r.chosen);
    const auto* j = &cache.get(r.prompt, r.rejected);
    out.push_back({c, j, r.user_id});
  }
  return out;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline ParamSet mlp_init(std::uint64_t seed, const std::string& user, int hidden, int dim, double scale) {
  Rng rng(seed, "mpu-init:" + user);
  ParamSet p;
  p["w1"] = random_matrix(rng, hidden, dim, scale);
  p["b1"] = Matrix::Zero(hidden, 1);
  p["w2"] = random_matrix(rng, hidden, 1, scale);
  return p;
}

/// Initial z_k for a user about to be adapted.
inline ParamSet initial_user_params(const RewardModelArtifact& a, const std::string& user) {
  switch (a.method) {
    case Method::mpu: {
      const auto& cfg = a.training_manifest.config;
      const int hidden = cfg.value("mlp_hidden", 16);
      const double scale = cfg.value("init_scale", 0.1);
      const int dim = static_cast<int>(heads::tensor(a.shared_params, "embed_dim")(0, 0));
      return mlp_init(a.training_manifest.seed, user, hidden, dim, scale);
    }
    case Method::mpu_avg:
      return ParamSet{{"w1", heads::tensor(a.shared_params, "avg_w1")},
                      {"b1", heads::tensor(a.shared_params, "avg_b1")},
                      {"w2", heads::tensor(a.shared_params, "avg_w2")}};
    case Method::lore:
    case Method::lore_alt:
      return ParamSet{{"logits", Matrix::Zero(heads::tensor(a.shared_params, "bases").rows(), 1)}};
    case Method::pref_mod:
      return ParamSet{{"u", heads::tensor(a.shared_params, "user_init")}};
    default:
      throw ConfigError(to_string(a.method) + " has no user parameters");
  }
}

/// Pads per-user curves to a common length and combines them weighted by
/// pair counts (the global mean BT loss).
inline std::vector<double> combine_curves(const std::vector<std::vector<double>>& curves,
                                          const std::vector<double>& weights, int length) {
  std::vector<double> out(static_cast<std::size_t>(length), 0.0);
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  for (std::size_t u = 0; u < curves.size(); ++u) {
    for (int e = 0; e < length; ++e) {
      const auto& c = curves[u];
      const double v = c[std::min<std::size_t>(static_cast<std::size_t>(e), c.size() - 1)];
      out[static_cast<std::size_t>(e)] += weights[u] * v / wsum;
    }
  }
  return out;
}

/// Full-batch or seeded mini-batch epochs over one parameter view. Mini-batch
/// epochs that raise the full objective are rolled back with a halved step,
/// so the recorded curve never increases.
template <class BatchObjective>
std::vector<double> run_epochs(const ParamView& view, std::span<const FeaturePair> pairs,
                               BatchObjective&& objective, const TrainingConfig& cfg,
                               std::uint64_t stream) {
  if (cfg.batch_size == 0 || cfg.batch_size >= pairs.size()) {
    DescentOptions opt{cfg.epochs, cfg.step_size, 1.1, 0.0, 40};
    return descend(view, [&](Vector* g) { return objective(pairs, g); }, opt).losses;
  }
  std::vector<double> curve{objective(pairs, nullptr)};
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg.seed ^ stream, "minibatch");
  double step = cfg.step_size;
  for (int e = 0; e < cfg.epochs; ++e) {
    const Vector start = view.get();
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<FeaturePair> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(pairs[order[i]]);
      Vector g;
      objective(std::span<const FeaturePair>(batch), &g);
      view.set(view.get() - step * g);
    }
    const double loss = objective(pairs, nullptr);
    if (!std::isfinite(loss) || loss > curve.back()) {
      view.set(start);
      step *= 0.5;
      curve.push_back(curve.back());
    } else {
      curve.push_back(loss);
    }
  }
  return curve;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train_reward_model
// ---------------------------------------------------------------------------

/// Trains θ (and train-user z_k) on the records of data.split's train users.
/// With epochs = 0 the artifact holds the initialization (for pref_mod: the
/// SVD + regression warm start).
inline RewardModelArtifact train_reward_model(const PreferenceSet& data, const LanguageModel& backbone,
                                              const TrainingConfig& cfg) {
  cfg.validate();
  if (!data.split()) throw ConfigError("dataset has no user split");
  const auto records = data.records_of(data.split()->train_users);
  if (records.empty()) throw DataError("no training records for the train users");

  const Method method = cfg.method;
  const int dim = backbone.hidden_dim();
  detail::FeatureCache cache(method, backbone);
  const auto pairs = detail::feature_pairs(cache, records);

  RewardModelArtifact a;
  a.method = method;
  a.backbone_id = backbone.model_id();
  a.tokenizer_family = backbone.tokenizer_family();
  a.lora_rank = cfg.lora_rank;
  a.training_manifest.seed = cfg.seed;
  a.training_manifest.epochs = cfg.epochs;
  a.training_manifest.config = cfg.to_json();
  a.training_manifest.data_checksum = data.manifest().checksum;
  a.metadata["train_users"] = data.split()->train_users.size();
  a.metadata["train_pairs"] = records.size();

  auto objective_for = [&](ParamSet* g_shared_target, bool users_grad) {
    return [&, g_shared_target, users_grad](std::span<const FeaturePair> batch, Vector* g) {
      if (!g) return pair_objective(method, a.shared_params, a.user_params, batch, nullptr, nullptr);
      ParamSet gs;
      std::map<std::string, ParamSet> gu;
      const double loss = pair_objective(method, a.shared_params, a.user_params, batch,
                                         g_shared_target ? &gs : nullptr, users_grad ? &gu : nullptr);
      Vector out;
      std::vector<Vector> parts;
      if (g_shared_target) parts.push_back(gather_grad(a.shared_params, gs));
      if (users_grad) {
        for (const auto& [u, ps] : a.user_params) {
          const auto it = gu.find(u);
          parts.push_back(gather_grad(ps, it == gu.end() ? ParamSet{} : it->second));
        }
      }
      Eigen::Index n = 0;
      for (const auto& p : parts) n += p.size();
      out.resize(n);
      Eigen::Index off = 0;
      for (const auto& p : parts) {
        out.segment(off, p.size()) = p;
        off += p.size();
      }
      *g = std::move(out);
      return loss;
    };
  };

  Rng rng(cfg.seed, "train:" + to_string(method));
  switch (method) {
    case Method::global:
    case Method::global_v2: {
      a.shared_params["head"] = Matrix::Zero(dim, 1);
      if (method == Method::global_v2) a.metadata["token_positions"] = "response";
      ParamView view;
      add_params(view, a.shared_params);
      a.training_manifest.loss_curve = detail::run_epochs(view, pairs, objective_for(&a.shared_params, false), cfg, 1);
      break;
    }
    case Method::genarm: {
      a.shared_params["token_head"] = Matrix::Zero(backbone.vocab_size(), dim);
      ParamView view;
      add_params(view, a.shared_params);
      a.training_manifest.loss_curve = detail::run_epochs(view, pairs, objective_for(&a.shared_params, false), cfg, 2);
      break;
    }
    case Method::mpu:
    case Method::mpu_avg: {
      a.shared_params["embed_dim"] = Matrix::Constant(1, 1, dim);
      std::map<std::string, std::vector<FeaturePair>> by_user;
      for (const auto& p : pairs) by_user[p.user].push_back(p);
      std::vector<std::vector<double>> curves;
      std::vector<double> weights;
      for (const auto& [user, upairs] : by_user) {
        a.user_params[user] = detail::mlp_init(cfg.seed, user, cfg.mlp_hidden, dim, cfg.init_scale);
        ParamView view;
        add_params(view, a.user_params[user]);
        std::map<std::string, ParamSet> single;
        auto obj = [&](std::span<const FeaturePair> batch, Vector* g) {
          single.clear();
          single.emplace(user, a.user_params[user]);
          std::map<std::string, ParamSet> gu;
          const double loss = pair_objective(method, a.shared_params, single, batch, nullptr, g ? &gu : nullptr);
          if (g) *g = gather_grad(a.user_params[user], gu[user]);
          return loss;
        };
        curves.push_back(detail::run_epochs(view, upairs, obj, cfg, Fnv1a{}.update(user).digest()));
        weights.push_back(static_cast<double>(upairs.size()));
      }
      a.training_manifest.loss_curve = detail::combine_curves(curves, weights, cfg.epochs + 1);
      if (method == Method::mpu_avg) {
        Matrix w1 = Matrix::Zero(cfg.mlp_hidden, dim), b1 = Matrix::Zero(cfg.mlp_hidden, 1),
               w2 = Matrix::Zero(cfg.mlp_hidden, 1);
        for (const auto& [_, ps] : a.user_params) {
          w1 += ps.at("w1");
          b1 += ps.at("b1");
          w2 += ps.at("w2");
        }
        const double n = static_cast<double>(a.user_params.size());
        a.shared_params["avg_w1"] = w1 / n;
        a.shared_params["avg_b1"] = b1 / n;
        a.shared_params["avg_w2"] = w2 / n;
      }
      break;
    }
    case Method::lore:
    case Method::lore_alt: {
      a.shared_params["bases"] = detail::random_matrix(rng, cfg.lore_bases, dim, cfg.init_scale);
      for (const auto& p : pairs) {
        if (!a.user_params.count(p.user)) a.user_params[p.user]["logits"] = Matrix::Zero(cfg.lore_bases, 1);
      }
      if (method == Method::lore) {
        ParamView view;
        add_params(view, a.shared_params);
        for (auto& [_, ps] : a.user_params) add_params(view, ps);
        a.training_manifest.loss_curve = detail::run_epochs(view, pairs, objective_for(&a.shared_params, true), cfg, 3);
      } else {
        ParamView base_view, user_view;
        add_params(base_view, a.shared_params);
        for (auto& [_, ps] : a.user_params) add_params(user_view, ps);
        TrainingConfig one = cfg;
        one.epochs = 1;
        double base_step = cfg.step_size, user_step = cfg.step_size;
        std::vector<double> curve{pair_objective(method, a.shared_params, a.user_params, pairs, nullptr, nullptr)};
        for (int e = 0; e < cfg.epochs; ++e) {
          one.step_size = base_step;
          auto c1 = detail::run_epochs(base_view, pairs, objective_for(&a.shared_params, false), one, 4 + 2 * static_cast<std::uint64_t>(e));
          one.step_size = user_step;
          auto c2 = detail::run_epochs(user_view, pairs, objective_for(nullptr, true), one, 5 + 2 * static_cast<std::uint64_t>(e));
          if (c1.size() == 1) base_step *= 0.5;
          if (c2.size() == 1) user_step *= 0.5;
          curve.push_back(c2.back());
        }
        a.training_manifest.loss_curve = std::move(curve);
      }
      break;
    }
    case Method::pref_mod: {
      const PreferenceMatrix pm = build_preference_matrix(records);
      const int rank = std::min<int>(cfg.pref_rank, static_cast<int>(std::min(pm.signs.rows(), pm.signs.cols())));
      const PrefFactorization fact = pref_svd_init(pm.signs, rank);
      detail::FeatureCache last_cache(Method::pref_mod, backbone);
      Matrix diffs(static_cast<Eigen::Index>(pm.pairs.size()), dim);
      for (std::size_t i = 0; i < pm.pairs.size(); ++i) {
        const auto& p = pm.pairs[i];
        diffs.row(static_cast<Eigen::Index>(i)) =
            (last_cache.get(p.prompt, p.first).pooled - last_cache.get(p.prompt, p.second).pooled).transpose();
      }
      const HeadRegression reg = pref_head_regression(diffs, fact.item_features);
      a.shared_params["head"] = reg.weights;
      Matrix mean_u = Matrix::Zero(rank, 1);
      for (std::size_t k = 0; k < pm.users.size(); ++k) {
        const Vector u = (fact.user_embeddings.row(static_cast<Eigen::Index>(k)).transpose().array() *
                          fact.singular_values.array()).matrix();
        a.user_params[pm.users[k]]["u"] = u;
        mean_u += u;
      }
      a.metadata["svd"] = {{"rank", rank},
                           {"fill_rate", fact.fill_rate},
                           {"pairs", pm.pairs.size()},
                           {"users", pm.users.size()},
                           {"regression_residual", reg.residual},
                           {"regression_degenerate", reg.degenerate},
                           {"imputation", "row-mean"}};
      ParamView view;
      add_params(view, a.shared_params);
      for (auto& [_, ps] : a.user_params) add_params(view, ps);
      a.training_manifest.loss_curve = detail::run_epochs(view, pairs, objective_for(&a.shared_params, true), cfg, 6);
      mean_u.setZero();
      for (const auto& [_, ps] : a.user_params) mean_u += ps.at("u");
      a.shared_params["user_init"] = mean_u / static_cast<double>(a.user_params.size());
      break;
    }
    case Method::plugin:
      break;
  }
  return a;
}

// ---------------------------------------------------------------------------
// adapt_user
// ---------------------------------------------------------------------------

/// z_k = A(few_shot; θ): fresh initialization followed by monotone gradient
/// descent on the few-shot BT loss. θ is never touched.
inline RewardModelArtifact adapt_user(const RewardModelArtifact& artifact,
                                      const std::vector<PreferenceRecord>& few_shot,
                                      const AdaptationConfig& cfg, const LanguageModel& backbone,
                                      const WarningSink& sink = stderr_warning) {
  if (few_shot.empty()) throw DataError("few-shot set is empty");
  const std::string& user = few_shot.front().user_id;
  for (const auto& r : few_shot) {
    if (r.user_id != user) throw DataError("few-shot records mix users '" + user + "' and '" + r.user_id + "'");
  }
  RewardModelArtifact out = artifact;
  if (!is_personalized(artifact.method)) {
    warn(sink, to_string(artifact.method) + " is not personalized; adaptation is a no-op");
    return out;
  }
  detail::check_backbone(artifact, backbone);
  detail::FeatureCache cache(artifact.method, backbone);
  const auto pairs = detail::feature_pairs(cache, few_shot);

  std::map<std::string, ParamSet> users{{user, detail::initial_user_params(artifact, user)}};
  ParamView view;
  add_params(view, users[user]);
  auto obj = [&](Vector* g) {
    std::map<std::string, ParamSet> gu;
    const double loss = pair_objective(artifact.method, artifact.shared_params, users, pairs, nullptr,
                                       g ? &gu : nullptr);
    if (g) *g = gather_grad(users[user], gu[user]);
    return loss;
  };
  const DescentResult r = descend(view, obj, DescentOptions{cfg.steps, cfg.step_size, 1.0, cfg.plateau, 40});
  out.user_params[user] = std::move(users[user]);
  out.metadata["adaptation"][user] = {{"few_shot", few_shot.size()},
                                      {"steps", r.accepted_steps},
                                      {"initial_loss", r.losses.front()},
                                      {"final_loss", r.losses.back()}};
  return out;
}

}  // namespace palign
