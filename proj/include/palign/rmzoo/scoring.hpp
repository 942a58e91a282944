#pragma once

// Sequence- and token-level rewards from an artifact, and the RewardModel
// interface shared by built-in artifacts and registered plugins.

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>

#include "palign/models.hpp"
#include "palign/rmzoo/artifact.hpp"
#include "palign/rmzoo/heads.hpp"

namespace palign {

using UserRef = std::optional<std::string>;

namespace detail {

inline void check_backbone(const RewardModelArtifact& a, const LanguageModel& backbone) {
  if (a.backbone_id != backbone.model_id()) {
    throw ConfigError("artifact was trained on backbone '" + a.backbone_id + "' but '" +
                      backbone.model_id() + "' was supplied");
  }
}

inline const ParamSet* user_params_for(const RewardModelArtifact& a, const UserRef& user) {
  if (!is_personalized(a.method)) return nullptr;
  if (!user) throw ConfigError(to_string(a.method) + " reward requires a user");
  const auto it = a.user_params.find(*user);
  if (it == a.user_params.end()) {
    throw AdaptationRequiredError("user '" + *user + "' has not been adapted for " +
                                  to_string(a.method));
  }
  return &it->second;
}

}  // namespace detail

/// r_{θ,z_k}(response | prompt).
inline double sequence_reward(const RewardModelArtifact& artifact, const UserRef& user,
                              std::string_view prompt, std::string_view response,
                              const LanguageModel& backbone) {
  if (response.empty()) throw InputError("response must be non-empty");
  detail::check_backbone(artifact, backbone);
  const ParamSet* up = detail::user_params_for(artifact, user);
  const TokenSeq toks = backbone.encode(response);
  const auto f = response_features(artifact.method, backbone, prompt, toks);
  return heads::reward(artifact.method, artifact.shared_params, up, f);
}

/// r_{θ,z_k}(candidate | prompt, prefix). Embedding-head methods score the
/// partial sequence prefix ++ candidate; genarm returns the candidate's
/// autoregressive log-score.
inline double token_reward(const RewardModelArtifact& artifact, const UserRef& user,
                           std::string_view prompt, std::span<const Token> prefix, Token candidate,
                           const LanguageModel& backbone) {
  detail::check_backbone(artifact, backbone);
  check_vocab(backbone, candidate);
  const ParamSet* up = detail::user_params_for(artifact, user);
  if (artifact.method == Method::genarm) {
    const TokenSeq ctx = build_context(backbone, prompt, prefix);
    if (ctx.size() + 1 > backbone.context_limit()) throw LengthError("no room for candidate token");
    const Vector h = ctx.empty() ? Vector::Zero(backbone.hidden_dim()) : backbone.hidden_states(ctx).back();
    const Matrix& g = heads::tensor(artifact.shared_params, "token_head");
    return heads::log_softmax(g * h)[candidate];
  }
  TokenSeq seq(prefix.begin(), prefix.end());
  seq.push_back(candidate);
  const auto f = response_features(artifact.method, backbone, prompt, seq);
  return heads::reward(artifact.method, artifact.shared_params, up, f);
}

// ---------------------------------------------------------------------------
// RewardModel: what guidance and metrics consume.
// ---------------------------------------------------------------------------

class RewardModel {
 public:
  virtual ~RewardModel() = default;
  virtual std::string name() const = 0;
  virtual bool personalized() const = 0;
  virtual bool has_user(const std::string& user) const = 0;
  virtual double sequence_reward(const UserRef& user, std::string_view prompt,
                                 std::string_view response) const = 0;
  virtual double token_reward(const UserRef& user, std::string_view prompt,
                              std::span<const Token> prefix, Token candidate) const = 0;
};

/// Built-in artifact bound to its backbone. Holds references; both must
/// outlive it.
class ArtifactRewardModel final : public RewardModel {
 public:
  ArtifactRewardModel(const RewardModelArtifact& artifact, const LanguageModel& backbone)
      : artifact_(artifact), backbone_(backbone) {
    detail::check_backbone(artifact, backbone);
  }
  std::string name() const override { return to_string(artifact_.method); }
  bool personalized() const override { return is_personalized(artifact_.method); }
  bool has_user(const std::string& user) const override {
    return !personalized() || artifact_.has_user(user);
  }
  double sequence_reward(const UserRef& user, std::string_view prompt,
                         std::string_view response) const override {
    return palign::sequence_reward(artifact_, user, prompt, response, backbone_);
  }
  double token_reward(const UserRef& user, std::string_view prompt, std::span<const Token> prefix,
                      Token candidate) const override {
    return palign::token_reward(artifact_, user, prompt, prefix, candidate, backbone_);
  }
  const RewardModelArtifact& artifact() const { return artifact_; }
  const LanguageModel& backbone() const { return backbone_; }

 private:
  const RewardModelArtifact& artifact_;
  const LanguageModel& backbone_;
};

// ---------------------------------------------------------------------------
// Plugin registry: external reward models (e.g. re-implementations of
// methods the toolkit does not ship) register a factory by name and are
// loaded from artifacts whose method is `plugin`.
// ---------------------------------------------------------------------------

using RewardModelFactory = std::function<std::unique_ptr<RewardModel>(
    const RewardModelArtifact&, const LanguageModel&)>;

class PluginRegistry {
 public:
  static PluginRegistry& instance() {
    static PluginRegistry r;
    return r;
  }
  void register_plugin(const std::string& name, RewardModelFactory factory) {
    std::lock_guard lock(mu_);
    factories_[name] = std::move(factory);
  }
  bool contains(const std::string& name) const {
    std::lock_guard lock(mu_);
    return factories_.count(name) > 0;
  }
  std::unique_ptr<RewardModel> make(const RewardModelArtifact& a, const LanguageModel& backbone) const {
    RewardModelFactory f;
    {
      std::lock_guard lock(mu_);
      const auto it = factories_.find(a.plugin_name);
      if (it == factories_.end()) throw ConfigError("no plugin registered as '" + a.plugin_name + "'");
      f = it->second;
    }
    return f(a, backbone);
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, RewardModelFactory> factories_;
};

/// Scorer for any artifact: built-in heads or a registered plugin.
inline std::unique_ptr<RewardModel> make_reward_model(const RewardModelArtifact& a,
                                                      const LanguageModel& backbone) {
  if (a.method == Method::plugin) return PluginRegistry::instance().make(a, backbone);
  return std::make_unique<ArtifactRewardModel>(a, backbone);
}

}  // namespace palign
