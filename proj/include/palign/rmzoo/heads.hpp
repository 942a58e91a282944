#pragma once

// Reward heads over frozen backbone features, with analytic gradients.
//
//   global, mpu*, lore*, pref_mod : features = last-token hidden state
//   global_v2                     : features = mean hidden state over the
//                                   response positions (a linear head's mean
//                                   token reward equals the head applied to
//                                   the mean)
//   genarm                        : per response position, the hidden state
//                                   of the preceding context and the token

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palign/models.hpp"
#include "palign/rmzoo/artifact.hpp"

namespace palign {

// ---------------------------------------------------------------------------
// Bradley-Terry loss
// ---------------------------------------------------------------------------

/// -log sigma(x), computed without overflow.
inline double neg_log_sigmoid(double x) {
  return x >= 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// -log sigma(reward_chosen - reward_rejected).
inline double bt_loss(double reward_chosen, double reward_rejected) {
  if (!std::isfinite(reward_chosen) || !std::isfinite(reward_rejected)) {
    throw NumericError("bt_loss on non-finite reward");
  }
  return neg_log_sigmoid(reward_chosen - reward_rejected);
}

/// d bt_loss / d margin.
inline double bt_loss_dmargin(double margin) { return -sigmoid(-margin); }

// ---------------------------------------------------------------------------
// Sequence embeddings
// ---------------------------------------------------------------------------

enum class PoolMode { last_token, mean_pool };

struct SequenceEmbedding {
  Vector vector;
  bool truncated = false;
};

/// Final-layer embedding of `text`. Over-length input keeps the trailing
/// context_limit tokens and sets `truncated`, or throws LengthError when
/// `strict`.
inline SequenceEmbedding embed_sequence(const LanguageModel& policy, std::string_view text,
                                        PoolMode mode, bool strict = false) {
  TokenSeq toks = policy.encode(text);
  if (toks.empty()) throw InputError("embed_sequence: text produced no tokens");
  SequenceEmbedding out;
  if (toks.size() > policy.context_limit()) {
    if (strict) {
      throw LengthError("text of " + std::to_string(toks.size()) + " tokens exceeds context limit");
    }
    toks.erase(toks.begin(), toks.end() - static_cast<std::ptrdiff_t>(policy.context_limit()));
    out.truncated = true;
  }
  const auto states = policy.hidden_states(toks);
  if (mode == PoolMode::last_token) {
    out.vector = states.back();
  } else {
    out.vector = Vector::Zero(policy.hidden_dim());
    for (const auto& h : states) out.vector += h;
    out.vector /= static_cast<double>(states.size());
  }
  return out;
}

struct ResponseFeatures {
  Vector pooled;
  struct Step {
    Vector context;
    Token token;
  };
  std::vector<Step> steps;  // genarm only
};

/// Features of `response` (already tokenized) continuing `prompt`.
inline ResponseFeatures response_features(Method method, const LanguageModel& backbone,
                                          std::string_view prompt,
                                          std::span<const Token> response) {
  if (response.empty()) throw InputError("response must contain at least one token");
  const TokenSeq ctx = build_context(backbone, prompt, response);
  const auto states = backbone.hidden_states(ctx);
  const std::size_t start = ctx.size() - response.size();
  ResponseFeatures f;
  switch (method) {
    case Method::global_v2: {
      f.pooled = Vector::Zero(backbone.hidden_dim());
      for (std::size_t i = start; i < ctx.size(); ++i) f.pooled += states[i];
      f.pooled /= static_cast<double>(response.size());
      break;
    }
    case Method::genarm: {
      for (std::size_t i = start; i < ctx.size(); ++i) {
        Vector c = i == 0 ? Vector::Zero(backbone.hidden_dim()) : states[i - 1];
        f.steps.push_back({std::move(c), ctx[i]});
      }
      break;
    }
    default:
      f.pooled = states.back();
      break;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Head forward / backward. `user` is null for user-independent methods.
// ---------------------------------------------------------------------------

namespace heads {

inline const Matrix& tensor(const ParamSet& ps, const std::string& name) {
  const auto it = ps.find(name);
  if (it == ps.end()) throw FormatError("missing tensor '" + name + "'");
  return it->second;
}

inline Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

inline Vector log_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

/// Per-user MLP: w2' tanh(W1 f + b1).
inline double mlp_reward(const ParamSet& p, const Vector& f, const std::string& prefix = "") {
  const Matrix& w1 = tensor(p, prefix + "w1");
  const Matrix& b1 = tensor(p, prefix + "b1");
  const Matrix& w2 = tensor(p, prefix + "w2");
  const Vector z = (w1 * f + b1.col(0)).array().tanh().matrix();
  return w2.col(0).dot(z);
}

inline double reward(Method method, const ParamSet& shared, const ParamSet* user,
                     const ResponseFeatures& f) {
  auto need_user = [&]() -> const ParamSet& {
    if (!user) throw AdaptationRequiredError(to_string(method) + " requires user parameters");
    return *user;
  };
  switch (method) {
    case Method::global:
    case Method::global_v2:
      return tensor(shared, "head").col(0).dot(f.pooled);
    case Method::mpu:
    case Method::mpu_avg:
      return mlp_reward(need_user(), f.pooled);
    case Method::lore:
    case Method::lore_alt: {
      const Vector w = softmax(tensor(need_user(), "logits").col(0));
      return w.dot(tensor(shared, "bases") * f.pooled);
    }
    case Method::pref_mod:
      return tensor(need_user(), "u").col(0).dot(tensor(shared, "head") * f.pooled);
    case Method::genarm: {
      const Matrix& g = tensor(shared, "token_head");
      double total = 0.0;
      for (const auto& s : f.steps) total += log_softmax(g * s.context)[s.token];
      return total;
    }
    case Method::plugin:
      break;
  }
  throw ConfigError("method " + to_string(method) + " has no built-in head");
}

inline void add_to(ParamSet& grads, const std::string& name, const Matrix& g) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, g);
  } else {
    it->second += g;
  }
}

/// Accumulates coeff * d reward / d params into the gradient sets. Either
/// gradient pointer may be null to skip that block.
inline void reward_grad(Method method, const ParamSet& shared, const ParamSet* user,
                        const ResponseFeatures& f, double coeff, ParamSet* g_shared,
                        ParamSet* g_user) {
  switch (method) {
    case Method::global:
    case Method::global_v2:
      if (g_shared) add_to(*g_shared, "head", coeff * f.pooled);
      return;
    case Method::mpu:
    case Method::mpu_avg: {
      if (!g_user) return;
      const Matrix& w1 = tensor(*user, "w1");
      const Matrix& b1 = tensor(*user, "b1");
      const Matrix& w2 = tensor(*user, "w2");
      const Vector z = (w1 * f.pooled + b1.col(0)).array().tanh().matrix();
      const Vector da = (w2.col(0).array() * (1.0 - z.array().square())).matrix();
      add_to(*g_user, "w1", coeff * da * f.pooled.transpose());
      add_to(*g_user, "b1", coeff * da);
      add_to(*g_user, "w2", coeff * z);
      return;
    }
    case Method::lore:
    case Method::lore_alt: {
      const Matrix& bases = tensor(shared, "bases");
      const Vector w = softmax(tensor(*user, "logits").col(0));
      if (g_shared) add_to(*g_shared, "bases", coeff * w * f.pooled.transpose());
      if (g_user) {
        const Vector s = bases * f.pooled;
        add_to(*g_user, "logits", coeff * (w.array() * (s.array() - w.dot(s))).matrix());
      }
      return;
    }
    case Method::pref_mod: {
      const Matrix& head = tensor(shared, "head");
      const Vector u = tensor(*user, "u").col(0);
      if (g_shared) add_to(*g_shared, "head", coeff * u * f.pooled.transpose());
      if (g_user) add_to(*g_user, "u", coeff * (head * f.pooled));
      return;
    }
    case Method::genarm: {
      if (!g_shared) return;
      const Matrix& g = tensor(shared, "token_head");
      Matrix acc = Matrix::Zero(g.rows(), g.cols());
      for (const auto& s : f.steps) {
        Vector d = -softmax(g * s.context);
        d[s.token] += 1.0;
        acc.noalias() += d * s.context.transpose();
      }
      add_to(*g_shared, "token_head", coeff * acc);
      return;
    }
    case Method::plugin:
      break;
  }
  throw ConfigError("method " + to_string(method) + " has no built-in head");
}

}  // namespace heads

// ---------------------------------------------------------------------------
// Pairwise objective
// ---------------------------------------------------------------------------

struct FeaturePair {
  const ResponseFeatures* chosen;
  const ResponseFeatures* rejected;
  std::string user;
};

/// Mean BT loss over `pairs`, accumulating gradients into the requested
/// blocks (user gradients keyed by user id).
inline double pair_objective(Method method, const ParamSet& shared,
                             const std::map<std::string, ParamSet>& users,
                             std::span<const FeaturePair> pairs, ParamSet* g_shared,
                             std::map<std::string, ParamSet>* g_users) {
  if (pairs.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  double total = 0.0;
  for (const auto& p : pairs) {
    const ParamSet* up = nullptr;
    if (is_personalized(method)) {
      const auto it = users.find(p.user);
      if (it == users.end()) throw AdaptationRequiredError("no parameters for user '" + p.user + "'");
      up = &it->second;
    }
    const double rc = heads::reward(method, shared, up, *p.chosen);
    const double rr = heads::reward(method, shared, up, *p.rejected);
    total += bt_loss(rc, rr);
    if (g_shared || g_users) {
      const double c = inv_n * bt_loss_dmargin(rc - rr);
      ParamSet* gu = (g_users && up) ? &(*g_users)[p.user] : nullptr;
      heads::reward_grad(method, shared, up, *p.chosen, c, g_shared, gu);
      heads::reward_grad(method, shared, up, *p.rejected, -c, g_shared, gu);
    }
  }
  return total * inv_n;
}

// ---------------------------------------------------------------------------
// Flattening helpers for the optimizer
// ---------------------------------------------------------------------------

/// Ordered list of tensors treated as one parameter vector.
class ParamView {
 public:
  void add(Matrix* m) { mats_.push_back(m); }
  std::size_t size() const {
    std::size_t n = 0;
    for (auto* m : mats_) n += static_cast<std::size_t>(m->size());
    return n;
  }
  Vector get() const {
    Vector v(static_cast<Eigen::Index>(size()));
    Eigen::Index off = 0;
    for (auto* m : mats_) {
      v.segment(off, m->size()) = Eigen::Map<const Vector>(m->data(), m->size());
      off += m->size();
    }
    return v;
  }
  void set(const Vector& v) const {
    Eigen::Index off = 0;
    for (auto* m : mats_) {
      Eigen::Map<Vector>(m->data(), m->size()) = v.segment(off, m->size());
      off += m->size();
    }
  }
  const std::vector<Matrix*>& mats() const { return mats_; }

 private:
  std::vector<Matrix*> mats_;
};

inline void add_params(ParamView& view, ParamSet& ps) {
  for (auto& [_, m] : ps) view.add(&m);
}

/// Gathers gradients matching `params`' layout; absent entries are zero.
inline Vector gather_grad(const ParamSet& params, const ParamSet& grads) {
  std::size_t n = 0;
  for (const auto& [_, m] : params) n += static_cast<std::size_t>(m.size());
  Vector v = Vector::Zero(static_cast<Eigen::Index>(n));
  Eigen::Index off = 0;
  for (const auto& [name, m] : params) {
    const auto it = grads.find(name);
    if (it != grads.end()) v.segment(off, m.size()) = Eigen::Map<const Vector>(it->second.data(), m.size());
    off += m.size();
  }
  return v;
}

}  // namespace palign
