#pragma once

// Reward-guided decoding (ARGS), greedy zero-shot decoding, the three
// sequence scorers behind policy accuracy, and ICL / ICL-RAG prompting.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "palign/models.hpp"
#include "palign/rmzoo/scoring.hpp"

namespace palign {

using json = nlohmann::json;

enum class TieBreak { lowest_token_id };

struct GenerationConfig {
  double lambda = 1.0;
  int top_k = 10;
  int max_new_tokens = 48;
  std::set<Token> stop_tokens;  // empty: the policy's stop token
  TieBreak tie_break = TieBreak::lowest_token_id;
  std::uint64_t seed = 0;

  void validate(const LanguageModel& policy) const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
    if (top_k < 1 || top_k > policy.vocab_size()) {
      throw ConfigError("top_k must lie in [1, " + std::to_string(policy.vocab_size()) + "]");
    }
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  }
  bool is_stop(const LanguageModel& policy, Token t) const {
    return stop_tokens.empty() ? t == policy.stop_token() : stop_tokens.count(t) > 0;
  }
  json to_json() const {
    return json{{"lambda", lambda},           {"top_k", top_k},
                {"max_new_tokens", max_new_tokens}, {"stop_tokens", stop_tokens},
                {"tie_break", "lowest_token_id"},   {"seed", seed}};
  }
  static GenerationConfig from_json(const json& j) {
    GenerationConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.top_k = j.value("top_k", c.top_k);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.stop_tokens = j.value("stop_tokens", std::set<Token>{});
    if (j.value("tie_break", std::string("lowest_token_id")) != "lowest_token_id") {
      throw ConfigError("unsupported tie_break");
    }
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

struct StepRecord {
  std::vector<Token> candidates;
  std::vector<double> base_logprobs;
  std::vector<double> token_rewards;
  std::vector<double> blended;
  Token chosen = 0;
};

struct DecodeTrace {
  std::vector<StepRecord> steps;
  TokenSeq tokens;
  std::string text;
  std::string termination;  // "stop" or "max_new_tokens"
  double lambda = 0.0;
  // Running statistics of every token reward computed (Welford).
  std::size_t reward_count = 0;
  double reward_mean = 0.0;
  double reward_m2 = 0.0;

  double reward_variance() const {
    return reward_count > 1 ? reward_m2 / static_cast<double>(reward_count - 1) : 0.0;
  }
};

/// Index of the maximal score; ties go to the lowest token id.
inline std::size_t select_candidate(const std::vector<Token>& candidates,
                                    const std::vector<double>& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (scores[i] > scores[best] || (scores[i] == scores[best] && candidates[i] < candidates[best])) {
      best = i;
    }
  }
  return best;
}

/// The top_k tokens by base log-probability (ties: lower id first).
inline std::vector<Token> top_k_tokens(const std::vector<double>& logprobs, int k) {
  std::vector<Token> ids(logprobs.size());
  std::iota(ids.begin(), ids.end(), Token{0});
  const auto kk = static_cast<std::ptrdiff_t>(std::min<std::size_t>(static_cast<std::size_t>(k), ids.size()));
  std::partial_sort(ids.begin(), ids.begin() + kk, ids.end(), [&](Token a, Token b) {
    const double la = logprobs[static_cast<std::size_t>(a)];
    const double lb = logprobs[static_cast<std::size_t>(b)];
    return la > lb || (la == lb && a < b);
  });
  ids.resize(static_cast<std::size_t>(kk));
  return ids;
}

/// One ARGS step: score(v) = log pi(v | x, y<t) + lambda * r(v | x, y<t) over
/// the base policy's top_k tokens, argmax with the configured tie-break.
/// Without a reward model (or with lambda = 0) the reward term is 0 and the
/// reward model is not queried.
inline std::pair<Token, StepRecord> args_step(const LanguageModel& policy, const RewardModel* reward,
                                              const UserRef& user, std::string_view prompt,
                                              std::span<const Token> prefix,
                                              const GenerationConfig& config) {
  const TokenSeq ctx = build_context(policy, prompt, prefix);
  if (ctx.size() >= policy.context_limit()) {
    throw LengthError("no room left in the context for another token");
  }
  const auto logprobs = policy.next_token_logprobs(ctx);
  StepRecord rec;
  rec.candidates = top_k_tokens(logprobs, config.top_k);
  const bool use_reward = reward != nullptr && config.lambda != 0.0;
  for (Token v : rec.candidates) {
    const double lp = logprobs[static_cast<std::size_t>(v)];
    const double r = use_reward ? reward->token_reward(user, prompt, prefix, v) : 0.0;
    rec.base_logprobs.push_back(lp);
    rec.token_rewards.push_back(r);
    rec.blended.push_back(lp + config.lambda * r);
  }
  rec.chosen = rec.candidates[select_candidate(rec.candidates, rec.blended)];
  return {rec.chosen, std::move(rec)};
}

inline std::pair<std::string, DecodeTrace> args_decode(const LanguageModel& policy,
                                                       const RewardModel* reward, const UserRef& user,
                                                       std::string_view prompt,
                                                       const GenerationConfig& config) {
  config.validate(policy);
  DecodeTrace trace;
  trace.lambda = config.lambda;
  trace.termination = "max_new_tokens";
  for (int t = 0; t < config.max_new_tokens; ++t) {
    auto [tok, rec] = args_step(policy, reward, user, prompt, trace.tokens, config);
    if (reward != nullptr && config.lambda != 0.0) {
      for (double r : rec.token_rewards) {
        ++trace.reward_count;
        const double delta = r - trace.reward_mean;
        trace.reward_mean += delta / static_cast<double>(trace.reward_count);
        trace.reward_m2 += delta * (r - trace.reward_mean);
      }
    }
    trace.steps.push_back(std::move(rec));
    if (config.is_stop(policy, tok)) {
      trace.termination = "stop";
      break;
    }
    trace.tokens.push_back(tok);
  }
  trace.text = policy.decode(trace.tokens);
  return {trace.text, std::move(trace)};
}

/// Plain greedy decoding over the full vocabulary (zero-shot generation).
inline std::string greedy_decode(const LanguageModel& policy, std::string_view prompt,
                                 int max_new_tokens, const std::set<Token>& stop_tokens = {}) {
  TokenSeq out;
  for (int t = 0; t < max_new_tokens; ++t) {
    const auto lp = policy.next_token_logprobs(build_context(policy, prompt, out));
    const auto best = static_cast<Token>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    const bool stop = stop_tokens.empty() ? best == policy.stop_token() : stop_tokens.count(best) > 0;
    if (stop) break;
    out.push_back(best);
  }
  return policy.decode(out);
}

/// True when every recorded step is consistent with its own candidates,
/// log-probs and rewards.
inline bool verify_trace(const DecodeTrace& trace) {
  for (const auto& s : trace.steps) {
    if (s.candidates.empty()) return false;
    for (std::size_t i = 0; i < s.candidates.size(); ++i) {
      if (s.blended[i] != s.base_logprobs[i] + trace.lambda * s.token_rewards[i]) return false;
    }
    if (s.candidates[select_candidate(s.candidates, s.blended)] != s.chosen) return false;
  }
  return true;
}

/// One JSON object per step, then a summary object.
inline void write_trace_jsonl(std::ostream& out, const DecodeTrace& trace, const json& extra = json::object()) {
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& s = trace.steps[t];
    out << json{{"step", t},
                {"candidates", s.candidates},
                {"base_logprobs", s.base_logprobs},
                {"token_rewards", s.token_rewards},
                {"blended", s.blended},
                {"chosen", s.chosen}}
               .dump()
        << '\n';
  }
  json summary = {{"summary", true},
                  {"text", trace.text},
                  {"tokens", trace.tokens},
                  {"termination", trace.termination},
                  {"steps", trace.steps.size()},
                  {"lambda", trace.lambda},
                  {"reward_mean", trace.reward_mean},
                  {"reward_variance", trace.reward_variance()}};
  summary.update(extra);
  out << summary.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Sequence scorers for policy accuracy
// ---------------------------------------------------------------------------

enum class ScorerType { prior, global_posterior, personalized_posterior };

inline std::string to_string(ScorerType k) {
  switch (k) {
    case ScorerType::prior: return "prior";
    case ScorerType::global_posterior: return "global";
    case ScorerType::personalized_posterior: return "personalized";
  }
  return "?";
}

inline ScorerType parse_scorer(std::string_view s) {
  if (s == "prior") return ScorerType::prior;
  if (s == "global" || s == "global_posterior") return ScorerType::global_posterior;
  if (s == "personalized" || s == "personalized_posterior") return ScorerType::personalized_posterior;
  throw ConfigError("unknown scorer '" + std::string(s) + "'");
}

struct ScorerKind {
  ScorerType kind = ScorerType::prior;
  double lambda = 1.0;
  const RewardModel* reward = nullptr;

  void validate() const {
    if (kind == ScorerType::prior && reward) throw ConfigError("prior scorer takes no reward model");
    if (kind != ScorerType::prior && !reward) throw ConfigError(to_string(kind) + " scorer needs a reward model");
    if (kind == ScorerType::global_posterior && reward->personalized()) {
      throw ConfigError("global scorer needs a user-independent reward model");
    }
  }
};

/// prior:     (1/|y|) sum_t log pi(y_t | x, y<t)
/// posterior: sum_t [log pi(y_t | x, y<t) + lambda * r(y_t | x, y<t)]
inline double score_sequence(const ScorerKind& scorer, const LanguageModel& policy, const UserRef& user,
                             std::string_view prompt, std::string_view response) {
  scorer.validate();
  if (scorer.kind == ScorerType::personalized_posterior && !user) {
    throw ConfigError("personalized scorer requires a user");
  }
  const TokenSeq y = policy.encode(response);
  if (y.empty()) throw InputError("response must contain at least one token");
  const bool posterior = scorer.kind != ScorerType::prior;
  const bool use_reward = posterior && scorer.lambda != 0.0;
  const UserRef scorer_user = scorer.kind == ScorerType::personalized_posterior ? user : std::nullopt;
  double sum = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const auto prefix = std::span<const Token>(y).first(t);
    const double lp = policy.next_token_logprobs(build_context(policy, prompt, prefix))[static_cast<std::size_t>(y[t])];
    sum += lp;
    if (use_reward) sum += scorer.lambda * scorer.reward->token_reward(scorer_user, prompt, prefix, y[t]);
  }
  if (!posterior) return sum / static_cast<double>(y.size());
  if (!std::isfinite(sum)) throw NumericError("non-finite sequence score");
  return sum;
}

// ---------------------------------------------------------------------------
// In-context prompting
// ---------------------------------------------------------------------------

struct Demo {
  std::string prompt;
  std::string completion;
};

/// Demo blocks followed by the query block. With the default template a
/// zero-demo prompt is the query itself, i.e. the zero-shot prompt.
struct PromptTemplate {
  std::string version = "icl-v1";
  std::string instruction;
  std::string demo_format = "{prompt}{completion}\n\n";
  std::string query_format = "{query}";

  json to_json() const {
    return json{{"version", version}, {"instruction", instruction}, {"demo_format", demo_format},
                {"query_format", query_format}};
  }
  static PromptTemplate from_json(const json& j) {
    PromptTemplate t;
    t.version = j.value("version", t.version);
    t.instruction = j.value("instruction", t.instruction);
    t.demo_format = j.value("demo_format", t.demo_format);
    t.query_format = j.value("query_format", t.query_format);
    return t;
  }
};

namespace detail {

inline std::string replace_all(std::string s, std::string_view key, std::string_view value) {
  std::size_t pos = 0;
  while ((pos = s.find(key, pos)) != std::string::npos) {
    s.replace(pos, key.size(), value);
    pos += value.size();
  }
  return s;
}

inline std::string render(const PromptTemplate& t, std::span<const Demo> demos, std::string_view query) {
  std::string out = t.instruction;
  for (const auto& d : demos) {
    // Substitute completion first so a "{completion}" inside a prompt is kept literally.
    std::string block = replace_all(t.demo_format, "{completion}", d.completion);
    out += replace_all(std::move(block), "{prompt}", d.prompt);
  }
  out += replace_all(t.query_format, "{query}", query);
  return out;
}

}  // namespace detail

inline std::string zero_shot_prompt(std::string_view query, const PromptTemplate& tmpl = {}) {
  return detail::render(tmpl, {}, query);
}

/// Renders demos (in order) then the query. When a policy is given, the
/// oldest demos are dropped until the prompt plus `reserve_tokens` fits its
/// context.
inline std::string build_icl_prompt(const std::vector<Demo>& demos, std::string_view query,
                                    const PromptTemplate& tmpl = {}, const LanguageModel* policy = nullptr,
                                    std::size_t reserve_tokens = 0) {
  if (!policy) return detail::render(tmpl, demos, query);
  const std::size_t limit = policy->context_limit();
  auto fits = [&](const std::string& p) { return policy->encode(p).size() + reserve_tokens <= limit; };
  const std::string bare = detail::render(tmpl, {}, query);
  if (!fits(bare)) throw LengthError("query alone exceeds the context limit");
  std::span<const Demo> kept(demos);
  while (!kept.empty()) {
    std::string p = detail::render(tmpl, kept, query);
    if (fits(p)) return p;
    kept = kept.subspan(1);
  }
  return bare;
}

/// The n history items whose prompts are most cosine-similar to the query,
/// most similar first; ties keep history order.
inline std::vector<Demo> icl_rag_retrieve(const std::vector<Demo>& history, std::string_view query,
                                          const Embedder& embedder, int n) {
  if (history.empty()) throw RetrievalError("retrieval history is empty");
  if (n < 1) throw InputError("n must be >= 1");
  const Vector q = embedder.embed(query);
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(history.size());
  for (std::size_t i = 0; i < history.size(); ++i) scored.emplace_back(cosine(q, embedder.embed(history[i].prompt)), i);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<Demo> out;
  for (std::size_t i = 0; i < std::min(scored.size(), static_cast<std::size_t>(n)); ++i) {
    out.push_back(history[scored[i].second]);
  }
  return out;
}

/// RM backbone and guided policy must share a tokenizer family.
inline void validate_pairing(const LanguageModel& rm_backbone, const LanguageModel& policy) {
  if (rm_backbone.tokenizer_family() != policy.tokenizer_family()) {
    throw ConfigError("reward-model backbone tokenizer '" + rm_backbone.tokenizer_family() +
                      "' differs from policy tokenizer '" + policy.tokenizer_family() + "'");
  }
}

}  // namespace palign
