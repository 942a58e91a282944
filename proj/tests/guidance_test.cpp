#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "palign/guidance.hpp"

using namespace palign;

namespace {

// Fixed next-token distribution over a 5-token vocabulary; token 0 stops.
class FixedLM final : public LanguageModel {
 public:
  std::vector<double> lp = {std::log(0.05), std::log(0.4), std::log(0.3), std::log(0.15), std::log(0.1)};
  std::string family = "fixed";
  std::size_t limit = 100;
  std::string model_id() const override { return "fixed5"; }
  std::string tokenizer_family() const override { return family; }
  int vocab_size() const override { return 5; }
  std::size_t context_limit() const override { return limit; }
  int hidden_dim() const override { return 2; }
  Token stop_token() const override { return 0; }
  TokenSeq encode(std::string_view s) const override {
    TokenSeq t;
    for (char c : s) t.push_back(static_cast<Token>((c - 'a') % 4 + 1));
    return t;
  }
  std::string decode(std::span<const Token> t) const override {
    std::string s;
    for (Token x : t) s.push_back(static_cast<char>('a' + x - 1));
    return s;
  }
  std::vector<double> next_token_logprobs(std::span<const Token>) const override { return lp; }
  std::vector<Vector> hidden_states(std::span<const Token> t) const override {
    return std::vector<Vector>(t.size(), Vector::Zero(2));
  }
};

// Rewards token v with bonus[v]; counts queries.
class TableReward final : public RewardModel {
 public:
  std::vector<double> bonus = {0, 0, 0, 0, 0};
  bool per_user = false;
  mutable int queries = 0;
  std::string name() const override { return "table"; }
  bool personalized() const override { return per_user; }
  bool has_user(const std::string&) const override { return true; }
  double sequence_reward(const UserRef&, std::string_view, std::string_view r) const override {
    return static_cast<double>(r.size());
  }
  double token_reward(const UserRef& u, std::string_view, std::span<const Token> prefix, Token c) const override {
    ++queries;
    return bonus[static_cast<std::size_t>(c)] + (u ? 0.5 : 0.0) + 0.01 * static_cast<double>(prefix.size());
  }
};

}  // namespace

TEST(TopK, OrdersByLogprobThenId) {
  EXPECT_EQ(top_k_tokens({-1.0, -0.5, -0.5, -2.0}, 3), (std::vector<Token>{1, 2, 0}));
  EXPECT_EQ(top_k_tokens({-1.0, -0.5}, 5), (std::vector<Token>{1, 0}));
}

TEST(SelectCandidate, TiesGoToLowestId) {
  EXPECT_EQ(select_candidate({3, 1, 2}, {0.5, 0.5, 0.1}), 1u);
  EXPECT_EQ(select_candidate({3, 1, 2}, {0.5, 0.4, 0.6}), 2u);
}

TEST(GenerationConfig, ValidatesAndRoundTrips) {
  FixedLM lm;
  GenerationConfig c;
  c.top_k = 6;
  EXPECT_THROW(c.validate(lm), ConfigError);
  c.top_k = 2;
  c.lambda = -1;
  EXPECT_THROW(c.validate(lm), ConfigError);
  c.lambda = 2.5;
  c.max_new_tokens = 0;
  EXPECT_THROW(c.validate(lm), ConfigError);
  c.max_new_tokens = 7;
  c.stop_tokens = {0, 3};
  const auto back = GenerationConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  auto j = c.to_json();
  j["tie_break"] = "random";
  EXPECT_THROW(GenerationConfig::from_json(j), ConfigError);
}

TEST(ArgsDecode, RewardShiftsChoiceWithinTopK) {
  FixedLM lm;
  TableReward rm;
  rm.bonus = {0, 0, 0.5, 5.0, 0};
  GenerationConfig c;
  c.top_k = 2;
  c.max_new_tokens = 3;
  c.lambda = 1.0;
  const auto [text, trace] = args_decode(lm, &rm, std::nullopt, "ab", c);
  // Token 3 has the largest bonus but lies outside the top 2.
  EXPECT_EQ(trace.tokens, (TokenSeq{2, 2, 2}));
  EXPECT_EQ(trace.termination, "max_new_tokens");
  EXPECT_TRUE(verify_trace(trace));
  c.top_k = 5;
  const auto [text5, trace5] = args_decode(lm, &rm, std::nullopt, "ab", c);
  EXPECT_EQ(trace5.tokens, (TokenSeq{3, 3, 3}));
  EXPECT_EQ(text5, "ccc");
}

TEST(ArgsDecode, ZeroLambdaSkipsRewardModel) {
  FixedLM lm;
  TableReward rm;
  rm.bonus = {0, 0, 9, 9, 9};
  GenerationConfig c;
  c.lambda = 0;
  c.top_k = 3;
  c.max_new_tokens = 4;
  const auto [text, trace] = args_decode(lm, &rm, std::nullopt, "a", c);
  EXPECT_EQ(rm.queries, 0);
  EXPECT_EQ(text, greedy_decode(lm, "a", 4));
  EXPECT_EQ(trace.reward_count, 0u);
}

TEST(ArgsDecode, StopsOnStopTokenAndTracksRewardStatistics) {
  FixedLM lm;
  TableReward rm;
  rm.bonus = {3.0, 0, 0.1, 0, 0};
  GenerationConfig c;
  c.top_k = 5;
  c.max_new_tokens = 10;
  const auto [text, trace] = args_decode(lm, &rm, std::nullopt, "a", c);
  EXPECT_TRUE(text.empty());
  EXPECT_EQ(trace.termination, "stop");
  ASSERT_EQ(trace.steps.size(), 1u);
  const auto& r = trace.steps[0].token_rewards;
  double mean = 0;
  for (double x : r) mean += x / static_cast<double>(r.size());
  double var = 0;
  for (double x : r) var += (x - mean) * (x - mean) / static_cast<double>(r.size() - 1);
  EXPECT_NEAR(trace.reward_mean, mean, 1e-12);
  EXPECT_NEAR(trace.reward_variance(), var, 1e-12);

  c.stop_tokens = {1};
  rm.bonus = {0, 0, 0, 0, 0};
  const auto [t2, tr2] = args_decode(lm, &rm, std::nullopt, "a", c);
  EXPECT_EQ(t2, "");
  EXPECT_EQ(tr2.steps.back().chosen, 1);
  c.stop_tokens = {4};
  EXPECT_EQ(args_decode(lm, &rm, std::nullopt, "a", c).second.termination, "max_new_tokens");
}

TEST(ArgsDecode, ContextLimitIsEnforced) {
  FixedLM lm;
  lm.limit = 3;
  GenerationConfig c;
  c.top_k = 3;
  c.max_new_tokens = 5;
  EXPECT_THROW(args_decode(lm, nullptr, std::nullopt, "abc", c), LengthError);
}

TEST(ArgsDecode, TamperedTraceFailsVerification) {
  FixedLM lm;
  TableReward rm;
  GenerationConfig c;
  c.top_k = 3;
  c.max_new_tokens = 2;
  auto [text, trace] = args_decode(lm, &rm, std::nullopt, "a", c);
  EXPECT_TRUE(verify_trace(trace));
  trace.steps[0].chosen = trace.steps[0].candidates.back();
  EXPECT_FALSE(verify_trace(trace));
}

TEST(Trace, JsonlHasOneLinePerStepAndSummary) {
  FixedLM lm;
  GenerationConfig c;
  c.top_k = 3;
  c.max_new_tokens = 3;
  const auto [text, trace] = args_decode(lm, nullptr, std::nullopt, "a", c);
  std::ostringstream out;
  write_trace_jsonl(out, trace, {{"user", "u1"}});
  std::istringstream in(out.str());
  std::string line;
  std::vector<json> lines;
  while (std::getline(in, line)) lines.push_back(json::parse(line));
  ASSERT_EQ(lines.size(), trace.steps.size() + 1);
  EXPECT_EQ(lines.back().at("user"), "u1");
  EXPECT_EQ(lines.back().at("text"), text);
  EXPECT_EQ(lines.front().at("candidates").size(), 3u);
}

TEST(ScoreSequence, PriorIsMeanAndPosteriorIsBlendedSum) {
  FixedLM lm;
  TableReward rm;
  rm.bonus = {0, 1, 2, 3, 4};
  const std::string y = "abc";  // tokens 1 2 3
  const double lp = lm.lp[1] + lm.lp[2] + lm.lp[3];
  EXPECT_NEAR(score_sequence({ScorerType::prior, 1.0, nullptr}, lm, std::nullopt, "q", y), lp / 3, 1e-15);
  const double rewards = 1 + 2 + 3 + 0.01 * (0 + 1 + 2);
  EXPECT_NEAR(score_sequence({ScorerType::global_posterior, 2.0, &rm}, lm, std::nullopt, "q", y), lp + 2 * rewards, 1e-12);
  EXPECT_THROW(score_sequence({ScorerType::prior, 1.0, nullptr}, lm, std::nullopt, "q", ""), InputError);
}

TEST(ScoreSequence, ScorerKindsAreChecked) {
  FixedLM lm;
  TableReward rm;
  EXPECT_THROW(score_sequence({ScorerType::prior, 1.0, &rm}, lm, std::nullopt, "q", "a"), ConfigError);
  EXPECT_THROW(score_sequence({ScorerType::global_posterior, 1.0, nullptr}, lm, std::nullopt, "q", "a"), ConfigError);
  rm.per_user = true;
  EXPECT_THROW(score_sequence({ScorerType::global_posterior, 1.0, &rm}, lm, std::nullopt, "q", "a"), ConfigError);
  EXPECT_THROW(score_sequence({ScorerType::personalized_posterior, 1.0, &rm}, lm, std::nullopt, "q", "a"), ConfigError);
  const double with_user = score_sequence({ScorerType::personalized_posterior, 1.0, &rm}, lm, std::string("u"), "q", "a");
  EXPECT_NEAR(with_user, lm.lp[1] + 0.5, 1e-12);
  EXPECT_EQ(parse_scorer("prior"), ScorerType::prior);
  EXPECT_EQ(parse_scorer("personalized"), ScorerType::personalized_posterior);
  EXPECT_THROW(parse_scorer("best"), ConfigError);
}

TEST(Icl, DefaultTemplateRendersDemosThenQuery) {
  const std::vector<Demo> demos = {{"P1 ", "C1"}, {"P2 ", "C2"}};
  EXPECT_EQ(build_icl_prompt(demos, "Q "), "P1 C1\n\nP2 C2\n\nQ ");
  EXPECT_EQ(zero_shot_prompt("Q "), "Q ");
  EXPECT_EQ(build_icl_prompt({}, "Q "), "Q ");
  PromptTemplate t;
  t.instruction = "Match the style.\n";
  t.demo_format = "In: {prompt}\nOut: {completion}\n";
  t.query_format = "In: {query}\nOut:";
  EXPECT_EQ(build_icl_prompt(demos, "Q", t), "Match the style.\nIn: P1 \nOut: C1\nIn: P2 \nOut: C2\nIn: Q\nOut:");
  EXPECT_EQ(PromptTemplate::from_json(t.to_json()).to_json(), t.to_json());
}

TEST(Icl, DropsOldestDemosToFitContext) {
  FixedLM lm;
  lm.limit = 20;
  const std::vector<Demo> demos = {{"aaaa", "aaaa"}, {"bb", "bb"}};
  const std::string p = build_icl_prompt(demos, "query", {}, &lm, 4);
  EXPECT_EQ(p, "bbbb\n\nquery");
  EXPECT_THROW(build_icl_prompt(demos, std::string(30, 'a'), {}, &lm), LengthError);
}

TEST(Icl, RetrievalRanksBySimilarity) {
  const HashingEmbedder emb(256);
  const std::vector<Demo> history = {{"deep learning for vision", "A"},
                                     {"cooking pasta at home", "B"},
                                     {"deep learning for speech", "C"},
                                     {"deep learning for vision", "D"}};
  const auto r = icl_rag_retrieve(history, "deep learning for vision", emb, 3);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].completion, "A");
  EXPECT_EQ(r[1].completion, "D");
  EXPECT_EQ(r[2].completion, "C");
  EXPECT_EQ(icl_rag_retrieve(history, "x", emb, 10).size(), 4u);
  EXPECT_THROW(icl_rag_retrieve({}, "x", emb, 1), RetrievalError);
  EXPECT_THROW(icl_rag_retrieve(history, "x", emb, 0), InputError);
}

TEST(Pairing, TokenizerFamiliesMustMatch) {
  FixedLM a, b;
  EXPECT_NO_THROW(validate_pairing(a, b));
  b.family = "other";
  EXPECT_THROW(validate_pairing(a, b), ConfigError);
}
