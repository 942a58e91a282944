#include <gtest/gtest.h>

#include <cmath>

#include "palign/metrics.hpp"

using namespace palign;

namespace {

// Sequence reward = number of 'x' characters; token reward = 1 for 'x'.
class CountX final : public RewardModel {
 public:
  bool per_user = false;
  std::set<std::string> adapted;
  std::string name() const override { return "count-x"; }
  bool personalized() const override { return per_user; }
  bool has_user(const std::string& u) const override { return !per_user || adapted.count(u); }
  double sequence_reward(const UserRef&, std::string_view, std::string_view r) const override {
    return static_cast<double>(std::count(r.begin(), r.end(), 'x'));
  }
  double token_reward(const UserRef&, std::string_view, std::span<const Token>, Token c) const override {
    return c == 'x' ? 1.0 : 0.0;
  }
};

// Uniform policy over 128 tokens.
class UniformLM final : public LanguageModel {
 public:
  std::string model_id() const override { return "uniform"; }
  std::string tokenizer_family() const override { return "ascii-char"; }
  int vocab_size() const override { return 128; }
  std::size_t context_limit() const override { return 1000; }
  int hidden_dim() const override { return 1; }
  Token stop_token() const override { return 0; }
  TokenSeq encode(std::string_view t) const override { return CharTokenizer::encode(t); }
  std::string decode(std::span<const Token> t) const override { return CharTokenizer::decode(t); }
  std::vector<double> next_token_logprobs(std::span<const Token>) const override {
    return std::vector<double>(128, -std::log(128.0));
  }
  std::vector<Vector> hidden_states(std::span<const Token> t) const override {
    return std::vector<Vector>(t.size(), Vector::Zero(1));
  }
};

}  // namespace

TEST(PairwiseAccuracy, TiesEarnHalfCredit) {
  const auto r = pairwise_accuracy({{"a", 2, 1}, {"a", 1, 1}, {"b", 0, 1}, {"b", 3, 2}});
  EXPECT_DOUBLE_EQ(r.value, 2.5 / 4);
  EXPECT_EQ(r.tie_count, 1u);
  EXPECT_DOUBLE_EQ(r.per_user.at("a"), 0.75);
  EXPECT_DOUBLE_EQ(r.per_user.at("b"), 0.5);
  EXPECT_EQ(r.per_user_pairs.at("a"), 2u);
  EXPECT_EQ(pairwise_accuracy({}).value, 0.0);
}

TEST(RmAccuracy, UsesSequenceRewards) {
  CountX rm;
  const std::vector<PreferenceRecord> recs = {make_record("u", "p", "xx", "x"), make_record("u", "p", "a", "xa"),
                                              make_record("v", "p", "xb", "xa")};
  const auto r = rm_accuracy(rm, recs);
  EXPECT_DOUBLE_EQ(r.value, 1.5 / 3);
  rm.per_user = true;
  rm.adapted = {"u"};
  EXPECT_THROW(rm_accuracy(rm, recs), AdaptationRequiredError);
}

TEST(PolicyAccuracy, PriorPrefersShorterUnderUniformPolicy) {
  UniformLM lm;
  CountX rm;
  const std::vector<PreferenceRecord> recs = {make_record("u", "p", "xxx", "ab"), make_record("u", "p", "ab", "xxx")};
  const ScorerKind prior{ScorerType::prior, 1.0, nullptr};
  // Equal per-token means: both pairs tie.
  EXPECT_DOUBLE_EQ(policy_accuracy(prior, recs, lm).value, 0.5);
  const ScorerKind post{ScorerType::global_posterior, 10.0, &rm};
  const auto r = policy_accuracy(post, recs, lm);
  EXPECT_DOUBLE_EQ(r.value, 0.5);
  EXPECT_EQ(r.tie_count, 0u);
  EXPECT_DOUBLE_EQ(r.per_user.at("u"), 0.5);
}

TEST(WinRate, CountsGuidedWinsAndTies) {
  CountX rm;
  const auto r = win_rate(rm, {{"u", "p", "xx", "x"}, {"u", "p", "x", "x"}, {"u", "p", "a", "x"}});
  EXPECT_DOUBLE_EQ(r.value, 0.5);
  EXPECT_EQ(r.ties, 1u);
  EXPECT_EQ(r.n, 3u);
  EXPECT_THROW(win_rate(rm, {{"u", "p", "", "x"}}), InputError);
}

TEST(Rouge, UnigramF1) {
  EXPECT_DOUBLE_EQ(rouge_1("the cat", "the cat sat").f1, 0.8);
  const auto s = rouge_1("The the cat!", "the dog");
  EXPECT_DOUBLE_EQ(s.precision, 1.0 / 3);
  EXPECT_DOUBLE_EQ(s.recall, 0.5);
  EXPECT_TRUE(rouge_1("", "abc").empty_input);
  EXPECT_EQ(rouge_1("...", "abc").f1, 0.0);
}

TEST(Rouge, LcsBased) {
  const auto s = rouge_L("a b c d", "a c b d");
  EXPECT_DOUBLE_EQ(s.precision, 0.75);
  EXPECT_DOUBLE_EQ(s.recall, 0.75);
  EXPECT_DOUBLE_EQ(rouge_L("x y", "p q").f1, 0.0);
  EXPECT_DOUBLE_EQ(rouge_L("Deep, Learning", "deep learning").f1, 1.0);
}

TEST(Semantic, IdenticalTextsScoreOne) {
  const HashingEmbedder emb(64);
  EXPECT_NEAR(semantic_similarity("neural ranking", "Neural ranking!", emb).f1, 1.0, 1e-12);
  const auto s = semantic_similarity("neural ranking", "neural", emb);
  EXPECT_NEAR(s.recall, 1.0, 1e-12);
  EXPECT_LT(s.precision, 1.0);
  EXPECT_GE(s.precision, 0.5);
  EXPECT_EQ(s.backend, "hashing-bow-64");
  EXPECT_TRUE(semantic_similarity("", "x", emb).empty_input);
}

TEST(Similarity, DispatchAndParse) {
  const HashingEmbedder emb(32);
  EXPECT_EQ(similarity_f1(SimilarityKind::rouge1, "a b", "a b", nullptr), 1.0);
  EXPECT_THROW(similarity_f1(SimilarityKind::semantic, "a", "a", nullptr), ConfigError);
  EXPECT_EQ(parse_similarity("rougeL"), SimilarityKind::rougeL);
  EXPECT_THROW(parse_similarity("bleu"), ConfigError);
}

TEST(Alignment, MacroAndMicroAverages) {
  const std::vector<GroundTruthRecord> gt = {{"u", "p1", "a b"}, {"u", "p2", "c d"}, {"v", "p3", "e f"}};
  const std::map<GenerationKey, std::string> gens = {{{"u", "p1"}, "a b"}, {{"u", "p2"}, "x y"}, {{"v", "p3"}, "e f"}};
  const auto r = behavioral_alignment(gens, gt, SimilarityKind::rouge1);
  EXPECT_DOUBLE_EQ(r.per_user.at("u"), 0.5);
  EXPECT_DOUBLE_EQ(r.per_user.at("v"), 1.0);
  EXPECT_DOUBLE_EQ(r.macro, 0.75);
  EXPECT_DOUBLE_EQ(r.micro, 2.0 / 3);
  auto missing = gens;
  missing.erase({"v", "p3"});
  EXPECT_THROW(behavioral_alignment(missing, gt, SimilarityKind::rouge1), CoverageError);
}

TEST(Correlations, PearsonSpearmanKendall) {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> y = {2, 4, 6, 8, 10};
  const auto c = rank_correlations(x, y);
  EXPECT_NEAR(*c.pearson, 1.0, 1e-15);
  EXPECT_NEAR(*c.spearman, 1.0, 1e-15);
  EXPECT_NEAR(*c.kendall, 1.0, 1e-15);
  const std::vector<double> z = {5, 4, 3, 2, 1};
  EXPECT_NEAR(*rank_correlations(x, z).kendall, -1.0, 1e-15);
}

TEST(Correlations, TiesUseMidRanksAndTauB) {
  const std::vector<double> v = {10, 20, 20, 30};
  EXPECT_EQ(mid_ranks(v), (std::vector<double>{1, 2.5, 2.5, 4}));
  const std::vector<double> x = {1, 2, 2, 3};
  const std::vector<double> y = {1, 3, 2, 4};
  // Concordant 5, discordant 0, ties in x only: 1 -> 5 / sqrt(5 * 6).
  EXPECT_NEAR(*kendall_tau_b(x, y), 5.0 / std::sqrt(30.0), 1e-15);
}

TEST(Correlations, UndefinedForConstantInput) {
  const std::vector<double> x = {1, 1, 1};
  const std::vector<double> y = {1, 2, 3};
  const auto c = rank_correlations(x, y);
  EXPECT_FALSE(c.defined());
  EXPECT_FALSE(c.pearson.has_value());
  EXPECT_FALSE(c.kendall.has_value());
  EXPECT_EQ(c.to_json().at("kendall_variant"), "tau-b");
  EXPECT_THROW(rank_correlations(std::vector<double>{1}, std::vector<double>{1}), InputError);
  EXPECT_THROW(rank_correlations(x, std::vector<double>{1, 2}), InputError);
  EXPECT_THROW(rank_correlations(std::vector<double>{1, NAN}, std::vector<double>{1, 2}), InputError);
}
