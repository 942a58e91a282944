#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "palign/common.hpp"
#include "palign/models.hpp"

using namespace palign;

TEST(Fnv1a, MatchesPublishedVectors) {
  EXPECT_EQ(Fnv1a{}.digest(), 0xcbf29ce484222325ULL);
  EXPECT_EQ(Fnv1a{}.update("a").digest(), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hash_hex("foobar"), "85944171f73967e8");
}

TEST(Fnv1a, FieldsAreLengthPrefixed) {
  EXPECT_NE(Fnv1a{}.field("ab").field("c").hex(), Fnv1a{}.field("a").field("bc").hex());
  EXPECT_EQ(Fnv1a{}.update("ab").update("c").hex(), Fnv1a{}.update("abc").hex());
}

TEST(Rng, SameSeedAndStreamRepeat) {
  Rng a(7, "x"), b(7, "x"), c(7, "y");
  bool differs = false;
  for (int i = 0; i < 50; ++i) {
    const auto va = a.next();
    EXPECT_EQ(va, b.next());
    differs = differs || va != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, IndexStaysInRange) {
  Rng r(1);
  std::set<std::size_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = r.index(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_THROW(r.index(0), InputError);
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng r(3, "shuffle");
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  r.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(Rng, NormalHasRoughlyUnitMoments) {
  Rng r(11, "normal");
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.05);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Text, NormalizeWordsLowercasesAndStripsPunctuation) {
  EXPECT_EQ(normalize_words("The Cat, sat!  (quickly)"),
            (std::vector<std::string>{"the", "cat", "sat", "quickly"}));
  EXPECT_TRUE(normalize_words(" ... ").empty());
}

TEST(Vectors, CosineAndNormalization) {
  Vector a(3), b(3);
  a << 1, 0, 0;
  b << 2, 0, 0;
  EXPECT_DOUBLE_EQ(cosine(a, b), 1.0);
  b << 0, 3, 0;
  EXPECT_DOUBLE_EQ(cosine(a, b), 0.0);
  EXPECT_DOUBLE_EQ(cosine(a, Vector::Zero(3)), 0.0);
  EXPECT_NEAR(l2_normalized(Vector::Constant(4, 2.0)).norm(), 1.0, 1e-15);
}

TEST(CharTokenizer, RoundTripsAscii) {
  const std::string s = "Hello, world! 123";
  EXPECT_EQ(CharTokenizer::decode(CharTokenizer::encode(s)), s);
  const auto t = CharTokenizer::encode("\xc3\xa9");
  EXPECT_EQ(t, (TokenSeq{'?', '?'}));
}

class TinyCharLMTest : public ::testing::Test {
 protected:
  std::vector<std::string> texts = {"the cat sat on the mat", "a dog sat on a log", "the cat ran"};
  TinyCharLM lm{TinyCharLMConfig{}, texts};
};

TEST_F(TinyCharLMTest, DistributionsAreNormalized) {
  for (const std::string ctx : {"", "the c", "zzz", "a dog sat on a l"}) {
    const auto lp = lm.next_token_logprobs(lm.encode(ctx));
    ASSERT_EQ(lp.size(), 128u);
    double total = 0;
    for (double x : lp) total += std::exp(x);
    EXPECT_NEAR(total, 1.0, 1e-12) << ctx;
  }
}

TEST_F(TinyCharLMTest, LearnsFittedContinuations) {
  const auto lp = lm.next_token_logprobs(lm.encode("the ca"));
  const auto best = std::max_element(lp.begin(), lp.end()) - lp.begin();
  EXPECT_EQ(best, 't');
}

TEST_F(TinyCharLMTest, CopyComponentRepeatsContext) {
  TinyCharLMConfig c;
  c.order = 1;
  const TinyCharLM unigram(c, texts);
  const auto lp = unigram.next_token_logprobs(unigram.encode("xqzv xq"));
  EXPECT_EQ(std::max_element(lp.begin(), lp.end()) - lp.begin(), 'z');
}

TEST_F(TinyCharLMTest, DeterministicAndIdentified) {
  const TinyCharLM again(TinyCharLMConfig{}, texts);
  EXPECT_EQ(lm.model_id(), again.model_id());
  EXPECT_EQ(lm.next_token_logprobs(lm.encode("the")), again.next_token_logprobs(again.encode("the")));
  const TinyCharLM other(TinyCharLMConfig{}, std::vector<std::string>{"different"});
  EXPECT_NE(lm.model_id(), other.model_id());
  EXPECT_EQ(lm.tokenizer_family(), "ascii-char");
  EXPECT_GT(lm.parameter_count(), 0u);
}

TEST_F(TinyCharLMTest, HiddenStatesArePrefixConsistent) {
  const auto full = lm.hidden_states(lm.encode("the cat sat"));
  ASSERT_EQ(full.size(), 11u);
  const TinyCharLM fresh(TinyCharLMConfig{}, texts);
  const auto part = fresh.hidden_states(fresh.encode("the cat"));
  for (std::size_t i = 0; i < part.size(); ++i) EXPECT_EQ(part[i], full[i]);
  EXPECT_EQ(full.back().size(), lm.hidden_dim());
}

TEST_F(TinyCharLMTest, RejectsBadConfigAndContexts) {
  TinyCharLMConfig bad;
  bad.order = 0;
  EXPECT_THROW(TinyCharLM(bad, texts), ConfigError);
  bad = {};
  bad.copy_weight = 1.0;
  EXPECT_THROW(TinyCharLM(bad, texts), ConfigError);
  TinyCharLMConfig small;
  small.context_limit = 4;
  const TinyCharLM lm4(small, texts);
  const TokenSeq two = {'a', 'b'};
  EXPECT_THROW(build_context(lm4, "abcd", two), LengthError);
  EXPECT_THROW(check_vocab(lm4, 128), VocabError);
  EXPECT_THROW(check_vocab(lm4, -1), VocabError);
}

TEST(HashingEmbedder, UnitVectorsAndIdentity) {
  const HashingEmbedder e(64);
  EXPECT_EQ(e.embedder_id(), "hashing-bow-64");
  EXPECT_NEAR(e.embed("the cat sat").norm(), 1.0, 1e-12);
  EXPECT_NEAR(cosine(e.embed("The cat"), e.embed("the CAT!")), 1.0, 1e-12);
  const auto toks = e.embed_tokens("cat dog cat");
  ASSERT_EQ(toks.size(), 3u);
  EXPECT_NEAR(cosine(toks[0], toks[2]), 1.0, 1e-12);
  EXPECT_LT(std::abs(cosine(toks[0], toks[1])), 0.6);
  EXPECT_THROW(HashingEmbedder(0), ConfigError);
}
