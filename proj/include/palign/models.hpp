#pragma once

// Backend handles: autoregressive policies (LanguageModel) and text
// embedders (Embedder), plus the tiny deterministic backends used for desk
// runs and tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "palign/common.hpp"

namespace palign {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Text helpers
// ---------------------------------------------------------------------------

/// Lowercases, drops ASCII punctuation and splits on whitespace.
inline std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::ispunct(c)) continue;
    if (std::isspace(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
      continue;
    }
    cur.push_back(static_cast<char>(std::tolower(c)));
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Cosine similarity; 0 when either vector has zero norm.
inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

inline Vector l2_normalized(Vector v) {
  const double n = v.norm();
  if (n > 0.0) v /= n;
  return v;
}

// ---------------------------------------------------------------------------
// LanguageModel
// ---------------------------------------------------------------------------

/// Abstract autoregressive policy. Implementations must be safe for
/// concurrent const calls.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::string model_id() const = 0;
  /// Models sharing a tokenizer family can be paired as RM backbone and
  /// guided policy.
  virtual std::string tokenizer_family() const = 0;
  virtual int vocab_size() const = 0;
  virtual std::size_t context_limit() const = 0;
  virtual int hidden_dim() const = 0;
  virtual Token stop_token() const = 0;

  virtual TokenSeq encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const Token> tokens) const = 0;

  /// log pi(. | context); length vocab_size().
  virtual std::vector<double> next_token_logprobs(
      std::span<const Token> context) const = 0;

  /// Final-layer hidden state at every position of `tokens`.
  virtual std::vector<Vector> hidden_states(
      std::span<const Token> tokens) const = 0;
};

/// encode(prompt) followed by `prefix`, checked against the context limit.
inline TokenSeq build_context(const LanguageModel& lm, std::string_view prompt,
                              std::span<const Token> prefix) {
  TokenSeq ctx = lm.encode(prompt);
  ctx.insert(ctx.end(), prefix.begin(), prefix.end());
  if (ctx.size() > lm.context_limit()) {
    throw LengthError("context of " + std::to_string(ctx.size()) +
                      " tokens exceeds limit " +
                      std::to_string(lm.context_limit()) + " of " +
                      lm.model_id());
  }
  return ctx;
}

inline void check_vocab(const LanguageModel& lm, Token t) {
  if (t < 0 || t >= lm.vocab_size()) {
    throw VocabError("token " + std::to_string(t) + " outside vocabulary of " +
                     std::to_string(lm.vocab_size()));
  }
}

// ---------------------------------------------------------------------------
// Byte-level ASCII tokenizer: id 0 is end-of-sequence, ids 1..127 are the
// ASCII code points. Non-ASCII bytes map to '?'.
// ---------------------------------------------------------------------------

struct CharTokenizer {
  static constexpr int kVocab = 128;
  static constexpr Token kEos = 0;

  static TokenSeq encode(std::string_view text) {
    TokenSeq out;
    out.reserve(text.size());
    for (char raw : text) {
      const auto c = static_cast<unsigned char>(raw);
      out.push_back((c == 0 || c >= 128) ? Token{'?'} : static_cast<Token>(c));
    }
    return out;
  }
  static std::string decode(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
      if (t > 0 && t < kVocab) out.push_back(static_cast<char>(t));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// TinyCharLM: character-level policy for desk runs.
//
// Next-token distribution: Witten-Bell interpolated character n-gram fitted
// on a text collection (each text terminated by EOS), backed off to uniform,
// so every distribution is exactly normalized. A copy component mixes in
// the next characters observed after earlier occurrences of the longest
// matching context suffix (up to copy_max characters), which lets the
// policy reuse words from the prompt.
// Hidden states: a seeded random recurrent encoder
//   h_t = tanh(E[x_t] + A h_{t-1}),  spectral scale of A < 1.
// ---------------------------------------------------------------------------

struct TinyCharLMConfig {
  int order = 4;
  int hidden_dim = 64;
  std::size_t context_limit = 1024;
  std::uint64_t seed = 0;
  std::string scale = "tiny";
  double copy_weight = 0.5;
  int copy_max = 12;
};

class TinyCharLM final : public LanguageModel {
 public:
  TinyCharLM(TinyCharLMConfig cfg, std::span<const std::string> fit_texts)
      : cfg_(std::move(cfg)) {
    if (cfg_.order < 1) throw ConfigError("TinyCharLM order must be >= 1");
    if (cfg_.hidden_dim < 1) throw ConfigError("TinyCharLM hidden_dim must be >= 1");
    if (!(cfg_.copy_weight >= 0.0 && cfg_.copy_weight < 1.0)) throw ConfigError("copy_weight must lie in [0, 1)");
    if (cfg_.copy_max < 1) throw ConfigError("copy_max must be >= 1");
    Fnv1a fit_hash;
    for (const auto& t : fit_texts) {
      fit_hash.field(t);
      fit(t);
    }
    const int d = cfg_.hidden_dim;
    Rng rng(cfg_.seed, "tinychar-encoder");
    embed_ = Matrix(CharTokenizer::kVocab, d);
    for (Eigen::Index i = 0; i < embed_.size(); ++i) embed_.data()[i] = rng.normal();
    recur_ = Matrix(d, d);
    const double scale = 0.9 / std::sqrt(static_cast<double>(d));
    for (Eigen::Index i = 0; i < recur_.size(); ++i) recur_.data()[i] = scale * rng.normal();
    id_ = "tinychar-" + cfg_.scale + "-o" + std::to_string(cfg_.order) + "-h" +
          std::to_string(d) + "-s" + std::to_string(cfg_.seed) + "-c" +
          std::to_string(static_cast<int>(std::lround(cfg_.copy_weight * 100))) + "x" + std::to_string(cfg_.copy_max) + "-" +
          fit_hash.hex().substr(0, 8);
  }

  std::string model_id() const override { return id_; }
  std::string tokenizer_family() const override { return "ascii-char"; }
  int vocab_size() const override { return CharTokenizer::kVocab; }
  std::size_t context_limit() const override { return cfg_.context_limit; }
  int hidden_dim() const override { return cfg_.hidden_dim; }
  Token stop_token() const override { return CharTokenizer::kEos; }
  TokenSeq encode(std::string_view text) const override { return CharTokenizer::encode(text); }
  std::string decode(std::span<const Token> t) const override { return CharTokenizer::decode(t); }

  std::size_t parameter_count() const {
    std::size_t n = static_cast<std::size_t>(embed_.size() + recur_.size());
    for (const auto& [ctx, c] : counts_) n += c.next.size();
    return n;
  }

  std::vector<double> next_token_logprobs(std::span<const Token> context) const override {
    const int V = CharTokenizer::kVocab;
    std::vector<double> p(static_cast<std::size_t>(V), 1.0 / V);
    const std::size_t max_ctx = static_cast<std::size_t>(cfg_.order - 1);
    const std::size_t avail = std::min(max_ctx, context.size());
    // Interpolate from the empty context upward.
    for (std::size_t len = 0; len <= avail; ++len) {
      const auto it = counts_.find(key(context.subspan(context.size() - len)));
      if (it == counts_.end()) break;
      const ContextCounts& c = it->second;
      const double types = static_cast<double>(c.next.size());
      const double denom = c.total + types;
      for (auto& x : p) x *= types / denom;
      for (const auto& [tok, cnt] : c.next) p[static_cast<std::size_t>(tok)] += cnt / denom;
    }
    const auto copy = copy_counts(context);
    if (!copy.empty() && cfg_.copy_weight > 0.0) {
      double total = 0.0;
      for (const auto& [_, c] : copy) total += c;
      for (auto& x : p) x *= 1.0 - cfg_.copy_weight;
      for (const auto& [tok, c] : copy) p[static_cast<std::size_t>(tok)] += cfg_.copy_weight * c / total;
    }
    for (auto& x : p) x = std::log(x);
    return p;
  }

  std::vector<Vector> hidden_states(std::span<const Token> tokens) const override {
    std::vector<Vector> states;
    std::size_t start = 0;
    {
      std::lock_guard lock(cache_mu_);
      std::size_t best_len = 0;
      auto best = cache_.end();
      for (auto it = cache_.begin(); it != cache_.end(); ++it) {
        const auto& cached = it->first;
        if (cached.size() > tokens.size() || cached.size() <= best_len) continue;
        if (std::equal(cached.begin(), cached.end(), tokens.begin())) {
          best_len = cached.size();
          best = it;
        }
      }
      if (best != cache_.end()) {
        states.assign(best->second.begin(), best->second.end());
        start = best_len;
        cache_.splice(cache_.begin(), cache_, best);
      }
    }
    states.reserve(tokens.size());
    Vector h = states.empty() ? Vector::Zero(cfg_.hidden_dim) : states.back();
    for (std::size_t i = start; i < tokens.size(); ++i) {
      const Token t = tokens[i];
      check_vocab(*this, t);
      h = (embed_.row(t).transpose() + recur_ * h).array().tanh().matrix();
      states.push_back(h);
    }
    if (!tokens.empty() && start < tokens.size()) {
      std::lock_guard lock(cache_mu_);
      cache_.emplace_front(TokenSeq(tokens.begin(), tokens.end()), states);
      if (cache_.size() > kCacheEntries) cache_.pop_back();
    }
    return states;
  }

 private:
  struct ContextCounts {
    double total = 0.0;
    std::map<Token, double> next;
  };
  static constexpr std::size_t kCacheEntries = 32;

  static std::string key(std::span<const Token> ctx) {
    std::string k;
    k.reserve(ctx.size());
    for (Token t : ctx) k.push_back(static_cast<char>(t));
    return k;
  }

  // Next tokens after every earlier position whose preceding characters
  // match the context suffix for the longest length found.
  std::map<Token, double> copy_counts(std::span<const Token> ctx) const {
    std::map<Token, double> counts;
    const std::size_t n = ctx.size();
    const auto lmax = static_cast<std::size_t>(cfg_.copy_max);
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i) {
      std::size_t l = 0;
      while (l < lmax && l < i && ctx[i - 1 - l] == ctx[n - 1 - l]) ++l;
      if (l == 0 || l < best) continue;
      if (l > best) {
        counts.clear();
        best = l;
      }
      counts[ctx[i]] += 1.0;
    }
    return counts;
  }

  void fit(const std::string& text) {
    TokenSeq toks = CharTokenizer::encode(text);
    toks.push_back(CharTokenizer::kEos);
    const auto span = std::span<const Token>(toks);
    for (std::size_t i = 0; i < toks.size(); ++i) {
      for (std::size_t len = 0; len < static_cast<std::size_t>(cfg_.order) && len <= i; ++len) {
        ContextCounts& c = counts_[key(span.subspan(i - len, len))];
        c.total += 1.0;
        c.next[toks[i]] += 1.0;
      }
    }
  }

  TinyCharLMConfig cfg_;
  std::string id_;
  std::unordered_map<std::string, ContextCounts> counts_;
  Matrix embed_;
  Matrix recur_;
  mutable std::mutex cache_mu_;
  mutable std::list<std::pair<TokenSeq, std::vector<Vector>>> cache_;
};

// ---------------------------------------------------------------------------
// Embedder
// ---------------------------------------------------------------------------

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::string embedder_id() const = 0;
  virtual int dim() const = 0;
  virtual Vector embed(std::string_view text) const = 0;
  /// One vector per normalized word, for greedy token matching.
  virtual std::vector<Vector> embed_tokens(std::string_view text) const = 0;
};

/// Deterministic signed feature-hashing bag of words (L2-normalized).
/// Token vectors are pseudo-random unit vectors keyed by the word, so equal
/// words match with cosine 1 and distinct words are nearly orthogonal.
/// Intended for tests and desk runs only.
class HashingEmbedder final : public Embedder {
 public:
  explicit HashingEmbedder(int dim = 256) : dim_(dim) {
    if (dim < 1) throw ConfigError("HashingEmbedder dim must be >= 1");
  }

  std::string embedder_id() const override { return "hashing-bow-" + std::to_string(dim_); }
  int dim() const override { return dim_; }

  Vector embed(std::string_view text) const override {
    Vector v = Vector::Zero(dim_);
    for (const auto& w : normalize_words(text)) {
      const std::uint64_t h = Fnv1a{}.update(w).digest();
      v[static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(dim_))] +=
          (h >> 63) ? -1.0 : 1.0;
    }
    return l2_normalized(std::move(v));
  }

  std::vector<Vector> embed_tokens(std::string_view text) const override {
    std::vector<Vector> out;
    for (const auto& w : normalize_words(text)) {
      Rng rng(Fnv1a{}.update(w).digest(), "token-vector");
      Vector v(dim_);
      for (int i = 0; i < dim_; ++i) v[i] = rng.normal();
      out.push_back(l2_normalized(std::move(v)));
    }
    return out;
  }

 private:
  int dim_;
};

}  // namespace palign
