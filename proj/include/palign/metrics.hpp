#pragma once

// Evaluation quantities: pairwise ranking accuracies (reward model, policy
// scorer, win rate), generation similarity (ROUGE-1, ROUGE-L, greedy
// embedding matching), behavioral alignment, and Pearson / Spearman /
// Kendall tau-b correlations.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "palign/corpus.hpp"
#include "palign/guidance.hpp"
#include "palign/models.hpp"
#include "palign/rmzoo/scoring.hpp"

namespace palign {

using json = nlohmann::json;

inline constexpr const char* kRougeNormalization = "lowercase;strip-ascii-punct;whitespace-split;no-stem";

// ---------------------------------------------------------------------------
// Pairwise accuracy
// ---------------------------------------------------------------------------

struct AccuracyResult {
  double value = 0.0;
  std::size_t n_pairs = 0;
  std::map<std::string, double> per_user;
  std::map<std::string, std::size_t> per_user_pairs;
  std::size_t tie_count = 0;

  json to_json() const {
    return json{{"value", value}, {"n", n_pairs}, {"per_user", per_user},
                {"per_user_pairs", per_user_pairs}, {"tie_count", tie_count},
                {"tie_credit", 0.5}};
  }
};

struct ScoredPair {
  std::string user;
  double chosen = 0.0;
  double rejected = 0.0;
};

/// Fraction of pairs with chosen > rejected; exact ties earn 0.5.
inline AccuracyResult pairwise_accuracy(const std::vector<ScoredPair>& pairs) {
  AccuracyResult r;
  std::map<std::string, double> credit;
  double total = 0.0;
  for (const auto& p : pairs) {
    double c = 0.0;
    if (p.chosen > p.rejected) {
      c = 1.0;
    } else if (p.chosen == p.rejected) {
      c = 0.5;
      ++r.tie_count;
    }
    total += c;
    credit[p.user] += c;
    ++r.per_user_pairs[p.user];
  }
  r.n_pairs = pairs.size();
  r.value = pairs.empty() ? 0.0 : total / static_cast<double>(pairs.size());
  for (const auto& [u, c] : credit) r.per_user[u] = c / static_cast<double>(r.per_user_pairs[u]);
  return r;
}

/// User argument for scoring a record with a (possibly global) reward model.
inline UserRef user_for(const RewardModel& rm, const std::string& user) {
  return rm.personalized() ? UserRef{user} : std::nullopt;
}

inline AccuracyResult rm_accuracy(const RewardModel& rm, const std::vector<PreferenceRecord>& eval_set) {
  std::vector<ScoredPair> scored;
  scored.reserve(eval_set.size());
  for (const auto& r : eval_set) {
    if (!rm.has_user(r.user_id)) {
      throw AdaptationRequiredError("user '" + r.user_id + "' has not been adapted for " + rm.name());
    }
    const UserRef u = user_for(rm, r.user_id);
    scored.push_back({r.user_id, rm.sequence_reward(u, r.prompt, r.chosen), rm.sequence_reward(u, r.prompt, r.rejected)});
  }
  return pairwise_accuracy(scored);
}

inline AccuracyResult policy_accuracy(const ScorerKind& scorer, const std::vector<PreferenceRecord>& eval_set,
                                      const LanguageModel& policy) {
  scorer.validate();
  std::vector<ScoredPair> scored;
  scored.reserve(eval_set.size());
  for (const auto& r : eval_set) {
    const UserRef u = scorer.kind == ScorerType::personalized_posterior ? UserRef{r.user_id} : std::nullopt;
    scored.push_back({r.user_id, score_sequence(scorer, policy, u, r.prompt, r.chosen),
                      score_sequence(scorer, policy, u, r.prompt, r.rejected)});
  }
  return pairwise_accuracy(scored);
}

struct WinPair {
  std::string user;
  std::string prompt;
  std::string guided;
  std::string zeroshot;
};

struct WinRateResult {
  double value = 0.0;
  std::size_t n = 0;
  std::size_t ties = 0;
  json to_json() const { return json{{"value", value}, {"n", n}, {"ties", ties}, {"tie_credit", 0.5}}; }
};

/// Fraction of prompts where the reward model prefers its own guided output
/// over the zero-shot output; exact ties earn 0.5.
inline WinRateResult win_rate(const RewardModel& rm, const std::vector<WinPair>& pairs) {
  std::vector<ScoredPair> scored;
  for (const auto& p : pairs) {
    if (p.guided.empty() || p.zeroshot.empty()) throw InputError("win_rate needs non-empty texts");
    const UserRef u = user_for(rm, p.user);
    scored.push_back({p.user, rm.sequence_reward(u, p.prompt, p.guided), rm.sequence_reward(u, p.prompt, p.zeroshot)});
  }
  const auto acc = pairwise_accuracy(scored);
  return {acc.value, acc.n_pairs, acc.tie_count};
}

// ---------------------------------------------------------------------------
// Similarity
// ---------------------------------------------------------------------------

struct SimilarityScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool empty_input = false;
  std::string backend;

  static SimilarityScore from_pr(double p, double r, std::string backend) {
    SimilarityScore s;
    s.precision = p;
    s.recall = r;
    s.f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    s.backend = std::move(backend);
    return s;
  }
};

inline SimilarityScore rouge_1(std::string_view candidate, std::string_view reference) {
  const auto c = normalize_words(candidate);
  const auto r = normalize_words(reference);
  if (c.empty() || r.empty()) {
    SimilarityScore s;
    s.empty_input = true;
    s.backend = "rouge1";
    return s;
  }
  std::unordered_map<std::string, int> ref_counts;
  for (const auto& w : r) ++ref_counts[w];
  std::unordered_map<std::string, int> cand_counts;
  for (const auto& w : c) ++cand_counts[w];
  int overlap = 0;
  for (const auto& [w, n] : cand_counts) {
    const auto it = ref_counts.find(w);
    if (it != ref_counts.end()) overlap += std::min(n, it->second);
  }
  return SimilarityScore::from_pr(static_cast<double>(overlap) / static_cast<double>(c.size()),
                                  static_cast<double>(overlap) / static_cast<double>(r.size()), "rouge1");
}

/// Longest common subsequence length, O(|a||b|) time, O(|b|) memory.
template <class T>
std::size_t lcs_length(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline SimilarityScore rouge_L(std::string_view candidate, std::string_view reference) {
  const auto c = normalize_words(candidate);
  const auto r = normalize_words(reference);
  if (c.empty() || r.empty()) {
    SimilarityScore s;
    s.empty_input = true;
    s.backend = "rougeL";
    return s;
  }
  const double lcs = static_cast<double>(lcs_length(c, r));
  return SimilarityScore::from_pr(lcs / static_cast<double>(c.size()), lcs / static_cast<double>(r.size()), "rougeL");
}

/// Greedy token matching over per-token embeddings: precision averages each
/// candidate token's best cosine against the reference, recall the reverse.
/// Best matches are clipped to [0, 1].
inline SimilarityScore semantic_similarity(std::string_view candidate, std::string_view reference,
                                           const Embedder& embedder) {
  std::vector<Vector> c, r;
  try {
    c = embedder.embed_tokens(candidate);
    r = embedder.embed_tokens(reference);
  } catch (const std::exception& e) {
    throw Error("semantic_similarity backend '" + embedder.embedder_id() + "' failed: " + e.what());
  }
  if (c.empty() || r.empty()) {
    SimilarityScore s;
    s.empty_input = true;
    s.backend = embedder.embedder_id();
    return s;
  }
  auto directed = [](const std::vector<Vector>& from, const std::vector<Vector>& to) {
    double sum = 0.0;
    for (const auto& a : from) {
      double best = 0.0;
      for (const auto& b : to) best = std::max(best, cosine(a, b));
      sum += std::min(best, 1.0);
    }
    return sum / static_cast<double>(from.size());
  };
  return SimilarityScore::from_pr(directed(c, r), directed(r, c), embedder.embedder_id());
}

enum class SimilarityKind { rouge1, rougeL, semantic };

inline std::string to_string(SimilarityKind k) {
  switch (k) {
    case SimilarityKind::rouge1: return "rouge1";
    case SimilarityKind::rougeL: return "rougeL";
    case SimilarityKind::semantic: return "semantic";
  }
  return "?";
}

inline SimilarityKind parse_similarity(std::string_view s) {
  if (s == "rouge1") return SimilarityKind::rouge1;
  if (s == "rougeL") return SimilarityKind::rougeL;
  if (s == "semantic") return SimilarityKind::semantic;
  throw ConfigError("unknown similarity '" + std::string(s) + "'");
}

inline double similarity_f1(SimilarityKind kind, std::string_view cand, std::string_view ref,
                            const Embedder* embedder) {
  switch (kind) {
    case SimilarityKind::rouge1: return rouge_1(cand, ref).f1;
    case SimilarityKind::rougeL: return rouge_L(cand, ref).f1;
    case SimilarityKind::semantic:
      if (!embedder) throw ConfigError("semantic similarity needs an embedder");
      return semantic_similarity(cand, ref, *embedder).f1;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Behavioral alignment
// ---------------------------------------------------------------------------

using GenerationKey = std::pair<std::string, std::string>;  // (user, prompt)

struct AlignmentResult {
  std::map<std::string, double> per_user;
  double macro = 0.0;  // mean of per-user means
  double micro = 0.0;  // mean over all (user, prompt) items
  std::size_t n = 0;
  std::string similarity;
  std::string backend;

  json to_json() const {
    return json{{"per_user", per_user}, {"macro", macro},           {"micro", micro},
                {"n", n},               {"similarity", similarity}, {"backend", backend},
                {"normalization", kRougeNormalization}};
  }
};

/// Per user k: mean similarity of G(x_j) to y_j^GT over 𝒫_k.
inline AlignmentResult behavioral_alignment(const std::map<GenerationKey, std::string>& generations,
                                            const std::vector<GroundTruthRecord>& ground_truth,
                                            SimilarityKind similarity, const Embedder* embedder = nullptr) {
  std::vector<std::string> missing;
  for (const auto& g : ground_truth) {
    if (!generations.count({g.user_id, g.prompt})) missing.push_back("(" + g.user_id + ", " + g.prompt + ")");
  }
  if (!missing.empty()) {
    std::string msg = "missing generations for " + std::to_string(missing.size()) + " items:";
    for (const auto& m : missing) msg += " " + m;
    throw CoverageError(msg);
  }
  AlignmentResult out;
  out.similarity = to_string(similarity);
  out.backend = similarity == SimilarityKind::semantic && embedder ? embedder->embedder_id() : out.similarity;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  double total = 0.0;
  for (const auto& g : ground_truth) {
    const double s = similarity_f1(similarity, generations.at({g.user_id, g.prompt}), g.ground_truth, embedder);
    acc[g.user_id].first += s;
    ++acc[g.user_id].second;
    total += s;
  }
  out.n = ground_truth.size();
  for (const auto& [u, sc] : acc) out.per_user[u] = sc.first / static_cast<double>(sc.second);
  if (!acc.empty()) {
    double m = 0.0;
    for (const auto& [_, v] : out.per_user) m += v;
    out.macro = m / static_cast<double>(out.per_user.size());
    out.micro = total / static_cast<double>(out.n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Correlations
// ---------------------------------------------------------------------------

struct CorrelationTriple {
  std::optional<double> pearson;
  std::optional<double> spearman;
  std::optional<double> kendall;
  std::size_t n = 0;

  bool defined() const { return pearson && spearman && kendall; }
  json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return json{{"pearson", opt(pearson)}, {"spearman", opt(spearman)}, {"kendall", opt(kendall)},
                {"n", n}, {"kendall_variant", "tau-b"}, {"undefined_reason", defined() ? "" : "zero variance"}};
  }
};

inline std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys) {
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based mid-ranks (tied values share the average of their ranks).
inline std::vector<double> mid_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Kendall tau-b in O(n log n) (Knight's algorithm: sort by (x, y), count
/// exchanges of a merge sort on y).
inline std::optional<double> kendall_tau_b(std::span<const double> xs, std::span<const double> ys) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
    return xs[a] < xs[b] || (xs[a] == xs[b] && ys[a] < ys[b]);
  });
  auto tie_pairs = [](std::size_t run) { return static_cast<double>(run) * static_cast<double>(run - 1) / 2.0; };

  // Ties in x, and joint ties in (x, y).
  double tx = 0.0, txy = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && xs[perm[j + 1]] == xs[perm[i]]) ++j;
    tx += tie_pairs(j - i + 1);
    for (std::size_t a = i; a <= j;) {
      std::size_t b = a;
      while (b + 1 <= j && ys[perm[b + 1]] == ys[perm[a]]) ++b;
      txy += tie_pairs(b - a + 1);
      a = b + 1;
    }
    i = j + 1;
  }

  // Merge sort on y counting exchanges (discordant pairs among x-untied).
  std::vector<double> y(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = ys[perm[i]];
  double swaps = 0.0;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo < n; lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, n);
      const std::size_t hi = std::min(lo + 2 * width, n);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (y[j] < y[i]) {
          swaps += static_cast<double>(mid - i);
          buf[k++] = y[j++];
        } else {
          buf[k++] = y[i++];
        }
      }
      while (i < mid) buf[k++] = y[i++];
      while (j < hi) buf[k++] = y[j++];
    }
    std::swap(y, buf);
  }

  double ty = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && y[j + 1] == y[i]) ++j;
    ty += tie_pairs(j - i + 1);
    i = j + 1;
  }

  const double n0 = tie_pairs(n);
  const double denom = std::sqrt((n0 - tx) * (n0 - ty));
  if (n0 - tx == 0.0 || n0 - ty == 0.0) return std::nullopt;
  const double s = n0 - tx - ty + txy - 2.0 * swaps;
  return std::clamp(s / denom, -1.0, 1.0);
}

inline CorrelationTriple rank_correlations(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) {
    throw InputError("length mismatch: " + std::to_string(xs.size()) + " vs " + std::to_string(ys.size()));
  }
  if (xs.size() < 2) throw InputError("need at least 2 points");
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw InputError("non-finite correlation input");
  }
  CorrelationTriple c;
  c.n = xs.size();
  c.pearson = pearson(xs, ys);
  const auto rx = mid_ranks(xs);
  const auto ry = mid_ranks(ys);
  c.spearman = pearson(rx, ry);
  c.kendall = kendall_tau_b(xs, ys);
  return c;
}

}  // namespace palign
