#pragma once

// Synthetic abstract/title corpus for desk runs: users share topics (so
// nearest-neighbor negatives are topical) but each writes titles in a
// personal pattern with personal vocabulary.

#include <set>
#include <string>
#include <vector>

#include "palign/common.hpp"
#include "palign/corpus.hpp"

namespace palign::synthetic {

struct CorpusSpec {
  int users = 50;
  int docs_per_user = 6;
  std::uint64_t seed = 0;
};

namespace detail {

inline const std::vector<std::vector<std::string>>& topics() {
  static const std::vector<std::vector<std::string>> t = {
      {"graph", "networks", "nodes", "embedding", "message", "passing"},
      {"protein", "folding", "structure", "residue", "sequence", "binding"},
      {"language", "models", "tokens", "decoding", "reward", "alignment"},
      {"robot", "control", "policy", "manipulation", "grasping", "motion"},
      {"image", "segmentation", "pixels", "vision", "masks", "detection"},
      {"quantum", "circuits", "qubits", "noise", "error", "correction"},
      {"climate", "forecast", "weather", "ocean", "carbon", "emission"},
      {"privacy", "federated", "clients", "aggregation", "attack", "defense"},
      {"speech", "audio", "acoustic", "speaker", "recognition", "noise"},
      {"market", "pricing", "auction", "agents", "equilibrium", "trading"},
  };
  return t;
}

inline const std::vector<std::string>& patterns() {
  static const std::vector<std::string> p = {
      "towards {a} {b} for {c}",
      "{A}: a {b} approach to {c}",
      "on the {a} of {b} {c}",
      "learning {a} {b} with {c}",
      "{A} meets {B}",
      "rethinking {a} in {b} {c}",
      "scalable {a} for {b}",
      "a study of {a} and {b}",
  };
  return p;
}

inline const std::vector<std::string>& flourishes() {
  static const std::vector<std::string> f = {"efficient", "robust", "simple", "principled", "fast",
                                             "provable", "adaptive", "sparse", "deep", "unified"};
  return f;
}

inline std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

inline std::string fill(std::string pattern, const std::string& a, const std::string& b, const std::string& c) {
  auto sub = [&](const std::string& key, const std::string& value) {
    std::size_t pos;
    while ((pos = pattern.find(key)) != std::string::npos) pattern.replace(pos, key.size(), value);
  };
  sub("{A}", capitalize(a));
  sub("{B}", capitalize(b));
  sub("{a}", a);
  sub("{b}", b);
  sub("{c}", c);
  return pattern;
}

}  // namespace detail

inline std::string user_name(int i) {
  std::string s = std::to_string(i);
  return "user" + std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

/// Deterministic documents: docs_per_user per user, users in id order.
/// Titles are unique across the corpus.
inline std::vector<Document> documents(const CorpusSpec& spec) {
  if (spec.users < 2) throw ConfigError("synthetic corpus needs at least 2 users");
  if (spec.docs_per_user < 1) throw ConfigError("docs_per_user must be >= 1");
  const auto& topics = detail::topics();
  const auto& patterns = detail::patterns();
  const auto& flourish = detail::flourishes();
  Rng rng(spec.seed, "synthetic-corpus");
  std::vector<Document> docs;
  std::set<std::string> seen;
  for (int u = 0; u < spec.users; ++u) {
    const std::string uid = user_name(u);
    const std::string& pattern = patterns[rng.index(patterns.size())];
    const std::string& pet = flourish[rng.index(flourish.size())];
    const bool upper = rng.index(2) == 0;
    const std::size_t t1 = rng.index(topics.size());
    const std::size_t t2 = (t1 + 1 + rng.index(topics.size() - 1)) % topics.size();
    for (int d = 0; d < spec.docs_per_user; ++d) {
      const auto& words = topics[(d % 2 == 0) ? t1 : t2];
      auto pick = [&] { return words[rng.index(words.size())]; };
      std::string w1, w2, w3, title;
      for (int attempt = 0;; ++attempt) {
        w1 = pick();
        w2 = pick();
        w3 = pick();
        title = detail::fill(pattern, pet + " " + w1, w2, w3);
        if (attempt >= 32) title += " " + std::to_string(attempt);
        if (upper) {
          bool start = true;
          for (char& ch : title) {
            if (start && ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
            start = ch == ' ';
          }
        }
        if (seen.insert(title).second) break;
      }
      const std::string abstract = "We study " + w1 + " and " + w2 + " for " + w3 + ". Our method improves " + w1 +
                                   " " + words[rng.index(words.size())] + " on " + std::to_string(2 + d) +
                                   " benchmarks and analyzes " + w3 + " " + w2 + ".";
      docs.push_back({uid, abstract, title});
    }
  }
  return docs;
}

}  // namespace palign::synthetic
