#pragma once

// Preference datasets: records, user splits, JSONL I/O, few-shot sampling and
// the hard-negative-mining builder for abstract/title corpora.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "palign/common.hpp"
#include "palign/models.hpp"

namespace palign {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct PreferenceRecord {
  std::string user_id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  std::string pair_id;

  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

inline std::string compute_pair_id(std::string_view user, std::string_view prompt,
                                   std::string_view chosen, std::string_view rejected) {
  return Fnv1a{}.field(user).field(prompt).field(chosen).field(rejected).hex();
}

/// Builds a record with its pair id; throws ValidationError on invariant
/// violations.
inline PreferenceRecord make_record(std::string user, std::string prompt, std::string chosen,
                                    std::string rejected) {
  auto require = [](const std::string& v, const char* name) {
    if (v.empty()) throw ValidationError(std::string("empty field '") + name + "'");
  };
  require(user, "user_id");
  require(prompt, "prompt");
  require(chosen, "chosen");
  require(rejected, "rejected");
  if (chosen == rejected) throw ValidationError("chosen equals rejected");
  PreferenceRecord r{std::move(user), std::move(prompt), std::move(chosen),
                     std::move(rejected), {}};
  r.pair_id = compute_pair_id(r.user_id, r.prompt, r.chosen, r.rejected);
  return r;
}

struct GroundTruthRecord {
  std::string user_id;
  std::string prompt;
  std::string ground_truth;

  friend bool operator==(const GroundTruthRecord&, const GroundTruthRecord&) = default;
};

struct UserSplit {
  std::set<std::string> train_users;
  std::set<std::string> adapt_users;
  std::uint64_t seed = 0;

  friend bool operator==(const UserSplit&, const UserSplit&) = default;
};

struct DatasetManifest {
  std::string name;
  std::string source;
  json params = json::object();
  std::string checksum;
};

inline std::string compute_checksum(const std::vector<PreferenceRecord>& records,
                                    const std::vector<GroundTruthRecord>& ground_truth) {
  Fnv1a h;
  h.update_u64(records.size());
  for (const auto& r : records) {
    h.field(r.user_id).field(r.prompt).field(r.chosen).field(r.rejected);
  }
  h.update_u64(ground_truth.size());
  for (const auto& g : ground_truth) h.field(g.user_id).field(g.prompt).field(g.ground_truth);
  return h.hex();
}

// ---------------------------------------------------------------------------
// PreferenceSet
// ---------------------------------------------------------------------------

class PreferenceSet {
 public:
  PreferenceSet() = default;

  /// Validates every record, rejects duplicate pair ids and indexes records
  /// by user (file order preserved within a user).
  static PreferenceSet create(std::vector<PreferenceRecord> records,
                              std::vector<GroundTruthRecord> ground_truth = {},
                              DatasetManifest manifest = {}) {
    PreferenceSet s;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto& r = records[i];
      try {
        const auto rebuilt = make_record(r.user_id, r.prompt, r.chosen, r.rejected);
        if (!r.pair_id.empty() && r.pair_id != rebuilt.pair_id) {
          throw IntegrityError("record " + std::to_string(i) + ": pair_id mismatch");
        }
        r.pair_id = rebuilt.pair_id;
      } catch (const ValidationError& e) {
        throw ValidationError("record " + std::to_string(i) + ": " + e.what());
      }
      if (!seen.insert(r.pair_id).second) {
        throw IntegrityError("duplicate pair_id " + r.pair_id + " at record " +
                             std::to_string(i));
      }
      s.by_user_[r.user_id].push_back(i);
    }
    s.records_ = std::move(records);
    for (const auto& g : ground_truth) {
      if (g.ground_truth.empty()) throw ValidationError("empty ground_truth for " + g.user_id);
      if (g.user_id.empty() || g.prompt.empty()) {
        throw ValidationError("ground-truth record with empty user_id or prompt");
      }
      s.gt_users_.insert(g.user_id);
    }
    for (const auto& u : s.gt_users_) {
      if (!s.by_user_.count(u)) {
        throw IntegrityError("ground-truth user '" + u + "' has no preference records");
      }
    }
    s.ground_truth_ = std::move(ground_truth);
    s.manifest_ = std::move(manifest);
    s.manifest_.checksum = compute_checksum(s.records_, s.ground_truth_);
    return s;
  }

  const std::vector<PreferenceRecord>& records() const noexcept { return records_; }
  const std::vector<GroundTruthRecord>& ground_truth() const noexcept { return ground_truth_; }
  const DatasetManifest& manifest() const noexcept { return manifest_; }
  const std::optional<UserSplit>& split() const noexcept { return split_; }

  std::vector<std::string> users() const {
    std::vector<std::string> out;
    out.reserve(by_user_.size());
    for (const auto& [u, _] : by_user_) out.push_back(u);
    return out;
  }
  std::size_t user_count() const noexcept { return by_user_.size(); }
  bool has_user(const std::string& u) const { return by_user_.count(u) > 0; }

  /// 𝒟_k in file order.
  std::vector<PreferenceRecord> records_for(const std::string& user) const {
    const auto it = by_user_.find(user);
    if (it == by_user_.end()) throw LookupError("unknown user '" + user + "'");
    std::vector<PreferenceRecord> out;
    out.reserve(it->second.size());
    for (auto i : it->second) out.push_back(records_[i]);
    return out;
  }

  std::vector<GroundTruthRecord> ground_truth_for(const std::string& user) const {
    std::vector<GroundTruthRecord> out;
    for (const auto& g : ground_truth_) {
      if (g.user_id == user) out.push_back(g);
    }
    return out;
  }

  /// Records whose user belongs to `users`, in file order.
  std::vector<PreferenceRecord> records_of(const std::set<std::string>& users) const {
    std::vector<PreferenceRecord> out;
    for (const auto& r : records_) {
      if (users.count(r.user_id)) out.push_back(r);
    }
    return out;
  }

  void set_split(UserSplit split) {
    for (const auto& u : split.train_users) {
      if (split.adapt_users.count(u)) throw SplitError("user '" + u + "' in both partitions");
    }
    for (const auto& [u, _] : by_user_) {
      if (!split.train_users.count(u) && !split.adapt_users.count(u)) {
        throw SplitError("user '" + u + "' not covered by split");
      }
    }
    split_ = std::move(split);
  }

  /// True when the stored checksum matches a recomputation.
  bool verify_checksum() const {
    return manifest_.checksum == compute_checksum(records_, ground_truth_);
  }
  void set_manifest_checksum(std::string checksum) { manifest_.checksum = std::move(checksum); }

 private:
  std::vector<PreferenceRecord> records_;
  std::vector<GroundTruthRecord> ground_truth_;
  std::set<std::string> gt_users_;
  std::map<std::string, std::vector<std::size_t>> by_user_;
  DatasetManifest manifest_;
  std::optional<UserSplit> split_;
};

// ---------------------------------------------------------------------------
// JSONL I/O
// ---------------------------------------------------------------------------

enum class DataFormat { jsonl };

namespace detail {

inline std::string required_string(const json& obj, const char* field, std::size_t line) {
  const auto it = obj.find(field);
  if (it == obj.end()) throw ParseError(line, std::string("missing field '") + field + "'");
  if (!it->is_string()) throw ParseError(line, std::string("field '") + field + "' is not a string");
  return it->get<std::string>();
}

template <class F>
void for_each_jsonl(const std::filesystem::path& path, F&& on_object) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(lineno, "expected a JSON object");
    on_object(obj, lineno);
  }
}

}  // namespace detail

inline PreferenceSet load_preferences(const std::filesystem::path& path,
                                      DataFormat format = DataFormat::jsonl) {
  (void)format;
  std::vector<PreferenceRecord> records;
  std::set<std::string> seen;
  detail::for_each_jsonl(path, [&](const json& obj, std::size_t line) {
    PreferenceRecord r;
    try {
      r = make_record(detail::required_string(obj, "user_id", line),
                      detail::required_string(obj, "prompt", line),
                      detail::required_string(obj, "chosen", line),
                      detail::required_string(obj, "rejected", line));
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line) + ": " + e.what());
    }
    if (!seen.insert(r.pair_id).second) {
      throw IntegrityError("line " + std::to_string(line) + ": duplicate pair_id " + r.pair_id);
    }
    records.push_back(std::move(r));
  });
  DatasetManifest m;
  m.name = path.stem().string();
  m.source = path.string();
  return PreferenceSet::create(std::move(records), {}, std::move(m));
}

inline std::vector<GroundTruthRecord> load_ground_truth(const std::filesystem::path& path) {
  std::vector<GroundTruthRecord> out;
  detail::for_each_jsonl(path, [&](const json& obj, std::size_t line) {
    GroundTruthRecord g{detail::required_string(obj, "user_id", line),
                        detail::required_string(obj, "prompt", line),
                        detail::required_string(obj, "ground_truth", line)};
    if (g.ground_truth.empty()) throw ValidationError("line " + std::to_string(line) + ": empty ground_truth");
    out.push_back(std::move(g));
  });
  return out;
}

inline void write_preferences(const std::vector<PreferenceRecord>& records,
                              const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& r : records) {
    json j = {{"user_id", r.user_id}, {"prompt", r.prompt}, {"chosen", r.chosen},
              {"rejected", r.rejected}};
    out << j.dump() << '\n';
  }
}

inline void write_ground_truth(const std::vector<GroundTruthRecord>& records,
                               const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& g : records) {
    json j = {{"user_id", g.user_id}, {"prompt", g.prompt}, {"ground_truth", g.ground_truth}};
    out << j.dump() << '\n';
  }
}

inline json split_to_json(const UserSplit& s, const std::string& checksum) {
  return json{{"train_users", s.train_users},
              {"adapt_users", s.adapt_users},
              {"seed", s.seed},
              {"checksum", checksum}};
}

inline UserSplit split_from_json(const json& j) {
  UserSplit s;
  s.train_users = j.at("train_users").get<std::set<std::string>>();
  s.adapt_users = j.at("adapt_users").get<std::set<std::string>>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

/// Dataset directory layout: preferences.jsonl, ground_truth.jsonl
/// (optional), split.json (optional), manifest.json.
inline void save_dataset(const PreferenceSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_preferences(set.records(), dir / "preferences.jsonl");
  if (!set.ground_truth().empty()) write_ground_truth(set.ground_truth(), dir / "ground_truth.jsonl");
  const auto& m = set.manifest();
  if (set.split()) {
    std::ofstream(dir / "split.json") << split_to_json(*set.split(), m.checksum).dump(2) << '\n';
  }
  json mj = {{"name", m.name}, {"source", m.source}, {"params", m.params},
             {"checksum", m.checksum}, {"records", set.records().size()},
             {"users", set.user_count()}, {"ground_truth", set.ground_truth().size()}};
  std::ofstream(dir / "manifest.json") << mj.dump(2) << '\n';
}

inline PreferenceSet load_dataset(const std::filesystem::path& dir) {
  auto base = load_preferences(dir / "preferences.jsonl");
  std::vector<GroundTruthRecord> gt;
  if (std::filesystem::exists(dir / "ground_truth.jsonl")) gt = load_ground_truth(dir / "ground_truth.jsonl");
  DatasetManifest m = base.manifest();
  std::optional<std::string> stored_checksum;
  if (std::filesystem::exists(dir / "manifest.json")) {
    const json mj = json::parse(std::ifstream(dir / "manifest.json"));
    m.name = mj.value("name", m.name);
    m.source = mj.value("source", m.source);
    m.params = mj.value("params", json::object());
    stored_checksum = mj.at("checksum").get<std::string>();
  }
  auto records = base.records();
  auto set = PreferenceSet::create(std::move(records), std::move(gt), std::move(m));
  if (stored_checksum && *stored_checksum != set.manifest().checksum) {
    throw IntegrityError("manifest checksum " + *stored_checksum + " does not match records (" +
                         set.manifest().checksum + ")");
  }
  if (std::filesystem::exists(dir / "split.json")) {
    const json sj = json::parse(std::ifstream(dir / "split.json"));
    if (sj.value("checksum", set.manifest().checksum) != set.manifest().checksum) {
      throw IntegrityError("split.json was written for a different dataset checksum");
    }
    set.set_split(split_from_json(sj));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Splitting and sampling
// ---------------------------------------------------------------------------

inline UserSplit split_users(const PreferenceSet& set, double adapt_fraction, std::uint64_t seed) {
  if (!(adapt_fraction > 0.0 && adapt_fraction < 1.0)) {
    throw SplitError("adapt_fraction must lie in (0, 1)");
  }
  auto users = set.users();  // sorted
  const std::size_t n = users.size();
  if (n < 2) throw SplitError("need at least 2 users to split, got " + std::to_string(n));
  auto n_adapt = static_cast<std::size_t>(std::llround(adapt_fraction * static_cast<double>(n)));
  n_adapt = std::clamp<std::size_t>(n_adapt, 1, n - 1);
  Rng rng(seed, "split-users");
  rng.shuffle(users);
  UserSplit s;
  s.seed = seed;
  s.adapt_users.insert(users.begin(), users.begin() + static_cast<std::ptrdiff_t>(n_adapt));
  s.train_users.insert(users.begin() + static_cast<std::ptrdiff_t>(n_adapt), users.end());
  return s;
}

struct FewShotSplit {
  std::vector<PreferenceRecord> few_shot;
  std::vector<PreferenceRecord> eval;
};

/// Seeded few-shot draw for one adaptation user; the rest of 𝒟_k is the
/// held-out evaluation set. Both halves keep file order.
inline FewShotSplit sample_few_shot(const PreferenceSet& set, const std::string& user,
                                    std::size_t n, std::uint64_t seed,
                                    const WarningSink& sink = stderr_warning) {
  if (n < 1) throw InputError("few-shot size must be >= 1");
  if (!set.has_user(user)) throw LookupError("unknown user '" + user + "'");
  if (set.split() && !set.split()->adapt_users.count(user)) {
    throw LookupError("user '" + user + "' is not an adaptation user");
  }
  const auto records = set.records_for(user);
  if (n > records.size()) {
    warn(sink, "user '" + user + "' has " + std::to_string(records.size()) +
                   " records; few-shot size " + std::to_string(n) + " clamped");
  }
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed, "few-shot:" + user);
  rng.shuffle(idx);
  const std::size_t take = std::min(n, records.size());
  std::vector<bool> picked(records.size(), false);
  for (std::size_t i = 0; i < take; ++i) picked[idx[i]] = true;
  FewShotSplit out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    (picked[i] ? out.few_shot : out.eval).push_back(records[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hard-negative-mining builder (abstract -> title corpora)
// ---------------------------------------------------------------------------

struct Document {
  std::string user_id;
  std::string abstract;
  std::string title;
};

inline const std::string kTitlePromptPrefix =
    "Generate a title for the following abstract of a paper: ";
inline const std::string kTitlePromptSuffix = "\nTitle: ";

inline std::string title_prompt(std::string_view abstract) {
  return kTitlePromptPrefix + std::string(abstract) + kTitlePromptSuffix;
}

struct PrefLampOptions {
  /// When set, negatives are only drawn from users in the same partition.
  std::optional<UserSplit> restrict_to_split;
  std::string name = "pref-lamp";
  std::string source = "lamp5";
  WarningSink sink = stderr_warning;
};

inline std::vector<Document> load_documents(const std::filesystem::path& path) {
  std::vector<Document> docs;
  detail::for_each_jsonl(path, [&](const json& obj, std::size_t line) {
    docs.push_back({detail::required_string(obj, "user_id", line),
                    detail::required_string(obj, "abstract", line),
                    detail::required_string(obj, "title", line)});
  });
  return docs;
}

/// For each document: embed its abstract, retrieve the neighbors_k most
/// cosine-similar abstracts written by other users, sample one of them
/// uniformly and use its title as the rejected response. The document's own
/// title is the chosen response and its ground truth.
inline PreferenceSet build_pref_lamp(const std::vector<Document>& documents,
                                     const Embedder& embedder, int neighbors_k,
                                     std::uint64_t seed, const PrefLampOptions& opts = {}) {
  if (neighbors_k < 1) throw ConstructionError("neighbors_k must be >= 1");
  std::set<std::string> users;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    const auto& d = documents[i];
    if (d.user_id.empty() || d.abstract.empty() || d.title.empty()) {
      throw ConstructionError("document " + std::to_string(i) + " has an empty field");
    }
    users.insert(d.user_id);
  }
  if (users.size() < 2) throw ConstructionError("need at least 2 distinct users");

  std::vector<Vector> emb;
  emb.reserve(documents.size());
  for (const auto& d : documents) emb.push_back(l2_normalized(embedder.embed(d.abstract)));

  auto partition_of = [&](const std::string& u) -> int {
    if (!opts.restrict_to_split) return 0;
    return opts.restrict_to_split->adapt_users.count(u) ? 1 : 0;
  };

  Rng rng(seed, "pref-lamp");
  std::vector<PreferenceRecord> records;
  std::vector<GroundTruthRecord> gt;
  std::set<std::string> seen;
  std::set<std::pair<std::string, std::string>> gt_seen;
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    const auto& doc = documents[i];
    std::vector<std::pair<double, std::size_t>> pool;
    for (std::size_t j = 0; j < documents.size(); ++j) {
      const auto& other = documents[j];
      if (other.user_id == doc.user_id || other.title == doc.title) continue;
      if (partition_of(other.user_id) != partition_of(doc.user_id)) continue;
      pool.emplace_back(emb[i].dot(emb[j]), j);
    }
    if (pool.empty()) {
      throw ConstructionError("no cross-user negative available for document " +
                              std::to_string(i) + " of user '" + doc.user_id + "'");
    }
    std::stable_sort(pool.begin(), pool.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    const auto k = static_cast<std::size_t>(neighbors_k);
    if (k > pool.size()) ++clamped;
    const std::size_t take = std::min(k, pool.size());
    const auto& neg = documents[pool[rng.index(take)].second];

    auto rec = make_record(doc.user_id, title_prompt(doc.abstract), doc.title, neg.title);
    if (!seen.insert(rec.pair_id).second) {
      warn(opts.sink, "document " + std::to_string(i) + " duplicates an earlier pair; skipped");
      continue;
    }
    records.push_back(std::move(rec));
    if (gt_seen.emplace(doc.user_id, doc.abstract).second) {
      gt.push_back({doc.user_id, title_prompt(doc.abstract), doc.title});
    }
  }
  if (clamped > 0) {
    warn(opts.sink, "neighbors_k=" + std::to_string(neighbors_k) + " exceeds the cross-user pool for " +
                        std::to_string(clamped) + " documents; clamped");
  }
  DatasetManifest m;
  m.name = opts.name;
  m.source = opts.source;
  m.params = {{"neighbors_k", neighbors_k},
              {"seed", seed},
              {"embedder", embedder.embedder_id()},
              {"similarity", "cosine-l2"},
              {"restrict_to_split", opts.restrict_to_split.has_value()}};
  return PreferenceSet::create(std::move(records), std::move(gt), std::move(m));
}

}  // namespace palign
