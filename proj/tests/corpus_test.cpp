#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "palign/corpus.hpp"
#include "palign/harness/synthetic.hpp"

using namespace palign;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("palign_corpus_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << '\n';
}

std::vector<PreferenceRecord> sample_records() {
  std::vector<PreferenceRecord> r;
  for (int u = 0; u < 6; ++u) {
    for (int i = 0; i < 5; ++i) {
      const std::string user = "u" + std::to_string(u);
      r.push_back(make_record(user, "p" + std::to_string(i), "good " + user, "bad " + std::to_string(i)));
    }
  }
  return r;
}

void quiet(const std::string&) {}

}  // namespace

TEST(Records, MakeRecordValidates) {
  EXPECT_THROW(make_record("", "p", "a", "b"), ValidationError);
  EXPECT_THROW(make_record("u", "p", "", "b"), ValidationError);
  EXPECT_THROW(make_record("u", "p", "a", "a"), ValidationError);
  const auto r = make_record("u", "p", "a", "b");
  EXPECT_EQ(r.pair_id, compute_pair_id("u", "p", "a", "b"));
  EXPECT_NE(r.pair_id, compute_pair_id("u", "p", "b", "a"));
}

TEST(PreferenceSet, IndexesUsersInFileOrder) {
  const auto set = PreferenceSet::create(sample_records());
  EXPECT_EQ(set.user_count(), 6u);
  const auto r = set.records_for("u2");
  ASSERT_EQ(r.size(), 5u);
  EXPECT_EQ(r.front().prompt, "p0");
  EXPECT_EQ(r.back().prompt, "p4");
  EXPECT_TRUE(set.verify_checksum());
}

TEST(PreferenceSet, RejectsDuplicatesAndBadIds) {
  auto recs = sample_records();
  recs.push_back(recs.front());
  EXPECT_THROW(PreferenceSet::create(recs), IntegrityError);
  recs = sample_records();
  recs[3].pair_id = "0000000000000000";
  EXPECT_THROW(PreferenceSet::create(recs), IntegrityError);
}

TEST(PreferenceSet, GroundTruthNeedsKnownUsers) {
  EXPECT_THROW(PreferenceSet::create(sample_records(), {{"ghost", "p", "t"}}), IntegrityError);
  EXPECT_THROW(PreferenceSet::create(sample_records(), {{"u0", "p", ""}}), ValidationError);
  const auto set = PreferenceSet::create(sample_records(), {{"u0", "p0", "title"}});
  EXPECT_EQ(set.ground_truth_for("u0").size(), 1u);
}

TEST(Jsonl, ReportsLineNumbers) {
  const auto dir = scratch("jsonl");
  write_lines(dir / "bad.jsonl", {R"({"user_id":"u","prompt":"p","chosen":"a","rejected":"b"})", "",
                                  R"({"user_id":"u","prompt":"p","chosen":"a"})"});
  try {
    load_preferences(dir / "bad.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  write_lines(dir / "junk.jsonl", {"{not json"});
  EXPECT_THROW(load_preferences(dir / "junk.jsonl"), ParseError);
  write_lines(dir / "dup.jsonl", {R"({"user_id":"u","prompt":"p","chosen":"a","rejected":"b"})",
                                  R"({"user_id":"u","prompt":"p","chosen":"a","rejected":"b"})"});
  EXPECT_THROW(load_preferences(dir / "dup.jsonl"), IntegrityError);
  EXPECT_THROW(load_preferences(dir / "missing.jsonl"), InputError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = scratch("roundtrip");
  auto set = PreferenceSet::create(sample_records(), {{"u1", "p1", "title one"}});
  set.set_split(split_users(set, 0.34, 4));
  save_dataset(set, dir / "ds");
  const auto back = load_dataset(dir / "ds");
  EXPECT_EQ(back.records(), set.records());
  EXPECT_EQ(back.ground_truth(), set.ground_truth());
  EXPECT_EQ(*back.split(), *set.split());
  EXPECT_EQ(back.manifest().checksum, set.manifest().checksum);
}

TEST(Dataset, TamperedFilesAreDetected) {
  const auto dir = scratch("tamper");
  auto set = PreferenceSet::create(sample_records());
  save_dataset(set, dir / "ds");
  {
    std::ofstream out(dir / "ds" / "preferences.jsonl", std::ios::app);
    out << R"({"user_id":"u9","prompt":"p","chosen":"x","rejected":"y"})" << '\n';
  }
  EXPECT_THROW(load_dataset(dir / "ds"), IntegrityError);
}

TEST(Split, PartitionsAllUsersDeterministically) {
  const auto set = PreferenceSet::create(sample_records());
  const auto a = split_users(set, 0.34, 9);
  EXPECT_EQ(a, split_users(set, 0.34, 9));
  EXPECT_EQ(a.adapt_users.size(), 2u);
  EXPECT_EQ(a.train_users.size(), 4u);
  for (const auto& u : a.adapt_users) EXPECT_FALSE(a.train_users.count(u));
  EXPECT_THROW(split_users(set, 0.0, 1), SplitError);
  EXPECT_THROW(split_users(set, 1.0, 1), SplitError);
  const auto tiny = PreferenceSet::create({make_record("solo", "p", "a", "b")});
  EXPECT_THROW(split_users(tiny, 0.5, 1), SplitError);
}

TEST(Split, ExtremeFractionsKeepBothSidesNonEmpty) {
  const auto set = PreferenceSet::create(sample_records());
  EXPECT_EQ(split_users(set, 0.01, 0).adapt_users.size(), 1u);
  EXPECT_EQ(split_users(set, 0.99, 0).train_users.size(), 1u);
}

TEST(FewShot, DisjointSeededDraw) {
  auto set = PreferenceSet::create(sample_records());
  set.set_split(split_users(set, 0.34, 0));
  const std::string user = *set.split()->adapt_users.begin();
  const auto a = sample_few_shot(set, user, 2, 5);
  const auto b = sample_few_shot(set, user, 2, 5);
  EXPECT_EQ(a.few_shot, b.few_shot);
  EXPECT_EQ(a.few_shot.size(), 2u);
  EXPECT_EQ(a.eval.size(), 3u);
  for (const auto& r : a.few_shot) {
    for (const auto& e : a.eval) EXPECT_NE(r.pair_id, e.pair_id);
  }
  std::vector<std::string> warnings;
  const auto all = sample_few_shot(set, user, 50, 5, [&](const std::string& w) { warnings.push_back(w); });
  EXPECT_EQ(all.few_shot.size(), 5u);
  EXPECT_TRUE(all.eval.empty());
  EXPECT_EQ(warnings.size(), 1u);
  const std::string trainer = *set.split()->train_users.begin();
  EXPECT_THROW(sample_few_shot(set, trainer, 2, 5), LookupError);
  EXPECT_THROW(sample_few_shot(set, "nobody", 2, 5), LookupError);
}

TEST(PrefLamp, PromptTemplate) {
  EXPECT_EQ(title_prompt("An abstract."),
            "Generate a title for the following abstract of a paper: An abstract.\nTitle: ");
}

TEST(PrefLamp, NegativesComeFromOtherUsers) {
  const auto docs = synthetic::documents({12, 4, 3});
  const HashingEmbedder emb(128);
  PrefLampOptions opts;
  opts.sink = quiet;
  const auto set = build_pref_lamp(docs, emb, 4, 1, opts);
  std::map<std::string, std::string> author;
  for (const auto& d : docs) author[d.title] = d.user_id;
  ASSERT_EQ(set.records().size(), docs.size());
  for (const auto& r : set.records()) {
    EXPECT_NE(author.at(r.rejected), r.user_id);
    EXPECT_EQ(author.at(r.chosen), r.user_id);
  }
  EXPECT_EQ(set.ground_truth().size(), docs.size());
  EXPECT_EQ(set.manifest().params.at("embedder"), "hashing-bow-128");
}

TEST(PrefLamp, NegativeIsAmongNearestNeighbors) {
  const auto docs = synthetic::documents({10, 3, 8});
  const HashingEmbedder emb(128);
  PrefLampOptions opts;
  opts.sink = quiet;
  const int k = 3;
  const auto set = build_pref_lamp(docs, emb, k, 2, opts);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto& r = set.records()[i];
    const Vector q = emb.embed(docs[i].abstract);
    std::vector<std::pair<double, std::string>> sims;
    for (const auto& o : docs) {
      if (o.user_id == docs[i].user_id) continue;
      sims.emplace_back(q.dot(emb.embed(o.abstract)), o.title);
    }
    std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    bool found = false;
    for (int j = 0; j < k; ++j) found = found || sims[static_cast<std::size_t>(j)].second == r.rejected;
    EXPECT_TRUE(found) << i;
  }
}

TEST(PrefLamp, RestrictToSplitKeepsPartitions) {
  const auto docs = synthetic::documents({10, 3, 8});
  const HashingEmbedder emb(64);
  std::set<std::string> users;
  for (const auto& d : docs) users.insert(d.user_id);
  UserSplit split;
  for (const auto& u : users) (split.adapt_users.size() < 4 ? split.adapt_users : split.train_users).insert(u);
  PrefLampOptions opts;
  opts.sink = quiet;
  opts.restrict_to_split = split;
  const auto set = build_pref_lamp(docs, emb, 5, 0, opts);
  std::map<std::string, std::string> author;
  for (const auto& d : docs) author[d.title] = d.user_id;
  for (const auto& r : set.records()) {
    EXPECT_EQ(split.adapt_users.count(author.at(r.rejected)), split.adapt_users.count(r.user_id));
  }
}

TEST(PrefLamp, RejectsDegenerateInput) {
  const HashingEmbedder emb(16);
  EXPECT_THROW(build_pref_lamp({{"a", "x", "t1"}, {"a", "y", "t2"}}, emb, 3, 0), ConstructionError);
  EXPECT_THROW(build_pref_lamp({{"a", "x", "t1"}, {"b", "y", "t2"}}, emb, 0, 0), ConstructionError);
  EXPECT_THROW(build_pref_lamp({{"a", "", "t1"}, {"b", "y", "t2"}}, emb, 1, 0), ConstructionError);
  std::vector<std::string> warnings;
  PrefLampOptions opts;
  opts.sink = [&](const std::string& w) { warnings.push_back(w); };
  const auto set = build_pref_lamp({{"a", "x", "t1"}, {"b", "y", "t2"}}, emb, 8, 0, opts);
  EXPECT_EQ(set.records().size(), 2u);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Synthetic, CorpusShape) {
  const auto docs = synthetic::documents({5, 4, 1});
  EXPECT_EQ(docs.size(), 20u);
  EXPECT_EQ(docs.front().user_id, "user000");
  std::set<std::string> titles;
  for (const auto& d : docs) titles.insert(d.title);
  EXPECT_EQ(titles.size(), docs.size());
  EXPECT_EQ(synthetic::documents({5, 4, 1}).back().title, docs.back().title);
  EXPECT_THROW(synthetic::documents({1, 4, 1}), ConfigError);
}
