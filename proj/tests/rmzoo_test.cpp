#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "palign/corpus.hpp"
#include "palign/harness/synthetic.hpp"
#include "palign/rmzoo.hpp"

using namespace palign;
namespace fs = std::filesystem;

namespace {

void quiet(const std::string&) {}

struct World {
  std::vector<Document> docs;
  std::vector<std::string> texts;
  std::unique_ptr<TinyCharLM> lm;
  PreferenceSet set;

  World() {
    docs = synthetic::documents({10, 4, 2});
    for (const auto& d : docs) texts.push_back(title_prompt(d.abstract) + d.title);
    TinyCharLMConfig c;
    c.order = 3;
    c.hidden_dim = 12;
    lm = std::make_unique<TinyCharLM>(c, texts);
    const HashingEmbedder emb(64);
    PrefLampOptions opts;
    opts.sink = quiet;
    set = build_pref_lamp(docs, emb, 4, 0, opts);
    set.set_split(split_users(set, 0.3, 0));
  }
};

const World& world() {
  static const World w;
  return w;
}

TrainingConfig quick(Method m) {
  TrainingConfig c;
  c.method = m;
  c.epochs = 15;
  c.lore_bases = 3;
  c.pref_rank = 3;
  c.mlp_hidden = 4;
  return c;
}

}  // namespace

TEST(Methods, NamesRoundTrip) {
  for (Method m : kAllMethods) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_THROW(parse_method("vpl"), ConfigError);
  EXPECT_TRUE(is_personalized(Method::pref_mod));
  EXPECT_TRUE(is_personalized(Method::lore_alt));
  EXPECT_FALSE(is_personalized(Method::global_v2));
  EXPECT_FALSE(is_personalized(Method::genarm));
}

TEST(BtLoss, ValuesAndDerivative) {
  EXPECT_NEAR(bt_loss(0.0, 0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bt_loss(40.0, 0.0), 0.0, 1e-15);
  EXPECT_NEAR(bt_loss(0.0, 800.0), 800.0, 1e-9);
  const double h = 1e-6;
  for (double m : {-3.0, -0.2, 0.0, 1.5}) {
    EXPECT_NEAR(bt_loss_dmargin(m), (bt_loss(m + h, 0) - bt_loss(m - h, 0)) / (2 * h), 1e-8);
  }
}

TEST(Training, EveryMethodProducesMonotoneCurves) {
  const auto& w = world();
  for (Method m : kAllMethods) {
    if (m == Method::plugin) continue;
    const auto a = train_reward_model(w.set, *w.lm, quick(m));
    EXPECT_EQ(a.method, m);
    EXPECT_EQ(a.backbone_id, w.lm->model_id());
    const auto& curve = a.training_manifest.loss_curve;
    ASSERT_FALSE(curve.empty()) << to_string(m);
    for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i], curve[i - 1] + 1e-12) << to_string(m);
    EXPECT_LT(curve.back(), curve.front()) << to_string(m);
    if (is_personalized(m)) {
      for (const auto& u : w.set.split()->train_users) EXPECT_TRUE(a.has_user(u)) << to_string(m);
      for (const auto& u : w.set.split()->adapt_users) EXPECT_FALSE(a.has_user(u)) << to_string(m);
    }
  }
}

TEST(Training, MiniBatchIsSeededAndMonotone) {
  const auto& w = world();
  auto c = quick(Method::global);
  c.batch_size = 5;
  c.seed = 3;
  const auto a = train_reward_model(w.set, *w.lm, c);
  const auto b = train_reward_model(w.set, *w.lm, c);
  EXPECT_EQ(artifact_checksum(a), artifact_checksum(b));
  const auto& curve = a.training_manifest.loss_curve;
  EXPECT_EQ(curve.size(), static_cast<std::size_t>(c.epochs + 1));
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i], curve[i - 1]);
}

TEST(Training, RejectsBadInput) {
  const auto& w = world();
  auto c = quick(Method::global);
  c.step_size = 0;
  EXPECT_THROW(train_reward_model(w.set, *w.lm, c), ConfigError);
  EXPECT_THROW(train_reward_model(w.set, *w.lm, quick(Method::plugin)), ConfigError);
  const auto unsplit = PreferenceSet::create(w.set.records());
  EXPECT_THROW(train_reward_model(unsplit, *w.lm, quick(Method::global)), ConfigError);
}

TEST(Training, PrefWarmStartMetadata) {
  const auto& w = world();
  auto c = quick(Method::pref_mod);
  c.epochs = 0;
  const auto a = train_reward_model(w.set, *w.lm, c);
  const auto& svd = a.metadata.at("svd");
  EXPECT_EQ(svd.at("rank").get<int>(), 3);
  EXPECT_GT(svd.at("fill_rate").get<double>(), 0.0);
  EXPECT_LE(svd.at("fill_rate").get<double>(), 1.0);
  EXPECT_EQ(a.shared_params.at("head").rows(), 3);
  EXPECT_EQ(a.shared_params.at("head").cols(), w.lm->hidden_dim());
}

TEST(Adaptation, PersonalizesWithoutTouchingSharedParameters) {
  const auto& w = world();
  for (Method m : {Method::mpu, Method::mpu_avg, Method::lore, Method::lore_alt, Method::pref_mod}) {
    const auto a = train_reward_model(w.set, *w.lm, quick(m));
    const std::string user = *w.set.split()->adapt_users.begin();
    const auto fs = sample_few_shot(w.set, user, 3, 0).few_shot;
    AdaptationConfig ac;
    ac.steps = 20;
    const auto b = adapt_user(a, fs, ac, *w.lm, quiet);
    EXPECT_EQ(shared_checksum(a), shared_checksum(b)) << to_string(m);
    EXPECT_TRUE(b.has_user(user));
    const auto& info = b.metadata.at("adaptation").at(user);
    EXPECT_LE(info.at("final_loss").get<double>(), info.at("initial_loss").get<double>());
    const ArtifactRewardModel rm(b, *w.lm);
    EXPECT_NO_THROW(rm.sequence_reward(user, fs[0].prompt, fs[0].chosen));
  }
}

TEST(Adaptation, GlobalIsNoOpAndInputsAreChecked) {
  const auto& w = world();
  const auto a = train_reward_model(w.set, *w.lm, quick(Method::global));
  const std::string user = *w.set.split()->adapt_users.begin();
  const auto fs = sample_few_shot(w.set, user, 2, 0).few_shot;
  std::vector<std::string> warnings;
  const auto b = adapt_user(a, fs, {}, *w.lm, [&](const std::string& m) { warnings.push_back(m); });
  EXPECT_EQ(artifact_checksum(a), artifact_checksum(b));
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_THROW(adapt_user(a, {}, {}, *w.lm, quiet), DataError);
  auto mixed = fs;
  mixed.push_back(w.set.records_for(*w.set.split()->train_users.begin()).front());
  const auto p = train_reward_model(w.set, *w.lm, quick(Method::pref_mod));
  EXPECT_THROW(adapt_user(p, mixed, {}, *w.lm, quiet), DataError);
}

TEST(Scoring, UnadaptedUsersAndWrongBackbonesFail) {
  const auto& w = world();
  const auto a = train_reward_model(w.set, *w.lm, quick(Method::lore));
  const std::string user = *w.set.split()->adapt_users.begin();
  EXPECT_THROW(sequence_reward(a, user, "p", "r", *w.lm), AdaptationRequiredError);
  EXPECT_THROW(sequence_reward(a, std::nullopt, "p", "r", *w.lm), ConfigError);
  EXPECT_THROW(sequence_reward(a, *w.set.split()->train_users.begin(), "p", "", *w.lm), InputError);
  TinyCharLMConfig other;
  other.hidden_dim = 12;
  other.seed = 99;
  const TinyCharLM lm2(other, w.texts);
  EXPECT_THROW(ArtifactRewardModel(a, lm2), ConfigError);
}

TEST(Scoring, TokenRewardMatchesPartialSequenceReward) {
  const auto& w = world();
  const auto a = train_reward_model(w.set, *w.lm, quick(Method::global));
  const TokenSeq prefix = w.lm->encode("Deep");
  const double t = token_reward(a, std::nullopt, "Prompt: ", prefix, 'e', *w.lm);
  EXPECT_DOUBLE_EQ(t, sequence_reward(a, std::nullopt, "Prompt: ", "Deepe", *w.lm));
}

TEST(Scoring, GenarmTokenRewardIsLogSoftmax) {
  const auto& w = world();
  const auto a = train_reward_model(w.set, *w.lm, quick(Method::genarm));
  const TokenSeq prefix = w.lm->encode("Ab");
  double total = 0;
  for (Token v = 0; v < w.lm->vocab_size(); ++v) total += std::exp(token_reward(a, std::nullopt, "P: ", prefix, v, *w.lm));
  EXPECT_NEAR(total, 1.0, 1e-9);
  const double seq = sequence_reward(a, std::nullopt, "P: ", "Abc", *w.lm);
  const double sum = token_reward(a, std::nullopt, "P: ", {}, 'A', *w.lm) +
                     token_reward(a, std::nullopt, "P: ", w.lm->encode("A"), 'b', *w.lm) +
                     token_reward(a, std::nullopt, "P: ", prefix, 'c', *w.lm);
  EXPECT_NEAR(seq, sum, 1e-9);
}

TEST(Features, PoolingAndTruncation) {
  const auto& w = world();
  TinyCharLMConfig c;
  c.hidden_dim = 8;
  c.context_limit = 6;
  const TinyCharLM lm(c, w.texts);
  const auto e = embed_sequence(lm, "abcdefgh", PoolMode::last_token);
  EXPECT_TRUE(e.truncated);
  EXPECT_EQ(e.vector, lm.hidden_states(lm.encode("cdefgh")).back());
  EXPECT_THROW(embed_sequence(lm, "abcdefgh", PoolMode::mean_pool, true), LengthError);
  const auto m = embed_sequence(lm, "abc", PoolMode::mean_pool);
  EXPECT_FALSE(m.truncated);
  const auto hs = lm.hidden_states(lm.encode("abc"));
  EXPECT_TRUE(m.vector.isApprox((hs[0] + hs[1] + hs[2]) / 3.0));
  EXPECT_THROW(embed_sequence(lm, "", PoolMode::last_token), InputError);
}

TEST(Artifact, SaveLoadRoundTripAndTamper) {
  const auto& w = world();
  const auto a = train_reward_model(w.set, *w.lm, quick(Method::pref_mod));
  const fs::path dir = fs::temp_directory_path() / "palign_rm_artifact";
  fs::remove_all(dir);
  save_artifact(a, dir);
  const auto b = load_artifact(dir);
  EXPECT_EQ(artifact_checksum(a), artifact_checksum(b));
  EXPECT_EQ(b.training_manifest.loss_curve, a.training_manifest.loss_curve);
  {
    std::fstream f(dir / "tensors.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x7f');
  }
  EXPECT_THROW(load_artifact(dir), IntegrityError);
  EXPECT_THROW(load_artifact(dir / "nope"), InputError);
}

TEST(PrefSvd, ExactRankTwoHasNoTail) {
  Matrix s(4, 3);
  s << 1, 1, -1,  //
      -1, -1, 1,  //
      1, -1, 1,   //
      1, 1, -1;
  const auto f = pref_svd_init(s, 2);
  EXPECT_NEAR(f.tail_norm, 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(f.fill_rate, 1.0);
  const Matrix recon = f.item_features * f.singular_values.asDiagonal() * f.user_embeddings.transpose();
  EXPECT_TRUE(recon.isApprox(s, 1e-12));
  EXPECT_TRUE((f.item_features.transpose() * f.item_features).isIdentity(1e-12));
}

TEST(PrefSvd, ImputesRowMeansAndValidates) {
  Matrix s(2, 3);
  s << 1, kMissing, -1,  //
      1, 1, kMissing;
  const auto f = pref_svd_init(s, 1);
  EXPECT_NEAR(f.fill_rate, 4.0 / 6.0, 1e-15);
  EXPECT_THROW(pref_svd_init(s, 0), InitError);
  EXPECT_THROW(pref_svd_init(s, 3), InitError);
  Matrix bad = s;
  bad(0, 0) = 0.5;
  EXPECT_THROW(pref_svd_init(bad, 1), InitError);
  Matrix empty_row = s;
  empty_row.row(1).setConstant(kMissing);
  EXPECT_THROW(pref_svd_init(empty_row, 1), InitError);
  Matrix empty_col = s;
  empty_col.col(1).setConstant(kMissing);
  EXPECT_THROW(pref_svd_init(empty_col, 1), InitError);
}

TEST(PrefRegression, RecoversKnownHeadAndFlagsRankDeficiency) {
  Rng rng(4, "regression");
  Matrix d(30, 5), w(2, 5);
  for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  const auto r = pref_head_regression(d, d * w.transpose());
  EXPECT_TRUE(r.weights.isApprox(w, 1e-10));
  EXPECT_LT(r.residual, 1e-10);
  EXPECT_FALSE(r.degenerate);
  Matrix dd = d;
  dd.col(4) = dd.col(0);
  EXPECT_TRUE(pref_head_regression(dd, dd * w.transpose()).degenerate);
  EXPECT_THROW(pref_head_regression(Matrix::Zero(30, 5), d * w.transpose()), InputError);
  EXPECT_THROW(pref_head_regression(d.topRows(10), d * w.transpose()), InputError);
}

TEST(PrefMatrix, SignsFollowLexicographicOrder) {
  const std::vector<PreferenceRecord> recs = {make_record("u1", "p", "a", "b"), make_record("u2", "p", "b", "a"),
                                              make_record("u1", "q", "x", "y")};
  const auto pm = build_preference_matrix(recs);
  ASSERT_EQ(pm.pairs.size(), 2u);
  ASSERT_EQ(pm.users, (std::vector<std::string>{"u1", "u2"}));
  EXPECT_EQ(pm.signs(0, 0), 1.0);
  EXPECT_EQ(pm.signs(0, 1), -1.0);
  EXPECT_TRUE(std::isnan(pm.signs(1, 1)));
}

TEST(Descent, NeverIncreasesObjective) {
  Matrix x = Matrix::Constant(2, 1, 3.0);
  ParamView view;
  view.add(&x);
  auto f = [&](Vector* g) {
    const double a = x(0), b = x(1);
    if (g) {
      g->resize(2);
      (*g)[0] = 2 * a + 40 * a * a * a;
      (*g)[1] = 2 * b;
    }
    return a * a + 10 * a * a * a * a + b * b;
  };
  const auto r = descend(view, f, DescentOptions{50, 10.0, 1.5, 0.0, 60});
  for (std::size_t i = 1; i < r.losses.size(); ++i) EXPECT_LE(r.losses[i], r.losses[i - 1]);
  EXPECT_LT(r.losses.back(), 1e-3);
}

namespace {
class ConstantPlugin final : public RewardModel {
 public:
  std::string name() const override { return "constant"; }
  bool personalized() const override { return false; }
  bool has_user(const std::string&) const override { return true; }
  double sequence_reward(const UserRef&, std::string_view, std::string_view r) const override {
    return static_cast<double>(r.size());
  }
  double token_reward(const UserRef&, std::string_view, std::span<const Token>, Token) const override { return 1.0; }
};
}  // namespace

TEST(Plugins, RegistryBuildsRegisteredModels) {
  PluginRegistry::instance().register_plugin(
      "constant", [](const RewardModelArtifact&, const LanguageModel&) { return std::make_unique<ConstantPlugin>(); });
  RewardModelArtifact a;
  a.method = Method::plugin;
  a.plugin_name = "constant";
  const auto rm = make_reward_model(a, *world().lm);
  EXPECT_EQ(rm->name(), "constant");
  EXPECT_EQ(rm->sequence_reward(std::nullopt, "p", "abc"), 3.0);
  a.plugin_name = "missing";
  EXPECT_THROW(make_reward_model(a, *world().lm), ConfigError);
}
