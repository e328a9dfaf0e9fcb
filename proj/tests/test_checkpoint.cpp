#include <filesystem>

#include <gtest/gtest.h>

#include "da6/checkpoint.hpp"
#include "da6/training.hpp"
#include "fixtures.hpp"

using namespace da6;
using namespace da6::train;
namespace fs = std::filesystem;

namespace {

Checkpoint sample() {
  Checkpoint c;
  c.meta = {{"note", "x"}, {"n", 3}};
  Tensor<float> a(Shape{2, 3});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.1f * static_cast<float>(i) - 0.2f;
  c.tensors.push_back({"a", a});
  c.tensors.push_back({"b/c", Tensor<float>(Shape{1}, -0.0f)});
  return c;
}

}  // namespace

TEST(Checkpoint, SerializeRoundTripIsByteExact) {
  const auto bytes = serialize_checkpoint(sample());
  EXPECT_EQ(bytes.substr(0, 8), "DA6CKPT1");
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  ASSERT_NE(back.find("a"), nullptr);
  EXPECT_EQ(*back.find("a"), sample().tensors[0].value);
  EXPECT_TRUE(std::signbit((*back.find("b/c"))[0]));
  EXPECT_EQ(back.find("zzz"), nullptr);
}

TEST(Checkpoint, RejectsCorruption) {
  const auto bytes = serialize_checkpoint(sample());
  auto bad = bytes;
  bad[3] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), ConfigError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 1)), ConfigError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), ConfigError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 12)), ConfigError);
  EXPECT_THROW(load_checkpoint("/nonexistent/file.ckpt"), ConfigError);
}

TEST(Checkpoint, PolicyRestoreChecksShapes) {
  auto set = fixtures::tiny_policies(Variant::Da6Dqn, {env::ConditionalKind::GPos});
  auto ckpt = policy_checkpoint(set);
  ckpt.tensors[0].value = Tensor<float>(Shape{1});
  EXPECT_THROW(load_policies(ckpt), ConfigError);
  ckpt.tensors.erase(ckpt.tensors.begin());
  EXPECT_THROW(load_policies(ckpt), ConfigError);
}

TEST(Checkpoint, TrainerSaveLoadSaveIsByteIdentical) {
  auto dir = fs::temp_directory_path() / "da6_ckpt_trainer";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Trainer t(fixtures::tiny_config(Variant::Da6Iqn, {env::ConditionalKind::GPos}));
  t.run_episode();
  t.run_episode();
  save_checkpoint(dir / "a.ckpt", t.checkpoint());
  auto resumed = Trainer::resume(load_checkpoint(dir / "a.ckpt"));
  EXPECT_EQ(resumed.episode(), 2);
  EXPECT_EQ(resumed.steps(), t.steps());
  save_checkpoint(dir / "b.ckpt", resumed.checkpoint());
  EXPECT_EQ(read_file(dir / "a.ckpt"), read_file(dir / "b.ckpt"));
  EXPECT_NO_THROW(resumed.run_episode());
  EXPECT_EQ(resumed.episode(), 3);
  EXPECT_THROW(Trainer::resume(policy_checkpoint(t.policies())), ConfigError);
  fs::remove_all(dir);
}

TEST(Checkpoint, ReloadedPoliciesEvaluateBitExactly) {
  for (auto v : {Variant::Da6Iqn, Variant::Da3Dqn, Variant::Dqn}) {
    std::vector<env::ConditionalKind> kinds;
    if (v != Variant::Da3Dqn) kinds = {env::ConditionalKind::GPos, env::ConditionalKind::OPos};
    Trainer t(fixtures::tiny_config(v, kinds));
    t.run_episode();
    t.run_episode();
    const auto live = t.policies();
    const auto loaded = load_policies(deserialize_checkpoint(serialize_checkpoint(t.checkpoint(false))));
    EXPECT_EQ(loaded.tau_seed, live.tau_seed);
    EXPECT_EQ(loaded.kinds, live.kinds);
    const auto a = greedy_rollouts(live, 3, 4), b = greedy_rollouts(loaded, 3, 4);
    for (std::size_t e = 0; e < a.size(); ++e) EXPECT_EQ(metrics_row(a[e]), metrics_row(b[e])) << to_string(v);
    EXPECT_EQ(evaluate(live, 3, 4).to_json(), evaluate(loaded, 3, 4).to_json());
  }
}
