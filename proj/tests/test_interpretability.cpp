#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "da6/interpretability.hpp"
#include "fixtures.hpp"

using namespace da6;
using namespace da6::interp;

namespace {

constexpr std::size_t kTokens = 50;

nn::AttentionRecord<float> record_with(std::vector<Tensor<float>> heads, std::size_t layers = 1) {
  nn::AttentionRecord<float> r{"local", {}};
  for (std::size_t l = 0; l < layers; ++l) r.layers.push_back(heads);
  return r;
}

Tensor<float> random_stochastic(std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.01f, 1.0f);
  Tensor<float> a(Shape{kTokens, kTokens});
  for (std::size_t i = 0; i < kTokens; ++i) {
    float s = 0;
    for (std::size_t j = 0; j < kTokens; ++j) s += (a.at(i, j) = u(rng));
    for (std::size_t j = 0; j < kTokens; ++j) a.at(i, j) /= s;
  }
  return a;
}

Scenario two_agent_scenario(int x, int y) {
  Scenario s;
  s.name = "probe";
  s.map = "open";
  s.agents = {{std::nullopt, 'A', x, y}, {std::nullopt, 'B', x - 2, y - 1}};
  s.objects = {{env::ObjectType::Star, x + 1, y}};
  s.observer = 0;
  return s;
}

}  // namespace

TEST(ExtractAttention, UniformWeightsGiveOneOverFifty) {
  auto rec = record_with({Tensor<float>(Shape{kTokens, kTokens}, 1.0f / kTokens),
                          Tensor<float>(Shape{kTokens, kTokens}, 1.0f / kTokens)});
  auto maps = extract_attention(rec, {}, Aggregation::MeanHeads);
  ASSERT_EQ(maps.size(), 1u);
  EXPECT_EQ(maps[0].rows, 7u);
  for (double w : maps[0].grid) EXPECT_NEAR(w, 1.0 / 50, 1e-7);
  EXPECT_NEAR(maps[0].saliency, 1.0 / 50, 1e-7);
  EXPECT_NEAR(maps[0].total(), 1.0, 1e-6);
}

TEST(ExtractAttention, PerHeadReturnsOneMapPerHead) {
  std::mt19937_64 rng(1);
  auto rec = record_with({random_stochastic(rng), random_stochastic(rng), random_stochastic(rng)});
  auto maps = extract_attention(rec, {}, Aggregation::PerHead);
  ASSERT_EQ(maps.size(), 3u);
  EXPECT_EQ(maps[2].aggregation, "head2");
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(maps[k].total(), 1.0, 1e-5);
    EXPECT_FLOAT_EQ(static_cast<float>(maps[k].at(1, 3)), rec.layers[0][k].at(0, 1 + 7 + 3));
  }
}

TEST(ExtractAttention, MeanHeadsMatchesDirectAverage) {
  std::mt19937_64 rng(2);
  auto rec = record_with({random_stochastic(rng), random_stochastic(rng)});
  auto m = extract_attention(rec, {}, Aggregation::MeanHeads)[0];
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 7; ++c) {
      const double want = 0.5 * (rec.layers[0][0].at(0, 1 + r * 7 + c) + rec.layers[0][1].at(0, 1 + r * 7 + c));
      EXPECT_NEAR(m.at(r, c), want, 1e-6);
    }
}

TEST(ExtractAttention, ImpulseLandsOnItsCell) {
  for (std::size_t cell = 0; cell < 49; ++cell) {
    Tensor<float> a(Shape{kTokens, kTokens});
    a.at(0, 1 + cell) = 1.0f;
    auto m = extract_attention(record_with({a}), {}, Aggregation::MeanHeads)[0];
    EXPECT_EQ(m.at(cell / 7, cell % 7), 1.0);
    EXPECT_EQ(m.saliency, 0.0);
  }
}

TEST(ExtractAttention, LayerSelection) {
  auto rec = record_with({Tensor<float>(Shape{kTokens, kTokens}, 1.0f / kTokens)}, 2);
  rec.layers[1][0] = Tensor<float>(Shape{kTokens, kTokens});
  rec.layers[1][0].at(0, 0) = 1.0f;
  EXPECT_EQ(extract_attention(rec, LayerSelector::parse("last"), Aggregation::MeanHeads)[0].saliency, 1.0);
  EXPECT_EQ(extract_attention(rec, LayerSelector::parse("1"), Aggregation::MeanHeads)[0].layer, 1u);
  EXPECT_NEAR(extract_attention(rec, LayerSelector::parse("0"), Aggregation::MeanHeads)[0].saliency, 0.02, 1e-7);
  EXPECT_THROW(extract_attention(rec, LayerSelector::parse("2"), Aggregation::MeanHeads), ContractError);
  EXPECT_THROW(LayerSelector::parse("-1"), ConfigError);
  EXPECT_THROW(LayerSelector::parse("top"), ConfigError);
  EXPECT_THROW(extract_attention(nn::AttentionRecord<float>{"local", {}}, {}, Aggregation::MeanHeads), ContractError);
  EXPECT_THROW(parse_aggregation("max"), ConfigError);
}

TEST(RenderHeatmap, CsvParsesBack) {
  std::mt19937_64 rng(4);
  auto m = extract_attention(record_with({random_stochastic(rng)}), {}, Aggregation::MeanHeads)[0];
  std::istringstream in(render_heatmap(m, "csv"));
  std::string line;
  for (std::size_t r = 0; r < 7; ++r) {
    ASSERT_TRUE(std::getline(in, line));
    std::istringstream cells(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(cells, cell, ',')) EXPECT_NEAR(std::stod(cell), m.at(r, c++), 5e-7);
    EXPECT_EQ(c, 7u);
  }
  ASSERT_TRUE(std::getline(in, line));
  EXPECT_EQ(line.rfind("saliency,", 0), 0u);
  EXPECT_NEAR(std::stod(line.substr(9)), m.saliency, 5e-7);
  EXPECT_FALSE(std::getline(in, line));
}

TEST(RenderHeatmap, PgmScaling) {
  Heatmap m;
  m.rows = 2;
  m.cols = 3;
  m.grid = {0, 0, 0, 0, 0, 0};
  EXPECT_EQ(render_heatmap(m, "pgm"), "P2\n3 2\n255\n0 0 0\n0 0 0\n");
  m.grid = {0.1, 0.2, 0.05, 0, 0.4, 0.3};
  EXPECT_EQ(render_heatmap(m, "pgm"), "P2\n3 2\n255\n64 128 32\n0 255 191\n");
  EXPECT_THROW(render_heatmap(m, "png"), ContractError);
}

TEST(Scenario, JsonRoundTripAndHash) {
  auto s = two_agent_scenario(5, 5);
  s.expected_action = "right";
  s.conditional_states = "g_pos";
  nlohmann::json j = s;
  auto back = j.get<Scenario>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(scenario_hash(back), scenario_hash(s));
  back.agents[0].x = 6;
  EXPECT_NE(scenario_hash(back), scenario_hash(s));
  j["expected_action"] = "jump";
  EXPECT_THROW(j.get<Scenario>(), ConfigError);
}

TEST(Scenario, ValidationListsOffendingCells) {
  auto spec = env::load_map("#####\n#bbb#\n#bBb#\n#####\n");
  Scenario s;
  s.agents = {{std::nullopt, 'A', 0, 0}, {std::nullopt, 'B', 2, 2}, {std::nullopt, 'C', 9, 1}};
  s.objects = {{env::ObjectType::Star, 2, 2}, {env::ObjectType::Triangle, 1, 1}};
  s.observer = 4;
  auto v = validate_scenario(s, spec);
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v[0].x, 0);
  EXPECT_NE(v[0].reason.find("wall"), std::string::npos);
  EXPECT_EQ(v[1].x, 9);
  EXPECT_NE(v[1].reason.find("outside"), std::string::npos);
  EXPECT_EQ(v[2].x, 2);
  EXPECT_NE(v[2].reason.find("overlaps"), std::string::npos);
  EXPECT_NE(v[3].reason.find("observer"), std::string::npos);
  s.agents = {{std::nullopt, 'A', 1, 1}, {std::nullopt, 'B', 2, 2}};
  s.objects = {{env::ObjectType::Star, 3, 2}};
  s.observer = 1;
  EXPECT_TRUE(validate_scenario(s, spec).empty());
  std::vector<env::AgentSpec> roster = {env::standard_agent('A')};
  s.agents[1].id = 0;
  EXPECT_EQ(validate_scenario(s, spec, &roster).size(), 1u);
}

TEST(RunScenario, ReportShapeAndErrors) {
  auto set = fixtures::tiny_policies(Variant::Da6Dqn, {env::ConditionalKind::GPos});
  auto s = two_agent_scenario(5, 5);
  s.expected_action = "up";
  auto r = run_scenario(s, set);
  EXPECT_EQ(r.network, 0u);
  ASSERT_EQ(r.heatmaps.size(), 1u);
  EXPECT_NEAR(r.heatmaps[0].total(), 1.0, 1e-5);
  ASSERT_EQ(r.cm.size(), 1u);
  EXPECT_EQ(r.cm[0].name, "g_pos");
  EXPECT_EQ(r.cm[0].tokens.size(), 9u);
  auto j = report_json(r);
  EXPECT_EQ(j["scores"].size(), 4u);
  EXPECT_EQ(j["conditional_states"], "g_pos");
  EXPECT_TRUE(j.contains("matches_expected"));
  EXPECT_EQ(run_scenario(s, set, {{}, Aggregation::PerHead}).heatmaps.size(), 2u);

  s.agents[1] = {std::nullopt, 'B', 5, 5};
  EXPECT_THROW(run_scenario(s, set), ScenarioError);
  s = two_agent_scenario(5, 5);
  s.map_hash = "0000000000000000";
  EXPECT_THROW(run_scenario(s, set), ConfigError);
  auto baseline = fixtures::tiny_policies(Variant::Dqn, {env::ConditionalKind::GPos});
  EXPECT_THROW(run_scenario(two_agent_scenario(5, 5), baseline), ConfigError);
}

// With identical local windows the DA3 network sees identical inputs wherever
// the agent stands; DA6 additionally sees its global position.
TEST(RunScenario, Da3IgnoresGlobalPositionAndDa6DoesNot) {
  auto da3 = fixtures::tiny_policies(Variant::Da3Dqn, {});
  auto da6 = fixtures::tiny_policies(Variant::Da6Dqn, {env::ConditionalKind::GPos});
  auto a = two_agent_scenario(5, 5), b = two_agent_scenario(15, 15);
  auto r3a = run_scenario(a, da3), r3b = run_scenario(b, da3);
  EXPECT_EQ(r3a.heatmaps[0].grid, r3b.heatmaps[0].grid);
  EXPECT_EQ(r3a.scores, r3b.scores);
  auto r6a = run_scenario(a, da6), r6b = run_scenario(b, da6);
  double diff = 0;
  for (std::size_t k = 0; k < 49; ++k) diff += std::abs(r6a.heatmaps[0].grid[k] - r6b.heatmaps[0].grid[k]);
  EXPECT_GT(diff, 1e-6);
}

TEST(CompareVariants, WritesIndexAndRenders) {
  auto out = std::filesystem::temp_directory_path() / "da6_compare_test";
  std::filesystem::remove_all(out);
  std::vector<train::PolicySet> sets = {fixtures::tiny_policies(Variant::Da3Dqn, {}, 3, "da3"),
                                        fixtures::tiny_policies(Variant::Da6Dqn, {env::ConditionalKind::GPos}, 3, "da6")};
  auto s = two_agent_scenario(5, 5);
  auto index = compare_variants(s, sets, out);
  EXPECT_EQ(index["entries"].size(), 2u);
  EXPECT_EQ(index["scenario_hash"], scenario_hash(s));
  EXPECT_EQ(index["entries"][1]["scenario_hash"], scenario_hash(s));
  EXPECT_TRUE(std::filesystem::exists(out / "index.json"));
  EXPECT_TRUE(std::filesystem::exists(out / "1-da6" / "heatmap.pgm"));
  EXPECT_TRUE(std::filesystem::exists(out / "0-da3" / "report.json"));

  sets[1].spec = env::load_map("ggg\ngBg\nggg\n");
  EXPECT_THROW(compare_variants(s, sets, out), ConfigError);
  sets.pop_back();
  EXPECT_THROW(compare_variants(s, sets, out), ConfigError);
  std::filesystem::remove_all(out);
}

TEST(Scenario, StagedScenariosAreLegalOnTheDefaultMap) {
  const auto spec = env::load_map(read_file(std::string(DA6_DATA_DIR) + "/maps/default.txt"));
  for (const char* name : {"region_top_alone", "region_top_yield", "region_bottom_alone", "region_bottom_no_yield",
                           "context_two_triangles", "context_two_triangles_with_c", "context_far_cluster",
                           "context_far_cluster_with_c"}) {
    const auto s = load_scenario(std::string(DA6_DATA_DIR) + "/scenarios/" + name + ".json");
    EXPECT_TRUE(s.approximate);
    EXPECT_EQ(s.agents[s.observer].type, 'B');
    EXPECT_TRUE(validate_scenario(s, spec).empty()) << name;
  }
}
