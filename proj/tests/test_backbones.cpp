#include <cstring>
#include <filesystem>
#include <set>

#include "oracles.hpp"

using namespace attnhybrid;
using oracle::random_tensor;
using oracle::values;

namespace {

ArchitectureRecipe recipe(const std::string& label, std::size_t input = 0) {
  auto r = parse_recipe_label(label);
  r.input_size = input;
  return r;
}

void randomize_tensors(const ModelGraph& g, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3), pos(0.5, 1.5);
  for (auto& nt : g.named_tensors()) {
    Tensor t = nt.tensor;
    const bool var = nt.name.find("running_var") != std::string::npos;
    for (auto& v : t.data()) v = var ? pos(rng) : u(rng);
  }
}

// Relative logit difference between `label` and its unmodified backbone
// after copying every shared tensor.
std::vector<double> logit_gaps(const std::string& label, std::size_t input, std::size_t inputs,
                               std::uint64_t seed) {
  ArchitectureRecipe plain = recipe(label, input);
  plain.attach_ga_after = {};
  plain.replace_last_block_with = Replacement::none;
  const ModelGraph base = build(plain);
  randomize_tensors(base, seed);
  const ModelGraph mod = build(recipe(label, input));
  copy_matching_tensors(base, mod);
  std::mt19937_64 rng(seed + 1);
  std::vector<double> gaps;
  NoGradGuard guard;
  for (std::size_t i = 0; i < inputs; ++i) {
    const std::size_t side = base.recipe.resolved_input_size();
    const Tensor x = random_tensor({1, 3, side, side}, rng, 0, 1);
    gaps.push_back(oracle::max_rel_diff(mod.forward(x).data(), base.forward(x).data()));
  }
  return gaps;
}

}  // namespace

// Reference parameter counts in millions and signed deltas in percent,
// 3-class heads.
TEST(ParameterCounts, MatchReferenceCounts) {
  const std::vector<std::pair<std::string, std::pair<double, double>>> expected{
      {"resnet18", {11.18, 0.0}},         {"resnet18+ga", {11.22, 0.37}},
      {"resnet18+la", {5.67, -49.25}},    {"resnet18+ga+la", {5.71, -48.87}},
      {"resnet18+ela", {14.98, 34.02}},   {"resnet18+ga+ela", {15.02, 34.40}},
      {"efficientnet_b0", {4.01, 0.0}},   {"efficientnet_b0+ga", {4.02, 0.12}},
      {"efficientnet_b0+la", {3.48, -13.29}}, {"efficientnet_b0+ga+la", {3.48, -13.17}},
      {"efficientnet_b0+ela", {4.30, 7.16}},  {"efficientnet_b0+ga+ela", {4.30, 7.27}},
      {"vit_tiny", {5.49, 0.0}}};
  const auto rows = count_rows(standard_count_recipes(3));
  ASSERT_EQ(rows.size(), expected.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].recipe, expected[i].first);
    const double millions = static_cast<double>(rows[i].params) / 1e6;
    EXPECT_LE(std::fabs(millions - expected[i].second.first) / expected[i].second.first, 0.01) << rows[i].recipe;
    EXPECT_LE(std::fabs(rows[i].delta_percent - expected[i].second.second), 0.5) << rows[i].recipe;
  }
}

TEST(ParameterCounts, Monotonicity) {
  for (const char* b : {"resnet18", "efficientnet_b0", "mini_resnet", "mini_efficientnet"}) {
    const std::string base(b);
    const auto n = count_parameters(build(recipe(base)));
    EXPECT_GT(count_parameters(build(recipe(base + "+ga"))), n);
    EXPECT_LT(count_parameters(build(recipe(base + "+la"))), n);
    EXPECT_GT(count_parameters(build(recipe(base + "+ela"))), n);
  }
}

TEST(ParameterCounts, RunningStatisticsExcluded) {
  const ModelGraph g = build(recipe("mini_resnet"));
  std::size_t learnable = 0, buffers = 0;
  for (auto& nt : g.named_tensors()) (nt.learnable ? learnable : buffers) += nt.tensor.numel();
  EXPECT_GT(buffers, 0u);
  EXPECT_EQ(count_parameters(g), learnable);
}

TEST(ModelGraph, EveryTensorReachableOnce) {
  for (const char* label : {"resnet18+ga+ela", "efficientnet_b0+ga+la", "vit_tiny", "mini_efficientnet+ga+ela"}) {
    const ModelGraph g = build(recipe(label));
    std::set<std::string> names;
    std::set<const void*> storage;
    for (auto& nt : g.named_tensors()) {
      EXPECT_TRUE(names.insert(nt.name).second) << nt.name;
      EXPECT_TRUE(storage.insert(nt.tensor.impl().get()).second) << nt.name;
    }
  }
}

TEST(Build, ResNetGaSeams) {
  const ModelGraph g = build(recipe("resnet18+ga"));
  EXPECT_EQ(g.nodes_of_kind("ga"), (std::vector<std::string>{"block1.ga", "block2.ga"}));
  EXPECT_EQ(g.blocks.size(), 4u);
}

TEST(Build, EfficientNetGaChannelsMatchBlocks) {
  const ModelGraph g = build(recipe("efficientnet_b0+ga"));
  EXPECT_EQ(g.nodes_of_kind("ga"), (std::vector<std::string>{"block2.ga", "block3.ga"}));
  EXPECT_EQ(g.blocks.size(), 7u);
  for (std::size_t b : {2u, 3u}) {
    const auto* node = g.find_node("block" + std::to_string(b) + ".ga");
    ASSERT_NE(node, nullptr);
    const auto& ga = dynamic_cast<const GlobalAttentionLayer&>(*node->layer);
    EXPECT_EQ(ga.channels(), g.block_channels[b - 1]);
  }
}

TEST(Build, UnmodifiedRecipeEqualsPlainBackbone) {
  for (const char* b : {"resnet18", "efficientnet_b0", "mini_resnet", "vit_tiny"}) {
    ArchitectureRecipe r = recipe(b);
    r.attach_ga_after = {};
    r.replace_last_block_with = Replacement::none;
    EXPECT_EQ(build(r).structure(), build(recipe(b)).structure());
  }
}

TEST(Build, MiniVariantsKeepBlockTopology) {
  EXPECT_EQ(build(recipe("mini_resnet")).blocks.size(), 4u);
  EXPECT_EQ(build(recipe("mini_efficientnet")).blocks.size(), 7u);
  EXPECT_EQ(build(recipe("mini_resnet")).recipe.resolved_input_size(), 32u);
}

TEST(Build, ResNetReplacementKeepsSkipProjection) {
  const ModelGraph g = build(recipe("resnet18+la"));
  ASSERT_EQ(g.blocks[3].size(), 2u);
  EXPECT_EQ(g.blocks[3][0].layer->signature(),
            "basic[la(256->512,k3,h4,s2,rel),la(512->512,k3,h4,s1,rel),ds]");
  EXPECT_EQ(g.blocks[3][1].layer->signature(), "basic[la(512->512,k3,h4,s1,rel),la(512->512,k3,h4,s1,rel)]");
  for (std::size_t b = 0; b < 3; ++b)
    for (const auto& n : g.blocks[b]) EXPECT_EQ(n.layer->signature().find("la("), std::string::npos);
}

TEST(Build, RejectsInvalidRecipes) {
  auto vit = recipe("vit_tiny");
  vit.attach_ga_after = {1};
  EXPECT_THROW(build(vit), std::invalid_argument);
  vit.attach_ga_after = {};
  vit.replace_last_block_with = Replacement::la;
  EXPECT_THROW(build(vit), std::invalid_argument);
  auto r = recipe("resnet18");
  r.attach_ga_after = {5};
  EXPECT_THROW(build(r), std::invalid_argument);
  EXPECT_THROW(parse_recipe_label("resnet50"), std::invalid_argument);
  EXPECT_THROW(parse_recipe_label("resnet18+xla"), std::invalid_argument);
}

TEST(IdentityAtInit, MiniGraphs) {
  for (const char* label : {"mini_resnet+ga", "mini_resnet+ela", "mini_resnet+ga+ela", "mini_efficientnet+ga",
                            "mini_efficientnet+ela", "mini_efficientnet+ga+ela"}) {
    for (double gap : logit_gaps(label, 0, 4, 11)) EXPECT_LE(gap, 1e-9) << label;
  }
}

TEST(IdentityAtInit, FullSizeGraphsAtReducedResolution) {
  for (const char* label : {"resnet18+ga+ela", "efficientnet_b0+ga+ela"}) {
    for (double gap : logit_gaps(label, 64, 2, 12)) EXPECT_LE(gap, 1e-9) << label;
  }
}

TEST(IdentityAtInit, LocalAttentionReplacementChangesLogits) {
  for (const char* label : {"mini_resnet+la", "mini_efficientnet+la"}) {
    for (double gap : logit_gaps(label, 0, 4, 13)) EXPECT_GT(gap, 0.0) << label;
  }
}

// ------------------------------------------------------------ serialization

TEST(Serialization, RoundTripIsBitwise) {
  ArchitectureRecipe r = recipe("mini_resnet+ga+ela");
  r.seed = 5;
  const ModelGraph g = build(r);
  randomize_tensors(g, 3);
  const auto path = (std::filesystem::temp_directory_path() / "attnhybrid_roundtrip.bin").string();
  save_model(g, path);
  const ModelGraph back = load_model(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.structure(), g.structure());
  EXPECT_EQ(count_parameters(back), count_parameters(g));
  const auto a = g.named_tensors(), b = back.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(0, std::memcmp(a[i].tensor.data().data(), b[i].tensor.data().data(), a[i].tensor.numel() * 8));
  }
  EXPECT_EQ(serialize_model(back), serialize_model(g));
}

TEST(Serialization, CorruptFilesRejected) {
  const ModelGraph g = build(recipe("mini_resnet"));
  const auto bytes = serialize_model(g);
  auto flipped = bytes;
  flipped[0] ^= 0x20;
  EXPECT_THROW(deserialize_model(flipped), std::runtime_error);
  auto version = bytes;
  version[8] = 9;
  EXPECT_THROW(deserialize_model(version), std::runtime_error);
  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_model(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(cut))),
                 std::runtime_error);
  }
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_model(trailing), std::runtime_error);
  EXPECT_THROW(load_model("/nonexistent/model.bin"), std::runtime_error);
}
