#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "oracles.hpp"

using namespace attnhybrid;
using oracle::random_tensor;

namespace {

Heatmap make_map(std::size_t h, std::size_t w, std::vector<double> v, ExplainMethod m = ExplainMethod::attention) {
  Heatmap map;
  map.height = h;
  map.width = w;
  map.values = std::move(v);
  map.method = m;
  map.record_bounds();
  return map;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("attnhybrid_" + name)).string();
}

std::vector<unsigned char> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Minimal P5 reader for headers written as "P5\n<w> <h>\n255\n".
std::vector<unsigned char> parse_p5(const std::vector<unsigned char>& bytes, std::size_t& w, std::size_t& h) {
  std::string text(bytes.begin(), bytes.end());
  std::size_t pos = 0;
  auto token = [&] {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    return text.substr(start, pos - start);
  };
  EXPECT_EQ(token(), "P5");
  w = std::stoul(token());
  h = std::stoul(token());
  EXPECT_EQ(token(), "255");
  ++pos;
  return {bytes.begin() + static_cast<long>(pos), bytes.end()};
}

ModelGraph mini_with_ga(std::size_t block, std::uint64_t seed) {
  auto r = parse_recipe_label("mini_resnet");
  r.attach_ga_after = {block};
  r.seed = seed;
  return build(r);
}

Tensor toy_input(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({3, 32, 32}, rng, 0, 1);
}

}  // namespace

// -------------------------------------------------------------- Grad-CAM

TEST(GradCamMap, UnitWeightReturnsRectifiedActivation) {
  const std::vector<double> act{0.5, -1.0, 2.0, 0.0, -0.25, 3.0};
  const std::vector<double> ones(act.size(), 1.0);
  EXPECT_EQ(gradcam_map(act, ones, 1, act.size()), (std::vector<double>{0.5, 0.0, 2.0, 0.0, 0.0, 3.0}));
}

TEST(GradCamMap, NegativeWeightsOnNonNegativeActivationsGiveZero) {
  const std::vector<double> act{0.5, 1.0, 2.0, 0.0, 0.3, 0.7, 0.1, 4.0};
  const std::vector<double> grads{-1.0, -0.5, -2.0, 0.1, -0.3, -0.2, -0.1, -0.4};
  for (double v : gradcam_map(act, grads, 2, 4)) EXPECT_EQ(v, 0.0);
}

TEST(GradCamMap, TwoChannelHandOracle) {
  // channel weights: mean of grads = 0.5 and -0.25
  const std::vector<double> act{1, 2, 3, 4, 4, 0, 2, 8};
  const std::vector<double> grads{0.5, 0.5, 0.5, 0.5, -1.0, 0.0, 0.0, 0.0};
  const std::vector<double> expected{0.5 * 1 - 0.25 * 4, 0.5 * 2 - 0.25 * 0, 0.5 * 3 - 0.25 * 2,
                                     0.5 * 4 - 0.25 * 8};
  const auto map = gradcam_map(act, grads, 2, 4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(map[i], std::max(expected[i], 0.0), 1e-15);
  EXPECT_EQ(weighted_activation_map(act, std::vector<double>{0.5, -0.25}, 4), map);
}

TEST(ResizeBilinear, CornerAligned) {
  const std::vector<double> in{0.0, 1.0, 2.0, 3.0};
  const auto same = resize_bilinear(in, 2, 2, 2, 2);
  EXPECT_EQ(same, in);
  const auto up = resize_bilinear(in, 2, 2, 3, 3);
  const std::vector<double> expected{0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(up[i], expected[i], 1e-15);
}

TEST(GradCam, NonNegativeAtInputResolution) {
  const ModelGraph g = mini_with_ga(1, 3);
  for (std::uint64_t s = 0; s < 5; ++s) {
    for (const char* layer : {"block1", "block1.ga", "block3", "block4"}) {
      const Heatmap m = grad_cam(g, toy_input(s), layer);
      EXPECT_EQ(m.height, 32u);
      EXPECT_EQ(m.width, 32u);
      EXPECT_EQ(m.method, ExplainMethod::gradcam);
      ASSERT_TRUE(m.class_index.has_value());
      for (double v : m.values) EXPECT_GE(v, 0.0);
    }
  }
}

// Channel weights recovered by finite differences: perturbing a whole
// channel by eps changes the class score by eps * sum of its gradient.
TEST(GradCam, MatchesFiniteDifferenceChannelWeights) {
  const ModelGraph g = mini_with_ga(2, 4);
  const Tensor x = Tensor(Shape{1, 3, 32, 32}, oracle::values(toy_input(7)));
  const std::string layer = "block4";
  const Heatmap m = grad_cam(g, x, layer, 1);
  Tensor act;
  auto score = [&](std::size_t channel, double eps) {
    NoGradGuard guard;
    ForwardContext ctx;
    const Tensor logits = g.forward(x, ctx, [&](const std::string& name, Tensor y) {
      if (name != layer) return y;
      act = y;
      if (eps == 0.0) return y;
      Tensor z(y.shape(), oracle::values(y));
      const std::size_t plane = y.size(2) * y.size(3);
      for (std::size_t p = 0; p < plane; ++p) z.data()[channel * plane + p] += eps;
      return z;
    });
    return logits.data()[1];
  };
  score(0, 0.0);
  const std::size_t C = act.size(1), h = act.size(2), w = act.size(3);
  std::vector<double> weights(C);
  const double eps = 1e-5;
  for (std::size_t c = 0; c < C; ++c) {
    weights[c] = (score(c, eps) - score(c, -eps)) / (2 * eps) / static_cast<double>(h * w);
  }
  std::vector<double> cam(h * w, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < h * w; ++p) cam[p] += weights[c] * act.data()[c * h * w + p];
  for (auto& v : cam) v = std::max(v, 0.0);
  const auto expected = resize_bilinear(cam, h, w, 32, 32);
  EXPECT_LE(oracle::max_rel_diff(m.values, expected), 1e-6);
  EXPECT_EQ(m.class_index, 1);
}

TEST(GradCam, LeavesParameterGradientsUntouched) {
  const ModelGraph g = mini_with_ga(1, 5);
  for (auto& p : g.parameters()) EXPECT_FALSE(p.has_grad());
  grad_cam(g, toy_input(1), "block2");
  for (auto& p : g.parameters()) EXPECT_FALSE(p.has_grad());
}

TEST(GradCam, Errors) {
  const ModelGraph g = mini_with_ga(1, 6);
  EXPECT_THROW(grad_cam(g, toy_input(0), "head"), std::invalid_argument);
  EXPECT_THROW(grad_cam(g, toy_input(0), "block9"), std::invalid_argument);
  EXPECT_THROW(grad_cam(g, toy_input(0), "block4", 3), std::invalid_argument);
}

// ------------------------------------------------------------- attention

TEST(AttentionMap, SumsToOneAndMatchesRowAverage) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const ModelGraph g = mini_with_ga(1 + s % 3, s);
    const std::string layer = g.nodes_of_kind("ga").front();
    const Tensor x = toy_input(100 + s);
    const Heatmap m = attention_map(g, x);
    double total = 0.0;
    for (double v : m.values) total += v;
    EXPECT_NEAR(total, 1.0, 1e-10);

    // Recompute the attention weights from the block input with the stored
    // projections.
    Tensor before;
    Tensor last;
    {
      NoGradGuard guard;
      ForwardContext ctx;
      g.forward(Tensor(Shape{1, 3, 32, 32}, oracle::values(x)), ctx, [&](const std::string& name, Tensor y) {
        if (name == layer) before = last;
        if (name.find('.') != std::string::npos) last = y;
        return y;
      });
    }
    const auto& p = dynamic_cast<const GlobalAttentionLayer&>(*g.find_node(layer)->layer).params();
    const std::size_t H = before.size(2), W = before.size(3);
    ASSERT_EQ(m.height, H);
    ASSERT_EQ(m.width, W);
    std::vector<std::vector<double>> q, k, v;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const auto px = oracle::pixel(before, 0, i, j);
        q.push_back(oracle::project(p.theta_w, p.theta_b, px));
        k.push_back(oracle::project(p.phi_w, p.phi_b, px));
        v.push_back(oracle::project(p.g_w, p.g_b, px));
      }
    std::vector<std::vector<double>> weights;
    oracle::attend_all(q, k, v, 1.0, &weights);
    std::vector<double> expected(H * W, 0.0);
    for (const auto& row : weights)
      for (std::size_t c = 0; c < row.size(); ++c) expected[c] += row[c] / static_cast<double>(H * W);
    EXPECT_LE(oracle::max_rel_diff(m.values, expected), 1e-10);
  }
}

TEST(AttentionMap, UniformAttention) {
  const ModelGraph g = mini_with_ga(2, 1);
  for (auto& nt : g.named_tensors()) {
    if (nt.name.rfind("block2.ga.theta", 0) == 0) {
      Tensor t = nt.tensor;
      std::fill(t.data().begin(), t.data().end(), 0.0);
    }
  }
  const Heatmap m = attention_map(g, toy_input(2));
  const double P = static_cast<double>(m.values.size());
  for (double v : m.values) EXPECT_NEAR(v, 1.0 / P, 1e-15);
}

TEST(AttentionMap, SinglePositionGivesOne) {
  Rng rng(0);
  GlobalAttentionLayer ga(8, AttentionConfig{}, rng);
  Tensor attn;
  ForwardContext ctx;
  ctx.on_attention = [&](const std::string&, const Tensor& a) { attn = a; };
  std::mt19937_64 r(1);
  ga.forward(random_tensor({1, 8, 1, 1}, r), ctx);
  ASSERT_EQ(attn.numel(), 1u);
  EXPECT_EQ(attn.data()[0], 1.0);
}

TEST(AttentionMap, DefinedWhenBlockDoesNotInfluenceLogits) {
  const ModelGraph g = mini_with_ga(1, 8);
  auto plain = parse_recipe_label("mini_resnet");
  plain.seed = 8;
  const ModelGraph base = build(plain);
  copy_matching_tensors(g, base);
  const Tensor x = toy_input(3);
  NoGradGuard guard;
  EXPECT_EQ(oracle::values(g.forward(Tensor(Shape{1, 3, 32, 32}, oracle::values(x)))),
            oracle::values(base.forward(Tensor(Shape{1, 3, 32, 32}, oracle::values(x)))));
  const Heatmap m = attention_map(g, x, "block1.ga");
  EXPECT_FALSE(m.values.empty());
  EXPECT_GT(m.hi, m.lo);
}

TEST(AttentionMap, VitLastEncoderPatchGrid) {
  auto r = parse_recipe_label("vit_tiny");
  r.input_size = 64;
  const ModelGraph g = build(r);
  std::mt19937_64 rng(4);
  const Heatmap m = attention_map(g, random_tensor({3, 64, 64}, rng, 0, 1));
  EXPECT_EQ(m.layer, g.nodes_of_kind("encoder").back());
  EXPECT_EQ(m.height * m.width, 16u);
  double total = 0.0;
  for (double v : m.values) total += v;
  EXPECT_NEAR(total, 1.0, 1e-10);
}

TEST(AttentionMap, Errors) {
  auto r = parse_recipe_label("mini_resnet+ga");
  const ModelGraph two = build(r);
  EXPECT_THROW(attention_map(two, toy_input(0)), std::invalid_argument);
  EXPECT_THROW(attention_map(two, toy_input(0), "block3"), std::invalid_argument);
  EXPECT_THROW(attention_map(two, toy_input(0), "stem.conv"), std::invalid_argument);
  EXPECT_NO_THROW(attention_map(two, toy_input(0), "block2.ga"));
  const ModelGraph none = build(parse_recipe_label("mini_resnet"));
  EXPECT_THROW(attention_map(none, toy_input(0)), std::invalid_argument);
}

// ----------------------------------------------------------- mean maps

TEST(MeanHeatmap, SingleMapIsItself) {
  const Heatmap m = make_map(2, 2, {0.1, 0.4, 0.2, 0.3});
  EXPECT_EQ(mean_heatmap({m}).values, m.values);
}

TEST(MeanHeatmap, MapAndComplementIsConstant) {
  const std::vector<double> v{0.1, 0.7, 0.25, 0.9, 0.0, 0.5};
  std::vector<double> c(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) c[i] = 2.0 - v[i];
  const Heatmap mean = mean_heatmap({make_map(2, 3, v), make_map(2, 3, c)});
  for (double x : mean.values) EXPECT_DOUBLE_EQ(x, 1.0);
  for (auto b : normalize_to_bytes(mean)) EXPECT_EQ(b, 128);
}

TEST(MeanHeatmap, TenRandomMapsMatchElementwiseOracle) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Heatmap> maps;
  std::vector<double> sums(12, 0.0);
  for (int i = 0; i < 10; ++i) {
    std::vector<double> v(12);
    for (std::size_t p = 0; p < 12; ++p) sums[p] += (v[p] = u(rng));
    maps.push_back(make_map(3, 4, v));
  }
  const Heatmap mean = mean_heatmap(maps);
  for (std::size_t p = 0; p < 12; ++p) EXPECT_NEAR(mean.values[p], sums[p] / 10.0, 1e-15);
}

TEST(MeanHeatmap, Errors) {
  EXPECT_THROW(mean_heatmap({}), std::invalid_argument);
  EXPECT_THROW(mean_heatmap({make_map(2, 2, {1, 2, 3, 4}), make_map(1, 4, {1, 2, 3, 4})}),
               std::invalid_argument);
  EXPECT_THROW(mean_heatmap({make_map(2, 2, {1, 2, 3, 4}), make_map(2, 2, {1, 2, 3, 4}, ExplainMethod::gradcam)}),
               std::invalid_argument);
}

// --------------------------------------------------------------- export

TEST(Export, MinMaxEndpointsAndMidpoint) {
  EXPECT_EQ(normalize_to_bytes(make_map(1, 3, {0.0, 0.5, 1.0})), (std::vector<std::uint8_t>{0, 128, 255}));
  EXPECT_EQ(normalize_to_bytes(make_map(1, 3, {-2.0, -1.0, 0.0})), (std::vector<std::uint8_t>{0, 128, 255}));
}

TEST(Export, ConstantMapIs128) {
  for (auto b : normalize_to_bytes(make_map(2, 2, {0.3, 0.3, 0.3, 0.3}))) EXPECT_EQ(b, 128);
}

TEST(Export, RoundTripAndByteStability) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 3);
  std::vector<double> v(7 * 5);
  for (auto& x : v) x = u(rng);
  const Heatmap m = make_map(5, 7, v);
  const auto a = temp_path("export_a.pgm"), b = temp_path("export_b.pgm");
  export_heatmap(m, a);
  export_heatmap(m, b);
  const auto bytes = file_bytes(a);
  EXPECT_EQ(bytes, file_bytes(b));
  std::size_t w = 0, h = 0;
  const auto pixels = parse_p5(bytes, w, h);
  EXPECT_EQ(w, 7u);
  EXPECT_EQ(h, 5u);
  const auto expected = normalize_to_bytes(m);
  EXPECT_EQ(std::vector<std::uint8_t>(pixels.begin(), pixels.end()), expected);
  const Image8 back = read_netpbm(a);
  EXPECT_EQ(back.pixels, expected);
  std::filesystem::remove(a);
  std::filesystem::remove(b);
  EXPECT_THROW(export_heatmap(m, "/nonexistent/dir/map.pgm"), std::runtime_error);
}
