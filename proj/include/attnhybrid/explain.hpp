#pragma once
// Grad-CAM and attention-map explanations, corpus means and PGM export.

#include <optional>

#include "attnhybrid/backbones.hpp"
#include "attnhybrid/image.hpp"

namespace attnhybrid {

enum class ExplainMethod { gradcam, attention };

inline std::string to_string(ExplainMethod m) { return m == ExplainMethod::gradcam ? "gradcam" : "attention"; }

struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major, before export normalization
  ExplainMethod method = ExplainMethod::gradcam;
  std::string layer;
  std::optional<int> class_index;  // Grad-CAM only
  double lo = 0.0, hi = 0.0;       // value range before normalization

  double at(std::size_t y, std::size_t x) const { return values.at(y * width + x); }

  void record_bounds() {
    if (values.empty()) throw std::invalid_argument("heatmap: empty");
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    lo = *mn;
    hi = *mx;
  }
};

/// Corner-aligned bilinear resize of an h x w map to H x W.
inline std::vector<double> resize_bilinear(std::span<const double> in, std::size_t h, std::size_t w,
                                           std::size_t H, std::size_t W) {
  std::vector<double> out(H * W);
  auto coord = [](std::size_t o, std::size_t n_out, std::size_t n_in) {
    return n_out == 1 || n_in == 1 ? 0.0
                                   : static_cast<double>(o) * static_cast<double>(n_in - 1) /
                                         static_cast<double>(n_out - 1);
  };
  for (std::size_t y = 0; y < H; ++y) {
    const double sy = coord(y, H, h);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double sx = coord(x, W, w);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      out[y * W + x] = (1 - fy) * ((1 - fx) * in[y0 * w + x0] + fx * in[y0 * w + x1]) +
                       fy * ((1 - fx) * in[y1 * w + x0] + fx * in[y1 * w + x1]);
    }
  }
  return out;
}

/// max(0, sum_c weights[c] * activations[c]) for activations [C,h,w].
inline std::vector<double> weighted_activation_map(std::span<const double> activations,
                                                   std::span<const double> weights, std::size_t plane) {
  if (activations.size() != weights.size() * plane) {
    throw std::invalid_argument("weighted_activation_map: activations do not match channel weights");
  }
  std::vector<double> cam(plane, 0.0);
  for (std::size_t c = 0; c < weights.size(); ++c)
    for (std::size_t p = 0; p < plane; ++p) cam[p] += weights[c] * activations[c * plane + p];
  for (auto& v : cam) v = std::max(v, 0.0);
  return cam;
}

/// Channel weights are spatial means of d(score)/d(activation).
inline std::vector<double> gradcam_map(std::span<const double> activations, std::span<const double> grads,
                                       std::size_t channels, std::size_t plane) {
  if (activations.size() != channels * plane || grads.size() != channels * plane) {
    throw std::invalid_argument("gradcam_map: buffers do not match [C,h,w]");
  }
  std::vector<double> weights(channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) weights[c] += grads[c * plane + p];
    weights[c] /= static_cast<double>(plane);
  }
  return weighted_activation_map(activations, weights, plane);
}

namespace detail {

inline Tensor as_single_batch(const Tensor& input) {
  if (input.rank() == 3) {
    Shape s{1};
    s.insert(s.end(), input.shape().begin(), input.shape().end());
    return Tensor(s, std::vector<double>(input.data().begin(), input.data().end()));
  }
  if (input.rank() == 4 && input.size(0) == 1) return input.detach();
  throw std::invalid_argument("explain: expected one image [C,H,W] or [1,C,H,W], got " +
                              shape_str(input.shape()));
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace detail

/// Grad-CAM at `layer` (a node name or "block<b>") for `target_class`, or for
/// the predicted class when none is given. Gradients are computed into
/// per-call buffers; parameter .grad state is not touched.
inline Heatmap grad_cam(const ModelGraph& model, const Tensor& input, const std::string& layer,
                        std::optional<int> target_class = std::nullopt) {
  const Tensor x = detail::as_single_batch(input);
  Tensor activation;
  bool found = false;
  ForwardContext ctx;
  const Tensor logits = model.forward(x, ctx, [&](const std::string& name, Tensor y) {
    if (name != layer) return y;
    if (y.rank() != 4) {
      throw std::invalid_argument("grad_cam: layer '" + layer + "' produces " + shape_str(y.shape()) +
                                  ", not a spatial [N,C,H,W] map");
    }
    found = true;
    activation = y.detach();
    activation.set_requires_grad(true);
    return activation;
  });
  if (!found) throw std::invalid_argument("grad_cam: no layer named '" + layer + "'");
  const std::size_t K = logits.size(1);
  const int target = target_class ? *target_class : static_cast<int>(detail::argmax(logits.data()));
  if (target < 0 || static_cast<std::size_t>(target) >= K) {
    throw std::invalid_argument("grad_cam: class " + std::to_string(target) + " outside [0, " +
                                std::to_string(K) + ")");
  }
  Tensor onehot({1, K}, 0.0);
  onehot.data()[static_cast<std::size_t>(target)] = 1.0;
  const Tensor score = sum(mul(logits, onehot));
  const auto grads = gradients(score, std::span<const Tensor>(&activation, 1));
  const std::size_t C = activation.size(1), h = activation.size(2), w = activation.size(3);
  const auto cam = gradcam_map(activation.data(), grads[0], C, h * w);
  Heatmap map;
  map.height = x.size(2);
  map.width = x.size(3);
  map.values = resize_bilinear(cam, h, w, map.height, map.width);
  map.method = ExplainMethod::gradcam;
  map.layer = layer;
  map.class_index = target;
  map.record_bounds();
  return map;
}

/// Mean over query rows of the attention distribution emitted by `layer`
/// (a GA node, or a ViT encoder). Empty `layer` selects the only GA block,
/// or for ViT the last encoder.
inline Heatmap attention_map(const ModelGraph& model, const Tensor& input, std::string layer = {}) {
  if (layer.empty()) {
    if (model.recipe.backbone == Backbone::vit_tiny) {
      const auto enc = model.nodes_of_kind("encoder");
      layer = enc.back();
    } else {
      const auto ga = model.nodes_of_kind("ga");
      if (ga.size() != 1) {
        throw std::invalid_argument("attention_map: model has " + std::to_string(ga.size()) +
                                    " GA blocks; name one with --layer");
      }
      layer = ga.front();
    }
  }
  const LayerNode* node = model.find_node(layer);
  if (!node || (node->layer->kind() != "ga" && node->layer->kind() != "encoder")) {
    throw std::invalid_argument("attention_map: '" + layer + "' is not an attention layer");
  }
  const Tensor x = detail::as_single_batch(input);
  Tensor attn;
  std::size_t grid_h = 0, grid_w = 0;
  ForwardContext ctx;
  ctx.on_attention = [&](const std::string& name, const Tensor& a) {
    if (name == layer) attn = a;
  };
  {
    NoGradGuard no_grad;
    model.forward(x, ctx, [&](const std::string& name, Tensor y) {
      if (name == layer && y.rank() == 4) {
        grid_h = y.size(2);
        grid_w = y.size(3);
      }
      return y;
    });
  }
  if (!attn.defined()) throw std::invalid_argument("attention_map: '" + layer + "' emitted no attention weights");

  Heatmap map;
  map.method = ExplainMethod::attention;
  map.layer = layer;
  if (attn.rank() == 3) {
    // GA: [1, P, P]
    const std::size_t P = attn.size(1);
    map.height = grid_h;
    map.width = grid_w;
    map.values.assign(P, 0.0);
    auto a = attn.data();
    for (std::size_t q = 0; q < P; ++q)
      for (std::size_t k = 0; k < P; ++k) map.values[k] += a[q * P + k];
    for (auto& v : map.values) v /= static_cast<double>(P);
  } else {
    // ViT: [1, heads, T, T] with the class token first; heads averaged, class
    // token column dropped and the map renormalized over the patch grid.
    const std::size_t heads = attn.size(1), T = attn.size(2), patches = T - 1;
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
    if (side * side != patches) throw std::logic_error("attention_map: token count is not a square grid");
    map.height = map.width = side;
    map.values.assign(patches, 0.0);
    auto a = attn.data();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < T; ++q)
        for (std::size_t k = 1; k < T; ++k) map.values[k - 1] += a[(h * T + q) * T + k];
    const double total = std::accumulate(map.values.begin(), map.values.end(), 0.0);
    for (auto& v : map.values) v /= total;
  }
  map.record_bounds();
  return map;
}

/// Elementwise mean of raw (pre-normalization) values.
inline Heatmap mean_heatmap(const std::vector<Heatmap>& maps) {
  if (maps.empty()) throw std::invalid_argument("mean_heatmap: no maps");
  Heatmap out = maps.front();
  for (std::size_t i = 1; i < maps.size(); ++i) {
    if (maps[i].height != out.height || maps[i].width != out.width) {
      throw std::invalid_argument("mean_heatmap: map " + std::to_string(i) + " is " +
                                  std::to_string(maps[i].height) + "x" + std::to_string(maps[i].width) +
                                  ", expected " + std::to_string(out.height) + "x" + std::to_string(out.width));
    }
    if (maps[i].method != out.method) throw std::invalid_argument("mean_heatmap: mixed methods");
    for (std::size_t p = 0; p < out.values.size(); ++p) out.values[p] += maps[i].values[p];
  }
  for (auto& v : out.values) v /= static_cast<double>(maps.size());
  if (!std::all_of(maps.begin(), maps.end(), [&](const Heatmap& m) { return m.class_index == out.class_index; }))
    out.class_index.reset();
  out.record_bounds();
  return out;
}

/// Min-max scaling to [0,255] with round-half-up; a constant map becomes 128.
inline std::vector<std::uint8_t> normalize_to_bytes(const Heatmap& map) {
  const auto [mn, mx] = std::minmax_element(map.values.begin(), map.values.end());
  std::vector<std::uint8_t> out(map.values.size(), 128);
  const double lo = *mn, range = *mx - *mn;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = (map.values[i] - lo) / range;
    out[i] = static_cast<std::uint8_t>(std::clamp(std::floor(v * 255.0 + 0.5), 0.0, 255.0));
  }
  return out;
}

inline void export_heatmap(const Heatmap& map, const std::string& path) {
  Image8 img;
  img.width = map.width;
  img.height = map.height;
  img.channels = 1;
  img.pixels = normalize_to_bytes(map);
  write_netpbm(path, img);
}

}  // namespace attnhybrid
