#pragma once
/*
 * Self-attention blocks for convolutional backbones.
 *
 *  global_attention  - non-local block: every position attends to every
 *                      position (embedded-Gaussian form), followed by a 1x1
 *                      output projection + BatchNorm and a residual add.
 *  la_forward        - local self-attention over the k x k neighbourhood of
 *                      each pixel, built from three bias-free 1x1 projections
 *                      plus learnable relative-position terms.
 *  ela_forward       - local attention on a side branch around the original
 *                      convolution, joined through a 1x1 output projection.
 *  multi_head_self_attention - transformer-encoder attention over tokens.
 *
 * With a zero output projection, global_attention and ela_forward reproduce
 * their residual / wrapped path bit for bit.
 */

#include <cmath>
#include <string>
#include <utility>

#include "attnhybrid/ops.hpp"

namespace attnhybrid {

enum class AttentionKind { ga, la, ela, mhsa };
enum class ProjectionInit { zero, random };

struct AttentionConfig {
  AttentionKind kind = AttentionKind::ga;
  std::size_t k = 3;                  // LA/ELA neighbourhood size (odd)
  std::size_t heads = 4;              // LA/ELA/MHSA heads
  std::size_t channel_reduction = 2;  // GA bottleneck divisor
  bool rel_pos = true;                // LA relative-position embeddings
  ProjectionInit out_proj_init = ProjectionInit::zero;

  void validate_neighbourhood() const {
    if (k == 0 || k % 2 == 0) {
      throw std::invalid_argument("attention: neighbourhood size k=" +
                                  std::to_string(k) + " must be odd and >= 1");
    }
  }
  void validate_heads(std::size_t channels) const {
    if (heads == 0 || channels % heads != 0) {
      throw std::invalid_argument("attention: heads=" + std::to_string(heads) +
                                  " must divide " + std::to_string(channels) +
                                  " channels");
    }
  }
  void validate_reduction(std::size_t channels) const {
    if (channel_reduction == 0 || channels % channel_reduction != 0) {
      throw std::invalid_argument(
          "attention: channel_reduction=" + std::to_string(channel_reduction) +
          " must divide " + std::to_string(channels) + " channels");
    }
  }
};

// ----------------------------------------------------------- neighbourhoods

/// N_k(i,j): positions (a,b) with |a-i| < k/2 and |b-j| < k/2, clipped to
/// the H x W map.
struct NeighborhoodSpec {
  std::size_t i = 0, j = 0;
  std::size_t k = 1;
  std::size_t height = 1, width = 1;

  bool contains(long a, long b) const {
    if (a < 0 || b < 0 || a >= static_cast<long>(height) ||
        b >= static_cast<long>(width)) {
      return false;
    }
    // |a - i| < k/2  <=>  2|a - i| < k
    const long kk = static_cast<long>(k);
    return 2 * std::abs(a - static_cast<long>(i)) < kk &&
           2 * std::abs(b - static_cast<long>(j)) < kk;
  }
};

/// Half-open row/column ranges gathered by the local-attention kernel.
struct NeighborhoodWindow {
  std::size_t row_begin, row_end, col_begin, col_end;
};

inline NeighborhoodWindow neighborhood_window(const NeighborhoodSpec& s) {
  const std::size_t r = (s.k - 1) / 2;
  return {s.i >= r ? s.i - r : 0, std::min(s.height, s.i + r + 1),
          s.j >= r ? s.j - r : 0, std::min(s.width, s.j + r + 1)};
}

/// Attention distributions captured from la_forward:
/// values[((((n * heads + h) * H + i) * W + j) * k + dr) * k + dc], where
/// (dr, dc) is the offset (a - i + r, b - j + r); clipped slots hold 0.
struct LocalAttentionWeights {
  std::size_t batch = 0, heads = 0, height = 0, width = 0, k = 0;
  std::vector<double> values;

  double at(std::size_t n, std::size_t h, std::size_t i, std::size_t j,
            std::size_t dr, std::size_t dc) const {
    return values[((((n * heads + h) * height + i) * width + j) * k + dr) * k + dc];
  }
};

/// Fused neighbourhood attention. q, key, v: [N, C, H, W]. rel_rows and
/// rel_cols ([C/2, k] each) are optional; channel c < C/2 takes its relative
/// term from rel_rows at the row offset, the rest from rel_cols at the column
/// offset. Logits are unscaled dot products per head.
inline Tensor local_attention(const Tensor& q, const Tensor& key, const Tensor& v,
                              const Tensor& rel_rows, const Tensor& rel_cols,
                              std::size_t k, std::size_t heads,
                              LocalAttentionWeights* capture = nullptr) {
  if (q.rank() != 4 || q.shape() != key.shape() || q.shape() != v.shape()) {
    throw std::invalid_argument("local_attention: q/k/v shapes differ: " +
                                shape_str(q.shape()) + ", " +
                                shape_str(key.shape()) + ", " + shape_str(v.shape()));
  }
  if (k == 0 || k % 2 == 0) {
    throw std::invalid_argument("local_attention: k=" + std::to_string(k) +
                                " must be odd");
  }
  const std::size_t N = q.size(0), C = q.size(1), H = q.size(2), W = q.size(3);
  if (heads == 0 || C % heads != 0) {
    throw std::invalid_argument("local_attention: heads=" + std::to_string(heads) +
                                " must divide " + std::to_string(C) + " channels");
  }
  const bool use_rel = rel_rows.defined();
  const std::size_t half = C / 2;
  if (use_rel) {
    if (!rel_cols.defined() || C % 2 != 0 || rel_rows.shape() != Shape{half, k} ||
        rel_cols.shape() != Shape{half, k}) {
      throw std::invalid_argument(
          "local_attention: relative embeddings must be [C/2, k] with even C");
    }
  }
  const std::size_t dh = C / heads;
  const std::size_t r = (k - 1) / 2;
  const std::size_t HW = H * W;
  const std::size_t window = k * k;
  std::vector<double> weights(N * heads * HW * window, 0.0);
  std::vector<double> out(q.numel(), 0.0);
  const auto dq = q.data();
  const auto dk = key.data();
  const auto dv = v.data();
  const double* rr = use_rel ? rel_rows.data().data() : nullptr;
  const double* rc = use_rel ? rel_cols.data().data() : nullptr;

  auto rel_term = [&](std::size_t c, std::size_t dr, std::size_t dc) {
    return c < half ? rr[c * k + dr] : rc[(c - half) * k + dc];
  };

  std::vector<double> logits(window);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          const auto win = neighborhood_window({i, j, k, H, W});
          double* wrow = weights.data() + (((n * heads + h) * H + i) * W + j) * window;
          double peak = -std::numeric_limits<double>::infinity();
          for (std::size_t a = win.row_begin; a < win.row_end; ++a) {
            for (std::size_t b = win.col_begin; b < win.col_end; ++b) {
              const std::size_t dr = a + r - i, dc = b + r - j;
              double l = 0.0;
              for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                const std::size_t plane = (n * C + c) * HW;
                double kv = dk[plane + a * W + b];
                if (use_rel) kv += rel_term(c, dr, dc);
                l += dq[plane + i * W + j] * kv;
              }
              logits[dr * k + dc] = l;
              peak = std::max(peak, l);
            }
          }
          double total = 0.0;
          for (std::size_t a = win.row_begin; a < win.row_end; ++a)
            for (std::size_t b = win.col_begin; b < win.col_end; ++b) {
              const std::size_t s = (a + r - i) * k + (b + r - j);
              wrow[s] = std::exp(logits[s] - peak);
              total += wrow[s];
            }
          for (std::size_t a = win.row_begin; a < win.row_end; ++a)
            for (std::size_t b = win.col_begin; b < win.col_end; ++b)
              wrow[(a + r - i) * k + (b + r - j)] /= total;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
            const std::size_t plane = (n * C + c) * HW;
            double acc = 0.0;
            for (std::size_t a = win.row_begin; a < win.row_end; ++a)
              for (std::size_t b = win.col_begin; b < win.col_end; ++b)
                acc += wrow[(a + r - i) * k + (b + r - j)] * dv[plane + a * W + b];
            out[plane + i * W + j] = acc;
          }
        }
      }
    }
  }
  if (capture) *capture = {N, heads, H, W, k, weights};

  return detail::make_result(
      q.shape(), std::move(out), {q, key, v, rel_rows, rel_cols}, "local_attention",
      [q, key, v, rel_rows, rel_cols, weights = std::move(weights), N, C, H, W, k,
       heads, dh, r, half, use_rel](const detail::TensorImpl&,
                                    std::span<const double> g,
                                    detail::GradSlots& gin) {
        const std::size_t HW = H * W;
        const std::size_t window = k * k;
        const auto dq = q.data();
        const auto dk = key.data();
        const auto dv = v.data();
        const double* rr = use_rel ? rel_rows.data().data() : nullptr;
        const double* rc = use_rel ? rel_cols.data().data() : nullptr;
        std::vector<double> dlogit(window);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < H; ++i)
              for (std::size_t j = 0; j < W; ++j) {
                const auto win = neighborhood_window({i, j, k, H, W});
                const double* wrow =
                    weights.data() + (((n * heads + h) * H + i) * W + j) * window;
                // d weight, then softmax adjoint
                double dot = 0.0;
                for (std::size_t a = win.row_begin; a < win.row_end; ++a)
                  for (std::size_t b = win.col_begin; b < win.col_end; ++b) {
                    const std::size_t s = (a + r - i) * k + (b + r - j);
                    double dw = 0.0;
                    for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                      const std::size_t plane = (n * C + c) * HW;
                      const double go = g[plane + i * W + j];
                      dw += go * dv[plane + a * W + b];
                      if (gin[2]) (*gin[2])[plane + a * W + b] += wrow[s] * go;
                    }
                    dlogit[s] = dw;
                    dot += dw * wrow[s];
                  }
                for (std::size_t a = win.row_begin; a < win.row_end; ++a)
                  for (std::size_t b = win.col_begin; b < win.col_end; ++b) {
                    const std::size_t dr = a + r - i, dc = b + r - j;
                    const std::size_t s = dr * k + dc;
                    const double dl = wrow[s] * (dlogit[s] - dot);
                    for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                      const std::size_t plane = (n * C + c) * HW;
                      const double qv = dq[plane + i * W + j];
                      if (gin[0]) {
                        double kv = dk[plane + a * W + b];
                        if (use_rel) kv += c < half ? rr[c * k + dr] : rc[(c - half) * k + dc];
                        (*gin[0])[plane + i * W + j] += dl * kv;
                      }
                      if (gin[1]) (*gin[1])[plane + a * W + b] += dl * qv;
                      if (use_rel) {
                        if (c < half) {
                          if (gin[3]) (*gin[3])[c * k + dr] += dl * qv;
                        } else if (gin[4]) {
                          (*gin[4])[(c - half) * k + dc] += dl * qv;
                        }
                      }
                    }
                  }
              }
      });
}

// ------------------------------------------------------------ parameter sets

struct ConvParams {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

struct BatchNormParams {
  Tensor gamma, beta, running_mean, running_var;
};

struct GlobalAttentionParams {
  Tensor theta_w, theta_b, phi_w, phi_b, g_w, g_b;
  Tensor out_w, out_b;  // GA_w: the zero-initialisable output projection
  BatchNormParams out_bn;
};

struct LocalAttentionParams {
  Tensor query_w, key_w, value_w;  // [C_out, C_in, 1, 1], no bias
  Tensor rel_rows, rel_cols;       // [C_out/2, k] each, optional
};

struct MhsaParams {
  Tensor qkv_w, qkv_b;    // [3D, D], [3D]
  Tensor proj_w, proj_b;  // [D, D], [D]
};

// ------------------------------------------------------------------- blocks

/// Non-local block. `attention_out`, when given, receives the softmax
/// attention [N, P, P] with P = H * W (row = query position).
inline Tensor global_attention(const Tensor& x, const GlobalAttentionParams& p,
                               bool training = false,
                               Tensor* attention_out = nullptr) {
  if (x.rank() != 4) {
    throw std::invalid_argument("global_attention: expected NCHW, got " +
                                shape_str(x.shape()));
  }
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t P = H * W;
  const std::size_t inner = p.theta_w.size(0);
  if (p.theta_w.size(1) != C || p.out_w.size(0) != C) {
    throw std::invalid_argument("global_attention: parameters built for " +
                                std::to_string(p.theta_w.size(1)) +
                                " channels, input has " + std::to_string(C));
  }
  const Tensor theta = conv2d(x, p.theta_w, p.theta_b);
  const Tensor phi = conv2d(x, p.phi_w, p.phi_b);
  const Tensor gv = conv2d(x, p.g_w, p.g_b);
  const Tensor queries = permute(reshape(theta, {N, inner, P}), {0, 2, 1});
  const Tensor keys = permute(reshape(phi, {N, inner, P}), {0, 2, 1});
  const Tensor values = permute(reshape(gv, {N, inner, P}), {0, 2, 1});
  const Tensor attended = dot_product_attention(queries, keys, values, 1.0, attention_out);
  const Tensor mixed = reshape(permute(attended, {0, 2, 1}), {N, inner, H, W});
  const Tensor projected = conv2d(mixed, p.out_w, p.out_b);
  const Tensor normed =
      batch_norm(projected, p.out_bn.gamma, p.out_bn.beta, p.out_bn.running_mean,
                 p.out_bn.running_var, {.training = training});
  return add(normed, x);
}

/// Local self-attention; a stride of 2 downsamples after attention with
/// ceil-mode 2x2 average pooling.
inline Tensor la_forward(const Tensor& x, const LocalAttentionParams& p,
                         std::size_t k, std::size_t heads, std::size_t stride = 1,
                         LocalAttentionWeights* capture = nullptr) {
  if (x.rank() != 4 || p.query_w.size(1) != x.size(1)) {
    throw std::invalid_argument("la_forward: input " + shape_str(x.shape()) +
                                " incompatible with projection " +
                                shape_str(p.query_w.shape()));
  }
  const Tensor q = conv2d(x, p.query_w);
  const Tensor key = conv2d(x, p.key_w);
  const Tensor v = conv2d(x, p.value_w);
  Tensor out = local_attention(q, key, v, p.rel_rows, p.rel_cols, k, heads, capture);
  if (stride == 2) return avg_pool2d(out, 2, 2, true);
  if (stride != 1) {
    throw std::invalid_argument("la_forward: unsupported stride " + std::to_string(stride));
  }
  return out;
}

/// LA_w(LA(x)) + conv(x).
inline Tensor ela_forward(const Tensor& x, const ConvParams& wrapped,
                          const LocalAttentionParams& la, const Tensor& la_w,
                          const Tensor& la_b, std::size_t k, std::size_t heads) {
  const Tensor conv_out =
      conv2d(x, wrapped.weight, wrapped.bias, wrapped.stride, wrapped.padding, wrapped.groups);
  if (la_w.size(0) != conv_out.size(1)) {
    throw std::invalid_argument("ela_forward: attention branch yields " +
                                std::to_string(la_w.size(0)) +
                                " channels, wrapped convolution " +
                                std::to_string(conv_out.size(1)));
  }
  const Tensor branch = conv2d(la_forward(x, la, k, heads, wrapped.stride), la_w, la_b);
  if (branch.shape() != conv_out.shape()) {
    throw std::invalid_argument("ela_forward: branch shape " + shape_str(branch.shape()) +
                                " != convolution shape " + shape_str(conv_out.shape()));
  }
  return add(conv_out, branch);
}

/// Scaled dot-product multi-head attention over tokens [N, T, D].
/// `attention_out` receives [N, heads, T, T].
inline Tensor multi_head_self_attention(const Tensor& tokens, const MhsaParams& p,
                                        std::size_t heads,
                                        Tensor* attention_out = nullptr) {
  if (tokens.rank() != 3) {
    throw std::invalid_argument("mhsa: expected [N, T, D], got " +
                                shape_str(tokens.shape()));
  }
  const std::size_t N = tokens.size(0), T = tokens.size(1), D = tokens.size(2);
  if (heads == 0 || D % heads != 0) {
    throw std::invalid_argument("mhsa: heads=" + std::to_string(heads) +
                                " must divide embedding " + std::to_string(D));
  }
  if (p.qkv_w.shape() != Shape{3 * D, D}) {
    throw std::invalid_argument("mhsa: qkv weight " + shape_str(p.qkv_w.shape()) +
                                " does not match embedding " + std::to_string(D));
  }
  const std::size_t dh = D / heads;
  const Tensor qkv = permute(reshape(linear(tokens, p.qkv_w, p.qkv_b), {N, T, 3, heads, dh}),
                             {2, 0, 3, 1, 4});
  const Tensor q = reshape(select(qkv, 0, 0), {N * heads, T, dh});
  const Tensor key = reshape(select(qkv, 0, 1), {N * heads, T, dh});
  const Tensor v = reshape(select(qkv, 0, 2), {N * heads, T, dh});
  Tensor attn;
  const Tensor attended = dot_product_attention(q, key, v, 1.0 / std::sqrt(static_cast<double>(dh)),
                                                attention_out ? &attn : nullptr);
  if (attention_out) *attention_out = reshape(attn, {N, heads, T, T});
  const Tensor mixed = reshape(permute(reshape(attended, {N, heads, T, dh}), {0, 2, 1, 3}),
                               {N, T, D});
  return linear(mixed, p.proj_w, p.proj_b);
}

}  // namespace attnhybrid
