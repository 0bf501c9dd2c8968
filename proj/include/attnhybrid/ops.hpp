#pragma once
// Differentiable primitives. All tensors are row-major float64; image tensors
// are NCHW.

#include <cmath>
#include <limits>
#include <optional>

#include <Eigen/Core>

#include "attnhybrid/tensor.hpp"

namespace attnhybrid {

namespace kernels {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K,
                    const double* A, const double* B, double* C) {
  const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N),
             k = static_cast<Eigen::Index>(K);
  MutMap(C, m, n).noalias() += ConstMap(A, m, k) * ConstMap(B, k, n);
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K,
                    const double* A, const double* B, double* C) {
  const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N),
             k = static_cast<Eigen::Index>(K);
  MutMap(C, m, n).noalias() += ConstMap(A, m, k) * ConstMap(B, n, k).transpose();
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K,
                    const double* A, const double* B, double* C) {
  const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N),
             k = static_cast<Eigen::Index>(K);
  MutMap(C, m, n).noalias() += ConstMap(A, k, m).transpose() * ConstMap(B, k, n);
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;
};

// Output columns [lo, hi) whose input column oj*stride + offset lies in [0, width).
inline std::pair<std::size_t, std::size_t> valid_columns(long offset, const ConvGeometry& g) {
  const long s = static_cast<long>(g.stride), w = static_cast<long>(g.width);
  const long lo = offset >= 0 ? 0 : (-offset + s - 1) / s;
  const long hi = offset > w - 1 ? 0 : (w - 1 - offset) / s + 1;
  const long out_w = static_cast<long>(g.out_w);
  const long l = std::min(lo, out_w), h = std::min(hi, out_w);
  return {static_cast<std::size_t>(l), static_cast<std::size_t>(std::max(l, h))};
}

inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* xc = x + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj, ++row) {
        double* out = cols + row * plane;
        const long offset = static_cast<long>(kj) - static_cast<long>(g.padding);
        const auto [lo, hi] = valid_columns(offset, g);
        for (std::size_t oi = 0; oi < g.out_h; ++oi) {
          double* dst = out + oi * g.out_w;
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          if (ii < 0 || ii >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          std::fill(dst, dst + lo, 0.0);
          std::fill(dst + hi, dst + g.out_w, 0.0);
          const double* src = xc + static_cast<std::size_t>(ii) * g.width;
          if (g.stride == 1) {
            std::copy(src + (static_cast<long>(lo) + offset), src + (static_cast<long>(hi) + offset),
                      dst + lo);
          } else {
            for (std::size_t oj = lo; oj < hi; ++oj)
              dst[oj] = src[static_cast<long>(oj * g.stride) + offset];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  const std::size_t plane = g.out_h * g.out_w;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* xc = x + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj, ++row) {
        const double* in = cols + row * plane;
        const long offset = static_cast<long>(kj) - static_cast<long>(g.padding);
        const auto [lo, hi] = valid_columns(offset, g);
        for (std::size_t oi = 0; oi < g.out_h; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.padding);
          if (ii < 0 || ii >= static_cast<long>(g.height)) continue;
          double* dst = xc + static_cast<std::size_t>(ii) * g.width;
          const double* src = in + oi * g.out_w;
          for (std::size_t oj = lo; oj < hi; ++oj)
            dst[static_cast<long>(oj * g.stride) + offset] += src[oj];
        }
      }
    }
  }
}

// Eigen's vectorized kernels peel scalar elements up to the first aligned
// address, so on a Map the rounding depends on where the heap put the
// buffer. The row goes through an Eigen-owned (aligned) scratch array to
// keep results bitwise reproducible across runs. In-place allowed.
inline void softmax_row(const double* in, double* out, std::size_t len) {
  thread_local Eigen::ArrayXd scratch;
  const auto n = static_cast<Eigen::Index>(len);
  if (scratch.size() < n) scratch.resize(n);
  auto row = scratch.head(n);
  row = Eigen::Map<const Eigen::ArrayXd>(in, n);
  row = (row - row.maxCoeff()).exp();
  row /= row.sum();
  std::copy_n(row.data(), len, out);
}

inline std::size_t normalize_axis(long axis, std::size_t rank,
                                  const char* op) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw std::invalid_argument(std::string(op) + ": axis " +
                                std::to_string(axis) +
                                " out of range for rank " +
                                std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument(std::string(op) + ": cannot broadcast " +
                                  shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// For every flat index of `out`, the flat index of the broadcast source.
inline std::vector<std::size_t> broadcast_index(const Shape& in,
                                                const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > offset;) {
    const std::size_t extent = in[i - offset];
    in_stride[i] = extent == 1 ? 0 : s;
    s *= extent;
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> coord(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++coord[d];
      src += in_stride[d];
      if (coord[d] < out[d]) break;
      src -= in_stride[d] * coord[d];
      coord[d] = 0;
    }
  }
  return index;
}

}  // namespace kernels

// ---------------------------------------------------------------- elementwise

enum class Activation { relu, sigmoid, swish, gelu };

inline double sigmoid_scalar(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

inline Tensor activation(Activation kind, const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = sigmoid_scalar(in[i]);
      break;
    case Activation::swish:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * sigmoid_scalar(in[i]);
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < in.size(); ++i)
        out[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] / std::sqrt(2.0)));
      break;
  }
  return detail::make_result(
      x.shape(), std::move(out), {x}, "activation",
      [kind, x](const detail::TensorImpl& res, std::span<const double> g,
                detail::GradSlots& gin) {
        auto& gx = *gin[0];
        const auto in = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          double d = 0.0;
          switch (kind) {
            case Activation::relu:
              d = in[i] > 0.0 ? 1.0 : 0.0;
              break;
            case Activation::sigmoid:
              d = res.data[i] * (1.0 - res.data[i]);
              break;
            case Activation::swish: {
              const double s = sigmoid_scalar(in[i]);
              d = s + in[i] * s * (1.0 - s);
              break;
            }
            case Activation::gelu: {
              const double cdf = 0.5 * (1.0 + std::erf(in[i] / std::sqrt(2.0)));
              const double pdf = std::exp(-0.5 * in[i] * in[i]) /
                                 std::sqrt(2.0 * 3.14159265358979323846);
              d = cdf + in[i] * pdf;
              break;
            }
          }
          gx[i] += g[i] * d;
        }
      });
}

inline Tensor relu(const Tensor& x) { return activation(Activation::relu, x); }
inline Tensor sigmoid(const Tensor& x) { return activation(Activation::sigmoid, x); }
inline Tensor swish(const Tensor& x) { return activation(Activation::swish, x); }
inline Tensor gelu(const Tensor& x) { return activation(Activation::gelu, x); }

// ------------------------------------------------------- broadcasting binary

namespace detail {

enum class BinaryKind { add, sub, mul };

inline Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  const char* name = kind == BinaryKind::add   ? "add"
                     : kind == BinaryKind::sub ? "sub"
                                               : "mul";
  const Shape out_shape = kernels::broadcast_shapes(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(out_shape);
  const bool same_a = a.shape() == out_shape;
  const bool same_b = b.shape() == out_shape;
  auto ia = same_a ? std::vector<std::size_t>{}
                   : kernels::broadcast_index(a.shape(), out_shape);
  auto ib = same_b ? std::vector<std::size_t>{}
                   : kernels::broadcast_index(b.shape(), out_shape);
  const auto da = a.data();
  const auto db = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = da[same_a ? i : ia[i]];
    const double y = db[same_b ? i : ib[i]];
    out[i] = kind == BinaryKind::add ? x + y : kind == BinaryKind::sub ? x - y : x * y;
  }
  return make_result(
      out_shape, std::move(out), {a, b}, name,
      [kind, a, b, ia = std::move(ia), ib = std::move(ib), same_a, same_b](
          const TensorImpl&, std::span<const double> g, GradSlots& gin) {
        const auto da = a.data();
        const auto db = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t pa = same_a ? i : ia[i];
          const std::size_t pb = same_b ? i : ib[i];
          if (gin[0]) {
            (*gin[0])[pa] += kind == BinaryKind::mul ? g[i] * db[pb] : g[i];
          }
          if (gin[1]) {
            (*gin[1])[pb] += kind == BinaryKind::mul   ? g[i] * da[pa]
                             : kind == BinaryKind::sub ? -g[i]
                                                       : g[i];
          }
        }
      });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(detail::BinaryKind::add, a, b);
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(detail::BinaryKind::sub, a, b);
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(detail::BinaryKind::mul, a, b);
}

inline Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result(
      x.shape(), std::move(out), {x}, "scale",
      [factor](const detail::TensorImpl&, std::span<const double> g,
               detail::GradSlots& gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += factor * g[i];
      });
}

/// Broadcasts `x` to `shape` (numpy rules); the adjoint sums back.
inline Tensor expand(const Tensor& x, const Shape& shape) {
  if (kernels::broadcast_shapes(x.shape(), shape, "expand") != shape) {
    throw std::invalid_argument("expand: " + shape_str(x.shape()) +
                                " does not broadcast to " + shape_str(shape));
  }
  auto index = kernels::broadcast_index(x.shape(), shape);
  std::vector<double> out(index.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = in[index[i]];
  return detail::make_result(
      shape, std::move(out), {x}, "expand",
      [index = std::move(index)](const detail::TensorImpl&,
                                 std::span<const double> g,
                                 detail::GradSlots& gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[index[i]] += g[i];
      });
}

// ------------------------------------------------------------------ reductions

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return detail::make_result(
      Shape{1}, {total}, {x}, "sum",
      [](const detail::TensorImpl&, std::span<const double> g,
         detail::GradSlots& gin) {
        for (auto& v : *gin[0]) v += g[0];
      });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// --------------------------------------------------------------------- shapes

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) +
                                " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(
      std::move(shape), std::move(out), {x}, "reshape",
      [](const detail::TensorImpl&, std::span<const double> g,
         detail::GradSlots& gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
      });
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims) {
  const std::size_t rank = x.rank();
  if (dims.size() != rank) {
    throw std::invalid_argument("permute: expected " + std::to_string(rank) +
                                " axes");
  }
  std::vector<bool> seen(rank, false);
  for (auto d : dims) {
    if (d >= rank || seen[d]) {
      throw std::invalid_argument("permute: invalid axis permutation");
    }
    seen[d] = true;
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.size(i);
  Shape out_shape(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.size(dims[i]);
    stride[i] = in_stride[dims[i]];
  }
  const std::size_t n = x.numel();
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> coord(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++coord[d];
      src += stride[d];
      if (coord[d] < out_shape[d]) break;
      src -= stride[d] * coord[d];
      coord[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto in = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = in[index[i]];
  return detail::make_result(
      std::move(out_shape), std::move(out), {x}, "permute",
      [index = std::move(index)](const detail::TensorImpl&,
                                 std::span<const double> g,
                                 detail::GradSlots& gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[index[i]] += g[i];
      });
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, long axis_arg) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t axis = kernels::normalize_axis(axis_arg, parts[0].rank(), "concat");
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (d != axis && p.size(d) != shape[d]) {
        throw std::invalid_argument("concat: extent mismatch " +
                                    shape_str(p.shape()) + " vs " +
                                    shape_str(shape));
      }
    }
    total += p.size(axis);
  }
  shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.size(axis) * inner;
    const auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<long>(o * len), len,
                  out.begin() + static_cast<long>(o * total * inner + offset * inner));
    }
    offset += p.size(axis);
  }
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) lengths.push_back(p.size(axis));
  return detail::make_result(
      shape, std::move(out), parts, "concat",
      [offsets, lengths, outer, inner, total](const detail::TensorImpl&,
                                              std::span<const double> g,
                                              detail::GradSlots& gin) {
        for (std::size_t k = 0; k < gin.size(); ++k) {
          if (!gin[k]) continue;
          const std::size_t len = lengths[k] * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < len; ++i) {
              (*gin[k])[o * len + i] += g[o * total * inner + offsets[k] * inner + i];
            }
          }
        }
      });
}

/// Picks one index along `axis`, dropping that axis.
inline Tensor select(const Tensor& x, long axis_arg, std::size_t index) {
  const std::size_t axis = kernels::normalize_axis(axis_arg, x.rank(), "select");
  if (index >= x.size(axis)) {
    throw std::invalid_argument("select: index " + std::to_string(index) +
                                " out of range for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.size(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.size(d);
  const std::size_t extent = x.size(axis);
  Shape shape;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (d != axis) shape.push_back(x.size(d));
  }
  if (shape.empty()) shape.push_back(1);
  std::vector<double> out(outer * inner);
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      out[o * inner + i] = in[(o * extent + index) * inner + i];
    }
  }
  return detail::make_result(
      std::move(shape), std::move(out), {x}, "select",
      [outer, inner, extent, index](const detail::TensorImpl&,
                                    std::span<const double> g,
                                    detail::GradSlots& gin) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            (*gin[0])[(o * extent + index) * inner + i] += g[o * inner + i];
          }
        }
      });
}

// -------------------------------------------------------------------- softmax

inline Tensor softmax(const Tensor& x, long axis_arg) {
  const std::size_t axis = kernels::normalize_axis(axis_arg, x.rank(), "softmax");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.size(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.size(d);
  const std::size_t len = x.size(axis);
  const auto in = x.data();
  std::vector<double> out(in.size());
  if (inner == 1) {
    for (std::size_t o = 0; o < outer; ++o) kernels::softmax_row(in.data() + o * len, out.data() + o * len, len);
  }
  for (std::size_t o = 0; o < outer && inner > 1; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) peak = std::max(peak, in[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(in[base + k * inner] - peak);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x}, "softmax",
      [outer, inner, len](const detail::TensorImpl& res,
                          std::span<const double> g, detail::GradSlots& gin) {
        const auto& y = res.data;
        double* gx = gin[0]->data();
        if (inner == 1) {
          for (std::size_t o = 0; o < outer; ++o) {
            const double* yr = y.data() + o * len;
            const double* gr = g.data() + o * len;
            double dot = 0.0;
            for (std::size_t k = 0; k < len; ++k) dot += gr[k] * yr[k];
            double* dst = gx + o * len;
            for (std::size_t k = 0; k < len; ++k) dst[k] += yr[k] * (gr[k] - dot);
          }
          return;
        }
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            double dot = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
              dot += g[base + k * inner] * y[base + k * inner];
            }
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t p = base + k * inner;
              (*gin[0])[p] += y[p] * (g[p] - dot);
            }
          }
        }
      });
}

// --------------------------------------------------------------------- matmul

/// Batched product of [B,M,K] and [B,K,N] (rank 2 operands are a batch of 1).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool two_d = a.rank() == 2 && b.rank() == 2;
  if (!two_d && (a.rank() != 3 || b.rank() != 3 || a.size(0) != b.size(0))) {
    throw std::invalid_argument("matmul: incompatible ranks " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t batch = two_d ? 1 : a.size(0);
  const std::size_t M = a.size(a.rank() - 2), K = a.size(a.rank() - 1);
  const std::size_t K2 = b.size(b.rank() - 2), N = b.size(b.rank() - 1);
  if (K != K2) {
    throw std::invalid_argument("matmul: inner extents differ " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  std::vector<double> out(batch * M * N, 0.0);
  const auto da = a.data();
  const auto db = b.data();
  for (std::size_t s = 0; s < batch; ++s) {
    kernels::gemm_nn(M, N, K, da.data() + s * M * K, db.data() + s * K * N,
                     out.data() + s * M * N);
  }
  Shape shape = two_d ? Shape{M, N} : Shape{batch, M, N};
  return detail::make_result(
      std::move(shape), std::move(out), {a, b}, "matmul",
      [a, b, batch, M, N, K](const detail::TensorImpl&,
                             std::span<const double> g,
                             detail::GradSlots& gin) {
        const auto da = a.data();
        const auto db = b.data();
        for (std::size_t s = 0; s < batch; ++s) {
          const double* gs = g.data() + s * M * N;
          if (gin[0]) {
            kernels::gemm_nt(M, K, N, gs, db.data() + s * K * N,
                             gin[0]->data() + s * M * K);
          }
          if (gin[1]) {
            kernels::gemm_tn(K, N, M, da.data() + s * M * K, gs,
                             gin[1]->data() + s * K * N);
          }
        }
      });
}

/// y = x W^T + b over the last axis of x. W is [out, in].
inline Tensor linear(const Tensor& x, const Tensor& weight,
                     const Tensor& bias = Tensor()) {
  if (weight.rank() != 2 || x.rank() < 1 ||
      x.size(x.rank() - 1) != weight.size(1)) {
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                " incompatible with weight " +
                                shape_str(weight.shape()));
  }
  const std::size_t in_f = weight.size(1), out_f = weight.size(0);
  if (bias.defined() && (bias.rank() != 1 || bias.size(0) != out_f)) {
    throw std::invalid_argument("linear: bias shape " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / in_f;
  std::vector<double> out(rows * out_f, 0.0);
  kernels::gemm_nt(rows, out_f, in_f, x.data().data(), weight.data().data(),
                   out.data());
  if (bias.defined()) {
    const auto bb = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out_f; ++o) out[r * out_f + o] += bb[o];
  }
  Shape shape = x.shape();
  shape.back() = out_f;
  return detail::make_result(
      std::move(shape), std::move(out), {x, weight, bias}, "linear",
      [x, weight, rows, in_f, out_f](const detail::TensorImpl&,
                                     std::span<const double> g,
                                     detail::GradSlots& gin) {
        if (gin[0]) {
          kernels::gemm_nn(rows, in_f, out_f, g.data(), weight.data().data(),
                           gin[0]->data());
        }
        if (gin[1]) {
          kernels::gemm_tn(out_f, in_f, rows, g.data(), x.data().data(),
                           gin[1]->data());
        }
        if (gin[2]) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_f; ++o) (*gin[2])[o] += g[r * out_f + o];
        }
      });
}

// ------------------------------------------------------------- attention core

/// softmax(scale * q k^T) v over the middle axis, fused.
/// q, k: [B,T,d]; v: [B,T,dv] -> [B,T,dv]. The attention weights [B,T,T]
/// are written to `weights_out` when given.
inline Tensor dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    double scale, Tensor* weights_out = nullptr) {
  if (q.rank() != 3 || q.shape() != k.shape() || v.rank() != 3 || v.size(0) != q.size(0) ||
      v.size(1) != q.size(1)) {
    throw std::invalid_argument("dot_product_attention: expected q,k [B,T,d] and v [B,T,dv], got " +
                                shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                                shape_str(v.shape()));
  }
  using kernels::ConstMap;
  using kernels::MutMap;
  const auto B = static_cast<Eigen::Index>(q.size(0)), T = static_cast<Eigen::Index>(q.size(1)),
             d = static_cast<Eigen::Index>(q.size(2)), dv = static_cast<Eigen::Index>(v.size(2));
  std::vector<double> weights(static_cast<std::size_t>(B * T * T));
  std::vector<double> out(static_cast<std::size_t>(B * T * dv));
  for (Eigen::Index b = 0; b < B; ++b) {
    MutMap A(weights.data() + b * T * T, T, T);
    A.noalias() = scale * (ConstMap(q.data().data() + b * T * d, T, d) *
                           ConstMap(k.data().data() + b * T * d, T, d).transpose());
    for (Eigen::Index r = 0; r < T; ++r) {
      double* row = A.data() + r * T;
      kernels::softmax_row(row, row, static_cast<std::size_t>(T));
    }
    MutMap(out.data() + b * T * dv, T, dv).noalias() =
        A * ConstMap(v.data().data() + b * T * dv, T, dv);
  }
  Tensor w(Shape{q.size(0), q.size(1), q.size(1)}, std::move(weights));
  if (weights_out) *weights_out = w;
  return detail::make_result(
      Shape{q.size(0), q.size(1), v.size(2)}, std::move(out), {q, k, v}, "attention",
      [q, k, v, w, scale, B, T, d, dv](const detail::TensorImpl&, std::span<const double> g,
                                       detail::GradSlots& gin) {
        kernels::RowMatrix dA(T, T);
        for (Eigen::Index b = 0; b < B; ++b) {
          ConstMap A(w.data().data() + b * T * T, T, T);
          ConstMap G(g.data() + b * T * dv, T, dv);
          ConstMap V(v.data().data() + b * T * dv, T, dv);
          if (gin[2]) MutMap(gin[2]->data() + b * T * dv, T, dv).noalias() += A.transpose() * G;
          if (!gin[0] && !gin[1]) continue;
          dA.noalias() = G * V.transpose();
          for (Eigen::Index r = 0; r < T; ++r) {
            double dot = 0.0;
            for (Eigen::Index c = 0; c < T; ++c) dot += dA(r, c) * A(r, c);
            dA.row(r) = (A.row(r).array() * (dA.row(r).array() - dot) * scale).matrix();
          }
          if (gin[0]) {
            MutMap(gin[0]->data() + b * T * d, T, d).noalias() +=
                dA * ConstMap(k.data().data() + b * T * d, T, d);
          }
          if (gin[1]) {
            MutMap(gin[1]->data() + b * T * d, T, d).noalias() +=
                dA.transpose() * ConstMap(q.data().data() + b * T * d, T, d);
          }
        }
      });
}

// ---------------------------------------------------------------- convolution

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel,
                                   std::size_t stride, std::size_t padding) {
  if (in + 2 * padding < kernel) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kernel) +
                                " larger than padded input " +
                                std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

/// Grouped 2-D cross-correlation with zero padding.
/// input [N,C,H,W], weight [O, C/groups, kh, kw], bias [O] (optional).
inline Tensor conv2d(const Tensor& input, const Tensor& weight,
                     const Tensor& bias = Tensor(), std::size_t stride = 1,
                     std::size_t padding = 0, std::size_t groups = 1) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw std::invalid_argument("conv2d: expected NCHW input and OIkk weight, got " +
                                shape_str(input.shape()) + " and " +
                                shape_str(weight.shape()));
  }
  if (stride == 0 || groups == 0) {
    throw std::invalid_argument("conv2d: stride and groups must be positive");
  }
  const std::size_t N = input.size(0), C = input.size(1), H = input.size(2),
                    W = input.size(3);
  const std::size_t O = weight.size(0), Cg = weight.size(1), kh = weight.size(2),
                    kw = weight.size(3);
  if (C % groups != 0 || O % groups != 0) {
    throw std::invalid_argument("conv2d: groups=" + std::to_string(groups) +
                                " must divide input channels " +
                                std::to_string(C) + " and output channels " +
                                std::to_string(O));
  }
  if (Cg != C / groups) {
    throw std::invalid_argument("conv2d: weight " + shape_str(weight.shape()) +
                                " expects " + std::to_string(Cg * groups) +
                                " input channels, input has " + std::to_string(C));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.size(0) != O)) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) +
                                " does not match " + std::to_string(O) +
                                " output channels");
  }
  const kernels::ConvGeometry geo{Cg, H, W, kh, kw, stride, padding,
                                  conv_out_extent(H, kh, stride, padding),
                                  conv_out_extent(W, kw, stride, padding)};
  const std::size_t Og = O / groups;
  const std::size_t plane = geo.out_h * geo.out_w;
  const std::size_t patch = Cg * kh * kw;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
  std::vector<double> out(N * O * plane, 0.0);
  std::vector<double> cols(pointwise ? 0 : patch * plane);
  const auto x = input.data();
  const auto w = weight.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* xg = x.data() + (n * C + g * Cg) * H * W;
      const double* src = xg;
      if (!pointwise) {
        kernels::im2col(xg, geo, cols.data());
        src = cols.data();
      }
      kernels::gemm_nn(Og, plane, patch, w.data() + g * Og * patch, src,
                       out.data() + (n * O + g * Og) * plane);
    }
  }
  if (bias.defined()) {
    const auto b = bias.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) {
        double* row = out.data() + (n * O + o) * plane;
        for (std::size_t p = 0; p < plane; ++p) row[p] += b[o];
      }
  }
  return detail::make_result(
      Shape{N, O, geo.out_h, geo.out_w}, std::move(out), {input, weight, bias},
      "conv2d",
      [input, weight, geo, N, C, O, groups, Og, plane, patch, pointwise](
          const detail::TensorImpl&, std::span<const double> g,
          detail::GradSlots& gin) {
        const auto x = input.data();
        const auto w = weight.data();
        const std::size_t HW = geo.height * geo.width;
        std::vector<double> cols(pointwise ? 0 : patch * plane);
        std::vector<double> dcols(pointwise ? 0 : patch * plane);
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t grp = 0; grp < groups; ++grp) {
            const double* gout = g.data() + (n * O + grp * Og) * plane;
            const double* xg = x.data() + (n * C + grp * geo.channels) * HW;
            if (gin[1]) {
              const double* src = xg;
              if (!pointwise) {
                kernels::im2col(xg, geo, cols.data());
                src = cols.data();
              }
              kernels::gemm_nt(Og, patch, plane, gout, src,
                               gin[1]->data() + grp * Og * patch);
            }
            if (gin[0]) {
              double* dx = gin[0]->data() + (n * C + grp * geo.channels) * HW;
              if (pointwise) {
                kernels::gemm_tn(patch, plane, Og, w.data() + grp * Og * patch,
                                 gout, dx);
              } else {
                const auto m = static_cast<Eigen::Index>(patch),
                           n2 = static_cast<Eigen::Index>(plane),
                           k2 = static_cast<Eigen::Index>(Og);
                kernels::MutMap(dcols.data(), m, n2).noalias() =
                    kernels::ConstMap(w.data() + grp * Og * patch, k2, m).transpose() *
                    kernels::ConstMap(gout, k2, n2);
                kernels::col2im_add(dcols.data(), geo, dx);
              }
            }
          }
        }
        if (gin[2]) {
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) {
              const double* row = g.data() + (n * O + o) * plane;
              double acc = 0.0;
              for (std::size_t p = 0; p < plane; ++p) acc += row[p];
              (*gin[2])[o] += acc;
            }
        }
      });
}

// ----------------------------------------------------------------- batch norm

struct BatchNormOptions {
  bool training = false;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Per-channel normalization of NCHW (or NC) input. In training mode the
/// batch statistics are used and running_mean / running_var are updated in
/// place (running_var with the unbiased estimate).
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Tensor running_mean, Tensor running_var,
                         const BatchNormOptions& opt = {}) {
  if (x.rank() != 4 && x.rank() != 2) {
    throw std::invalid_argument("batch_norm: expected NCHW or NC input, got " +
                                shape_str(x.shape()));
  }
  const std::size_t N = x.size(0), C = x.size(1);
  const std::size_t HW = x.numel() / (N * C);
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)}) {
    if (t->numel() != C) {
      throw std::invalid_argument("batch_norm: parameter length " +
                                  std::to_string(t->numel()) + " != channels " +
                                  std::to_string(C));
    }
  }
  const double M = static_cast<double>(N * HW);
  std::vector<double> mu(C), inv_std(C);
  const auto in = x.data();
  if (opt.training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = in.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double m = s / M;
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = in.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double var = v / M;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + opt.epsilon);
      const double unbiased = M > 1.0 ? v / (M - 1.0) : var;
      running_mean.data()[c] =
          (1.0 - opt.momentum) * running_mean.data()[c] + opt.momentum * m;
      running_var.data()[c] =
          (1.0 - opt.momentum) * running_var.data()[c] + opt.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(running_var.data()[c] + opt.epsilon);
    }
  }
  std::vector<double> xhat(in.size()), out(in.size());
  const auto gm = gamma.data();
  const auto bt = beta.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const double h = (in[base + i] - mu[c]) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = gm[c] * h + bt[c];
      }
    }
  const bool training = opt.training;
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "batch_norm",
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, HW, M,
       training](const detail::TensorImpl&, std::span<const double> g,
                 detail::GradSlots& gin) {
        const auto gm = gamma.data();
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_g += g[base + i];
              sum_gx += g[base + i] * xhat[base + i];
            }
          }
          if (gin[1]) (*gin[1])[c] += sum_gx;
          if (gin[2]) (*gin[2])[c] += sum_g;
          if (!gin[0]) continue;
          const double k = gm[c] * inv_std[c];
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              if (training) {
                (*gin[0])[base + i] +=
                    k * (g[base + i] - sum_g / M - xhat[base + i] * sum_gx / M);
              } else {
                (*gin[0])[base + i] += k * g[base + i];
              }
            }
          }
        }
      });
}

/// Normalization over the last axis.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double epsilon = 1e-6) {
  const std::size_t D = x.size(x.rank() - 1);
  if (gamma.numel() != D || beta.numel() != D) {
    throw std::invalid_argument("layer_norm: parameter length mismatch");
  }
  const std::size_t rows = x.numel() / D;
  const auto in = x.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  std::vector<double> xhat(in.size()), out(in.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = in.data() + r * D;
    double m = 0.0;
    for (std::size_t i = 0; i < D; ++i) m += p[i];
    m /= static_cast<double>(D);
    double v = 0.0;
    for (std::size_t i = 0; i < D; ++i) v += (p[i] - m) * (p[i] - m);
    v /= static_cast<double>(D);
    inv_std[r] = 1.0 / std::sqrt(v + epsilon);
    for (std::size_t i = 0; i < D; ++i) {
      xhat[r * D + i] = (p[i] - m) * inv_std[r];
      out[r * D + i] = gm[i] * xhat[r * D + i] + bt[i];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, D](
          const detail::TensorImpl&, std::span<const double> g,
          detail::GradSlots& gin) {
        const auto gm = gamma.data();
        const double dd = static_cast<double>(D);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_dh = 0.0, sum_dhx = 0.0;
          for (std::size_t i = 0; i < D; ++i) {
            const double dh = g[r * D + i] * gm[i];
            sum_dh += dh;
            sum_dhx += dh * xhat[r * D + i];
            if (gin[1]) (*gin[1])[i] += g[r * D + i] * xhat[r * D + i];
            if (gin[2]) (*gin[2])[i] += g[r * D + i];
          }
          if (!gin[0]) continue;
          for (std::size_t i = 0; i < D; ++i) {
            const double dh = g[r * D + i] * gm[i];
            (*gin[0])[r * D + i] +=
                inv_std[r] * (dh - sum_dh / dd - xhat[r * D + i] * sum_dhx / dd);
          }
        }
      });
}

// -------------------------------------------------------------------- pooling

/// [N,C,H,W] -> [N,C]
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) {
    throw std::invalid_argument("global_avg_pool: expected NCHW, got " +
                                shape_str(x.shape()));
  }
  const std::size_t NC = x.size(0) * x.size(1);
  const std::size_t HW = x.size(2) * x.size(3);
  std::vector<double> out(NC);
  const auto in = x.data();
  for (std::size_t i = 0; i < NC; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < HW; ++p) s += in[i * HW + p];
    out[i] = s / static_cast<double>(HW);
  }
  return detail::make_result(
      Shape{x.size(0), x.size(1)}, std::move(out), {x}, "global_avg_pool",
      [HW](const detail::TensorImpl&, std::span<const double> g,
           detail::GradSlots& gin) {
        const double inv = 1.0 / static_cast<double>(HW);
        for (std::size_t i = 0; i < g.size(); ++i)
          for (std::size_t p = 0; p < HW; ++p) (*gin[0])[i * HW + p] += g[i] * inv;
      });
}

/// Window pooling; windows are clipped to the input, output extent is
/// ceil((H - k) / stride) + 1 when `ceil_mode`, floor otherwise.
/// Average pooling divides by the number of in-bounds elements.
inline Tensor pool2d(const Tensor& x, std::size_t kernel, std::size_t stride,
                     std::size_t padding, bool max_pool, bool ceil_mode) {
  if (x.rank() != 4) {
    throw std::invalid_argument("pool2d: expected NCHW, got " + shape_str(x.shape()));
  }
  if (kernel == 0 || stride == 0) {
    throw std::invalid_argument("pool2d: kernel and stride must be positive");
  }
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  auto extent = [&](std::size_t in) {
    if (in + 2 * padding < kernel) {
      throw std::invalid_argument("pool2d: window larger than input");
    }
    const std::size_t span = in + 2 * padding - kernel;
    return (ceil_mode ? (span + stride - 1) / stride : span / stride) + 1;
  };
  const std::size_t Ho = extent(H), Wo = extent(W);
  const std::size_t planes = N * C;
  std::vector<double> out(planes * Ho * Wo);
  // For max pooling: argmax; for average: start of window (unused).
  std::vector<std::size_t> argmax(max_pool ? out.size() : 0);
  const auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = in.data() + p * H * W;
    for (std::size_t oi = 0; oi < Ho; ++oi) {
      const long i0 = static_cast<long>(oi * stride) - static_cast<long>(padding);
      const long i1 = std::min<long>(i0 + static_cast<long>(kernel), static_cast<long>(H));
      for (std::size_t oj = 0; oj < Wo; ++oj) {
        const long j0 = static_cast<long>(oj * stride) - static_cast<long>(padding);
        const long j1 = std::min<long>(j0 + static_cast<long>(kernel), static_cast<long>(W));
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_at = 0;
        double total = 0.0;
        std::size_t count = 0;
        for (long i = std::max<long>(i0, 0); i < i1; ++i)
          for (long j = std::max<long>(j0, 0); j < j1; ++j) {
            const std::size_t at = static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j);
            const double v = src[at];
            if (v > best) {
              best = v;
              best_at = at;
            }
            total += v;
            ++count;
          }
        const std::size_t o = (p * Ho + oi) * Wo + oj;
        if (max_pool) {
          out[o] = best;
          argmax[o] = best_at;
        } else {
          out[o] = total / static_cast<double>(count);
        }
      }
    }
  }
  return detail::make_result(
      Shape{N, C, Ho, Wo}, std::move(out), {x}, max_pool ? "max_pool2d" : "avg_pool2d",
      [argmax = std::move(argmax), planes, H, W, Ho, Wo, kernel, stride, padding,
       max_pool](const detail::TensorImpl&, std::span<const double> g,
                 detail::GradSlots& gin) {
        auto& gx = *gin[0];
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t oi = 0; oi < Ho; ++oi) {
            const long i0 = static_cast<long>(oi * stride) - static_cast<long>(padding);
            const long i1 = std::min<long>(i0 + static_cast<long>(kernel), static_cast<long>(H));
            for (std::size_t oj = 0; oj < Wo; ++oj) {
              const std::size_t o = (p * Ho + oi) * Wo + oj;
              if (max_pool) {
                gx[p * H * W + argmax[o]] += g[o];
                continue;
              }
              const long j0 = static_cast<long>(oj * stride) - static_cast<long>(padding);
              const long j1 = std::min<long>(j0 + static_cast<long>(kernel), static_cast<long>(W));
              const long rows = i1 - std::max<long>(i0, 0);
              const long colsn = j1 - std::max<long>(j0, 0);
              const double share = g[o] / static_cast<double>(rows * colsn);
              for (long i = std::max<long>(i0, 0); i < i1; ++i)
                for (long j = std::max<long>(j0, 0); j < j1; ++j)
                  gx[p * H * W + static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j)] += share;
            }
          }
        }
      });
}

inline Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride,
                         std::size_t padding = 0) {
  return pool2d(x, kernel, stride, padding, true, false);
}

inline Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride,
                         bool ceil_mode = true) {
  return pool2d(x, kernel, stride, 0, false, ceil_mode);
}

// ----------------------------------------------------------------------- loss

/// Mean softmax cross-entropy of logits [N, K] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.size(0) != labels.size()) {
    throw std::invalid_argument("cross_entropy: logits " + shape_str(logits.shape()) +
                                " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = logits.size(0), K = logits.size(1);
  const auto z = logits.data();
  std::vector<double> prob(N * K);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(K) + ")");
    }
    const double* row = z.data() + n * K;
    const double peak = *std::max_element(row, row + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - peak);
    const double log_z = peak + std::log(s);
    for (std::size_t k = 0; k < K; ++k) prob[n * K + k] = std::exp(row[k] - log_z);
    total += log_z - row[y];
  }
  std::vector<int> targets(labels.begin(), labels.end());
  return detail::make_result(
      Shape{1}, {total / static_cast<double>(N)}, {logits}, "cross_entropy",
      [prob = std::move(prob), targets = std::move(targets), N, K](
          const detail::TensorImpl&, std::span<const double> g,
          detail::GradSlots& gin) {
        const double s = g[0] / static_cast<double>(N);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < K; ++k) {
            const double onehot = static_cast<int>(k) == targets[n] ? 1.0 : 0.0;
            (*gin[0])[n * K + k] += s * (prob[n * K + k] - onehot);
          }
      });
}

}  // namespace attnhybrid
