#pragma once
// Parameter-owning layers composed into model graphs.

#include <functional>
#include <memory>
#include <random>
#include <string_view>

#include "attnhybrid/attention.hpp"

namespace attnhybrid {

using Rng = std::mt19937_64;

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool learnable = true;
};

/// Per-forward state threaded through every layer.
struct ForwardContext {
  bool training = false;
  std::string node;  // name of the graph node currently executing
  // Receives attention distributions from GA ([N,P,P]) and MHSA
  // ([N,heads,T,T]) layers together with the emitting node name.
  std::function<void(const std::string&, const Tensor&)> on_attention;
};

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng,
                            bool requires_grad = true) {
  Tensor t(std::move(shape), 0.0, requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor zeros(Shape shape, bool requires_grad = true) {
  return Tensor(std::move(shape), 0.0, requires_grad);
}

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual Tensor forward(const Tensor& x, ForwardContext& ctx) = 0;
  /// Appends parameters and buffers under `prefix`.
  virtual void collect(const std::string& prefix, std::vector<NamedTensor>& out) const = 0;
  /// Structural description (kinds and hyper-parameters, no values).
  virtual std::string signature() const { return kind(); }
};

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

// -------------------------------------------------------------------- basics

class Conv2d final : public Layer {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t padding, std::size_t groups, bool with_bias, Rng& rng)
      : in_(in), out_(out), kernel_(kernel) {
    if (in % groups != 0 || out % groups != 0) {
      throw std::invalid_argument("Conv2d: groups=" + std::to_string(groups) +
                                  " must divide " + std::to_string(in) + " -> " +
                                  std::to_string(out));
    }
    const double fan_in = static_cast<double>(in / groups * kernel * kernel);
    params_.weight = normal_tensor({out, in / groups, kernel, kernel},
                                   std::sqrt(1.0 / (3.0 * fan_in)), rng);
    if (with_bias) params_.bias = zeros({out});
    params_.stride = stride;
    params_.padding = padding;
    params_.groups = groups;
  }

  std::string kind() const override { return "conv"; }
  Tensor forward(const Tensor& x, ForwardContext&) override {
    return conv2d(x, params_.weight, params_.bias, params_.stride, params_.padding,
                  params_.groups);
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "weight"), params_.weight, true});
    if (params_.bias.defined()) out.push_back({join_name(prefix, "bias"), params_.bias, true});
  }
  std::string signature() const override {
    return "conv(" + std::to_string(in_) + "->" + std::to_string(out_) + ",k" +
           std::to_string(kernel_) + ",s" + std::to_string(params_.stride) + ",g" +
           std::to_string(params_.groups) + (params_.bias.defined() ? ",b" : "") + ")";
  }

  void zero_() {
    for (auto& v : params_.weight.data()) v = 0.0;
    if (params_.bias.defined())
      for (auto& v : params_.bias.data()) v = 0.0;
  }

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t kernel() const { return kernel_; }
  std::size_t stride() const { return params_.stride; }
  const ConvParams& params() const { return params_; }

 private:
  std::size_t in_, out_, kernel_;
  ConvParams params_;
};

class BatchNorm2d final : public Layer {
 public:
  explicit BatchNorm2d(std::size_t channels) : channels_(channels) {
    params_.gamma = Tensor({channels}, 1.0, true);
    params_.beta = zeros({channels});
    params_.running_mean = Tensor({channels}, 0.0);
    params_.running_var = Tensor({channels}, 1.0);
  }
  std::string kind() const override { return "bn"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    return batch_norm(x, params_.gamma, params_.beta, params_.running_mean,
                      params_.running_var, {.training = ctx.training});
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "gamma"), params_.gamma, true});
    out.push_back({join_name(prefix, "beta"), params_.beta, true});
    out.push_back({join_name(prefix, "running_mean"), params_.running_mean, false});
    out.push_back({join_name(prefix, "running_var"), params_.running_var, false});
  }
  std::string signature() const override { return "bn(" + std::to_string(channels_) + ")"; }
  const BatchNormParams& params() const { return params_; }

 private:
  std::size_t channels_;
  BatchNormParams params_;
};

/// conv -> bn -> optional activation
class ConvBnAct final : public Layer {
 public:
  ConvBnAct(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
            std::size_t groups, std::optional<Activation> act, Rng& rng)
      : conv_(in, out, kernel, stride, kernel / 2, groups, false, rng), bn_(out), act_(act) {}

  std::string kind() const override { return "conv_bn_act"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    Tensor y = bn_.forward(conv_.forward(x, ctx), ctx);
    return act_ ? activation(*act_, y) : y;
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    conv_.collect(join_name(prefix, "conv"), out);
    bn_.collect(join_name(prefix, "bn"), out);
  }
  std::string signature() const override {
    return "cba[" + conv_.signature() + "," + bn_.signature() + "," +
           (act_ ? std::to_string(static_cast<int>(*act_)) : "-") + "]";
  }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
  std::optional<Activation> act_;
};

class Linear final : public Layer {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng) : in_(in), out_(out) {
    weight_ = normal_tensor({out, in}, std::sqrt(1.0 / static_cast<double>(in)), rng);
    bias_ = zeros({out});
  }
  std::string kind() const override { return "linear"; }
  Tensor forward(const Tensor& x, ForwardContext&) override { return linear(x, weight_, bias_); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "weight"), weight_, true});
    out.push_back({join_name(prefix, "bias"), bias_, true});
  }
  std::string signature() const override {
    return "linear(" + std::to_string(in_) + "->" + std::to_string(out_) + ")";
  }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  std::size_t in_, out_;
  Tensor weight_, bias_;
};

/// Global average pooling followed by a linear classifier.
class ClassifierHead final : public Layer {
 public:
  ClassifierHead(std::size_t features, std::size_t classes, Rng& rng)
      : fc_(features, classes, rng) {}
  std::string kind() const override { return "classifier"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    return fc_.forward(x.rank() == 4 ? global_avg_pool(x) : x, ctx);
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    fc_.collect(join_name(prefix, "fc"), out);
  }
  std::string signature() const override { return "head[" + fc_.signature() + "]"; }

 private:
  Linear fc_;
};

class MaxPool final : public Layer {
 public:
  MaxPool(std::size_t kernel, std::size_t stride, std::size_t padding)
      : kernel_(kernel), stride_(stride), padding_(padding) {}
  std::string kind() const override { return "maxpool"; }
  Tensor forward(const Tensor& x, ForwardContext&) override {
    return max_pool2d(x, kernel_, stride_, padding_);
  }
  void collect(const std::string&, std::vector<NamedTensor>&) const override {}

 private:
  std::size_t kernel_, stride_, padding_;
};

/// Fixed per-channel (x - mean) / std; holds no parameters.
class Standardize final : public Layer {
 public:
  Standardize(std::vector<double> mean, std::vector<double> stddev)
      : mean_(std::move(mean)), std_(std::move(stddev)) {}
  std::string kind() const override { return "standardize"; }
  Tensor forward(const Tensor& x, ForwardContext&) override {
    if (x.rank() != 4 || x.size(1) != mean_.size()) {
      throw std::invalid_argument("standardize: expected [N," + std::to_string(mean_.size()) +
                                  ",H,W], got " + shape_str(x.shape()));
    }
    const std::size_t C = mean_.size();
    std::vector<double> shift(C), inv(C);
    for (std::size_t c = 0; c < C; ++c) {
      shift[c] = -mean_[c] / std_[c];
      inv[c] = 1.0 / std_[c];
    }
    return add(mul(x, Tensor({C, 1, 1}, inv)), Tensor({C, 1, 1}, shift));
  }
  void collect(const std::string&, std::vector<NamedTensor>&) const override {}

 private:
  std::vector<double> mean_, std_;
};

// ---------------------------------------------------------------- attention

class GlobalAttentionLayer final : public Layer {
 public:
  GlobalAttentionLayer(std::size_t channels, const AttentionConfig& cfg, Rng& rng)
      : channels_(channels) {
    cfg.validate_reduction(channels);
    const std::size_t inner = channels / cfg.channel_reduction;
    const double proj_std = std::sqrt(1.0 / static_cast<double>(channels));
    p_.theta_w = normal_tensor({inner, channels, 1, 1}, proj_std, rng);
    p_.theta_b = zeros({inner});
    p_.phi_w = normal_tensor({inner, channels, 1, 1}, proj_std, rng);
    p_.phi_b = zeros({inner});
    p_.g_w = normal_tensor({inner, channels, 1, 1}, proj_std, rng);
    p_.g_b = zeros({inner});
    if (cfg.out_proj_init == ProjectionInit::zero) {
      p_.out_w = zeros({channels, inner, 1, 1});
    } else {
      p_.out_w = normal_tensor({channels, inner, 1, 1},
                               std::sqrt(1.0 / static_cast<double>(inner)), rng);
    }
    p_.out_b = zeros({channels});
    p_.out_bn = BatchNorm2d(channels).params();
  }

  std::string kind() const override { return "ga"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    Tensor attn;
    Tensor y = global_attention(x, p_, ctx.training, ctx.on_attention ? &attn : nullptr);
    if (ctx.on_attention) ctx.on_attention(ctx.node, attn);
    return y;
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "theta.weight"), p_.theta_w, true});
    out.push_back({join_name(prefix, "theta.bias"), p_.theta_b, true});
    out.push_back({join_name(prefix, "phi.weight"), p_.phi_w, true});
    out.push_back({join_name(prefix, "phi.bias"), p_.phi_b, true});
    out.push_back({join_name(prefix, "g.weight"), p_.g_w, true});
    out.push_back({join_name(prefix, "g.bias"), p_.g_b, true});
    out.push_back({join_name(prefix, "out.weight"), p_.out_w, true});
    out.push_back({join_name(prefix, "out.bias"), p_.out_b, true});
    out.push_back({join_name(prefix, "out_bn.gamma"), p_.out_bn.gamma, true});
    out.push_back({join_name(prefix, "out_bn.beta"), p_.out_bn.beta, true});
    out.push_back({join_name(prefix, "out_bn.running_mean"), p_.out_bn.running_mean, false});
    out.push_back({join_name(prefix, "out_bn.running_var"), p_.out_bn.running_var, false});
  }
  std::string signature() const override {
    return "ga(" + std::to_string(channels_) + "/" + std::to_string(p_.theta_w.size(0)) + ")";
  }
  const GlobalAttentionParams& params() const { return p_; }
  std::size_t channels() const { return channels_; }

 private:
  std::size_t channels_;
  GlobalAttentionParams p_;
};

class LocalAttentionLayer final : public Layer {
 public:
  LocalAttentionLayer(std::size_t in, std::size_t out, std::size_t stride,
                      const AttentionConfig& cfg, Rng& rng)
      : in_(in), out_(out), stride_(stride), k_(cfg.k), heads_(cfg.heads) {
    cfg.validate_neighbourhood();
    cfg.validate_heads(out);
    if (stride != 1 && stride != 2) {
      throw std::invalid_argument("LocalAttentionLayer: stride must be 1 or 2");
    }
    const double proj_std = std::sqrt(1.0 / static_cast<double>(in));
    p_.query_w = normal_tensor({out, in, 1, 1}, proj_std, rng);
    p_.key_w = normal_tensor({out, in, 1, 1}, proj_std, rng);
    p_.value_w = normal_tensor({out, in, 1, 1}, proj_std, rng);
    if (cfg.rel_pos) {
      if (out % 2 != 0) {
        throw std::invalid_argument("LocalAttentionLayer: relative embeddings need an "
                                    "even channel count, got " + std::to_string(out));
      }
      p_.rel_rows = normal_tensor({out / 2, cfg.k}, 0.02, rng);
      p_.rel_cols = normal_tensor({out / 2, cfg.k}, 0.02, rng);
    }
  }

  std::string kind() const override { return "la"; }
  Tensor forward(const Tensor& x, ForwardContext&) override {
    return la_forward(x, p_, k_, heads_, stride_);
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "query.weight"), p_.query_w, true});
    out.push_back({join_name(prefix, "key.weight"), p_.key_w, true});
    out.push_back({join_name(prefix, "value.weight"), p_.value_w, true});
    if (p_.rel_rows.defined()) {
      out.push_back({join_name(prefix, "rel_rows"), p_.rel_rows, true});
      out.push_back({join_name(prefix, "rel_cols"), p_.rel_cols, true});
    }
  }
  std::string signature() const override {
    return "la(" + std::to_string(in_) + "->" + std::to_string(out_) + ",k" +
           std::to_string(k_) + ",h" + std::to_string(heads_) + ",s" +
           std::to_string(stride_) + (p_.rel_rows.defined() ? ",rel" : "") + ")";
  }
  const LocalAttentionParams& params() const { return p_; }
  std::size_t stride() const { return stride_; }

 private:
  std::size_t in_, out_, stride_, k_, heads_;
  LocalAttentionParams p_;
};

/// Local attention on a residual side branch around an existing layer:
/// y = LA_w(LA(x)) + wrapped(x). The wrapped layer keeps its parameter names.
class EmbeddedLocalAttentionLayer final : public Layer {
 public:
  EmbeddedLocalAttentionLayer(std::unique_ptr<Layer> wrapped, std::size_t in,
                              std::size_t out, std::size_t stride,
                              const AttentionConfig& cfg, Rng& rng)
      : wrapped_(std::move(wrapped)),
        la_(in, out, stride, cfg, rng),
        la_w_(out, out, 1, 1, 0, 1, true, rng) {
    if (cfg.out_proj_init == ProjectionInit::zero) la_w_.zero_();
  }

  std::string kind() const override { return "ela"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    const Tensor main = wrapped_->forward(x, ctx);
    const Tensor branch = la_w_.forward(la_.forward(x, ctx), ctx);
    if (branch.shape() != main.shape()) {
      throw std::invalid_argument("ELA: branch shape " + shape_str(branch.shape()) +
                                  " != wrapped output " + shape_str(main.shape()));
    }
    return add(main, branch);
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    wrapped_->collect(prefix, out);
    la_.collect(join_name(prefix, "ela.la"), out);
    la_w_.collect(join_name(prefix, "ela.la_w"), out);
  }
  std::string signature() const override {
    return "ela[" + wrapped_->signature() + "," + la_.signature() + "]";
  }
  const Layer& wrapped() const { return *wrapped_; }
  const LocalAttentionLayer& attention() const { return la_; }
  const Conv2d& output_projection() const { return la_w_; }

 private:
  std::unique_ptr<Layer> wrapped_;
  LocalAttentionLayer la_;
  Conv2d la_w_;
};

// ---------------------------------------------------------------- residuals

/// ResNet basic unit: two 3x3 spatial operators with BN, identity or
/// projection shortcut. The spatial operators are swappable for LA/ELA.
class BasicBlock final : public Layer {
 public:
  BasicBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
      : conv1_(std::make_unique<Conv2d>(in, out, 3, stride, 1, 1, false, rng)),
        bn1_(out),
        conv2_(std::make_unique<Conv2d>(out, out, 3, 1, 1, 1, false, rng)),
        bn2_(out) {
    if (stride != 1 || in != out) {
      downsample_conv_ = std::make_unique<Conv2d>(in, out, 1, stride, 0, 1, false, rng);
      downsample_bn_ = std::make_unique<BatchNorm2d>(out);
    }
  }

  std::string kind() const override { return "basic_block"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    Tensor y = relu(bn1_.forward(conv1_->forward(x, ctx), ctx));
    y = bn2_.forward(conv2_->forward(y, ctx), ctx);
    Tensor shortcut = x;
    if (downsample_conv_) {
      shortcut = downsample_bn_->forward(downsample_conv_->forward(x, ctx), ctx);
    }
    return relu(add(y, shortcut));
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    conv1_->collect(join_name(prefix, "conv1"), out);
    bn1_.collect(join_name(prefix, "bn1"), out);
    conv2_->collect(join_name(prefix, "conv2"), out);
    bn2_.collect(join_name(prefix, "bn2"), out);
    if (downsample_conv_) {
      downsample_conv_->collect(join_name(prefix, "downsample.conv"), out);
      downsample_bn_->collect(join_name(prefix, "downsample.bn"), out);
    }
  }
  std::string signature() const override {
    return "basic[" + conv1_->signature() + "," + conv2_->signature() +
           (downsample_conv_ ? ",ds" : "") + "]";
  }

  std::unique_ptr<Layer>& conv1() { return conv1_; }
  std::unique_ptr<Layer>& conv2() { return conv2_; }

 private:
  std::unique_ptr<Layer> conv1_;
  BatchNorm2d bn1_;
  std::unique_ptr<Layer> conv2_;
  BatchNorm2d bn2_;
  std::unique_ptr<Conv2d> downsample_conv_;
  std::unique_ptr<BatchNorm2d> downsample_bn_;
};

class SqueezeExcite final : public Layer {
 public:
  SqueezeExcite(std::size_t channels, std::size_t squeezed, Rng& rng)
      : reduce_(channels, squeezed, 1, 1, 0, 1, true, rng),
        expand_(squeezed, channels, 1, 1, 0, 1, true, rng) {}
  std::string kind() const override { return "se"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    const std::size_t N = x.size(0), C = x.size(1);
    Tensor s = reshape(global_avg_pool(x), {N, C, 1, 1});
    s = sigmoid(expand_.forward(swish(reduce_.forward(s, ctx)), ctx));
    return mul(x, s);
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    reduce_.collect(join_name(prefix, "reduce"), out);
    expand_.collect(join_name(prefix, "expand"), out);
  }
  std::string signature() const override {
    return "se[" + reduce_.signature() + "]";
  }

 private:
  Conv2d reduce_, expand_;
};

/// Inverted-residual mobile block: [expand 1x1] -> depthwise kxk -> SE ->
/// project 1x1, with identity skip when shapes allow.
class MBConv final : public Layer {
 public:
  MBConv(std::size_t in, std::size_t out, std::size_t expand_ratio, std::size_t kernel,
         std::size_t stride, Rng& rng)
      : in_(in), out_(out), stride_(stride) {
    const std::size_t hidden = in * expand_ratio;
    if (expand_ratio != 1) {
      expand_ = std::make_unique<ConvBnAct>(in, hidden, 1, 1, 1, Activation::swish, rng);
    }
    depthwise_ = std::make_unique<ConvBnAct>(hidden, hidden, kernel, stride, hidden,
                                             Activation::swish, rng);
    se_ = std::make_unique<SqueezeExcite>(hidden, std::max<std::size_t>(1, in / 4), rng);
    project_ = std::make_unique<ConvBnAct>(hidden, out, 1, 1, 1, std::nullopt, rng);
  }

  std::string kind() const override { return "mbconv"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    Tensor y = expand_ ? expand_->forward(x, ctx) : x;
    y = depthwise_->forward(y, ctx);
    y = se_->forward(y, ctx);
    y = project_->forward(y, ctx);
    if (stride_ == 1 && in_ == out_) y = add(y, x);
    return y;
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    if (expand_) expand_->collect(join_name(prefix, "expand"), out);
    depthwise_->collect(join_name(prefix, "depthwise"), out);
    se_->collect(join_name(prefix, "se"), out);
    project_->collect(join_name(prefix, "project"), out);
  }
  std::string signature() const override {
    return "mbconv[" + std::string(expand_ ? expand_->signature() + "," : "") +
           depthwise_->signature() + "," + se_->signature() + "," + project_->signature() + "]";
  }
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t stride() const { return stride_; }

 private:
  std::size_t in_, out_, stride_;
  std::unique_ptr<ConvBnAct> expand_, depthwise_, project_;
  std::unique_ptr<SqueezeExcite> se_;
};

// ---------------------------------------------------------------------- ViT

/// Patch projection + class token + learned positional embedding.
class PatchEmbedding final : public Layer {
 public:
  PatchEmbedding(std::size_t image, std::size_t patch, std::size_t dim, Rng& rng)
      : patch_(patch), dim_(dim) {
    if (image % patch != 0) {
      throw std::invalid_argument("PatchEmbedding: image size " + std::to_string(image) +
                                  " not divisible by patch " + std::to_string(patch));
    }
    grid_ = image / patch;
    proj_ = std::make_unique<Conv2d>(3, dim, patch, patch, 0, 1, true, rng);
    cls_ = normal_tensor({1, 1, dim}, 0.02, rng);
    pos_ = normal_tensor({1, grid_ * grid_ + 1, dim}, 0.02, rng);
  }
  std::string kind() const override { return "patch_embed"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    const std::size_t N = x.size(0);
    Tensor p = proj_->forward(x, ctx);  // [N, D, g, g]
    if (p.size(2) != grid_ || p.size(3) != grid_) {
      throw std::invalid_argument("PatchEmbedding: input " + shape_str(x.shape()) +
                                  " does not match the configured grid");
    }
    p = permute(reshape(p, {N, dim_, grid_ * grid_}), {0, 2, 1});
    Tensor tokens = concat({expand(cls_, {N, 1, dim_}), p}, 1);
    return add(tokens, pos_);
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    proj_->collect(join_name(prefix, "proj"), out);
    out.push_back({join_name(prefix, "cls_token"), cls_, true});
    out.push_back({join_name(prefix, "pos_embed"), pos_, true});
  }
  std::string signature() const override {
    return "patch(" + std::to_string(patch_) + "," + std::to_string(dim_) + "," +
           std::to_string(grid_) + ")";
  }
  std::size_t grid() const { return grid_; }

 private:
  std::size_t patch_, dim_, grid_ = 0;
  std::unique_ptr<Conv2d> proj_;
  Tensor cls_, pos_;
};

class LayerNorm final : public Layer {
 public:
  explicit LayerNorm(std::size_t dim) : gamma_({dim}, 1.0, true), beta_(zeros({dim})) {}
  std::string kind() const override { return "layer_norm"; }
  Tensor forward(const Tensor& x, ForwardContext&) override {
    return layer_norm(x, gamma_, beta_);
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "gamma"), gamma_, true});
    out.push_back({join_name(prefix, "beta"), beta_, true});
  }

 private:
  Tensor gamma_, beta_;
};

class MultiHeadAttentionLayer final : public Layer {
 public:
  MultiHeadAttentionLayer(std::size_t dim, std::size_t heads, Rng& rng)
      : dim_(dim), heads_(heads) {
    if (heads == 0 || dim % heads != 0) {
      throw std::invalid_argument("MultiHeadAttentionLayer: heads must divide dim");
    }
    const double s = std::sqrt(1.0 / static_cast<double>(dim));
    p_.qkv_w = normal_tensor({3 * dim, dim}, s, rng);
    p_.qkv_b = zeros({3 * dim});
    p_.proj_w = normal_tensor({dim, dim}, s, rng);
    p_.proj_b = zeros({dim});
  }
  std::string kind() const override { return "mhsa"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    Tensor attn;
    Tensor y = multi_head_self_attention(x, p_, heads_, ctx.on_attention ? &attn : nullptr);
    if (ctx.on_attention) ctx.on_attention(ctx.node, attn);
    return y;
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    out.push_back({join_name(prefix, "qkv.weight"), p_.qkv_w, true});
    out.push_back({join_name(prefix, "qkv.bias"), p_.qkv_b, true});
    out.push_back({join_name(prefix, "proj.weight"), p_.proj_w, true});
    out.push_back({join_name(prefix, "proj.bias"), p_.proj_b, true});
  }
  std::string signature() const override {
    return "mhsa(" + std::to_string(dim_) + ",h" + std::to_string(heads_) + ")";
  }
  const MhsaParams& params() const { return p_; }

 private:
  std::size_t dim_, heads_;
  MhsaParams p_;
};

/// Pre-norm transformer encoder layer.
class EncoderLayer final : public Layer {
 public:
  EncoderLayer(std::size_t dim, std::size_t heads, std::size_t mlp, Rng& rng)
      : norm1_(dim), attn_(dim, heads, rng), norm2_(dim), fc1_(dim, mlp, rng), fc2_(mlp, dim, rng) {}
  std::string kind() const override { return "encoder"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    Tensor y = add(x, attn_.forward(norm1_.forward(x, ctx), ctx));
    return add(y, fc2_.forward(gelu(fc1_.forward(norm2_.forward(y, ctx), ctx)), ctx));
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    norm1_.collect(join_name(prefix, "norm1"), out);
    attn_.collect(join_name(prefix, "attn"), out);
    norm2_.collect(join_name(prefix, "norm2"), out);
    fc1_.collect(join_name(prefix, "fc1"), out);
    fc2_.collect(join_name(prefix, "fc2"), out);
  }
  std::string signature() const override { return "encoder[" + attn_.signature() + "]"; }

 private:
  LayerNorm norm1_;
  MultiHeadAttentionLayer attn_;
  LayerNorm norm2_;
  Linear fc1_, fc2_;
};

/// Final norm, class-token readout and linear classifier.
class TokenHead final : public Layer {
 public:
  TokenHead(std::size_t dim, std::size_t classes, Rng& rng) : norm_(dim), fc_(dim, classes, rng) {}
  std::string kind() const override { return "token_head"; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override {
    return fc_.forward(select(norm_.forward(x, ctx), 1, 0), ctx);
  }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    norm_.collect(join_name(prefix, "norm"), out);
    fc_.collect(join_name(prefix, "fc"), out);
  }
  std::string signature() const override { return "token_head[" + fc_.signature() + "]"; }

 private:
  LayerNorm norm_;
  Linear fc_;
};

}  // namespace attnhybrid
