#pragma once
// Plain SGD training and evaluation.

#include <cmath>
#include <functional>
#include <numeric>

#include "attnhybrid/backbones.hpp"
#include "attnhybrid/data.hpp"

namespace attnhybrid {

struct Hyperparameters {
  double learning_rate = 0.01;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("hyperparameters: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("hyperparameters: weight_decay must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("hyperparameters: batch_size must be >= 1");
  }
};

/// p <- p - lr * (g + weight_decay * p) for every parameter holding a gradient.
inline void sgd_step(std::span<Tensor> params, double lr, double weight_decay) {
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto v = p.data();
    auto g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * (g[i] + weight_decay * v[i]);
  }
}

/// Mean per-class recall over the classes present in `labels`.
inline double balanced_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                std::size_t class_count) {
  if (labels.empty()) throw std::invalid_argument("balanced_accuracy: empty input");
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("balanced_accuracy: " + std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> hits(class_count, 0), totals(class_count, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= class_count) throw std::invalid_argument("balanced_accuracy: label out of range");
    ++totals[y];
    if (predictions[i] == labels[i]) ++hits[y];
  }
  double acc = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < class_count; ++c) {
    if (totals[c] == 0) continue;
    acc += static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
    ++present;
  }
  return acc / static_cast<double>(present);
}

struct TrainOptions {
  Hyperparameters hyper;
  bool augment = true;
  AugmentPolicy policy;
  std::function<void(std::size_t epoch, double mean_loss)> on_epoch;
};

struct TrainResult {
  std::vector<double> epoch_losses;  // mean training loss per epoch
  bool diverged = false;             // a non-finite loss stopped training
};

inline TrainResult train_model(const ModelGraph& model, const Dataset& train, const TrainOptions& opt) {
  opt.hyper.validate();
  train.validate();
  TrainResult result;
  std::vector<Tensor> params = model.parameters();
  Rng order_rng(opt.hyper.seed);
  Rng aug_rng(opt.hyper.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  const std::size_t B = opt.hyper.batch_size;
  for (std::size_t epoch = 0; epoch < opt.hyper.epochs; ++epoch) {
    shuffle_in_place(order, order_rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::size_t count = std::min(B, order.size() - start);
      if (count < 2 && seen > 0) break;  // batch statistics need two samples
      const Tensor x = make_batch(train, std::span(order).subspan(start, count), labels,
                                  opt.augment ? &aug_rng : nullptr, opt.policy);
      ForwardContext ctx;
      ctx.training = true;
      const Tensor loss = cross_entropy(model.forward(x, ctx), labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        result.diverged = true;
        return result;
      }
      for (auto& p : params) p.zero_grad();
      backward(loss);
      sgd_step(params, opt.hyper.learning_rate, opt.hyper.weight_decay);
      loss_sum += value * static_cast<double>(count);
      seen += count;
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(seen));
    if (opt.on_epoch) opt.on_epoch(epoch, result.epoch_losses.back());
  }
  return result;
}

/// Arg-max class per sample, evaluated without recording a tape.
inline std::vector<int> predict(const ModelGraph& model, const Dataset& ds, std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> preds, labels;
  for (std::size_t start = 0; start < all.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, all.size() - start);
    const Tensor logits = model.forward(make_batch(ds, std::span(all).subspan(start, count), labels));
    const std::size_t K = logits.size(1);
    for (std::size_t n = 0; n < count; ++n) {
      auto row = logits.data().subspan(n * K, K);
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k) {
        if (row[k] > row[best]) best = k;
      }
      preds.push_back(static_cast<int>(best));
    }
  }
  return preds;
}

inline double evaluate_balanced_accuracy(const ModelGraph& model, const Dataset& ds) {
  const auto preds = predict(model, ds);
  return balanced_accuracy(preds, ds.labels, ds.class_count);
}

}  // namespace attnhybrid
