#pragma once
// Datasets, the synthetic three-class lesion generator, splits and
// augmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "attnhybrid/image.hpp"
#include "attnhybrid/layers.hpp"

namespace attnhybrid {

struct Dataset {
  std::vector<Tensor> images;  // each [C,H,W], values in [0,1]
  std::vector<int> labels;
  std::size_t class_count = 3;
  std::string split = "train";  // train | val | test | ood

  std::size_t size() const { return images.size(); }

  Shape image_shape() const {
    if (images.empty()) throw std::logic_error("dataset: empty");
    return images.front().shape();
  }

  void validate() const {
    if (images.size() != labels.size()) {
      throw std::invalid_argument("dataset: " + std::to_string(images.size()) + " images but " +
                                  std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count) {
        throw std::invalid_argument("dataset: label " + std::to_string(labels[i]) +
                                    " outside [0, " + std::to_string(class_count) + ")");
      }
      if (images[i].shape() != images.front().shape()) {
        throw std::invalid_argument("dataset: image " + std::to_string(i) + " has shape " +
                                    shape_str(images[i].shape()) + ", expected " +
                                    shape_str(images.front().shape()));
      }
    }
  }

  Dataset subset(const std::vector<std::size_t>& indices, std::string tag) const {
    Dataset out;
    out.class_count = class_count;
    out.split = std::move(tag);
    for (auto i : indices) {
      out.images.push_back(images.at(i));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

// ---------------------------------------------------------------- toy data

struct ToyOptions {
  std::size_t size = 32;
  bool ood = false;
  double noise = 0.04;
  std::array<double, 3> ood_shift{0.10, -0.08, 0.12};
};

namespace detail {

inline double smooth_inside(double radius, double dist) {
  return std::clamp(radius - dist + 0.5, 0.0, 1.0);
}

inline Tensor toy_image(int label, Rng& rng, const ToyOptions& opt) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
  std::normal_distribution<double> noise(0.0, opt.noise);

  const std::size_t S = opt.size;
  const double scale = static_cast<double>(S) / 32.0;
  const std::array<double, 3> skin{0.85 + uni(-0.05, 0.05), 0.68 + uni(-0.05, 0.05),
                                   0.58 + uni(-0.05, 0.05)};
  const std::array<double, 3> lesion{0.45 + uni(-0.06, 0.06), 0.28 + uni(-0.05, 0.05),
                                     0.20 + uni(-0.05, 0.05)};
  const std::array<double, 3> light{0.72, 0.55, 0.45};
  const double cx = (static_cast<double>(S) - 1.0) / 2.0 + uni(-3.0, 3.0) * scale;
  const double cy = (static_cast<double>(S) - 1.0) / 2.0 + uni(-3.0, 3.0) * scale;
  const double r0 = uni(8.0, 11.0) * scale;
  const double phase1 = uni(0.0, 2.0 * std::numbers::pi);
  const double phase2 = uni(0.0, 2.0 * std::numbers::pi);
  const double lobes = std::floor(uni(4.0, 7.0));
  const double stripe_angle = uni(0.0, std::numbers::pi);
  const double period = 6.0 * scale;

  Tensor img({3, S, S}, 0.0);
  auto px = img.data();
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double dist = std::hypot(dx, dy);
      const double theta = std::atan2(dy, dx);
      double radius = r0;
      if (label == 1) {
        radius = r0 * (1.0 + 0.40 * std::sin(lobes * theta + phase1) +
                       0.12 * std::sin((lobes + 3.0) * theta + phase2));
      }
      const double inside = smooth_inside(radius, dist);
      double mix = 0.0;  // 0 = lesion colour, 1 = light texture colour
      if (label == 2) {
        const double u = dx * std::cos(stripe_angle) + dy * std::sin(stripe_angle);
        mix = std::sin(2.0 * std::numbers::pi * u / period) > 0.0 ? 1.0 : 0.0;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const double fg = (1.0 - mix) * lesion[c] + mix * light[c];
        double v = inside * fg + (1.0 - inside) * skin[c] + noise(rng);
        if (opt.ood) v += opt.ood_shift[c];
        px[(c * S + y) * S + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

}  // namespace detail

/// Three classes: 0 round blob, 1 blob with irregular border, 2 striped blob.
/// Samples are interleaved by class and each is drawn from its own stream, so
/// a sample depends only on (seed, index, ood).
inline Dataset generate_toy_dataset(std::uint64_t seed, std::size_t n_per_class,
                                    const ToyOptions& opt = {}) {
  if (n_per_class == 0) throw std::invalid_argument("generate_toy_dataset: n_per_class must be >= 1");
  Dataset ds;
  ds.class_count = 3;
  ds.split = opt.ood ? "ood" : "train";
  for (std::size_t i = 0; i < 3 * n_per_class; ++i) {
    const int label = static_cast<int>(i % 3);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i), opt.ood ? 1u : 0u};
    Rng rng(seq);
    ds.images.push_back(detail::toy_image(label, rng, opt));
    ds.labels.push_back(label);
  }
  return ds;
}

// ------------------------------------------------------------------ splits

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

/// Stratified train/val/test partition; each class contributes
/// floor(train_frac*n_c) to train and round(val_frac*n_c) to val.
inline SplitIndices make_splits(const std::vector<int>& labels, std::size_t class_count,
                                std::uint64_t seed, double train_frac = 0.70,
                                double val_frac = 0.15) {
  if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac > 1.0) {
    throw std::invalid_argument("make_splits: invalid fractions");
  }
  Rng rng(seed);
  SplitIndices out;
  for (std::size_t c = 0; c < class_count; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == static_cast<int>(c)) members.push_back(i);
    }
    shuffle_in_place(members, rng);
    const double n = static_cast<double>(members.size());
    const auto n_train = static_cast<std::size_t>(std::floor(train_frac * n));
    const auto n_val = std::min(members.size() - n_train,
                                static_cast<std::size_t>(std::llround(val_frac * n)));
    for (std::size_t i = 0; i < members.size(); ++i) {
      auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
      dst.push_back(members[i]);
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// ------------------------------------------------------------ augmentation

struct AugmentPolicy {
  double p_crop = 0.5;
  double crop_min_scale = 0.8;  // side fraction kept
  double p_affine = 0.5;
  double max_rotation_deg = 15.0;
  double max_zoom = 0.1;
  double max_shear_deg = 8.0;
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_color = 0.5;
  double hue = 0.03;  // fraction of the hue circle
  double brightness = 0.15;
  double contrast = 0.15;
  double saturation = 0.15;

  static AugmentPolicy none() {
    return {0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  }
};

namespace detail {

// Bilinear sample with border replication.
inline double sample_bilinear(std::span<const double> plane, std::size_t H, std::size_t W,
                              double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  return (1 - fy) * ((1 - fx) * plane[y0 * W + x0] + fx * plane[y0 * W + x1]) +
         fy * ((1 - fx) * plane[y1 * W + x0] + fx * plane[y1 * W + x1]);
}

// out(y,x) = in(map(y,x)) for every channel.
template <typename Map>
Tensor remap(const Tensor& img, Map&& map) {
  const std::size_t C = img.size(0), H = img.size(1), W = img.size(2);
  Tensor out(img.shape(), 0.0);
  auto src = img.data();
  auto dst = out.data();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const auto [sy, sx] = map(static_cast<double>(y), static_cast<double>(x));
      for (std::size_t c = 0; c < C; ++c) {
        dst[(c * H + y) * W + x] = sample_bilinear(src.subspan(c * H * W, H * W), H, W, sy, sx);
      }
    }
  }
  return out;
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = std::fmod((g - b) / d + 6.0, 6.0) / 6.0;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0) / 6.0;
  } else {
    h = ((r - g) / d + 4.0) / 6.0;
  }
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = (h - std::floor(h)) * 6.0;
  const auto sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

}  // namespace detail

inline Tensor flip_horizontal(const Tensor& img) {
  const double last = static_cast<double>(img.size(2) - 1);
  return detail::remap(img, [&](double y, double x) { return std::pair{y, last - x}; });
}

inline Tensor flip_vertical(const Tensor& img) {
  const double last = static_cast<double>(img.size(1) - 1);
  return detail::remap(img, [&](double y, double x) { return std::pair{last - y, x}; });
}

/// Random crop-and-resize, affine warp, flips and HSV-space colour jitter.
/// Expects a 3-channel [C,H,W] image in [0,1].
inline Tensor augment(const Tensor& image, Rng& rng, const AugmentPolicy& policy = {}) {
  if (image.rank() != 3 || image.size(0) != 3) {
    throw std::invalid_argument("augment: expected [3,H,W], got " + shape_str(image.shape()));
  }
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
  auto coin = [&](double p) { return p > 0.0 && U(rng) < p; };
  const std::size_t H = image.size(1), W = image.size(2);
  const double cy = (static_cast<double>(H) - 1) / 2.0, cx = (static_cast<double>(W) - 1) / 2.0;
  Tensor img = image.detach();

  if (coin(policy.p_crop)) {
    const double s = uni(policy.crop_min_scale, 1.0);
    const double ch = s * static_cast<double>(H - 1), cw = s * static_cast<double>(W - 1);
    const double oy = uni(0.0, static_cast<double>(H - 1) - ch);
    const double ox = uni(0.0, static_cast<double>(W - 1) - cw);
    const double sy = ch / static_cast<double>(H - 1), sx = cw / static_cast<double>(W - 1);
    img = detail::remap(img, [&](double y, double x) { return std::pair{oy + y * sy, ox + x * sx}; });
  }
  if (coin(policy.p_affine)) {
    const double rad = std::numbers::pi / 180.0;
    const double angle = uni(-policy.max_rotation_deg, policy.max_rotation_deg) * rad;
    const double zoom = 1.0 + uni(-policy.max_zoom, policy.max_zoom);
    const double shear = std::tan(uni(-policy.max_shear_deg, policy.max_shear_deg) * rad);
    // forward map A = zoom * R(angle) * [[1, shear], [0, 1]]; sample with A^-1
    const double c = std::cos(angle), s = std::sin(angle);
    const double a00 = zoom * c, a01 = zoom * (c * shear - s);
    const double a10 = zoom * s, a11 = zoom * (s * shear + c);
    const double det = a00 * a11 - a01 * a10;
    img = detail::remap(img, [&](double y, double x) {
      const double u = x - cx, v = y - cy;
      const double su = (a11 * u - a01 * v) / det;
      const double sv = (-a10 * u + a00 * v) / det;
      return std::pair{cy + sv, cx + su};
    });
  }
  if (coin(policy.p_hflip)) img = flip_horizontal(img);
  if (coin(policy.p_vflip)) img = flip_vertical(img);
  if (coin(policy.p_color)) {
    const double dh = uni(-policy.hue, policy.hue);
    const double fb = uni(1.0 - policy.brightness, 1.0 + policy.brightness);
    const double fc = uni(1.0 - policy.contrast, 1.0 + policy.contrast);
    const double fs = uni(1.0 - policy.saturation, 1.0 + policy.saturation);
    auto px = img.data();
    const std::size_t P = H * W;
    double grey_mean = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      grey_mean += 0.299 * px[p] + 0.587 * px[P + p] + 0.114 * px[2 * P + p];
    }
    grey_mean /= static_cast<double>(P);
    for (std::size_t p = 0; p < P; ++p) {
      double h, s, v;
      detail::rgb_to_hsv(px[p], px[P + p], px[2 * P + p], h, s, v);
      h += dh;
      s = std::clamp(s * fs, 0.0, 1.0);
      v = std::clamp(v * fb, 0.0, 1.0);
      double rgb[3];
      detail::hsv_to_rgb(h, s, v, rgb[0], rgb[1], rgb[2]);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        px[ch * P + p] = (rgb[ch] - grey_mean * fb) * fc + grey_mean * fb;
      }
    }
  }
  for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

/// Stacks dataset items into an [B,C,H,W] batch, optionally augmenting.
inline Tensor make_batch(const Dataset& ds, std::span<const std::size_t> indices,
                         std::vector<int>& labels, Rng* augment_rng = nullptr,
                         const AugmentPolicy& policy = {}) {
  const Shape item = ds.image_shape();
  const std::size_t per = shape_numel(item);
  Shape shape{indices.size()};
  shape.insert(shape.end(), item.begin(), item.end());
  Tensor batch(shape, 0.0);
  labels.clear();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor img = augment_rng ? augment(ds.images[indices[b]], *augment_rng, policy)
                                   : ds.images[indices[b]];
    std::copy(img.data().begin(), img.data().end(), batch.data().begin() + b * per);
    labels.push_back(ds.labels[indices[b]]);
  }
  return batch;
}

// ------------------------------------------------------------- image bridge

/// [3,H,W] tensor in [0,1]; grey images are replicated across channels.
inline Tensor image_to_tensor(const Image8& img) {
  const std::size_t H = img.height, W = img.width;
  Tensor t({3, H, W}, 0.0);
  auto px = t.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < H * W; ++p) {
      const std::size_t src = img.channels == 1 ? p : p * 3 + c;
      px[c * H * W + p] = img.pixels[src] / 255.0;
    }
  return t;
}

inline Image8 tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || (t.size(0) != 3 && t.size(0) != 1)) {
    throw std::invalid_argument("tensor_to_image: expected [3,H,W] or [1,H,W]");
  }
  Image8 img;
  img.channels = t.size(0);
  img.height = t.size(1);
  img.width = t.size(2);
  img.pixels.resize(img.channels * img.height * img.width);
  const std::size_t P = img.height * img.width;
  auto px = t.data();
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t p = 0; p < P; ++p) {
      const double v = std::clamp(px[c * P + p], 0.0, 1.0);
      img.pixels[p * img.channels + c] = static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
    }
  return img;
}

// --------------------------------------------------------- dataset on disk
// DIR/labels.csv holds "file,label,split"; images are P6 files in DIR.

inline void save_dataset_dir(const std::string& dir, const std::vector<const Dataset*>& parts) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream csv(fs::path(dir) / "labels.csv");
  if (!csv) throw std::runtime_error("cannot write '" + dir + "/labels.csv'");
  csv << "file,label,split\n";
  for (const Dataset* ds : parts) {
    for (std::size_t i = 0; i < ds->size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%05zu.ppm", ds->split.c_str(), i);
      write_netpbm((fs::path(dir) / name).string(), tensor_to_image(ds->images[i]));
      csv << name << "," << ds->labels[i] << "," << ds->split << "\n";
    }
  }
}

/// Returns one dataset per split tag found, in first-appearance order.
inline std::vector<Dataset> load_dataset_dir(const std::string& dir, std::size_t class_count = 3) {
  namespace fs = std::filesystem;
  std::ifstream csv(fs::path(dir) / "labels.csv");
  if (!csv) throw std::runtime_error("cannot open '" + dir + "/labels.csv'");
  std::vector<Dataset> out;
  std::string line;
  std::getline(csv, line);
  std::size_t line_no = 1;
  while (std::getline(csv, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string file, label, split;
    if (!std::getline(ss, file, ',') || !std::getline(ss, label, ',') || !std::getline(ss, split)) {
      throw std::runtime_error(dir + "/labels.csv:" + std::to_string(line_no) + ": malformed row");
    }
    auto it = std::find_if(out.begin(), out.end(), [&](const Dataset& d) { return d.split == split; });
    if (it == out.end()) {
      out.push_back({});
      out.back().split = split;
      out.back().class_count = class_count;
      it = out.end() - 1;
    }
    it->images.push_back(image_to_tensor(read_netpbm((fs::path(dir) / file).string())));
    it->labels.push_back(std::stoi(label));
  }
  for (auto& d : out) d.validate();
  return out;
}

}  // namespace attnhybrid
