#pragma once
/*
 * Config-driven construction of ResNet18, EfficientNet-B0 and ViT-tiny
 * (plus width/8 "mini" variants for 32x32 inputs), global-attention
 * insertion after chosen blocks, and LA / ELA replacement of the final block.
 *
 * Node naming: stem.*, block<b>.unit<u>, block<b>.ga, head.*; block indices
 * are 1-based. Parameter names extend the node name (block4.unit0.conv1.weight)
 * and an ELA wrapper keeps the names of the layer it wraps, so weights can be
 * copied between a baseline and its hybrid by name.
 */

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "attnhybrid/config.hpp"
#include "attnhybrid/layers.hpp"

namespace attnhybrid {

enum class Backbone { resnet18, efficientnet_b0, vit_tiny, mini_resnet, mini_efficientnet };
enum class Replacement { none, la, ela };

inline std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::resnet18: return "resnet18";
    case Backbone::efficientnet_b0: return "efficientnet_b0";
    case Backbone::vit_tiny: return "vit_tiny";
    case Backbone::mini_resnet: return "mini_resnet";
    case Backbone::mini_efficientnet: return "mini_efficientnet";
  }
  return "?";
}

inline Backbone parse_backbone(std::string_view s) {
  for (Backbone b : {Backbone::resnet18, Backbone::efficientnet_b0, Backbone::vit_tiny,
                     Backbone::mini_resnet, Backbone::mini_efficientnet}) {
    if (to_string(b) == s) return b;
  }
  throw std::invalid_argument("unknown backbone '" + std::string(s) + "'");
}

inline std::string to_string(Replacement r) {
  switch (r) {
    case Replacement::none: return "none";
    case Replacement::la: return "la";
    case Replacement::ela: return "ela";
  }
  return "?";
}

inline Replacement parse_replacement(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
  if (lower == "none") return Replacement::none;
  if (lower == "la") return Replacement::la;
  if (lower == "ela") return Replacement::ela;
  throw std::invalid_argument("unknown replacement mode '" + std::string(s) + "'");
}

inline bool is_convolutional(Backbone b) { return b != Backbone::vit_tiny; }
inline bool is_resnet(Backbone b) { return b == Backbone::resnet18 || b == Backbone::mini_resnet; }
inline bool is_mini(Backbone b) {
  return b == Backbone::mini_resnet || b == Backbone::mini_efficientnet;
}

inline std::size_t block_count(Backbone b) {
  switch (b) {
    case Backbone::resnet18:
    case Backbone::mini_resnet: return 4;
    case Backbone::efficientnet_b0:
    case Backbone::mini_efficientnet: return 7;
    case Backbone::vit_tiny: return 12;
  }
  return 0;
}

/// GA insertion points used for the hybrids: after blocks 1 and 2 for
/// ResNet, after blocks 2 and 3 for EfficientNet.
inline std::vector<std::size_t> default_ga_positions(Backbone b) {
  if (is_resnet(b)) return {1, 2};
  if (b == Backbone::vit_tiny) return {};
  return {2, 3};
}

struct ArchitectureRecipe {
  Backbone backbone = Backbone::resnet18;
  std::vector<std::size_t> attach_ga_after;
  Replacement replace_last_block_with = Replacement::none;
  std::size_t class_count = 3;
  AttentionConfig attention;
  std::size_t input_size = 0;  // 0: backbone default (224 full, 32 mini)
  std::uint64_t seed = 0;

  std::size_t resolved_input_size() const {
    if (input_size) return input_size;
    return is_mini(backbone) ? 32 : 224;
  }

  void validate() const {
    if (class_count == 0) throw std::invalid_argument("recipe: class_count must be positive");
    if (backbone == Backbone::vit_tiny) {
      if (!attach_ga_after.empty()) {
        throw std::invalid_argument("recipe: GA insertion is not supported inside ViT");
      }
      if (replace_last_block_with != Replacement::none) {
        throw std::invalid_argument("recipe: LA/ELA replacement requires a convolutional backbone");
      }
    }
    const std::size_t blocks = block_count(backbone);
    std::set<std::size_t> seen;
    for (auto b : attach_ga_after) {
      if (b < 1 || b > blocks) {
        throw std::invalid_argument("recipe: GA block index " + std::to_string(b) +
                                    " outside 1.." + std::to_string(blocks));
      }
      if (!seen.insert(b).second) {
        throw std::invalid_argument("recipe: duplicate GA block index " + std::to_string(b));
      }
    }
    attention.validate_neighbourhood();
  }
};

/// Short label such as "resnet18+ga+ela" (GA at non-default positions is
/// spelled ga@1:3).
inline std::string recipe_label(const ArchitectureRecipe& r) {
  std::string label = to_string(r.backbone);
  if (!r.attach_ga_after.empty()) {
    if (r.attach_ga_after == default_ga_positions(r.backbone)) {
      label += "+ga";
    } else {
      label += "+ga@";
      for (std::size_t i = 0; i < r.attach_ga_after.size(); ++i) {
        if (i) label += ':';
        label += std::to_string(r.attach_ga_after[i]);
      }
    }
  }
  if (r.replace_last_block_with != Replacement::none) {
    label += "+" + to_string(r.replace_last_block_with);
  }
  return label;
}

/// Inverse of recipe_label: "<backbone>[+ga[@i:j]][+la|+ela]".
inline ArchitectureRecipe parse_recipe_label(std::string_view label) {
  ArchitectureRecipe r;
  std::vector<std::string> parts;
  std::string cur;
  for (char c : label) {
    if (c == '+') {
      parts.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  parts.push_back(cur);
  r.backbone = parse_backbone(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const std::string& p = parts[i];
    if (p == "ga") {
      r.attach_ga_after = default_ga_positions(r.backbone);
    } else if (p.rfind("ga@", 0) == 0) {
      r.attach_ga_after.clear();
      std::stringstream ss(p.substr(3));
      std::string item;
      while (std::getline(ss, item, ':')) r.attach_ga_after.push_back(std::stoul(item));
    } else {
      r.replace_last_block_with = parse_replacement(p);
    }
  }
  r.validate();
  return r;
}

struct LayerNode {
  std::string name;
  std::unique_ptr<Layer> layer;
};

/// Called with every node output (and every finished block as "block<b>");
/// the returned tensor replaces the output downstream.
using NodeHook = std::function<Tensor(const std::string&, Tensor)>;

class ModelGraph {
 public:
  ArchitectureRecipe recipe;
  std::vector<LayerNode> stem;
  std::vector<std::vector<LayerNode>> blocks;
  std::vector<LayerNode> head;
  std::vector<std::size_t> block_channels;  // output channels per block (conv backbones)

  Tensor forward(const Tensor& x, ForwardContext& ctx, const NodeHook& hook = {}) const {
    Tensor y = x;
    auto run = [&](const LayerNode& node) {
      ctx.node = node.name;
      y = node.layer->forward(y, ctx);
      if (hook) y = hook(node.name, y);
    };
    for (const auto& n : stem) run(n);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      for (const auto& n : blocks[b]) run(n);
      if (hook) y = hook("block" + std::to_string(b + 1), y);
    }
    for (const auto& n : head) run(n);
    return y;
  }

  Tensor forward(const Tensor& x, bool training = false) const {
    ForwardContext ctx;
    ctx.training = training;
    return forward(x, ctx);
  }

  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    for_each_node([&](const LayerNode& n) { n.layer->collect(n.name, out); });
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : named_tensors()) {
      if (nt.learnable) out.push_back(nt.tensor);
    }
    return out;
  }

  std::vector<std::string> node_names() const {
    std::vector<std::string> out;
    for_each_node([&](const LayerNode& n) { out.push_back(n.name); });
    return out;
  }

  /// One line per node: "name: signature".
  std::string structure() const {
    std::string out;
    for_each_node([&](const LayerNode& n) {
      out += n.name + ": " + n.layer->signature() + "\n";
    });
    return out;
  }

  const LayerNode* find_node(const std::string& name) const {
    const LayerNode* found = nullptr;
    for_each_node([&](const LayerNode& n) {
      if (n.name == name) found = &n;
    });
    return found;
  }

  std::vector<std::string> nodes_of_kind(std::string_view kind) const {
    std::vector<std::string> out;
    for_each_node([&](const LayerNode& n) {
      if (n.layer->kind() == kind) out.push_back(n.name);
    });
    return out;
  }

  void zero_grad() const {
    for (auto& p : parameters()) p.zero_grad();
  }

  template <typename F>
  void for_each_node(F&& f) const {
    for (const auto& n : stem) f(n);
    for (const auto& blk : blocks)
      for (const auto& n : blk) f(n);
    for (const auto& n : head) f(n);
  }
};

/// Sum of extents of all learnable tensors; running statistics excluded.
inline std::size_t count_parameters(const ModelGraph& graph) {
  std::size_t total = 0;
  for (const auto& nt : graph.named_tensors()) {
    if (nt.learnable) total += nt.tensor.numel();
  }
  return total;
}

/// Copies every tensor of `src` whose name and shape exist in `dst`.
/// Returns the number of tensors copied.
inline std::size_t copy_matching_tensors(const ModelGraph& src, const ModelGraph& dst) {
  std::map<std::string, Tensor> by_name;
  for (auto& nt : src.named_tensors()) by_name.emplace(nt.name, nt.tensor);
  std::size_t copied = 0;
  for (auto& nt : dst.named_tensors()) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end() || it->second.shape() != nt.tensor.shape()) continue;
    std::copy(it->second.data().begin(), it->second.data().end(), nt.tensor.data().begin());
    ++copied;
  }
  return copied;
}

namespace detail {

inline std::size_t make_divisible(double v, std::size_t divisor) {
  std::size_t out = std::max<std::size_t>(
      divisor, static_cast<std::size_t>(v + static_cast<double>(divisor) / 2.0) / divisor * divisor);
  if (static_cast<double>(out) < 0.9 * v) out += divisor;
  return out;
}

inline std::unique_ptr<Layer> input_standardize() {
  return std::make_unique<Standardize>(std::vector<double>{0.5, 0.5, 0.5},
                                       std::vector<double>{0.25, 0.25, 0.25});
}

inline void build_resnet(ModelGraph& g, bool mini, Rng& rng) {
  const std::size_t div = mini ? 8 : 1;
  const std::size_t stem_width = 64 / div;
  g.stem.push_back({"stem.norm", input_standardize()});
  if (mini) {
    g.stem.push_back({"stem.conv", std::make_unique<ConvBnAct>(3, stem_width, 3, 2, 1,
                                                               Activation::relu, rng)});
  } else {
    g.stem.push_back({"stem.conv", std::make_unique<ConvBnAct>(3, stem_width, 7, 2, 1,
                                                               Activation::relu, rng)});
    g.stem.push_back({"stem.pool", std::make_unique<MaxPool>(3, 2, 1)});
  }
  std::size_t in = stem_width;
  const std::size_t widths[4] = {64, 128, 256, 512};
  for (std::size_t b = 0; b < 4; ++b) {
    const std::size_t out = widths[b] / div;
    std::vector<LayerNode> units;
    for (std::size_t u = 0; u < 2; ++u) {
      const std::size_t stride = (b > 0 && u == 0) ? 2 : 1;
      units.push_back({"block" + std::to_string(b + 1) + ".unit" + std::to_string(u),
                       std::make_unique<BasicBlock>(u == 0 ? in : out, out, stride, rng)});
    }
    g.blocks.push_back(std::move(units));
    g.block_channels.push_back(out);
    in = out;
  }
  g.head.push_back({"head", std::make_unique<ClassifierHead>(in, g.recipe.class_count, rng)});
}

inline void build_efficientnet(ModelGraph& g, bool mini, Rng& rng) {
  auto width = [mini](std::size_t c) {
    return mini ? make_divisible(static_cast<double>(c) / 8.0, 4) : c;
  };
  struct Stage {
    std::size_t expand, kernel, stride, out, repeats;
  };
  const Stage stages[7] = {{1, 3, 1, 16, 1}, {6, 3, 2, 24, 2},  {6, 5, 2, 40, 2},
                           {6, 3, 2, 80, 3}, {6, 5, 1, 112, 3}, {6, 5, 2, 192, 4},
                           {6, 3, 1, 320, 1}};
  const std::size_t stem_width = width(32);
  g.stem.push_back({"stem.norm", input_standardize()});
  g.stem.push_back({"stem.conv", std::make_unique<ConvBnAct>(3, stem_width, 3, mini ? 1 : 2, 1,
                                                             Activation::swish, rng)});
  std::size_t in = stem_width;
  for (std::size_t s = 0; s < 7; ++s) {
    const std::size_t out = width(stages[s].out);
    std::vector<LayerNode> units;
    for (std::size_t u = 0; u < stages[s].repeats; ++u) {
      units.push_back({"block" + std::to_string(s + 1) + ".unit" + std::to_string(u),
                       std::make_unique<MBConv>(u == 0 ? in : out, out, stages[s].expand,
                                                stages[s].kernel, u == 0 ? stages[s].stride : 1,
                                                rng)});
    }
    g.blocks.push_back(std::move(units));
    g.block_channels.push_back(out);
    in = out;
  }
  const std::size_t head_width = width(1280);
  g.head.push_back({"head.conv", std::make_unique<ConvBnAct>(in, head_width, 1, 1, 1,
                                                             Activation::swish, rng)});
  g.head.push_back(
      {"head.classifier", std::make_unique<ClassifierHead>(head_width, g.recipe.class_count, rng)});
}

inline void build_vit_tiny(ModelGraph& g, Rng& rng) {
  constexpr std::size_t dim = 192, depth = 12, heads = 3, mlp = 768, patch = 16;
  g.stem.push_back({"stem.norm", input_standardize()});
  g.stem.push_back({"stem.patch_embed",
                    std::make_unique<PatchEmbedding>(g.recipe.resolved_input_size(), patch, dim, rng)});
  for (std::size_t b = 0; b < depth; ++b) {
    std::vector<LayerNode> units;
    units.push_back({"block" + std::to_string(b + 1) + ".encoder",
                     std::make_unique<EncoderLayer>(dim, heads, mlp, rng)});
    g.blocks.push_back(std::move(units));
    g.block_channels.push_back(dim);
  }
  g.head.push_back({"head", std::make_unique<TokenHead>(dim, g.recipe.class_count, rng)});
}

}  // namespace detail

/// Inserts a GA block after each listed (1-based) block.
inline void insert_global_attention(ModelGraph& g, const std::vector<std::size_t>& after,
                                    const AttentionConfig& cfg, Rng& rng) {
  if (after.empty()) return;
  if (!is_convolutional(g.recipe.backbone)) {
    throw std::invalid_argument("GA insertion is not supported inside ViT");
  }
  AttentionConfig ga_cfg = cfg;
  ga_cfg.kind = AttentionKind::ga;
  ga_cfg.out_proj_init = ProjectionInit::zero;
  for (auto b : after) {
    if (b < 1 || b > g.blocks.size()) {
      throw std::invalid_argument("GA block index " + std::to_string(b) + " does not exist");
    }
    const std::string name = "block" + std::to_string(b) + ".ga";
    for (const auto& n : g.blocks[b - 1]) {
      if (n.name == name) throw std::invalid_argument("GA already present after block " + std::to_string(b));
    }
    g.blocks[b - 1].push_back(
        {name, std::make_unique<GlobalAttentionLayer>(g.block_channels[b - 1], ga_cfg, rng)});
  }
}

/// ResNet: every 3x3 convolution of the last block becomes LA, or is wrapped
/// in ELA; shortcut projections stay convolutions. EfficientNet: every MBConv
/// of the last stage is replaced whole by LA (in -> out channels) or wrapped
/// whole in ELA.
inline void replace_last_block(ModelGraph& g, Replacement mode, const AttentionConfig& cfg,
                               Rng& rng) {
  if (mode == Replacement::none) return;
  if (!is_convolutional(g.recipe.backbone)) {
    throw std::invalid_argument("LA/ELA replacement requires a convolutional backbone");
  }
  AttentionConfig la_cfg = cfg;
  la_cfg.kind = mode == Replacement::la ? AttentionKind::la : AttentionKind::ela;
  la_cfg.out_proj_init = ProjectionInit::zero;

  auto replace = [&](std::unique_ptr<Layer> old, std::size_t in, std::size_t out,
                     std::size_t stride) -> std::unique_ptr<Layer> {
    if (mode == Replacement::la) {
      return std::make_unique<LocalAttentionLayer>(in, out, stride, la_cfg, rng);
    }
    return std::make_unique<EmbeddedLocalAttentionLayer>(std::move(old), in, out, stride, la_cfg, rng);
  };

  auto& last = g.blocks.back();
  for (auto& node : last) {
    if (auto* unit = dynamic_cast<BasicBlock*>(node.layer.get())) {
      for (auto* slot : {&unit->conv1(), &unit->conv2()}) {
        auto* conv = dynamic_cast<Conv2d*>(slot->get());
        if (!conv) throw std::logic_error("last block already modified");
        const std::size_t in = conv->in_channels(), out = conv->out_channels(),
                          stride = conv->stride();
        *slot = replace(std::move(*slot), in, out, stride);
      }
    } else if (auto* mb = dynamic_cast<MBConv*>(node.layer.get())) {
      const std::size_t in = mb->in_channels(), out = mb->out_channels(), stride = mb->stride();
      node.layer = replace(std::move(node.layer), in, out, stride);
    }
  }
  g.recipe.replace_last_block_with = mode;
}

inline ModelGraph build(const ArchitectureRecipe& recipe) {
  recipe.validate();
  ModelGraph g;
  g.recipe = recipe;
  Rng rng(recipe.seed);
  switch (recipe.backbone) {
    case Backbone::resnet18: detail::build_resnet(g, false, rng); break;
    case Backbone::mini_resnet: detail::build_resnet(g, true, rng); break;
    case Backbone::efficientnet_b0: detail::build_efficientnet(g, false, rng); break;
    case Backbone::mini_efficientnet: detail::build_efficientnet(g, true, rng); break;
    case Backbone::vit_tiny: detail::build_vit_tiny(g, rng); break;
  }
  insert_global_attention(g, recipe.attach_ga_after, recipe.attention, rng);
  replace_last_block(g, recipe.replace_last_block_with, recipe.attention, rng);
  return g;
}

// ------------------------------------------------------------ recipe as text

inline std::string recipe_to_text(const ArchitectureRecipe& r) {
  std::ostringstream os;
  os << "backbone = " << to_string(r.backbone) << "\n";
  os << "attach_ga_after = ";
  for (std::size_t i = 0; i < r.attach_ga_after.size(); ++i) {
    if (i) os << ", ";
    os << r.attach_ga_after[i];
  }
  os << "\n";
  os << "replace_last_block_with = " << to_string(r.replace_last_block_with) << "\n";
  os << "class_count = " << r.class_count << "\n";
  os << "k = " << r.attention.k << "\n";
  os << "heads = " << r.attention.heads << "\n";
  os << "channel_reduction = " << r.attention.channel_reduction << "\n";
  os << "rel_pos = " << (r.attention.rel_pos ? "true" : "false") << "\n";
  os << "input_size = " << r.input_size << "\n";
  os << "seed = " << r.seed << "\n";
  return os.str();
}

/// Reads a recipe from key-value form. A `recipe` key holding a label
/// ("resnet18+ga+ela") may stand in for backbone / attach_ga_after /
/// replace_last_block_with.
inline ArchitectureRecipe recipe_from_config(const KeyValueConfig& cfg) {
  ArchitectureRecipe r;
  if (cfg.has("recipe")) {
    r = parse_recipe_label(cfg.require("recipe"));
  } else {
    r.backbone = parse_backbone(cfg.require("backbone"));
    r.attach_ga_after = cfg.get_uint_list("attach_ga_after");
    r.replace_last_block_with = parse_replacement(cfg.get("replace_last_block_with", "none"));
  }
  r.class_count = cfg.get_uint("class_count", r.class_count);
  r.attention.k = cfg.get_uint("k", r.attention.k);
  r.attention.heads = cfg.get_uint("heads", r.attention.heads);
  r.attention.channel_reduction = cfg.get_uint("channel_reduction", r.attention.channel_reduction);
  r.attention.rel_pos = cfg.get_bool("rel_pos", r.attention.rel_pos);
  r.input_size = cfg.get_uint("input_size", r.input_size);
  r.seed = cfg.get_uint("seed", r.seed);
  r.validate();
  return r;
}

// ---------------------------------------------------------- count table

struct CountRow {
  std::string recipe;
  std::size_t params = 0;
  double delta_percent = 0.0;  // relative to the unmodified backbone
};

/// The six variants of each convolutional backbone followed by ViT-tiny.
inline std::vector<ArchitectureRecipe> standard_count_recipes(std::size_t class_count = 3) {
  std::vector<ArchitectureRecipe> out;
  for (const char* backbone : {"resnet18", "efficientnet_b0"}) {
    for (const char* variant : {"", "+ga", "+la", "+ga+la", "+ela", "+ga+ela"}) {
      out.push_back(parse_recipe_label(std::string(backbone) + variant));
    }
  }
  out.push_back(parse_recipe_label("vit_tiny"));
  for (auto& r : out) r.class_count = class_count;
  return out;
}

inline std::vector<CountRow> count_rows(const std::vector<ArchitectureRecipe>& recipes) {
  std::vector<CountRow> rows;
  std::map<std::string, std::size_t> base_counts;
  for (const auto& r : recipes) {
    ArchitectureRecipe base = r;
    base.attach_ga_after.clear();
    base.replace_last_block_with = Replacement::none;
    const std::string key = recipe_to_text(base);
    if (!base_counts.count(key)) base_counts[key] = count_parameters(build(base));
    CountRow row{recipe_label(r), count_parameters(build(r)), 0.0};
    const double b = static_cast<double>(base_counts[key]);
    row.delta_percent = 100.0 * (static_cast<double>(row.params) - b) / b;
    rows.push_back(row);
  }
  return rows;
}

inline void write_count_csv(const std::vector<CountRow>& rows, std::ostream& out) {
  out << "recipe,params,params_millions,delta_percent\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.2f,%+.2f\n", r.recipe.c_str(), r.params,
                  static_cast<double>(r.params) / 1e6, r.delta_percent);
    out << buf;
  }
}

}  // namespace attnhybrid
