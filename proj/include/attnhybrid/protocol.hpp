#pragma once
// Grid search on a few splits, re-training on fresh splits, and pairwise
// Welch comparisons against each backbone's unmodified recipe.

#include <cstdio>
#include <ostream>

#include "attnhybrid/stats.hpp"
#include "attnhybrid/train.hpp"

namespace attnhybrid {

struct ProtocolConfig {
  std::vector<std::string> recipes{"mini_resnet", "mini_resnet+ga", "mini_resnet+ela"};
  std::vector<double> learning_rates{0.01, 0.001, 0.0001};
  std::vector<double> weight_decays{0.0, 0.0001, 0.001, 0.01};
  std::size_t search_splits = 2;
  std::size_t eval_splits = 10;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::size_t n_per_class = 60;
  std::size_t ood_per_class = 30;
  std::uint64_t master_seed = 1;
  double alpha = 0.05;
  bool augment = true;
  std::string data_dir;  // empty: generate the toy dataset from master_seed

  static ProtocolConfig from_config(const KeyValueConfig& cfg) {
    ProtocolConfig p;
    if (cfg.has("recipes")) p.recipes = cfg.get_list("recipes");
    if (cfg.has("learning_rates")) p.learning_rates = cfg.get_double_list("learning_rates");
    if (cfg.has("weight_decays")) p.weight_decays = cfg.get_double_list("weight_decays");
    p.search_splits = cfg.get_uint("search_splits", p.search_splits);
    p.eval_splits = cfg.get_uint("eval_splits", p.eval_splits);
    p.epochs = cfg.get_uint("epochs", p.epochs);
    p.batch_size = cfg.get_uint("batch_size", p.batch_size);
    p.n_per_class = cfg.get_uint("n_per_class", p.n_per_class);
    p.ood_per_class = cfg.get_uint("ood_per_class", p.ood_per_class);
    p.master_seed = cfg.get_uint("master_seed", p.master_seed);
    p.alpha = cfg.get_double("alpha", p.alpha);
    p.augment = cfg.get_bool("augment", p.augment);
    p.data_dir = cfg.get("data", "");
    p.validate();
    return p;
  }

  void validate() const {
    if (recipes.empty()) throw std::invalid_argument("protocol: no recipes");
    if (learning_rates.empty() || weight_decays.empty()) throw std::invalid_argument("protocol: empty grid");
    for (double lr : learning_rates)
      if (!(lr > 0.0)) throw std::invalid_argument("protocol: learning rates must be > 0");
    for (double wd : weight_decays)
      if (!(wd >= 0.0)) throw std::invalid_argument("protocol: weight decays must be >= 0");
    if (search_splits == 0) throw std::invalid_argument("protocol: search_splits must be >= 1");
    if (eval_splits < 2) throw std::invalid_argument("protocol: eval_splits must be >= 2 for the t-test");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("protocol: alpha must lie in (0,1)");
    for (const auto& r : recipes) parse_recipe_label(r);
  }
};

struct SearchRow {
  std::string recipe;
  double lr = 0.0, wd = 0.0;
  double mean_val = 0.0;
  std::size_t diverged = 0;
};

struct TrialRow {
  std::string recipe;
  std::uint64_t seed = 0;
  std::size_t split = 0;
  double bal_acc_id = 0.0, bal_acc_ood = 0.0;
  double lr = 0.0, wd = 0.0;
  bool diverged = false;
};

struct RecipeSummary {
  std::string recipe;
  double lr = 0.0, wd = 0.0;
  double mean_id = 0.0, std_id = 0.0, mean_ood = 0.0, std_ood = 0.0;
  std::size_t diverged = 0;
};

struct Comparison {
  std::string recipe_a, recipe_b;
  stats::StatResult id, ood;
  bool significant_id = false, significant_ood = false;
};

struct TrialReport {
  double alpha = 0.05;
  std::vector<SearchRow> search;
  std::vector<TrialRow> trials;
  std::vector<RecipeSummary> summary;
  std::vector<Comparison> comparisons;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(master ^ splitmix64(stream)) + index);
}

/// Index of the best grid cell: highest score, ties to the lowest learning
/// rate and then the lowest weight decay, independent of enumeration order.
inline std::size_t select_hyperparameters(const std::vector<SearchRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("select_hyperparameters: empty grid");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& a = rows[i];
    const auto& b = rows[best];
    if (a.mean_val > b.mean_val || (a.mean_val == b.mean_val && (a.lr < b.lr || (a.lr == b.lr && a.wd < b.wd)))) {
      best = i;
    }
  }
  return best;
}

/// The unmodified recipe of the same backbone, or the first recipe.
inline std::string baseline_for(const std::string& label, const std::vector<std::string>& recipes) {
  const auto r = parse_recipe_label(label);
  for (const auto& other : recipes) {
    const auto o = parse_recipe_label(other);
    if (o.backbone == r.backbone && o.attach_ga_after.empty() &&
        o.replace_last_block_with == Replacement::none) {
      return other;
    }
  }
  return recipes.front();
}

struct ProtocolData {
  Dataset pool, ood;
};

inline ProtocolData protocol_data(const ProtocolConfig& cfg) {
  ProtocolData d;
  if (cfg.data_dir.empty()) {
    d.pool = generate_toy_dataset(cfg.master_seed, cfg.n_per_class);
    ToyOptions ood;
    ood.ood = true;
    d.ood = generate_toy_dataset(cfg.master_seed, cfg.ood_per_class, ood);
    return d;
  }
  bool have_pool = false, have_ood = false;
  for (auto& part : load_dataset_dir(cfg.data_dir)) {
    if (part.split == "ood") {
      d.ood = std::move(part);
      have_ood = true;
    } else if (!have_pool) {
      d.pool = std::move(part);
      have_pool = true;
    }
  }
  if (!have_pool || !have_ood) {
    throw std::runtime_error("protocol: data directory needs a training pool and an 'ood' split");
  }
  return d;
}

using ProgressFn = std::function<void(const std::string&)>;

inline TrialReport run_protocol(const ProtocolConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  const ProtocolData data = protocol_data(cfg);
  TrialReport report;
  report.alpha = cfg.alpha;
  enum : std::uint64_t { search_stream = 1, eval_stream = 2 };

  auto fit = [&](const std::string& label, double lr, double wd, std::uint64_t seed,
                 const Dataset& train, bool& diverged) {
    ArchitectureRecipe recipe = parse_recipe_label(label);
    recipe.class_count = data.pool.class_count;
    recipe.input_size = data.pool.image_shape().back();
    recipe.seed = seed;
    auto model = std::make_unique<ModelGraph>(build(recipe));
    TrainOptions opt;
    opt.hyper = {lr, wd, cfg.batch_size, cfg.epochs, seed};
    opt.augment = cfg.augment;
    diverged = train_model(*model, train, opt).diverged;
    return model;
  };

  for (const auto& label : cfg.recipes) {
    std::vector<SearchRow> grid;
    for (double lr : cfg.learning_rates) {
      for (double wd : cfg.weight_decays) {
        SearchRow row{label, lr, wd, 0.0, 0};
        for (std::size_t s = 0; s < cfg.search_splits; ++s) {
          const std::uint64_t seed = derive_seed(cfg.master_seed, search_stream, s);
          const auto idx = make_splits(data.pool.labels, data.pool.class_count, seed);
          bool diverged = false;
          auto model = fit(label, lr, wd, seed, data.pool.subset(idx.train, "train"), diverged);
          row.diverged += diverged ? 1 : 0;
          row.mean_val += evaluate_balanced_accuracy(*model, data.pool.subset(idx.val, "val"));
        }
        row.mean_val /= static_cast<double>(cfg.search_splits);
        if (progress) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "search %s lr=%g wd=%g val=%.4f", label.c_str(), lr, wd, row.mean_val);
          progress(buf);
        }
        grid.push_back(row);
      }
    }
    const SearchRow chosen = grid[select_hyperparameters(grid)];
    report.search.insert(report.search.end(), grid.begin(), grid.end());

    RecipeSummary summary{label, chosen.lr, chosen.wd};
    std::vector<double> ids, oods;
    for (std::size_t e = 0; e < cfg.eval_splits; ++e) {
      const std::uint64_t seed = derive_seed(cfg.master_seed, eval_stream, e);
      const auto idx = make_splits(data.pool.labels, data.pool.class_count, seed);
      TrialRow row{label, seed, e, 0.0, 0.0, chosen.lr, chosen.wd, false};
      auto model = fit(label, chosen.lr, chosen.wd, seed, data.pool.subset(idx.train, "train"), row.diverged);
      row.bal_acc_id = evaluate_balanced_accuracy(*model, data.pool.subset(idx.test, "test"));
      row.bal_acc_ood = evaluate_balanced_accuracy(*model, data.ood);
      summary.diverged += row.diverged ? 1 : 0;
      ids.push_back(row.bal_acc_id);
      oods.push_back(row.bal_acc_ood);
      if (progress) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "eval %s split=%zu id=%.4f ood=%.4f", label.c_str(), e,
                      row.bal_acc_id, row.bal_acc_ood);
        progress(buf);
      }
      report.trials.push_back(row);
    }
    summary.mean_id = stats::mean(ids);
    summary.std_id = stats::stddev(ids);
    summary.mean_ood = stats::mean(oods);
    summary.std_ood = stats::stddev(oods);
    report.summary.push_back(summary);
  }

  auto samples = [&](const std::string& label, bool ood) {
    std::vector<double> v;
    for (const auto& t : report.trials)
      if (t.recipe == label) v.push_back(ood ? t.bal_acc_ood : t.bal_acc_id);
    return v;
  };
  for (const auto& label : cfg.recipes) {
    const std::string base = baseline_for(label, cfg.recipes);
    if (base == label) continue;
    Comparison c;
    c.recipe_a = label;
    c.recipe_b = base;
    c.id = stats::welch_ttest(samples(label, false), samples(base, false));
    c.ood = stats::welch_ttest(samples(label, true), samples(base, true));
    c.significant_id = c.id.p < cfg.alpha;
    c.significant_ood = c.ood.p < cfg.alpha;
    report.comparisons.push_back(c);
  }
  return report;
}

/// CSV with "# search", "# trials", "# summary" and "# comparisons" sections.
inline void write_report_csv(const TrialReport& r, std::ostream& out) {
  char buf[512];
  out << "# search\nrecipe,lr,wd,mean_bal_acc_val,diverged\n";
  for (const auto& s : r.search) {
    std::snprintf(buf, sizeof buf, "%s,%g,%g,%.6f,%zu\n", s.recipe.c_str(), s.lr, s.wd, s.mean_val, s.diverged);
    out << buf;
  }
  out << "# trials\nrecipe,seed,split,bal_acc_id,bal_acc_ood,lr,wd,diverged\n";
  for (const auto& t : r.trials) {
    std::snprintf(buf, sizeof buf, "%s,%llu,%zu,%.6f,%.6f,%g,%g,%d\n", t.recipe.c_str(),
                  static_cast<unsigned long long>(t.seed), t.split, t.bal_acc_id, t.bal_acc_ood, t.lr,
                  t.wd, t.diverged ? 1 : 0);
    out << buf;
  }
  out << "# summary\nrecipe,lr,wd,mean_bal_acc_id,std_bal_acc_id,mean_bal_acc_ood,std_bal_acc_ood,diverged\n";
  for (const auto& s : r.summary) {
    std::snprintf(buf, sizeof buf, "%s,%g,%g,%.6f,%.6f,%.6f,%.6f,%zu\n", s.recipe.c_str(), s.lr, s.wd,
                  s.mean_id, s.std_id, s.mean_ood, s.std_ood, s.diverged);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "# comparisons (alpha=%g)\n", r.alpha);
  out << buf << "recipe_a,recipe_b,t,df,p,significant,t_ood,df_ood,p_ood,significant_ood\n";
  for (const auto& c : r.comparisons) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.6g,%.6g,%.6g,%d,%.6g,%.6g,%.6g,%d\n", c.recipe_a.c_str(),
                  c.recipe_b.c_str(), c.id.t, c.id.df, c.id.p, c.significant_id ? 1 : 0, c.ood.t,
                  c.ood.df, c.ood.p, c.significant_ood ? 1 : 0);
    out << buf;
  }
}

}  // namespace attnhybrid
