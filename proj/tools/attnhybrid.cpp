#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "attnhybrid/attnhybrid.hpp"

namespace fs = std::filesystem;
using namespace attnhybrid;

namespace {

// A recipe argument is either a key-value file or a label like "mini_resnet+ga".
ArchitectureRecipe recipe_arg(const std::string& arg) {
  if (fs::is_regular_file(arg)) return recipe_from_config(KeyValueConfig::load(arg));
  auto r = parse_recipe_label(arg);
  r.validate();
  return r;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

std::vector<std::string> images_in(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .ppm/.pgm images in '" + dir + "'");
  return files;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CNN / self-attention hybrids: build, train, compare, explain, probe"};
  app.require_subcommand(1);

  // count
  auto* count = app.add_subcommand("count", "parameter counts and deltas as CSV");
  std::vector<std::string> count_recipes;
  std::size_t count_classes = 3;
  count->add_option("--recipe", count_recipes, "recipe file or label (repeatable); default: the standard 13");
  count->add_option("--classes", count_classes, "head size for the standard table")->check(CLI::PositiveNumber);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write the synthetic three-class dataset");
  std::uint64_t gen_seed = 1;
  std::size_t gen_n = 60, gen_ood = 30, gen_size = 32;
  std::string gen_out;
  gen->add_option("--seed", gen_seed);
  gen->add_option("--n", gen_n, "images per class")->check(CLI::PositiveNumber);
  gen->add_option("--ood-n", gen_ood, "shifted images per class (0: none)");
  gen->add_option("--size", gen_size, "image side")->check(CLI::Range(8, 512));
  gen->add_option("--out", gen_out)->required();

  // train
  auto* train = app.add_subcommand("train", "train one model with plain SGD");
  std::string train_recipe, train_data, train_out;
  Hyperparameters hp;
  bool no_augment = false;
  train->add_option("--recipe", train_recipe)->required();
  train->add_option("--data", train_data, "dataset directory from gen-data")->required();
  train->add_option("--lr", hp.learning_rate);
  train->add_option("--wd", hp.weight_decay);
  train->add_option("--epochs", hp.epochs);
  train->add_option("--batch", hp.batch_size);
  train->add_option("--seed", hp.seed);
  train->add_flag("--no-augment", no_augment);
  train->add_option("--out", train_out)->required();

  // protocol
  auto* proto = app.add_subcommand("protocol", "grid search, repeated training and Welch comparisons");
  std::string proto_config, proto_out;
  bool quiet = false;
  proto->add_option("--config", proto_config)->required()->check(CLI::ExistingFile);
  proto->add_option("--out", proto_out)->required();
  proto->add_flag("--quiet", quiet);

  // explain
  auto* explain = app.add_subcommand("explain", "Grad-CAM or attention heatmaps as PGM");
  std::string ex_model, ex_image, ex_dir, ex_method = "gradcam", ex_layer, ex_out, ex_mean_out;
  std::optional<int> ex_class;
  explain->add_option("--model", ex_model)->required()->check(CLI::ExistingFile);
  auto* image_opt = explain->add_option("--image", ex_image)->check(CLI::ExistingFile);
  auto* dir_opt = explain->add_option("--image-dir", ex_dir)->check(CLI::ExistingDirectory);
  image_opt->excludes(dir_opt);
  explain->add_option("--method", ex_method)->check(CLI::IsMember({"gradcam", "attention"}));
  explain->add_option("--layer", ex_layer);
  explain->add_option("--class", ex_class);
  explain->add_option("--out", ex_out, "heatmap file, or directory of per-image maps with --image-dir");
  explain->add_option("--mean-out", ex_mean_out, "mean heatmap over --image-dir");

  // probe
  auto* probe = app.add_subcommand("probe", "conditional-independence feature usage grid");
  std::vector<std::string> tables;
  double probe_alpha = 0.01;
  std::string probe_out, probe_tests = "rff,pcorr";
  std::uint64_t probe_seed = 0;
  probe->add_option("--table", tables, "CSV feature,score,z_1..z_m (repeatable)")->required()->check(CLI::ExistingFile);
  probe->add_option("--alpha", probe_alpha)->check(CLI::Range(0.0, 1.0));
  probe->add_option("--tests", probe_tests, "comma-separated subset of rff,pcorr");
  probe->add_option("--seed", probe_seed);
  probe->add_option("--out", probe_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*count) {
      std::vector<ArchitectureRecipe> recipes;
      if (count_recipes.empty()) {
        recipes = standard_count_recipes(count_classes);
      } else {
        for (const auto& r : count_recipes) recipes.push_back(recipe_arg(r));
      }
      write_count_csv(count_rows(recipes), std::cout);
    } else if (*gen) {
      ToyOptions opt;
      opt.size = gen_size;
      Dataset pool = generate_toy_dataset(gen_seed, gen_n, opt);
      std::vector<const Dataset*> parts{&pool};
      Dataset ood;
      if (gen_ood > 0) {
        opt.ood = true;
        ood = generate_toy_dataset(gen_seed, gen_ood, opt);
        ood.split = "ood";
        parts.push_back(&ood);
      }
      save_dataset_dir(gen_out, parts);
      std::cout << "wrote " << pool.size() + ood.size() << " images to " << gen_out << "\n";
    } else if (*train) {
      ArchitectureRecipe recipe = recipe_arg(train_recipe);
      const auto parts = load_dataset_dir(train_data);
      const auto it = std::find_if(parts.begin(), parts.end(), [](const Dataset& d) { return d.split == "train"; });
      if (it == parts.end()) throw std::runtime_error("'" + train_data + "' has no 'train' split");
      recipe.class_count = it->class_count;
      recipe.input_size = it->image_shape().back();
      recipe.seed = hp.seed;
      ModelGraph model = build(recipe);
      TrainOptions opt;
      opt.hyper = hp;
      opt.augment = !no_augment;
      opt.on_epoch = [](std::size_t e, double loss) { std::printf("epoch %zu loss %.6f\n", e + 1, loss); };
      const auto result = train_model(model, *it, opt);
      if (result.diverged) std::cerr << "training diverged (non-finite loss); model saved as-is\n";
      for (const auto& d : parts) {
        std::printf("balanced accuracy %s %.4f\n", d.split.c_str(), evaluate_balanced_accuracy(model, d));
      }
      save_model(model, train_out);
    } else if (*proto) {
      const auto cfg = ProtocolConfig::from_config(KeyValueConfig::load(proto_config));
      ProgressFn progress;
      if (!quiet) progress = [](const std::string& line) { std::cerr << line << "\n"; };
      const TrialReport report = run_protocol(cfg, progress);
      auto out = open_out(proto_out);
      write_report_csv(report, out);
      write_report_csv(report, std::cout);
    } else if (*explain) {
      if (ex_image.empty() == ex_dir.empty()) throw std::invalid_argument("explain: give exactly one of --image or --image-dir");
      if (ex_method == "gradcam" && ex_layer.empty()) throw std::invalid_argument("explain: Grad-CAM needs --layer");
      const ModelGraph model = load_model(ex_model);
      auto one = [&](const std::string& path) {
        const Tensor x = image_to_tensor(read_netpbm(path));
        return ex_method == "gradcam" ? grad_cam(model, x, ex_layer, ex_class) : attention_map(model, x, ex_layer);
      };
      if (!ex_image.empty()) {
        if (ex_out.empty()) throw std::invalid_argument("explain: --out is required with --image");
        const Heatmap map = one(ex_image);
        export_heatmap(map, ex_out);
        std::printf("%s layer=%s min=%.6g max=%.6g\n", to_string(map.method).c_str(), map.layer.c_str(), map.lo, map.hi);
      } else {
        if (ex_mean_out.empty() && ex_out.empty()) throw std::invalid_argument("explain: --image-dir needs --mean-out or --out");
        if (!ex_out.empty()) fs::create_directories(ex_out);
        std::vector<Heatmap> maps;
        for (const auto& path : images_in(ex_dir)) {
          maps.push_back(one(path));
          if (!ex_out.empty()) export_heatmap(maps.back(), (fs::path(ex_out) / fs::path(path).stem()).string() + ".pgm");
        }
        if (!ex_mean_out.empty()) export_heatmap(mean_heatmap(maps), ex_mean_out);
        std::printf("%zu maps\n", maps.size());
      }
    } else if (*probe) {
      std::vector<std::shared_ptr<const CiTest>> tests;
      std::stringstream ss(probe_tests);
      std::string name;
      while (std::getline(ss, name, ',')) {
        if (name == "rff") tests.push_back(std::make_shared<RandomFeatureCiTest>());
        else if (name == "pcorr") tests.push_back(std::make_shared<PartialCorrelationCiTest>());
        else throw std::invalid_argument("probe: unknown test '" + name + "'");
      }
      std::vector<FeatureTable> parsed;
      for (const auto& t : tables) parsed.push_back(load_feature_csv(t));
      const auto rows = probe_report(parsed, tests, probe_alpha, probe_seed);
      auto out = open_out(probe_out);
      write_probe_csv(rows, tests, out);
      write_probe_csv(rows, tests, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
