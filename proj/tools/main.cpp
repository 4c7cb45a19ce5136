#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pairstn/checkpoint.hpp"
#include "pairstn/data.hpp"
#include "pairstn/error.hpp"
#include "pairstn/image_io.hpp"
#include "pairstn/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pairstn;

namespace {

// All machine interfaces speak JSON; exit codes: 0 ok, 2 usage/config,
// 3 data, 4 numerical failure.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Paths {
  std::string config, data, pairs, ckpt, category_ckpt, out, image;
};

struct FlagOverrides {
  std::optional<std::string> arch;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<long> pair_budget;
};

json config_to_json(const TrainConfig& c, const Paths& p, long test_pairs) {
  json j;
  j["arch"] = variant_name(c.variant);
  j["lr"] = c.learning_rate;
  j["momentum"] = c.momentum;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["image_size"] = c.image_size;
  j["channels"] = c.channels;
  j["feature_dim"] = c.feature_dim;
  j["category_dim"] = c.category_dim;
  j["feat_c1"] = c.feat_c1;
  j["feat_c2"] = c.feat_c2;
  j["feat_c3"] = c.feat_c3;
  j["loc_c"] = c.loc_c;
  j["cat_c1"] = c.cat_c1;
  j["cat_c2"] = c.cat_c2;
  j["pair_budget"] = c.pair_budget;
  j["heldout_fraction"] = c.heldout_fraction;
  j["crop_area"] = c.crop_area;
  j["cat_epochs"] = c.cat_epochs;
  j["cat_lr"] = c.cat_lr;
  j["test_pairs"] = test_pairs;
  if (!p.data.empty()) j["data"] = p.data;
  if (!p.out.empty()) j["out"] = p.out;
  if (!p.category_ckpt.empty()) j["category_ckpt"] = p.category_ckpt;
  return j;
}

void apply_config_file(const std::string& path, TrainConfig& c, Paths& p, long& test_pairs) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  for (const auto& [key, value] : j.items()) {
    if (key == "arch") c.variant = variant_from_string(value.get<std::string>());
    else if (key == "lr") c.learning_rate = value.get<double>();
    else if (key == "momentum") c.momentum = value.get<double>();
    else if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "image_size") c.image_size = value.get<int>();
    else if (key == "channels") c.channels = value.get<int>();
    else if (key == "feature_dim") c.feature_dim = value.get<int>();
    else if (key == "category_dim") c.category_dim = value.get<int>();
    else if (key == "feat_c1") c.feat_c1 = value.get<int>();
    else if (key == "feat_c2") c.feat_c2 = value.get<int>();
    else if (key == "feat_c3") c.feat_c3 = value.get<int>();
    else if (key == "loc_c") c.loc_c = value.get<int>();
    else if (key == "cat_c1") c.cat_c1 = value.get<int>();
    else if (key == "cat_c2") c.cat_c2 = value.get<int>();
    else if (key == "pair_budget") c.pair_budget = value.get<long>();
    else if (key == "heldout_fraction") c.heldout_fraction = value.get<double>();
    else if (key == "crop_area") c.crop_area = value.get<double>();
    else if (key == "cat_epochs") c.cat_epochs = value.get<int>();
    else if (key == "cat_lr") c.cat_lr = value.get<double>();
    else if (key == "test_pairs") test_pairs = value.get<long>();
    else if (key == "data") { if (p.data.empty()) p.data = value.get<std::string>(); }
    else if (key == "out") { if (p.out.empty()) p.out = value.get<std::string>(); }
    else if (key == "category_ckpt") {
      if (p.category_ckpt.empty()) p.category_ckpt = value.get<std::string>();
    } else throw ConfigError("config file '" + path + "': unknown key '" + key + "'");
  }
}

int cmd_train(const Paths& paths, const FlagOverrides& flags) {
  TrainConfig cfg;
  Paths p = paths;
  long test_pairs = -1;
  if (!p.config.empty()) apply_config_file(p.config, cfg, p, test_pairs);
  if (flags.arch) cfg.variant = variant_from_string(*flags.arch);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.epochs) cfg.epochs = *flags.epochs;
  if (flags.lr) cfg.learning_rate = *flags.lr;
  if (flags.pair_budget) cfg.pair_budget = *flags.pair_budget;
  if (test_pairs < 0) test_pairs = std::max<long>(1, cfg.pair_budget / 5);

  if (p.data.empty()) throw ConfigError("train: --data manifest path is required");
  if (p.out.empty()) throw ConfigError("train: --out directory is required");
  cfg.validate();

  std::optional<CategoryNet> category;
  if (variant_has_category(cfg.variant)) {
    if (p.category_ckpt.empty())
      throw ConfigError("train: --arch " + variant_name(cfg.variant) +
                        " requires --category-ckpt");
    category = load_category_checkpoint(p.category_ckpt);
  }

  Manifest manifest = load_manifest(p.data);
  auto [train_side, test_side] = split(manifest, SplitSpec{0.8, cfg.seed});

  TrainResult result = train(cfg, train_side, std::move(category));

  fs::create_directories(p.out);
  const std::string ckpt_path = (fs::path(p.out) / "model.ckpt").string();
  save_checkpoint(result.model, ckpt_path, cfg.epochs, cfg.seed);
  {
    std::ofstream m((fs::path(p.out) / "metrics.jsonl").string(), std::ios::binary);
    for (const auto& e : result.log) {
      json j;
      j["epoch"] = e.epoch;
      j["mean_loss"] = e.mean_loss;
      j["heldout_acc"] = e.heldout_acc;
      j["lambda_fraction"] = e.lambda_fraction;
      m << j.dump() << "\n";
    }
  }
  {
    std::ofstream c((fs::path(p.out) / "config.json").string(), std::ios::binary);
    c << config_to_json(cfg, p, test_pairs).dump(2) << "\n";
  }
  save_pair_list((fs::path(p.out) / "heldout_pairs.jsonl").string(), train_side,
                 result.heldout_pairs);
  {
    Rng test_rng(cfg.seed + 0x517cc1b7ULL);
    auto pairs = make_pairs(test_side, test_pairs, test_rng);
    save_pair_list((fs::path(p.out) / "test_pairs.jsonl").string(), test_side, pairs);
  }

  json out;
  out["checkpoint"] = ckpt_path;
  out["epochs"] = cfg.epochs;
  if (!result.log.empty()) {
    out["final_heldout_acc"] = result.log.back().heldout_acc;
    out["final_mean_loss"] = result.log.back().mean_loss;
  }
  std::cout << out.dump() << "\n";
  return kExitOk;
}

int cmd_pretrain_category(const Paths& paths, const FlagOverrides& flags) {
  TrainConfig cfg;
  Paths p = paths;
  long test_pairs = -1;
  if (!p.config.empty()) apply_config_file(p.config, cfg, p, test_pairs);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.epochs) cfg.cat_epochs = *flags.epochs;
  if (flags.lr) cfg.cat_lr = *flags.lr;
  if (p.data.empty()) throw ConfigError("pretrain-category: --data manifest path is required");
  if (p.out.empty()) throw ConfigError("pretrain-category: --out directory is required");
  cfg.validate();

  Manifest manifest = load_manifest(p.data);
  auto [train_side, test_side] = split(manifest, SplitSpec{0.8, cfg.seed});
  CategoryPretrainResult r = pretrain_category(cfg, train_side);

  fs::create_directories(p.out);
  const std::string ckpt_path = (fs::path(p.out) / "category.ckpt").string();
  save_category_checkpoint(r.net, ckpt_path, cfg.cat_epochs, cfg.seed);

  json out;
  out["checkpoint"] = ckpt_path;
  out["train_accuracy"] = r.train_accuracy;
  std::cout << out.dump() << "\n";
  return kExitOk;
}

int cmd_eval(const Paths& paths, bool pretty) {
  if (paths.ckpt.empty()) throw ConfigError("eval: --ckpt is required");
  if (paths.pairs.empty()) throw ConfigError("eval: --pairs is required");
  LoadedCheckpoint ckpt = load_checkpoint(paths.ckpt);
  auto entries = load_pair_list(paths.pairs);
  if (entries.empty()) throw ConfigError("eval: pair list '" + paths.pairs + "' is empty");

  const std::string root = fs::path(paths.pairs).parent_path().string();
  std::map<std::string, int> index;
  Manifest m;
  m.root = root;
  std::vector<PairDesc> pairs;
  for (const auto& e : entries) {
    for (const std::string& side : {e.left, e.right}) {
      if (!index.count(side)) {
        index[side] = static_cast<int>(m.entries.size());
        m.entries.push_back({side, 0.0, -1});
      }
    }
    pairs.push_back({index[e.left], index[e.right], e.y});
  }
  std::vector<Tensor> images = load_images(m);
  EvalReport r = evaluate(ckpt.net, pairs, images);

  json out;
  out["pair_count"] = r.pair_count;
  out["accuracy"] = r.accuracy;
  out["lambda_fraction"] = r.lambda_fraction;
  out["mean_rank_loss"] = r.mean_rank_loss;
  out["mean_total_loss"] = r.mean_total_loss;
  if (pretty) {
    std::cout << "pairs:           " << r.pair_count << "\n"
              << "2afc accuracy:   " << r.accuracy << "\n"
              << "lambda fraction: " << r.lambda_fraction << "\n"
              << "mean rank loss:  " << r.mean_rank_loss << "\n"
              << "mean total loss: " << r.mean_total_loss << "\n";
  } else {
    std::cout << out.dump() << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(const Paths& paths, const FlagOverrides& flags, int samples, double step,
                  double tolerance, bool pretty) {
  TrainConfig cfg;
  Paths p = paths;
  long test_pairs = -1;
  if (!p.config.empty()) apply_config_file(p.config, cfg, p, test_pairs);
  if (flags.arch) cfg.variant = variant_from_string(*flags.arch);
  if (flags.seed) cfg.seed = *flags.seed;
  cfg.validate();

  const double tol_bulk = std::min(1e-5, tolerance);
  GradCheckReport r = grad_check(cfg, samples, step, tol_bulk, tolerance);

  json out;
  out["variant"] = variant_name(r.variant);
  out["step"] = r.step;
  out["tolerance_max"] = r.tol_max;
  out["tolerance_bulk"] = r.tol_bulk;
  out["checked"] = r.total_checked;
  out["skipped"] = r.total_skipped;
  out["max_rel_error"] = r.max_rel;
  out["frac_below_bulk"] = r.frac_below_bulk;
  out["passed"] = r.passed;
  json tensors = json::array();
  for (const auto& t : r.tensors) {
    json tj;
    tj["name"] = t.name;
    tj["checked"] = t.checked;
    tj["skipped_lambda"] = t.skipped_lambda;
    tj["skipped_kink"] = t.skipped_kink;
    tj["max_rel_error"] = t.max_rel;
    tensors.push_back(tj);
  }
  out["tensors"] = tensors;
  if (pretty) {
    std::cout << "gradcheck " << variant_name(r.variant) << " step=" << r.step << "\n";
    for (const auto& t : r.tensors) {
      std::printf("  %-14s checked=%-4d skipped=%d+%d max_rel=%.3e\n", t.name.c_str(), t.checked,
                  t.skipped_lambda, t.skipped_kink, t.max_rel);
    }
    std::printf("  overall: checked=%d skipped=%d max_rel=%.3e frac_below_bulk=%.4f -> %s\n",
                r.total_checked, r.total_skipped, r.max_rel, r.frac_below_bulk,
                r.passed ? "PASS" : "FAIL");
  } else {
    std::cout << out.dump() << "\n";
  }
  return r.passed ? kExitOk : kExitNumeric;
}

int cmd_synth(const std::string& out_dir, const SynthConfig& cfg) {
  if (out_dir.empty()) throw ConfigError("synth: --out directory is required");
  Manifest m = synth_generate(cfg, out_dir);
  json out;
  out["n"] = static_cast<int>(m.entries.size());
  out["out"] = out_dir;
  out["manifest"] = (fs::path(out_dir) / "manifest.jsonl").string();
  out["placements"] = (fs::path(out_dir) / "placements.jsonl").string();
  std::cout << out.dump() << "\n";
  return kExitOk;
}

int cmd_visualize(const Paths& paths) {
  if (paths.ckpt.empty()) throw ConfigError("visualize: --ckpt is required");
  if (paths.image.empty()) throw ConfigError("visualize: --image is required");
  if (paths.out.empty()) throw ConfigError("visualize: --out directory is required");
  LoadedCheckpoint ckpt = load_checkpoint(paths.ckpt);
  Tensor image = load_image(paths.image);
  ScoreTrace t = ckpt.net.score(image);

  fs::create_directories(paths.out);
  save_image(image, (fs::path(paths.out) / "original.png").string());
  json levels = json::array();
  for (std::size_t l = 0; l < t.levels.size(); ++l) {
    const auto& lt = t.levels[l];
    const std::string name = "roi_level" + std::to_string(l + 1) + ".png";
    save_image(lt.roi, (fs::path(paths.out) / name).string());
    json j;
    j["level"] = static_cast<int>(l + 1);
    j["roi"] = name;
    j["s"] = lt.affine.s;
    j["tx"] = lt.affine.tx;
    j["ty"] = lt.affine.ty;
    j["out_of_bounds"] = lt.bounds.lambda == 1;
    j["spatial_loss"] = lt.bounds.spatial_loss;
    levels.push_back(j);
  }
  json out;
  out["score"] = t.v;
  out["levels"] = levels;
  {
    std::ofstream f((fs::path(paths.out) / "affines.json").string(), std::ios::binary);
    f << out.dump(2) << "\n";
  }
  std::cout << out.dump() << "\n";
  return kExitOk;
}

int cmd_neighbors(const Paths& paths, int k, bool pretty) {
  if (paths.ckpt.empty()) throw ConfigError("neighbors: --ckpt is required");
  if (paths.image.empty()) throw ConfigError("neighbors: --image is required");
  if (paths.data.empty()) throw ConfigError("neighbors: --data manifest is required");
  if (k < 1) throw ConfigError("neighbors: --k must be positive");
  LoadedCheckpoint ckpt = load_checkpoint(paths.ckpt);
  Manifest manifest = load_manifest(paths.data);
  std::vector<Tensor> images = load_images(manifest);
  Tensor query = load_image(paths.image);

  Tensor query_feat = ckpt.net.score(query).t_r;
  std::vector<Tensor> feats(images.size());
  {
    const unsigned workers = std::max(1u, std::min(std::thread::hardware_concurrency(), 4u));
    std::vector<std::future<void>> futs;
    for (unsigned w = 0; w < workers; ++w)
      futs.push_back(std::async(std::launch::async, [&, w]() {
        for (std::size_t i = w; i < images.size(); i += workers)
          feats[i] = ckpt.net.score(images[i]).t_r;
      }));
    for (auto& f : futs) f.get();
  }

  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < query_feat.numel(); ++j) {
      const double d = query_feat[j] - feats[i][j];
      d2 += d * d;
    }
    ranked.emplace_back(std::sqrt(d2), i);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  if (static_cast<std::size_t>(k) < ranked.size()) ranked.resize(static_cast<std::size_t>(k));

  json out = json::array();
  for (const auto& [dist, idx] : ranked) {
    json j;
    j["path"] = manifest.entries[idx].path;
    j["score"] = manifest.entries[idx].score;
    j["distance"] = dist;
    out.push_back(j);
  }
  if (pretty) {
    for (const auto& j : out)
      std::printf("  %-20s score=%.6f dist=%.6f\n", j["path"].get<std::string>().c_str(),
                  j["score"].get<double>(), j["distance"].get<double>());
  } else {
    std::cout << out.dump() << "\n";
  }
  return kExitOk;
}

int error_exit(int code, const char* type, const std::string& message) {
  json j;
  j["error"] = type;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pairwise ranking with spatial-transformer localization"};
  app.require_subcommand(1);

  Paths paths;
  FlagOverrides flags;
  bool pretty = false;
  int k = 5;
  int samples = 400;
  double step = 1e-5;
  double tolerance = 1e-4;

  std::string arch_flag, placement_flag = "fine";
  SynthConfig synth_cfg;
  double cat_corr = 0.0;
  int categories = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", paths.config, "JSON config file");
    cmd->add_option("--arch", arch_flag, "base|m|c|mc|siamese|regression");
    cmd->add_option("--seed", [&flags](const std::vector<std::string>& v) {
      flags.seed = std::stoull(v.back());
      return true;
    }, "RNG seed");
    cmd->add_option("--data", paths.data, "manifest path");
    cmd->add_option("--pairs", paths.pairs, "pair list path");
    cmd->add_option("--ckpt", paths.ckpt, "checkpoint path");
    cmd->add_option("--category-ckpt", paths.category_ckpt, "category checkpoint path");
    cmd->add_option("--out", paths.out, "output directory");
    cmd->add_option("--epochs", [&flags](const std::vector<std::string>& v) {
      flags.epochs = std::stoi(v.back());
      return true;
    }, "epoch count");
    cmd->add_option("--lr", [&flags](const std::vector<std::string>& v) {
      flags.lr = std::stod(v.back());
      return true;
    }, "learning rate");
    cmd->add_option("--pair-budget", [&flags](const std::vector<std::string>& v) {
      flags.pair_budget = std::stol(v.back());
      return true;
    }, "training pair budget");
    cmd->add_option("--k", k, "neighbor count");
    cmd->add_option("--image", paths.image, "image path");
    cmd->add_flag("--pretty", pretty, "human-readable output");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd);
  CLI::App* pretrain_cmd =
      app.add_subcommand("pretrain-category", "pre-train the category classifier");
  add_common(pretrain_cmd);
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a pair list");
  add_common(eval_cmd);
  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "compare analytic gradients to finite differences");
  add_common(gradcheck_cmd);
  gradcheck_cmd->add_option("--samples", samples, "parameter sample budget");
  gradcheck_cmd->add_option("--step", step, "finite difference step");
  gradcheck_cmd->add_option("--tolerance", tolerance, "max relative error tolerance");

  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth_cmd);
  synth_cmd->add_option("--n", synth_cfg.n, "image count");
  synth_cmd->add_option("--size", synth_cfg.size, "image size");
  synth_cmd->add_option("--placement", placement_flag, "fine|coarse|mix|full");
  synth_cmd->add_option("--distractors", synth_cfg.distractors, "distractor count");
  synth_cmd->add_option("--categories", categories, "category count (0 = none)");
  synth_cmd->add_option("--cat-corr", cat_corr, "category/score-quantile correlation");

  CLI::App* viz_cmd = app.add_subcommand("visualize", "dump the regions fed to the ranker");
  add_common(viz_cmd);
  CLI::App* nn_cmd = app.add_subcommand("neighbors", "nearest neighbors in feature space");
  add_common(nn_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    return error_exit(kExitConfig, "usage", e.what());
  }

  if (!arch_flag.empty()) flags.arch = arch_flag;

  try {
    if (train_cmd->parsed()) return cmd_train(paths, flags);
    if (pretrain_cmd->parsed()) return cmd_pretrain_category(paths, flags);
    if (eval_cmd->parsed()) return cmd_eval(paths, pretty);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(paths, flags, samples, step, tolerance, pretty);
    if (synth_cmd->parsed()) {
      synth_cfg.placement = placement_from_string(placement_flag);
      synth_cfg.categories = categories;
      synth_cfg.category_correlation = cat_corr;
      if (flags.seed) synth_cfg.seed = *flags.seed;
      return cmd_synth(paths.out, synth_cfg);
    }
    if (viz_cmd->parsed()) return cmd_visualize(paths);
    if (nn_cmd->parsed()) return cmd_neighbors(paths, k, pretty);
  } catch (const ConfigError& e) {
    return error_exit(kExitConfig, "config", e.what());
  } catch (const IoError& e) {
    return error_exit(kExitData, "io", e.what());
  } catch (const ValidationError& e) {
    return error_exit(kExitData, "validation", e.what());
  } catch (const DimensionError& e) {
    return error_exit(kExitData, "dimension", e.what());
  } catch (const NumericError& e) {
    return error_exit(kExitNumeric, "numeric", e.what());
  }
  return error_exit(kExitConfig, "usage", "no subcommand given");
}
