#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pairstn/data.hpp"
#include "pairstn/ranker.hpp"

namespace pairstn {

struct TrainConfig {
  Variant variant = Variant::base;
  double learning_rate = 0.05;  // 0 is allowed and leaves parameters untouched
  double momentum = 0.9;
  int epochs = 10;
  int batch_size = 10;
  // Worker threads for within-batch gradient evaluation. Per-pair gradients
  // are merged in pair order, so the trajectory is bit-identical for any
  // thread count.
  int threads = 2;
  std::uint64_t seed = 1;

  int image_size = 64;
  int channels = 1;
  int feature_dim = 32;
  int category_dim = 16;

  int feat_c1 = 6, feat_c2 = 8, feat_c3 = 10;
  int loc_c = 4;
  int cat_c1 = 4, cat_c2 = 6;

  long pair_budget = 20000;
  double heldout_fraction = 0.05;
  double crop_area = 0.9;

  int cat_epochs = 30;
  double cat_lr = 0.05;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double mean_loss = 0.0;
  double heldout_acc = 0.0;
  double lambda_fraction = 0.0;
};

struct TrainResult {
  ScoringNet model;
  std::vector<EpochMetrics> log;
  std::vector<PairDesc> heldout_pairs;  // indices into the training manifest
};

// Trains the configured variant on the manifest. Category variants take the
// pre-trained (frozen) category net. Deterministic: (config, seed, data)
// fully determine the parameter trajectory and the metrics log.
TrainResult train(const TrainConfig& cfg, const Manifest& manifest,
                  std::optional<CategoryNet> category = std::nullopt);

struct CategoryPretrainResult {
  CategoryNet net;
  double train_accuracy = 0.0;
};

CategoryPretrainResult pretrain_category(const TrainConfig& cfg, const Manifest& manifest);

struct EvalReport {
  long pair_count = 0;
  double accuracy = 0.0;
  double lambda_fraction = 0.0;
  double mean_rank_loss = 0.0;
  double mean_total_loss = 0.0;
};

// 2AFC accuracy over pairs; score ties and y = 0.5 pairs earn 0.5 credit.
// Read-only on the net; images are indexed by the PairDescs.
EvalReport evaluate(const ScoringNet& net, const std::vector<PairDesc>& pairs,
                    const std::vector<Tensor>& images);

// Same protocol with an arbitrary scorer, for oracle comparisons.
EvalReport evaluate_with(const std::vector<double>& scores, const std::vector<PairDesc>& pairs);

std::vector<Tensor> load_images(const Manifest& manifest);

struct TensorCheck {
  std::string name;
  int checked = 0;
  int skipped_lambda = 0;  // lambda indicator flipped between the +/-h evals
  int skipped_kink = 0;    // relu sign or sampling cell flipped
  double max_rel = 0.0;
};

struct GradCheckReport {
  Variant variant = Variant::base;
  double step = 0.0;
  double tol_bulk = 0.0, tol_max = 0.0;
  std::vector<TensorCheck> tensors;
  int total_checked = 0;
  int total_skipped = 0;
  double max_rel = 0.0;
  double frac_below_bulk = 1.0;
  bool passed = false;
};

// Central finite differences against the analytic gradients on a fixed pair,
// sampling ~n_samples parameters spread across every learnable tensor.
// Parameters whose +/-h evaluations straddle a relu kink, a sampling-cell
// boundary or a lambda flip are reported as skipped, not failed.
GradCheckReport grad_check(const TrainConfig& cfg, int n_samples, double step, double tol_bulk,
                           double tol_max);

}  // namespace pairstn
