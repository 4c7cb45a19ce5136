#include "pairstn/train.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <thread>

#include "pairstn/error.hpp"
#include "pairstn/image_io.hpp"

namespace pairstn {

void TrainConfig::validate() const {
  if (learning_rate < 0.0) throw ConfigError("learning rate must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (threads < 1) throw ConfigError("threads must be positive");
  if (image_size < 16) throw ConfigError("image size must be >= 16");
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (feature_dim < 1 || category_dim < 1) throw ConfigError("feature dims must be positive");
  if (feat_c1 < 1 || feat_c2 < 1 || feat_c3 < 1 || loc_c < 1 || cat_c1 < 1 || cat_c2 < 1)
    throw ConfigError("channel widths must be positive");
  if (pair_budget < 1) throw ConfigError("pair budget must be positive");
  if (heldout_fraction <= 0.0 || heldout_fraction >= 1.0)
    throw ConfigError("heldout fraction must be in (0, 1)");
  if (crop_area <= 0.0 || crop_area > 1.0) throw ConfigError("crop area must be in (0, 1]");
  if (cat_epochs < 1 || cat_lr <= 0.0) throw ConfigError("category pretraining config invalid");
}

std::vector<Tensor> load_images(const Manifest& manifest) {
  std::vector<Tensor> out(manifest.entries.size());
  const unsigned workers =
      std::max(1u, std::min(std::thread::hardware_concurrency(), 4u));
  std::vector<std::future<void>> futs;
  const std::size_t n = out.size();
  for (unsigned w = 0; w < workers; ++w) {
    futs.push_back(std::async(std::launch::async, [&, w]() {
      for (std::size_t i = w; i < n; i += workers) out[i] = load_image(manifest.image_path(i));
    }));
  }
  for (auto& f : futs) f.get();
  return out;
}

namespace {

ScoringNet build_net(const TrainConfig& cfg, Rng& rng, std::optional<CategoryNet> category) {
  return ScoringNet::make(cfg.variant, cfg.image_size, cfg.channels, cfg.feature_dim, cfg.feat_c1,
                          cfg.feat_c2, cfg.feat_c3, cfg.loc_c, rng, std::move(category));
}

// Per-level augmentation: independent crops resampled back to the model's
// input extent, so every localization net keeps a fixed geometry.
ScoringNet::Inputs augmented_inputs(const ScoringNet& net, const Tensor& image, double crop_area,
                                    Rng& rng) {
  ScoringNet::Inputs in;
  const int levels = variant_levels(net.variant);
  const int n = net.image_size;
  if (crop_area >= 1.0) {
    in.global = image;
    in.level_sources.assign(static_cast<std::size_t>(levels), image);
    return in;
  }
  Tensor first = resize_bilinear(crop_augment(image, crop_area, rng), n, n);
  in.global = first;
  in.level_sources.push_back(first);
  for (int l = 1; l < levels; ++l)
    in.level_sources.push_back(resize_bilinear(crop_augment(image, crop_area, rng), n, n));
  if (levels == 0) in.level_sources.clear();
  return in;
}

struct ScoredImage {
  double v = 0.0;
  std::vector<int> lambdas;
  std::vector<double> spatial;
};

// Scores every image referenced by the pairs exactly once, sharded across
// threads against the frozen net. Aggregation stays in pair order so the
// result is independent of scheduling.
std::vector<ScoredImage> score_unique(const ScoringNet& net, const std::vector<PairDesc>& pairs,
                                      const std::vector<Tensor>& images) {
  std::vector<char> needed(images.size(), 0);
  for (const auto& p : pairs) {
    needed[static_cast<std::size_t>(p.left)] = 1;
    needed[static_cast<std::size_t>(p.right)] = 1;
  }
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < needed.size(); ++i)
    if (needed[i]) todo.push_back(i);

  std::vector<ScoredImage> scored(images.size());
  const unsigned workers =
      std::max(1u, std::min(std::thread::hardware_concurrency(), 4u));
  std::vector<std::future<void>> futs;
  for (unsigned w = 0; w < workers; ++w) {
    futs.push_back(std::async(std::launch::async, [&, w]() {
      for (std::size_t k = w; k < todo.size(); k += workers) {
        const std::size_t i = todo[k];
        ScoreTrace t = net.score(images[i]);
        ScoredImage s;
        s.v = t.v;
        for (const auto& lt : t.levels) {
          s.lambdas.push_back(lt.bounds.lambda);
          s.spatial.push_back(lt.bounds.spatial_loss);
        }
        scored[i] = std::move(s);
      }
    }));
  }
  for (auto& f : futs) f.get();
  return scored;
}

double pair_credit(double v1, double v2, double y) {
  if (v1 == v2 || y == 0.5) return 0.5;
  const bool left_higher = v1 > v2;
  return (left_higher && y == 1.0) || (!left_higher && y == 0.0) ? 1.0 : 0.0;
}

EvalReport report_from(const std::vector<ScoredImage>& scored, const std::vector<PairDesc>& pairs) {
  EvalReport r;
  r.pair_count = static_cast<long>(pairs.size());
  if (pairs.empty()) return r;
  double credit = 0.0, rank_sum = 0.0, total_sum = 0.0;
  long lambda_hits = 0, lambda_slots = 0;
  for (const auto& p : pairs) {
    const ScoredImage& a = scored[static_cast<std::size_t>(p.left)];
    const ScoredImage& b = scored[static_cast<std::size_t>(p.right)];
    credit += pair_credit(a.v, b.v, p.y);
    const double lr = rank_loss(a.v, b.v, p.y);
    rank_sum += lr;
    double gate = 1.0, spatial = 0.0;
    for (std::size_t l = 0; l < a.lambdas.size(); ++l) {
      gate *= 1.0 - a.lambdas[l];
      spatial += a.lambdas[l] * a.spatial[l];
      lambda_hits += a.lambdas[l];
    }
    for (std::size_t l = 0; l < b.lambdas.size(); ++l) {
      gate *= 1.0 - b.lambdas[l];
      spatial += b.lambdas[l] * b.spatial[l];
      lambda_hits += b.lambdas[l];
    }
    lambda_slots += static_cast<long>(a.lambdas.size() + b.lambdas.size());
    total_sum += gate * lr + spatial;
  }
  const double n = static_cast<double>(pairs.size());
  r.accuracy = credit / n;
  r.lambda_fraction = lambda_slots ? static_cast<double>(lambda_hits) / lambda_slots : 0.0;
  r.mean_rank_loss = rank_sum / n;
  r.mean_total_loss = total_sum / n;
  return r;
}

}  // namespace

EvalReport evaluate(const ScoringNet& net, const std::vector<PairDesc>& pairs,
                    const std::vector<Tensor>& images) {
  if (pairs.empty()) throw ValidationError("evaluate: pair list is empty");
  return report_from(score_unique(net, pairs, images), pairs);
}

EvalReport evaluate_with(const std::vector<double>& scores, const std::vector<PairDesc>& pairs) {
  if (pairs.empty()) throw ValidationError("evaluate: pair list is empty");
  std::vector<ScoredImage> scored(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scored[i].v = scores[i];
  return report_from(scored, pairs);
}

namespace {

void step_all(ScoringNet& net, const TrainConfig& cfg) {
  if (cfg.learning_rate == 0.0) {
    net.zero_grads();
    return;
  }
  for (auto* p : net.learnable_params()) sgd_step(*p, cfg.learning_rate, cfg.momentum);
}

// Gradients of one pair, captured so batches can fan out across threads and
// still merge in pair order (bit-identical to the sequential loop).
struct GradSnapshot {
  std::vector<Tensor> gw, gb;
  double loss = 0.0;

  static GradSnapshot take(ScoringNet& net, double loss) {
    GradSnapshot s;
    s.loss = loss;
    for (auto* p : net.learnable_params()) {
      s.gw.push_back(p->gw);
      s.gb.push_back(p->gb);
    }
    return s;
  }

  void add_into(ScoringNet& net) const {
    auto params = net.learnable_params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t k = 0; k < gw[i].numel(); ++k) params[i]->gw.data[k] += gw[i].data[k];
      for (std::size_t k = 0; k < gb[i].numel(); ++k) params[i]->gb.data[k] += gb[i].data[k];
    }
  }
};

TrainResult train_rank(const TrainConfig& cfg, const Manifest& manifest,
                       std::optional<CategoryNet> category) {
  const std::vector<Tensor> images = load_images(manifest);
  Rng rng(cfg.seed);
  ScoringNet net = build_net(cfg, rng, std::move(category));

  std::vector<PairDesc> pairs = make_pairs(manifest, cfg.pair_budget, rng);
  const auto heldout_n = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.heldout_fraction *
                                               static_cast<double>(pairs.size()))));
  if (heldout_n >= pairs.size())
    throw ConfigError("heldout slice would consume every training pair");
  std::vector<PairDesc> heldout(pairs.begin(), pairs.begin() + static_cast<long>(heldout_n));
  std::vector<PairDesc> train_pairs(pairs.begin() + static_cast<long>(heldout_n), pairs.end());

  const int workers = cfg.threads;
  std::vector<ScoringNet> clones(static_cast<std::size_t>(workers > 1 ? workers : 0));

  TrainResult result;
  result.heldout_pairs = heldout;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(train_pairs);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < train_pairs.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(train_pairs.size(), start + cfg.batch_size);
      const std::size_t bsz = stop - start;
      const double scale = 1.0 / static_cast<double>(bsz);

      // Augmentation crops come off the RNG sequentially, in pair order.
      std::vector<std::pair<ScoringNet::Inputs, ScoringNet::Inputs>> inputs(bsz);
      for (std::size_t k = 0; k < bsz; ++k) {
        const PairDesc& p = train_pairs[start + k];
        inputs[k].first = augmented_inputs(net, images[static_cast<std::size_t>(p.left)],
                                           cfg.crop_area, rng);
        inputs[k].second = augmented_inputs(net, images[static_cast<std::size_t>(p.right)],
                                            cfg.crop_area, rng);
      }

      std::vector<GradSnapshot> grads(bsz);
      auto process = [&](ScoringNet& local, std::size_t k) {
        const PairDesc& p = train_pairs[start + k];
        local.zero_grads();
        PairTrace t = forward_pair(local, inputs[k].first, inputs[k].second, p.y);
        backward_pair(local, t, p.y, scale);
        grads[k] = GradSnapshot::take(local, t.loss.total);
      };
      if (workers == 1) {
        for (std::size_t k = 0; k < bsz; ++k) process(net, k);
      } else {
        std::vector<std::future<void>> futs;
        for (int w = 0; w < workers; ++w) {
          futs.push_back(std::async(std::launch::async, [&, w]() {
            ScoringNet& local = clones[static_cast<std::size_t>(w)];
            local = net;
            for (std::size_t k = static_cast<std::size_t>(w); k < bsz;
                 k += static_cast<std::size_t>(workers))
              process(local, k);
          }));
        }
        for (auto& f : futs) f.get();
      }
      net.zero_grads();
      for (std::size_t k = 0; k < bsz; ++k) {
        const PairDesc& p = train_pairs[start + k];
        if (!std::isfinite(grads[k].loss))
          throw NumericError("epoch " + std::to_string(epoch) + ": non-finite loss on pair '" +
                             manifest.entries[static_cast<std::size_t>(p.left)].path + "' vs '" +
                             manifest.entries[static_cast<std::size_t>(p.right)].path + "'");
        loss_sum += grads[k].loss;
        grads[k].add_into(net);
      }
      step_all(net, cfg);
    }
    EvalReport held = evaluate(net, heldout, images);
    result.log.push_back({epoch, loss_sum / static_cast<double>(train_pairs.size()),
                          held.accuracy, held.lambda_fraction});
  }
  result.model = std::move(net);
  return result;
}

TrainResult train_regression(const TrainConfig& cfg, const Manifest& manifest) {
  const std::vector<Tensor> images = load_images(manifest);
  Rng rng(cfg.seed);
  ScoringNet net = build_net(cfg, rng, std::nullopt);

  // Hold out a slice of images; progress accuracy is 2AFC over pairs of them.
  std::vector<int> order(manifest.entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  const auto heldout_imgs = std::max<std::size_t>(
      2, static_cast<std::size_t>(std::llround(cfg.heldout_fraction *
                                               static_cast<double>(order.size()))));
  if (heldout_imgs >= order.size())
    throw ConfigError("heldout slice would consume every training image");
  std::vector<int> heldout_idx(order.begin(), order.begin() + static_cast<long>(heldout_imgs));
  std::vector<int> train_idx(order.begin() + static_cast<long>(heldout_imgs), order.end());

  std::vector<PairDesc> heldout;
  for (std::size_t i = 0; i < heldout_idx.size() && heldout.size() < 1000; ++i)
    for (std::size_t j = i + 1; j < heldout_idx.size() && heldout.size() < 1000; ++j) {
      PairDesc p;
      p.left = heldout_idx[i];
      p.right = heldout_idx[j];
      p.y = label_for(manifest.entries[static_cast<std::size_t>(p.left)].score,
                      manifest.entries[static_cast<std::size_t>(p.right)].score);
      heldout.push_back(p);
    }

  TrainResult result;
  result.heldout_pairs = heldout;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(train_idx);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(train_idx.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const auto idx = static_cast<std::size_t>(train_idx[k]);
        ScoringNet::Inputs in = augmented_inputs(net, images[idx], cfg.crop_area, rng);
        SingleTrace t = forward_regression(net, in.global, manifest.entries[idx].score);
        if (!std::isfinite(t.loss))
          throw NumericError("epoch " + std::to_string(epoch) + ": non-finite loss on '" +
                             manifest.entries[idx].path + "'");
        loss_sum += t.loss;
        backward_regression(net, t, manifest.entries[idx].score, scale);
      }
      step_all(net, cfg);
    }
    EvalReport held = evaluate(net, heldout, images);
    result.log.push_back({epoch, loss_sum / static_cast<double>(train_idx.size()), held.accuracy,
                          held.lambda_fraction});
  }
  result.model = std::move(net);
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Manifest& manifest,
                  std::optional<CategoryNet> category) {
  cfg.validate();
  if (variant_has_category(cfg.variant) && !category)
    throw ConfigError("variant '" + variant_name(cfg.variant) +
                      "' requires a pre-trained category checkpoint");
  if (!variant_has_category(cfg.variant)) category.reset();
  if (cfg.variant == Variant::regression) return train_regression(cfg, manifest);
  return train_rank(cfg, manifest, std::move(category));
}

namespace {

double softmax_ce(const Tensor& logits, int label, Tensor* dlogits) {
  const int k = static_cast<int>(logits.numel());
  double m = logits[0];
  for (int i = 1; i < k; ++i) m = std::max(m, logits[static_cast<std::size_t>(i)]);
  double sum = 0.0;
  for (int i = 0; i < k; ++i) sum += std::exp(logits[static_cast<std::size_t>(i)] - m);
  const double lse = m + std::log(sum);
  if (dlogits) {
    *dlogits = Tensor::zeros({k});
    for (int i = 0; i < k; ++i)
      (*dlogits)[static_cast<std::size_t>(i)] =
          std::exp(logits[static_cast<std::size_t>(i)] - lse);
    (*dlogits)[static_cast<std::size_t>(label)] -= 1.0;
  }
  return lse - logits[static_cast<std::size_t>(label)];
}

}  // namespace

CategoryPretrainResult pretrain_category(const TrainConfig& cfg, const Manifest& manifest) {
  cfg.validate();
  if (!manifest.has_categories())
    throw ValidationError("category pre-training needs a manifest with categories");
  int max_cat = 0;
  for (const auto& e : manifest.entries) max_cat = std::max(max_cat, e.category);
  const int k = max_cat + 1;
  {
    std::vector<char> present(static_cast<std::size_t>(k), 0);
    for (const auto& e : manifest.entries) present[static_cast<std::size_t>(e.category)] = 1;
    int distinct = 0;
    for (char c : present) distinct += c;
    if (distinct < 2)
      throw ValidationError("category pre-training needs at least 2 distinct categories");
  }

  const std::vector<Tensor> images = load_images(manifest);
  Rng rng(cfg.seed);
  CategoryNet net = CategoryNet::make(cfg.image_size, cfg.channels, cfg.category_dim, k,
                                      cfg.cat_c1, cfg.cat_c2, rng);

  std::vector<int> order(manifest.entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int epoch = 1; epoch <= cfg.cat_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const auto idx = static_cast<std::size_t>(order[i]);
        CatTrace trace;
        net.logits(images[idx], &trace);
        Tensor dlogits;
        softmax_ce(trace.logits, manifest.entries[idx].category, &dlogits);
        for (double& g : dlogits.data) g *= scale;
        net.backward(trace, dlogits);
      }
      for (auto* p : net.params()) sgd_step(*p, cfg.cat_lr, cfg.momentum);
    }
  }

  long correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Tensor logits = net.logits(images[i], nullptr);
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (logits[static_cast<std::size_t>(j)] > logits[static_cast<std::size_t>(best)]) best = j;
    if (best == manifest.entries[i].category) ++correct;
  }
  CategoryPretrainResult r{std::move(net),
                           static_cast<double>(correct) / static_cast<double>(images.size())};
  return r;
}

namespace {

struct PairSignature {
  std::uint64_t relu_hash = 0xcbf29ce484222325ULL;
  std::uint64_t cell_hash = 0xcbf29ce484222325ULL;
  std::vector<int> lambdas;

  void mix_relu(const Tensor& pre) {
    for (double v : pre.data) {
      relu_hash ^= v > 0.0 ? 0x9eULL : 0x31ULL;
      relu_hash *= 0x100000001b3ULL;
    }
  }
};

void signature_of_branch(const ScoreTrace& t, PairSignature& sig) {
  sig.mix_relu(t.global_feat.c1);
  sig.mix_relu(t.global_feat.c2);
  sig.mix_relu(t.global_feat.c3);
  for (const auto& lt : t.levels) {
    sig.mix_relu(lt.loc.c1);
    sig.mix_relu(lt.loc.c2);
    sig.mix_relu(lt.loc.f1);
    sig.mix_relu(lt.roi_feat.c1);
    sig.mix_relu(lt.roi_feat.c2);
    sig.mix_relu(lt.roi_feat.c3);
    sig.cell_hash =
        hash_grid_cells(lt.grid, lt.level_image.dim(1), lt.level_image.dim(2), sig.cell_hash);
    sig.lambdas.push_back(lt.bounds.lambda);
  }
}

struct LossEval {
  double loss = 0.0;
  PairSignature sig;
};

}  // namespace

GradCheckReport grad_check(const TrainConfig& cfg, int n_samples, double step, double tol_bulk,
                           double tol_max) {
  cfg.validate();
  if (step < 1e-6 || step > 1e-3) throw ConfigError("grad check step must be in [1e-6, 1e-3]");

  Rng rng(cfg.seed);
  std::optional<CategoryNet> category;
  if (variant_has_category(cfg.variant)) {
    // Gradient checking needs category *structure*, not a trained classifier.
    category = CategoryNet::make(cfg.image_size, cfg.channels, cfg.category_dim, 4, cfg.cat_c1,
                                 cfg.cat_c2, rng);
  }
  ScoringNet net = build_net(cfg, rng, std::move(category));
  // Nudge every learnable tensor off its symmetric init so the checked point
  // is generic (nonzero localization weights, active relus on both sides).
  for (auto* p : net.learnable_params()) {
    for (double& v : p->w.data) v += rng.uniform(-0.05, 0.05);
    for (double& v : p->b.data) v += rng.uniform(-0.05, 0.05);
  }

  Tensor img1 = Tensor::zeros({cfg.channels, cfg.image_size, cfg.image_size});
  Tensor img2 = Tensor::zeros({cfg.channels, cfg.image_size, cfg.image_size});
  for (double& v : img1.data) v = rng.uniform();
  for (double& v : img2.data) v = rng.uniform();
  const double y = 1.0;
  const double target = 0.7;

  auto eval_loss = [&]() {
    LossEval e;
    if (cfg.variant == Variant::regression) {
      SingleTrace t = forward_regression(net, img1, target);
      e.loss = t.loss;
      signature_of_branch(t.t, e.sig);
    } else {
      PairTrace t = forward_pair(net, img1, img2, y);
      e.loss = t.loss.total;
      signature_of_branch(t.a, e.sig);
      signature_of_branch(t.b, e.sig);
    }
    return e;
  };

  // Analytic gradients at the base point.
  net.zero_grads();
  if (cfg.variant == Variant::regression) {
    SingleTrace t = forward_regression(net, img1, target);
    backward_regression(net, t, target, 1.0);
  } else {
    PairTrace t = forward_pair(net, img1, img2, y);
    backward_pair(net, t, y, 1.0);
  }
  std::vector<Tensor> analytic_w, analytic_b;
  for (auto* p : net.learnable_params()) {
    analytic_w.push_back(p->gw);
    analytic_b.push_back(p->gb);
  }

  GradCheckReport report;
  report.variant = cfg.variant;
  report.step = step;
  report.tol_bulk = tol_bulk;
  report.tol_max = tol_max;

  auto params = net.learnable_params();
  const int tensor_count = static_cast<int>(params.size()) * 2;
  const int per_tensor = std::max(1, n_samples / std::max(1, tensor_count));

  int below_bulk = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (int which = 0; which < 2; ++which) {
      Tensor& weights = which == 0 ? params[pi]->w : params[pi]->b;
      const Tensor& analytic = which == 0 ? analytic_w[pi] : analytic_b[pi];
      TensorCheck tc;
      tc.name = params[pi]->name + (which == 0 ? ".w" : ".b");
      const int n = static_cast<int>(weights.numel());
      std::vector<int> picks;
      if (n <= per_tensor) {
        for (int i = 0; i < n; ++i) picks.push_back(i);
      } else {
        std::vector<char> used(static_cast<std::size_t>(n), 0);
        while (static_cast<int>(picks.size()) < per_tensor) {
          int i = rng.uniform_int(n);
          if (!used[static_cast<std::size_t>(i)]) {
            used[static_cast<std::size_t>(i)] = 1;
            picks.push_back(i);
          }
        }
      }
      for (int idx : picks) {
        const double saved = weights.data[static_cast<std::size_t>(idx)];
        weights.data[static_cast<std::size_t>(idx)] = saved + step;
        LossEval plus = eval_loss();
        weights.data[static_cast<std::size_t>(idx)] = saved - step;
        LossEval minus = eval_loss();
        weights.data[static_cast<std::size_t>(idx)] = saved;

        if (plus.sig.lambdas != minus.sig.lambdas) {
          ++tc.skipped_lambda;
          continue;
        }
        if (plus.sig.relu_hash != minus.sig.relu_hash ||
            plus.sig.cell_hash != minus.sig.cell_hash) {
          ++tc.skipped_kink;
          continue;
        }
        const double numeric = (plus.loss - minus.loss) / (2.0 * step);
        const double exact = analytic.data[static_cast<std::size_t>(idx)];
        const double denom = std::max(std::fabs(numeric), std::fabs(exact));
        const double rel = denom < 1e-8 ? 0.0 : std::fabs(numeric - exact) / denom;
        tc.max_rel = std::max(tc.max_rel, rel);
        ++tc.checked;
        if (rel < tol_bulk) ++below_bulk;
      }
      report.total_checked += tc.checked;
      report.total_skipped += tc.skipped_lambda + tc.skipped_kink;
      report.max_rel = std::max(report.max_rel, tc.max_rel);
      report.tensors.push_back(std::move(tc));
    }
  }
  report.frac_below_bulk =
      report.total_checked ? static_cast<double>(below_bulk) / report.total_checked : 1.0;
  report.passed = report.frac_below_bulk >= 0.99 && report.max_rel < tol_max;
  return report;
}

}  // namespace pairstn
