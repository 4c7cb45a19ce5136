#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "pairstn/layers.hpp"
#include "pairstn/stn.hpp"
#include "pairstn/tensor.hpp"

namespace pairstn {

// Architecture variants. base = single STN; m = three-level pyramid;
// c / mc add frozen category features; siamese drops the STN entirely;
// regression is the squared-error single-image ablation.
enum class Variant { base, m, c, mc, siamese, regression };

Variant variant_from_string(const std::string& s);
std::string variant_name(Variant v);
bool variant_has_stn(Variant v);
bool variant_has_category(Variant v);
int variant_levels(Variant v);  // 0, 1 or 3

struct FeatTrace {
  Tensor in;
  Tensor c1, r1;
  Tensor c2, r2, p2;
  Tensor c3, r3, p3;
  Tensor feat;
};

// Shared feature extractor f: conv5(stride 2) + two conv3/pool blocks + fc.
// Applied to the raw image and to every sampled region of interest.
struct FeatureExtractor {
  int input_size = 0;
  int in_channels = 0;
  int feature_dim = 0;
  LayerParams conv1, conv2, conv3, fc;

  static FeatureExtractor make(const std::string& name, int input_size, int in_channels,
                               int feature_dim, int c1, int c2, int c3, Rng& rng);

  Tensor forward(const Tensor& image, FeatTrace* trace) const;
  // Accumulates parameter gradients; returns the input-image gradient.
  Tensor backward(const FeatTrace& trace, const Tensor& dfeat);

  std::vector<LayerParams*> params() { return {&conv1, &conv2, &conv3, &fc}; }
  std::vector<const LayerParams*> params() const { return {&conv1, &conv2, &conv3, &fc}; }
};

struct CatTrace {
  Tensor in;
  Tensor c1, r1;
  Tensor c2, r2;
  Tensor f1, rf1;  // rf1 is the feature vector handed to the rank head
  Tensor logits;
};

// Category classifier, pre-trained on category labels and then frozen.
// Its penultimate activations are concatenated into the rank head.
struct CategoryNet {
  int input_size = 0;
  int in_channels = 0;
  int feature_dim = 0;
  int num_classes = 0;
  LayerParams conv1, conv2, fc1, fc2;

  static CategoryNet make(int input_size, int in_channels, int feature_dim, int num_classes,
                          int c1, int c2, Rng& rng);

  Tensor features(const Tensor& image, CatTrace* trace) const;
  Tensor logits(const Tensor& image, CatTrace* trace) const;
  // Classifier backward for pre-training only; never runs during rank training.
  void backward(const CatTrace& trace, const Tensor& dlogits);

  std::vector<LayerParams*> params() { return {&conv1, &conv2, &fc1, &fc2}; }
  std::vector<const LayerParams*> params() const { return {&conv1, &conv2, &fc1, &fc2}; }
};

struct LevelTrace {
  Tensor level_image;     // pyramid level input (downsampled as needed)
  LocTrace loc;
  AffineParams affine;
  BoundsReport bounds;
  SamplingGrid grid;
  Tensor roi;
  FeatTrace roi_feat;
};

// Everything one branch produced while scoring one image: the score v, the
// per-level affines and bounds reports, and the concatenated feature t_R.
struct ScoreTrace {
  double v = 0.0;
  Tensor t_r;
  FeatTrace global_feat;
  std::vector<LevelTrace> levels;
  Tensor cat_feat;  // empty unless the variant carries a category net

  std::vector<AffineParams> affines() const;
  std::vector<BoundsReport> bounds() const;
};

// One scoring model. Both siamese branches evaluate this same object; weight
// sharing is structural, there is exactly one copy of every tensor.
struct ScoringNet {
  Variant variant = Variant::base;
  int image_size = 0;
  int channels = 0;
  int feature_dim = 0;

  std::vector<LocalizationNet> locs;
  FeatureExtractor fr;
  LayerParams head;
  std::optional<CategoryNet> category;

  static ScoringNet make(Variant variant, int image_size, int channels, int feature_dim,
                         int feat_c1, int feat_c2, int feat_c3, int loc_c, Rng& rng,
                         std::optional<CategoryNet> category = std::nullopt);

  int head_width() const;
  // Learnable tensors only; the frozen category net is deliberately absent.
  std::vector<LayerParams*> learnable_params();
  std::vector<const LayerParams*> learnable_params() const;
  // Learnable + frozen, for checkpoints and checksums.
  std::vector<const LayerParams*> all_params() const;
  std::vector<LayerParams*> all_params();
  void zero_grads();

  ScoreTrace score(const Tensor& image) const;

  // Training-time entry point: the global image and each pyramid level may
  // come from different augmentation crops. level_sources are full-resolution;
  // level l is downsampled l times before its localization net sees it.
  struct Inputs {
    Tensor global;
    std::vector<Tensor> level_sources;
  };
  ScoreTrace score_inputs(const Inputs& in) const;
};

// Logistic of the score difference, overflow-free, strictly inside (0, 1).
double rank_prob(double v1, double v2);

// Cross-entropy rank loss; y in {0, 0.5, 1}. Computed from d = v1 - v2 via
// softplus, never by materializing P.
double rank_loss(double v1, double v2, double y);

// Per-pair record of every loss term. total always reproduces the gated
// composite from the stored parts.
struct LossBreakdown {
  double rank_loss = 0.0;
  std::array<std::vector<int>, 2> lambdas;
  std::array<std::vector<double>, 2> spatial;
  double total = 0.0;

  double recompute_total() const;
};

LossBreakdown combined_loss_single(const ScoreTrace& t1, const ScoreTrace& t2, double y);
LossBreakdown combined_loss_multiscale(const ScoreTrace& t1, const ScoreTrace& t2, double y);

struct PairTrace {
  ScoreTrace a, b;
  LossBreakdown loss;
};

// Forward both branches and assemble the variant's composite loss.
PairTrace forward_pair(const ScoringNet& net, const Tensor& img1, const Tensor& img2, double y);
PairTrace forward_pair(const ScoringNet& net, const ScoringNet::Inputs& in1,
                       const ScoringNet::Inputs& in2, double y);

// Gradients of scale * total loss into the net's accumulators. Spatial terms
// reach only the localization nets; the rank term flows through both branches
// into the shared parameters; a frozen category net receives nothing.
void backward_pair(ScoringNet& net, const PairTrace& trace, double y, double scale);

// Regression ablation: squared error against the raw score, single image.
struct SingleTrace {
  ScoreTrace t;
  double loss = 0.0;
};
SingleTrace forward_regression(const ScoringNet& net, const Tensor& img, double target);
void backward_regression(ScoringNet& net, const SingleTrace& trace, double target, double scale);

}  // namespace pairstn
