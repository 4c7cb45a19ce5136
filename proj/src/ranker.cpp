#include "pairstn/ranker.hpp"

#include <cmath>

#include "pairstn/error.hpp"

namespace pairstn {

Variant variant_from_string(const std::string& s) {
  if (s == "base") return Variant::base;
  if (s == "m") return Variant::m;
  if (s == "c") return Variant::c;
  if (s == "mc") return Variant::mc;
  if (s == "siamese" || s == "siamese-ablation") return Variant::siamese;
  if (s == "regression" || s == "regression-ablation") return Variant::regression;
  throw ConfigError("unknown variant '" + s + "' (expected base|m|c|mc|siamese|regression)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::base: return "base";
    case Variant::m: return "m";
    case Variant::c: return "c";
    case Variant::mc: return "mc";
    case Variant::siamese: return "siamese";
    case Variant::regression: return "regression";
  }
  return "?";
}

bool variant_has_stn(Variant v) {
  return v == Variant::base || v == Variant::m || v == Variant::c || v == Variant::mc;
}

bool variant_has_category(Variant v) { return v == Variant::c || v == Variant::mc; }

int variant_levels(Variant v) {
  if (v == Variant::m || v == Variant::mc) return 3;
  if (v == Variant::base || v == Variant::c) return 1;
  return 0;
}

FeatureExtractor FeatureExtractor::make(const std::string& name, int input_size, int in_channels,
                                        int feature_dim, int c1, int c2, int c3, Rng& rng) {
  const int a1 = (input_size - 5) / 2 + 1;
  const int a2 = a1 - 2;
  const int p2 = a2 / 2;
  const int a3 = p2 - 2;
  const int p3 = a3 / 2;
  if (input_size < 9 || a2 < 2 || a2 % 2 != 0 || a3 < 2 || a3 % 2 != 0)
    throw DimensionError("feature extractor '" + name + "': input size " +
                         std::to_string(input_size) + " incompatible with conv/pool stack");
  FeatureExtractor f;
  f.input_size = input_size;
  f.in_channels = in_channels;
  f.feature_dim = feature_dim;
  f.conv1 = LayerParams::conv(name + ".conv1", c1, in_channels, 5, 5, rng);
  f.conv2 = LayerParams::conv(name + ".conv2", c2, c1, 3, 3, rng);
  f.conv3 = LayerParams::conv(name + ".conv3", c3, c2, 3, 3, rng);
  f.fc = LayerParams::fc(name + ".fc", feature_dim, c3 * p3 * p3, rng);
  return f;
}

Tensor FeatureExtractor::forward(const Tensor& image, FeatTrace* trace) const {
  if (image.ndim() != 3 || image.dim(0) != in_channels || image.dim(1) != input_size ||
      image.dim(2) != input_size)
    throw DimensionError("feature extractor: image " + image.shape_str() +
                         " does not match expected (" + std::to_string(in_channels) + "x" +
                         std::to_string(input_size) + "x" + std::to_string(input_size) + ")");
  FeatTrace local;
  FeatTrace& t = trace ? *trace : local;
  t.in = image;
  t.c1 = conv2d_forward(t.in, conv1, 2);
  t.r1 = relu_forward(t.c1);
  t.c2 = conv2d_forward(t.r1, conv2, 1);
  t.r2 = relu_forward(t.c2);
  t.p2 = avgpool2_forward(t.r2);
  t.c3 = conv2d_forward(t.p2, conv3, 1);
  t.r3 = relu_forward(t.c3);
  t.p3 = avgpool2_forward(t.r3);
  t.feat = fc_forward(t.p3, fc);
  return t.feat;
}

Tensor FeatureExtractor::backward(const FeatTrace& t, const Tensor& dfeat) {
  Tensor g = fc_backward(t.p3, fc, dfeat);
  g = avgpool2_backward(t.r3.shape, g);
  g = relu_backward(t.c3, g);
  g = conv2d_backward(t.p2, conv3, 1, g);
  g = avgpool2_backward(t.r2.shape, g);
  g = relu_backward(t.c2, g);
  g = conv2d_backward(t.r1, conv2, 1, g);
  g = relu_backward(t.c1, g);
  return conv2d_backward(t.in, conv1, 2, g);
}

CategoryNet CategoryNet::make(int input_size, int in_channels, int feature_dim, int num_classes,
                              int c1, int c2, Rng& rng) {
  const int a1 = (input_size - 5) / 2 + 1;
  const int a2 = (a1 - 5) / 2 + 1;
  if (a2 < 1) throw DimensionError("category net: input size too small for conv stack");
  CategoryNet n;
  n.input_size = input_size;
  n.in_channels = in_channels;
  n.feature_dim = feature_dim;
  n.num_classes = num_classes;
  n.conv1 = LayerParams::conv("cat.conv1", c1, in_channels, 5, 5, rng);
  n.conv2 = LayerParams::conv("cat.conv2", c2, c1, 5, 5, rng);
  n.fc1 = LayerParams::fc("cat.fc1", feature_dim, c2 * a2 * a2, rng);
  n.fc2 = LayerParams::fc("cat.fc2", num_classes, feature_dim, rng);
  return n;
}

Tensor CategoryNet::features(const Tensor& image, CatTrace* trace) const {
  CatTrace local;
  CatTrace& t = trace ? *trace : local;
  t.in = image;
  t.c1 = conv2d_forward(t.in, conv1, 2);
  t.r1 = relu_forward(t.c1);
  t.c2 = conv2d_forward(t.r1, conv2, 2);
  t.r2 = relu_forward(t.c2);
  t.f1 = fc_forward(t.r2, fc1);
  t.rf1 = relu_forward(t.f1);
  return t.rf1;
}

Tensor CategoryNet::logits(const Tensor& image, CatTrace* trace) const {
  CatTrace local;
  CatTrace& t = trace ? *trace : local;
  features(image, &t);
  t.logits = fc_forward(t.rf1, fc2);
  return t.logits;
}

void CategoryNet::backward(const CatTrace& t, const Tensor& dlogits) {
  Tensor g = fc_backward(t.rf1, fc2, dlogits);
  g = relu_backward(t.f1, g);
  g = fc_backward(t.r2, fc1, g);
  g = relu_backward(t.c2, g);
  g = conv2d_backward(t.r1, conv2, 2, g);
  g = relu_backward(t.c1, g);
  conv2d_backward(t.in, conv1, 2, g);
}

ScoringNet ScoringNet::make(Variant variant, int image_size, int channels, int feature_dim,
                            int feat_c1, int feat_c2, int feat_c3, int loc_c, Rng& rng,
                            std::optional<CategoryNet> category) {
  ScoringNet net;
  net.variant = variant;
  net.image_size = image_size;
  net.channels = channels;
  net.feature_dim = feature_dim;
  const int levels = variant_levels(variant);
  if (levels == 3 && image_size % 4 != 0)
    throw DimensionError("pyramid variants need image extents divisible by 4, got " +
                         std::to_string(image_size));
  for (int l = 0; l < levels; ++l) {
    const int size = image_size >> l;
    net.locs.push_back(LocalizationNet::make("loc" + std::to_string(l + 1), size, channels, loc_c,
                                             l == 0 ? 1.0 : (l == 1 ? 0.5 : 0.25), rng));
  }
  net.fr = FeatureExtractor::make("fr", image_size, channels, feature_dim, feat_c1, feat_c2,
                                  feat_c3, rng);
  if (variant_has_category(variant)) {
    if (category && category->input_size != image_size)
      throw ConfigError("category net input size " + std::to_string(category->input_size) +
                        " does not match image size " + std::to_string(image_size));
    net.category = std::move(category);
  }
  net.head = LayerParams::fc("head", 1, net.head_width(), rng);
  return net;
}

int ScoringNet::head_width() const {
  int w = feature_dim * (1 + variant_levels(variant));
  if (variant == Variant::siamese || variant == Variant::regression) w = feature_dim;
  if (variant_has_category(variant)) {
    if (!category) throw ConfigError("variant '" + variant_name(variant) +
                                     "' requires a category net and none is attached");
    w += category->feature_dim;
  }
  return w;
}

std::vector<LayerParams*> ScoringNet::learnable_params() {
  std::vector<LayerParams*> out;
  for (auto& l : locs)
    for (auto* p : l.params()) out.push_back(p);
  for (auto* p : fr.params()) out.push_back(p);
  out.push_back(&head);
  return out;
}

std::vector<const LayerParams*> ScoringNet::learnable_params() const {
  std::vector<const LayerParams*> out;
  for (const auto& l : locs)
    for (const auto* p : l.params()) out.push_back(p);
  for (const auto* p : fr.params()) out.push_back(p);
  out.push_back(&head);
  return out;
}

std::vector<const LayerParams*> ScoringNet::all_params() const {
  auto out = learnable_params();
  if (category)
    for (const auto* p : category->params()) out.push_back(p);
  return out;
}

std::vector<LayerParams*> ScoringNet::all_params() {
  auto out = learnable_params();
  if (category)
    for (auto* p : category->params()) out.push_back(p);
  return out;
}

void ScoringNet::zero_grads() {
  for (auto* p : learnable_params()) p->zero_grad();
}

std::vector<AffineParams> ScoreTrace::affines() const {
  std::vector<AffineParams> out;
  for (const auto& l : levels) out.push_back(l.affine);
  return out;
}

std::vector<BoundsReport> ScoreTrace::bounds() const {
  std::vector<BoundsReport> out;
  for (const auto& l : levels) out.push_back(l.bounds);
  return out;
}

namespace {

void concat_into(Tensor& dst, std::size_t& off, const Tensor& src) {
  for (double v : src.data) dst.data[off++] = v;
}

}  // namespace

ScoreTrace ScoringNet::score(const Tensor& image) const {
  Inputs in;
  in.global = image;
  in.level_sources.assign(static_cast<std::size_t>(variant_levels(variant)), image);
  return score_inputs(in);
}

ScoreTrace ScoringNet::score_inputs(const Inputs& in) const {
  const int levels = variant_levels(variant);
  auto check_image = [&](const Tensor& image, const char* what) {
    if (image.ndim() != 3 || image.dim(0) != channels || image.dim(1) != image_size ||
        image.dim(2) != image_size)
      throw DimensionError(std::string("score: ") + what + " " + image.shape_str() +
                           " does not match configured (" + std::to_string(channels) + "x" +
                           std::to_string(image_size) + "x" + std::to_string(image_size) + ")");
  };
  check_image(in.global, "image");
  if (static_cast<int>(in.level_sources.size()) != levels)
    throw DimensionError("score: expected " + std::to_string(levels) + " level sources, got " +
                         std::to_string(in.level_sources.size()));
  if (levels == 3 && image_size % 4 != 0)
    throw DimensionError("pyramid scoring needs image extents divisible by 4, got " +
                         std::to_string(image_size));
  if (variant_has_category(variant) && !category)
    throw ConfigError("variant '" + variant_name(variant) +
                      "' requires a category net and none is attached");

  ScoreTrace t;
  fr.forward(in.global, &t.global_feat);

  for (int l = 0; l < levels; ++l) {
    LevelTrace lt;
    check_image(in.level_sources[static_cast<std::size_t>(l)], "level source");
    Tensor level_input = in.level_sources[static_cast<std::size_t>(l)];
    for (int k = 0; k < l; ++k) level_input = avgpool2_forward(level_input);
    lt.level_image = std::move(level_input);
    lt.affine = locs[static_cast<std::size_t>(l)].forward(lt.level_image, &lt.loc);
    lt.bounds = bounds_check(lt.affine);
    lt.grid = affine_grid(lt.affine, image_size, image_size);
    lt.roi = bilinear_sample(lt.level_image, lt.grid);
    fr.forward(lt.roi, &lt.roi_feat);
    t.levels.push_back(std::move(lt));
  }

  if (variant_has_category(variant)) t.cat_feat = category->features(in.global, nullptr);

  t.t_r = Tensor::zeros({head_width()});
  std::size_t off = 0;
  concat_into(t.t_r, off, t.global_feat.feat);
  for (const auto& lt : t.levels) concat_into(t.t_r, off, lt.roi_feat.feat);
  if (variant_has_category(variant)) concat_into(t.t_r, off, t.cat_feat);

  Tensor v = fc_forward(t.t_r, head);
  t.v = v[0];
  return t;
}

double rank_prob(double v1, double v2) {
  double d = v1 - v2;
  // |d| capped so P stays strictly inside (0, 1) in double precision.
  if (d > 36.0) d = 36.0;
  if (d < -36.0) d = -36.0;
  if (d >= 0.0) {
    const double e = std::exp(-d);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(d);
  return e / (1.0 + e);
}

namespace {

inline double softplus(double x) {
  return x <= 0.0 ? std::log1p(std::exp(x)) : x + std::log1p(std::exp(-x));
}

void check_label(double y) {
  if (y != 0.0 && y != 0.5 && y != 1.0)
    throw ValidationError("rank label must be 0, 0.5 or 1, got " + std::to_string(y));
}

}  // namespace

double rank_loss(double v1, double v2, double y) {
  check_label(y);
  const double d = v1 - v2;
  return y * softplus(-d) + (1.0 - y) * softplus(d);
}

double LossBreakdown::recompute_total() const {
  double gate = 1.0;
  double acc = 0.0;
  for (int b = 0; b < 2; ++b) {
    for (std::size_t l = 0; l < lambdas[b].size(); ++l) {
      gate *= 1.0 - lambdas[b][l];
      acc += lambdas[b][l] * spatial[b][l];
    }
  }
  return gate * rank_loss + acc;
}

namespace {

LossBreakdown combined_loss(const ScoreTrace& t1, const ScoreTrace& t2, double y) {
  LossBreakdown out;
  out.rank_loss = rank_loss(t1.v, t2.v, y);
  const ScoreTrace* traces[2] = {&t1, &t2};
  for (int b = 0; b < 2; ++b) {
    for (const auto& lt : traces[b]->levels) {
      out.lambdas[b].push_back(lt.bounds.lambda);
      out.spatial[b].push_back(lt.bounds.spatial_loss);
    }
  }
  out.total = out.recompute_total();
  return out;
}

}  // namespace

LossBreakdown combined_loss_single(const ScoreTrace& t1, const ScoreTrace& t2, double y) {
  if (t1.levels.size() != 1 || t2.levels.size() != 1)
    throw DimensionError("combined_loss_single expects exactly one spatial transformer per branch");
  return combined_loss(t1, t2, y);
}

LossBreakdown combined_loss_multiscale(const ScoreTrace& t1, const ScoreTrace& t2, double y) {
  if (t1.levels.size() != 3 || t2.levels.size() != 3)
    throw DimensionError("combined_loss_multiscale expects three spatial transformers per branch");
  return combined_loss(t1, t2, y);
}

PairTrace forward_pair(const ScoringNet& net, const Tensor& img1, const Tensor& img2, double y) {
  check_label(y);
  PairTrace t;
  t.a = net.score(img1);
  t.b = net.score(img2);
  t.loss = combined_loss(t.a, t.b, y);
  return t;
}

PairTrace forward_pair(const ScoringNet& net, const ScoringNet::Inputs& in1,
                       const ScoringNet::Inputs& in2, double y) {
  check_label(y);
  PairTrace t;
  t.a = net.score_inputs(in1);
  t.b = net.score_inputs(in2);
  t.loss = combined_loss(t.a, t.b, y);
  return t;
}

namespace {

// Backward through one branch. dv is d(loss)/d(v); spatial_scale[l] is the
// coefficient of that level's spatial loss (lambda * scale). Rank and spatial
// upstreams into each localization net are merged so it runs backward once.
void branch_backward(ScoringNet& net, const ScoreTrace& t, double dv,
                     const std::vector<double>& spatial_scale) {
  const int fdim = net.feature_dim;
  std::size_t off = 0;
  Tensor dglobal = Tensor::zeros({fdim});
  std::vector<Tensor> droif(t.levels.size(), Tensor::zeros({fdim}));

  if (dv != 0.0) {
    Tensor up = Tensor::zeros({1});
    up[0] = dv;
    Tensor dtr = fc_backward(t.t_r, net.head, up);
    for (int i = 0; i < fdim; ++i) dglobal[static_cast<std::size_t>(i)] = dtr[off + i];
    off += static_cast<std::size_t>(fdim);
    for (auto& dl : droif) {
      for (int i = 0; i < fdim; ++i) dl[static_cast<std::size_t>(i)] = dtr[off + i];
      off += static_cast<std::size_t>(fdim);
    }
    // Category slice of dtr is dropped: those features are frozen inputs.
    net.fr.backward(t.global_feat, dglobal);
  }

  for (std::size_t l = 0; l < t.levels.size(); ++l) {
    const LevelTrace& lt = t.levels[l];
    double ds = 0.0, dtx = 0.0, dty = 0.0;
    if (dv != 0.0) {
      Tensor droi = net.fr.backward(lt.roi_feat, droif[l]);
      std::vector<double> gx, gy;
      bilinear_sample_backward(lt.level_image, lt.grid, droi, nullptr, &gx, &gy);
      grid_to_affine_grads(lt.grid.out_h, lt.grid.out_w, gx, gy, &ds, &dtx, &dty);
    }
    if (spatial_scale[l] != 0.0) {
      double ps = 0.0, ptx = 0.0, pty = 0.0;
      spatial_loss_grads(lt.affine, &ps, &ptx, &pty);
      ds += spatial_scale[l] * ps;
      dtx += spatial_scale[l] * ptx;
      dty += spatial_scale[l] * pty;
    }
    if (ds != 0.0 || dtx != 0.0 || dty != 0.0)
      net.locs[l].backward(lt.loc, ds, dtx, dty);
  }
}

}  // namespace

void backward_pair(ScoringNet& net, const PairTrace& trace, double y, double scale) {
  double gate = 1.0;
  for (int b = 0; b < 2; ++b)
    for (int lam : trace.loss.lambdas[b]) gate *= 1.0 - lam;

  const double p = rank_prob(trace.a.v, trace.b.v);
  const double drank = gate * scale * (p - y);

  const ScoreTrace* traces[2] = {&trace.a, &trace.b};
  const double dvs[2] = {drank, -drank};
  for (int b = 0; b < 2; ++b) {
    std::vector<double> spatial_scale;
    for (int lam : trace.loss.lambdas[b]) spatial_scale.push_back(scale * lam);
    branch_backward(net, *traces[b], dvs[b], spatial_scale);
  }
}

SingleTrace forward_regression(const ScoringNet& net, const Tensor& img, double target) {
  if (net.variant != Variant::regression)
    throw ConfigError("forward_regression requires the regression variant");
  SingleTrace t;
  t.t = net.score(img);
  const double r = t.t.v - target;
  t.loss = r * r;
  return t;
}

void backward_regression(ScoringNet& net, const SingleTrace& trace, double target, double scale) {
  const double dv = scale * 2.0 * (trace.t.v - target);
  branch_backward(net, trace.t, dv, {});
}

}  // namespace pairstn
