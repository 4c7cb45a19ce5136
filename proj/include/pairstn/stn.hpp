#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pairstn/layers.hpp"
#include "pairstn/tensor.hpp"

namespace pairstn {

// Restricted affine: isotropic scale plus translation in the normalized
// [-1,1]^2 frame, (-1,-1) at the top-left pixel center. The induced region
// of interest is the square [tx-s, tx+s] x [ty-s, ty+s].
struct AffineParams {
  double s = 1.0;
  double tx = 0.0;
  double ty = 0.0;
};

// Per-output-pixel source coordinates in the normalized frame, row-major.
struct SamplingGrid {
  int out_h = 0, out_w = 0;
  std::vector<double> xs, ys;
};

struct BoundsReport {
  int lambda = 0;          // 1 iff some ROI corner lies outside [-1,1]^2
  double spatial_loss = 0  /* (s*tx)^2 + (s*ty)^2, centers at the origin */;
};

// Normalized coordinate of lattice index i among n; exact at corners and center.
inline double lattice_coord(int i, int n) {
  return static_cast<double>(2 * i - (n - 1)) / static_cast<double>(n - 1);
}

SamplingGrid affine_grid(const AffineParams& params, int out_h, int out_w);

Tensor bilinear_sample(const Tensor& image, const SamplingGrid& grid);

// Exact gradients of the sampled output with respect to input pixels and
// grid coordinates. Any of the sinks may be null.
void bilinear_sample_backward(const Tensor& image, const SamplingGrid& grid,
                              const Tensor& upstream, Tensor* image_grad,
                              std::vector<double>* grid_gx, std::vector<double>* grid_gy);

// Folds per-coordinate grid gradients back onto (s, tx, ty).
void grid_to_affine_grads(int out_h, int out_w, const std::vector<double>& gx,
                          const std::vector<double>& gy, double* ds, double* dtx, double* dty);

BoundsReport bounds_check(const AffineParams& params);

// Folds the integer sampling cell of every grid coordinate into an FNV-1a
// hash. The gradient checker compares these across +/-h evaluations to
// detect bilinear-kink crossings, which finite differences cannot straddle.
std::uint64_t hash_grid_cells(const SamplingGrid& grid, int img_h, int img_w, std::uint64_t h);

// d spatial_loss / d (s, tx, ty).
void spatial_loss_grads(const AffineParams& params, double* ds, double* dtx, double* dty);

struct LocTrace {
  Tensor in;
  Tensor c1, r1, p1;
  Tensor c2, r2, p2;
  Tensor f1, rf1;
  AffineParams out;
};

// Regresses (s, tx, ty) from an image. Two conv(5x5)+relu+pool blocks, then
// fc->32->relu->fc->3. The final layer starts at zero weights with bias
// (init_scale, 0, 0), so a fresh net is the identity-at-scale transform.
struct LocalizationNet {
  int input_size = 0;
  int in_channels = 0;
  double init_scale = 1.0;
  LayerParams conv1, conv2, fc1, fc2;

  static LocalizationNet make(const std::string& name, int input_size, int in_channels, int width,
                              double init_scale, Rng& rng);

  AffineParams forward(const Tensor& image, LocTrace* trace) const;
  // Accumulates parameter gradients from upstream (ds, dtx, dty).
  void backward(const LocTrace& trace, double ds, double dtx, double dty);

  std::vector<LayerParams*> params() { return {&conv1, &conv2, &fc1, &fc2}; }
  std::vector<const LayerParams*> params() const { return {&conv1, &conv2, &fc1, &fc2}; }
};

}  // namespace pairstn
