#include "pairstn/stn.hpp"

#include <cmath>
#include <cstdint>

#include "pairstn/error.hpp"

namespace pairstn {

SamplingGrid affine_grid(const AffineParams& params, int out_h, int out_w) {
  if (out_h < 2 || out_w < 2)
    throw DimensionError("affine_grid: output extents must be >= 2, got " +
                         std::to_string(out_h) + "x" + std::to_string(out_w));
  SamplingGrid g;
  g.out_h = out_h;
  g.out_w = out_w;
  g.xs.resize(static_cast<std::size_t>(out_h) * out_w);
  g.ys.resize(static_cast<std::size_t>(out_h) * out_w);
  for (int r = 0; r < out_h; ++r) {
    const double yo = lattice_coord(r, out_h);
    for (int c = 0; c < out_w; ++c) {
      const double xo = lattice_coord(c, out_w);
      const std::size_t i = static_cast<std::size_t>(r) * out_w + c;
      g.xs[i] = params.s * xo + params.tx;
      g.ys[i] = params.s * yo + params.ty;
    }
  }
  return g;
}

namespace {

// Source coordinate in pixel units. Snaps to the lattice when within 1e-9 of
// an integer so that sampling at exact pixel centers reproduces input values
// despite the rounding in the normalized-coordinate round trip.
inline double to_pixel(double coord, int extent) {
  double p = (coord + 1.0) * 0.5 * static_cast<double>(extent - 1);
  double r = std::nearbyint(p);
  if (std::fabs(p - r) < 1e-9) p = r;
  return p;
}

}  // namespace

Tensor bilinear_sample(const Tensor& image, const SamplingGrid& grid) {
  if (image.ndim() != 3)
    throw DimensionError("bilinear_sample: image must be rank 3, got " + image.shape_str());
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h < 2 || w < 2)
    throw DimensionError("bilinear_sample: image extents must be >= 2, got " + image.shape_str());

  Tensor out = Tensor::zeros({c, grid.out_h, grid.out_w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(grid.out_h) * grid.out_w;
  for (std::size_t i = 0; i < out_plane; ++i) {
    const double ix = to_pixel(grid.xs[i], w);
    const double iy = to_pixel(grid.ys[i], h);
    const int x0 = static_cast<int>(std::floor(ix));
    const int y0 = static_cast<int>(std::floor(iy));
    const double dx = ix - x0, dy = iy - y0;
    const double w00 = (1.0 - dx) * (1.0 - dy), w01 = dx * (1.0 - dy);
    const double w10 = (1.0 - dx) * dy, w11 = dx * dy;
    const bool x0_in = x0 >= 0 && x0 < w, x1_in = x0 + 1 >= 0 && x0 + 1 < w;
    const bool y0_in = y0 >= 0 && y0 < h, y1_in = y0 + 1 >= 0 && y0 + 1 < h;
    for (int ch = 0; ch < c; ++ch) {
      const double* img = image.data.data() + ch * plane;
      double v = 0.0;
      if (y0_in) {
        if (x0_in) v += w00 * img[y0 * w + x0];
        if (x1_in) v += w01 * img[y0 * w + x0 + 1];
      }
      if (y1_in) {
        if (x0_in) v += w10 * img[(y0 + 1) * w + x0];
        if (x1_in) v += w11 * img[(y0 + 1) * w + x0 + 1];
      }
      out.data[ch * out_plane + i] = v;
    }
  }
  return out;
}

void bilinear_sample_backward(const Tensor& image, const SamplingGrid& grid,
                              const Tensor& upstream, Tensor* image_grad,
                              std::vector<double>* grid_gx, std::vector<double>* grid_gy) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t out_plane = static_cast<std::size_t>(grid.out_h) * grid.out_w;
  if (upstream.shape != std::vector<int>{c, grid.out_h, grid.out_w})
    throw DimensionError("bilinear_sample backward: upstream " + upstream.shape_str() +
                         " does not match sampled output shape");
  if (image_grad) *image_grad = Tensor::zeros(image.shape);
  if (grid_gx) grid_gx->assign(out_plane, 0.0);
  if (grid_gy) grid_gy->assign(out_plane, 0.0);

  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const double sx = 0.5 * static_cast<double>(w - 1);
  const double sy = 0.5 * static_cast<double>(h - 1);
  for (std::size_t i = 0; i < out_plane; ++i) {
    const double ix = to_pixel(grid.xs[i], w);
    const double iy = to_pixel(grid.ys[i], h);
    const int x0 = static_cast<int>(std::floor(ix));
    const int y0 = static_cast<int>(std::floor(iy));
    const double dx = ix - x0, dy = iy - y0;
    const bool x0_in = x0 >= 0 && x0 < w, x1_in = x0 + 1 >= 0 && x0 + 1 < w;
    const bool y0_in = y0 >= 0 && y0 < h, y1_in = y0 + 1 >= 0 && y0 + 1 < h;
    double gx = 0.0, gy = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      const double* img = image.data.data() + ch * plane;
      const double u = upstream.data[ch * out_plane + i];
      if (u == 0.0 && !image_grad) continue;
      const double v00 = (y0_in && x0_in) ? img[y0 * w + x0] : 0.0;
      const double v01 = (y0_in && x1_in) ? img[y0 * w + x0 + 1] : 0.0;
      const double v10 = (y1_in && x0_in) ? img[(y0 + 1) * w + x0] : 0.0;
      const double v11 = (y1_in && x1_in) ? img[(y0 + 1) * w + x0 + 1] : 0.0;
      gx += u * ((1.0 - dy) * (v01 - v00) + dy * (v11 - v10));
      gy += u * ((1.0 - dx) * (v10 - v00) + dx * (v11 - v01));
      if (image_grad) {
        double* gimg = image_grad->data.data() + ch * plane;
        if (y0_in) {
          if (x0_in) gimg[y0 * w + x0] += u * (1.0 - dx) * (1.0 - dy);
          if (x1_in) gimg[y0 * w + x0 + 1] += u * dx * (1.0 - dy);
        }
        if (y1_in) {
          if (x0_in) gimg[(y0 + 1) * w + x0] += u * (1.0 - dx) * dy;
          if (x1_in) gimg[(y0 + 1) * w + x0 + 1] += u * dx * dy;
        }
      }
    }
    if (grid_gx) (*grid_gx)[i] = gx * sx;
    if (grid_gy) (*grid_gy)[i] = gy * sy;
  }
}

void grid_to_affine_grads(int out_h, int out_w, const std::vector<double>& gx,
                          const std::vector<double>& gy, double* ds, double* dtx, double* dty) {
  double as = 0.0, atx = 0.0, aty = 0.0;
  for (int r = 0; r < out_h; ++r) {
    const double yo = lattice_coord(r, out_h);
    for (int c = 0; c < out_w; ++c) {
      const double xo = lattice_coord(c, out_w);
      const std::size_t i = static_cast<std::size_t>(r) * out_w + c;
      as += gx[i] * xo + gy[i] * yo;
      atx += gx[i];
      aty += gy[i];
    }
  }
  if (ds) *ds += as;
  if (dtx) *dtx += atx;
  if (dty) *dty += aty;
}

std::uint64_t hash_grid_cells(const SamplingGrid& grid, int img_h, int img_w, std::uint64_t h) {
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ULL;
  };
  for (std::size_t i = 0; i < grid.xs.size(); ++i) {
    mix(static_cast<std::uint64_t>(
        static_cast<std::int64_t>(std::floor(to_pixel(grid.xs[i], img_w)))));
    mix(static_cast<std::uint64_t>(
        static_cast<std::int64_t>(std::floor(to_pixel(grid.ys[i], img_h)))));
  }
  return h;
}

BoundsReport bounds_check(const AffineParams& params) {
  BoundsReport r;
  const double cx1 = params.s + params.tx, cx2 = -params.s + params.tx;
  const double cy1 = params.s + params.ty, cy2 = -params.s + params.ty;
  const double m = std::max(std::max(std::fabs(cx1), std::fabs(cx2)),
                            std::max(std::fabs(cy1), std::fabs(cy2)));
  r.lambda = m > 1.0 + 1e-9 ? 1 : 0;
  const double px = params.s * params.tx, py = params.s * params.ty;
  r.spatial_loss = px * px + py * py;
  return r;
}

void spatial_loss_grads(const AffineParams& params, double* ds, double* dtx, double* dty) {
  const double s = params.s, tx = params.tx, ty = params.ty;
  if (ds) *ds += 2.0 * s * (tx * tx + ty * ty);
  if (dtx) *dtx += 2.0 * s * s * tx;
  if (dty) *dty += 2.0 * s * s * ty;
}

LocalizationNet LocalizationNet::make(const std::string& name, int input_size, int in_channels,
                                      int width, double init_scale, Rng& rng) {
  const int c1_out = input_size - 4;
  const int p1_out = c1_out / 2;
  const int c2_out = p1_out - 4;
  const int p2_out = c2_out / 2;
  if (c1_out < 2 || c1_out % 2 != 0 || c2_out < 2 || c2_out % 2 != 0)
    throw DimensionError("localization net '" + name + "': input size " +
                         std::to_string(input_size) + " incompatible with conv5/pool stack");
  LocalizationNet net;
  net.input_size = input_size;
  net.in_channels = in_channels;
  net.init_scale = init_scale;
  net.conv1 = LayerParams::conv(name + ".conv1", width, in_channels, 5, 5, rng);
  net.conv2 = LayerParams::conv(name + ".conv2", width, width, 5, 5, rng);
  net.fc1 = LayerParams::fc(name + ".fc1", 32, width * p2_out * p2_out, rng);
  net.fc2 = LayerParams::fc(name + ".fc2", 3, 32, rng);
  // Identity-at-scale start: zero weights, bias (init_scale, 0, 0).
  net.fc2.w.fill(0.0);
  net.fc2.b[0] = init_scale;
  net.fc2.b[1] = 0.0;
  net.fc2.b[2] = 0.0;
  return net;
}

AffineParams LocalizationNet::forward(const Tensor& image, LocTrace* trace) const {
  if (image.ndim() != 3 || image.dim(0) != in_channels || image.dim(1) != input_size ||
      image.dim(2) != input_size)
    throw DimensionError("localization net '" + conv1.name + "': image " + image.shape_str() +
                         " does not match expected (" + std::to_string(in_channels) + "x" +
                         std::to_string(input_size) + "x" + std::to_string(input_size) + ")");
  LocTrace local;
  LocTrace& t = trace ? *trace : local;
  t.in = image;
  t.c1 = conv2d_forward(t.in, conv1, 1);
  t.r1 = relu_forward(t.c1);
  t.p1 = avgpool2_forward(t.r1);
  t.c2 = conv2d_forward(t.p1, conv2, 1);
  t.r2 = relu_forward(t.c2);
  t.p2 = avgpool2_forward(t.r2);
  t.f1 = fc_forward(t.p2, fc1);
  t.rf1 = relu_forward(t.f1);
  Tensor o = fc_forward(t.rf1, fc2);
  t.out = AffineParams{o[0], o[1], o[2]};
  return t.out;
}

void LocalizationNet::backward(const LocTrace& t, double ds, double dtx, double dty) {
  Tensor dout = Tensor::zeros({3});
  dout[0] = ds;
  dout[1] = dtx;
  dout[2] = dty;
  Tensor g = fc_backward(t.rf1, fc2, dout);
  g = relu_backward(t.f1, g);
  g = fc_backward(t.p2, fc1, g);
  g = avgpool2_backward(t.r2.shape, g);
  g = relu_backward(t.c2, g);
  g = conv2d_backward(t.p1, conv2, 1, g);
  g = avgpool2_backward(t.r1.shape, g);
  g = relu_backward(t.c1, g);
  conv2d_backward(t.in, conv1, 1, g);
}

}  // namespace pairstn
