#include "pairstn/layers.hpp"

#include <cmath>

#include "pairstn/error.hpp"

namespace pairstn {

namespace {

Tensor fanin_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.data) v = rng.uniform(-limit, limit);
  return t;
}

}  // namespace

LayerParams LayerParams::conv(std::string name, int out_c, int in_c, int kh, int kw, Rng& rng) {
  LayerParams p;
  p.name = std::move(name);
  p.w = fanin_uniform({out_c, in_c, kh, kw}, in_c * kh * kw, rng);
  p.b = Tensor::zeros({out_c});
  p.gw = Tensor::zeros(p.w.shape);
  p.gb = Tensor::zeros(p.b.shape);
  p.vw = Tensor::zeros(p.w.shape);
  p.vb = Tensor::zeros(p.b.shape);
  return p;
}

LayerParams LayerParams::fc(std::string name, int out_dim, int in_dim, Rng& rng) {
  LayerParams p;
  p.name = std::move(name);
  p.w = fanin_uniform({out_dim, in_dim}, in_dim, rng);
  p.b = Tensor::zeros({out_dim});
  p.gw = Tensor::zeros(p.w.shape);
  p.gb = Tensor::zeros(p.b.shape);
  p.vw = Tensor::zeros(p.w.shape);
  p.vb = Tensor::zeros(p.b.shape);
  return p;
}

Tensor conv2d_forward(const Tensor& in, const LayerParams& p, int stride) {
  if (in.ndim() != 3)
    throw DimensionError("conv2d '" + p.name + "': input must be rank 3, got " + in.shape_str());
  if (stride < 1) throw DimensionError("conv2d '" + p.name + "': stride must be positive");
  const int in_c = in.dim(0), in_h = in.dim(1), in_w = in.dim(2);
  const int out_c = p.w.dim(0), kc = p.w.dim(1), kh = p.w.dim(2), kw = p.w.dim(3);
  if (kc != in_c)
    throw DimensionError("conv2d '" + p.name + "': input channel axis is " + std::to_string(in_c) +
                         " but kernel expects " + std::to_string(kc));
  if (in_h < kh || in_w < kw)
    throw DimensionError("conv2d '" + p.name + "': spatial axes " + in.shape_str() +
                         " smaller than kernel " + std::to_string(kh) + "x" + std::to_string(kw));
  const int out_h = (in_h - kh) / stride + 1;
  const int out_w = (in_w - kw) / stride + 1;

  Tensor out = Tensor::zeros({out_c, out_h, out_w});
  for (int oc = 0; oc < out_c; ++oc) {
    double* out_ch = out.data.data() + static_cast<std::size_t>(oc) * out_h * out_w;
    const double bias = p.b[static_cast<std::size_t>(oc)];
    for (int i = 0; i < out_h * out_w; ++i) out_ch[i] = bias;
    for (int ic = 0; ic < in_c; ++ic) {
      const double* in_ch = in.data.data() + static_cast<std::size_t>(ic) * in_h * in_w;
      const double* k = p.w.data.data() + ((static_cast<std::size_t>(oc) * in_c + ic) * kh) * kw;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const double wv = k[ky * kw + kx];
          for (int oy = 0; oy < out_h; ++oy) {
            const double* in_row = in_ch + (oy * stride + ky) * in_w + kx;
            double* out_row = out_ch + oy * out_w;
            for (int ox = 0; ox < out_w; ++ox) out_row[ox] += wv * in_row[ox * stride];
          }
        }
      }
    }
  }
  return out;
}

Tensor conv2d_backward(const Tensor& in, LayerParams& p, int stride, const Tensor& upstream) {
  const int in_c = in.dim(0), in_h = in.dim(1), in_w = in.dim(2);
  const int out_c = p.w.dim(0), kh = p.w.dim(2), kw = p.w.dim(3);
  const int out_h = (in_h - kh) / stride + 1;
  const int out_w = (in_w - kw) / stride + 1;
  if (upstream.shape != std::vector<int>{out_c, out_h, out_w})
    throw DimensionError("conv2d backward '" + p.name + "': upstream " + upstream.shape_str() +
                         " does not match forward output (" + std::to_string(out_c) + "x" +
                         std::to_string(out_h) + "x" + std::to_string(out_w) + ")");

  Tensor din = Tensor::zeros(in.shape);
  for (int oc = 0; oc < out_c; ++oc) {
    const double* up_ch = upstream.data.data() + static_cast<std::size_t>(oc) * out_h * out_w;
    double gb = 0.0;
    for (int i = 0; i < out_h * out_w; ++i) gb += up_ch[i];
    p.gb[static_cast<std::size_t>(oc)] += gb;
    for (int ic = 0; ic < in_c; ++ic) {
      const double* in_ch = in.data.data() + static_cast<std::size_t>(ic) * in_h * in_w;
      double* din_ch = din.data.data() + static_cast<std::size_t>(ic) * in_h * in_w;
      double* gk = p.gw.data.data() + ((static_cast<std::size_t>(oc) * in_c + ic) * kh) * kw;
      const double* k = p.w.data.data() + ((static_cast<std::size_t>(oc) * in_c + ic) * kh) * kw;
      // Weight-grad and input-grad passes kept separate: each inner loop is a
      // plain reduction / stream update the compiler can vectorize.
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          double gsum = 0.0;
          for (int oy = 0; oy < out_h; ++oy) {
            const double* in_row = in_ch + (oy * stride + ky) * in_w + kx;
            const double* up_row = up_ch + oy * out_w;
            if (stride == 1) {
              for (int ox = 0; ox < out_w; ++ox) gsum += up_row[ox] * in_row[ox];
            } else {
              for (int ox = 0; ox < out_w; ++ox) gsum += up_row[ox] * in_row[ox * stride];
            }
          }
          gk[ky * kw + kx] += gsum;
        }
      }
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const double wv = k[ky * kw + kx];
          for (int oy = 0; oy < out_h; ++oy) {
            double* din_row = din_ch + (oy * stride + ky) * in_w + kx;
            const double* up_row = up_ch + oy * out_w;
            if (stride == 1) {
              for (int ox = 0; ox < out_w; ++ox) din_row[ox] += wv * up_row[ox];
            } else {
              for (int ox = 0; ox < out_w; ++ox) din_row[ox * stride] += wv * up_row[ox];
            }
          }
        }
      }
    }
  }
  return din;
}

Tensor fc_forward(const Tensor& in, const LayerParams& p) {
  const int out_dim = p.w.dim(0), in_dim = p.w.dim(1);
  if (static_cast<int>(in.numel()) != in_dim)
    throw DimensionError("fc '" + p.name + "': flattened input axis is " +
                         std::to_string(in.numel()) + " but weights expect " +
                         std::to_string(in_dim));
  Tensor out = Tensor::zeros({out_dim});
  const double* x = in.data.data();
  for (int o = 0; o < out_dim; ++o) {
    const double* row = p.w.data.data() + static_cast<std::size_t>(o) * in_dim;
    double acc = p.b[static_cast<std::size_t>(o)];
    for (int i = 0; i < in_dim; ++i) acc += row[i] * x[i];
    out[static_cast<std::size_t>(o)] = acc;
  }
  return out;
}

Tensor fc_backward(const Tensor& in, LayerParams& p, const Tensor& upstream) {
  const int out_dim = p.w.dim(0), in_dim = p.w.dim(1);
  if (static_cast<int>(upstream.numel()) != out_dim)
    throw DimensionError("fc backward '" + p.name + "': upstream axis is " +
                         std::to_string(upstream.numel()) + ", expected " +
                         std::to_string(out_dim));
  Tensor din = Tensor::zeros(in.shape);
  const double* x = in.data.data();
  double* dx = din.data.data();
  for (int o = 0; o < out_dim; ++o) {
    const double u = upstream[static_cast<std::size_t>(o)];
    p.gb[static_cast<std::size_t>(o)] += u;
    const double* row = p.w.data.data() + static_cast<std::size_t>(o) * in_dim;
    double* grow = p.gw.data.data() + static_cast<std::size_t>(o) * in_dim;
    for (int i = 0; i < in_dim; ++i) {
      grow[i] += u * x[i];
      dx[i] += u * row[i];
    }
  }
  return din;
}

Tensor relu_forward(const Tensor& in) {
  Tensor out = in;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& in, const Tensor& upstream) {
  if (!in.same_shape(upstream))
    throw DimensionError("relu backward: upstream " + upstream.shape_str() +
                         " does not match input " + in.shape_str());
  Tensor din = upstream;
  for (std::size_t i = 0; i < din.data.size(); ++i)
    if (in.data[i] <= 0.0) din.data[i] = 0.0;
  return din;
}

Tensor avgpool2_forward(const Tensor& in) {
  if (in.ndim() != 3) throw DimensionError("avgpool2: input must be rank 3, got " + in.shape_str());
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw DimensionError("avgpool2: spatial axes must be even, got " + in.shape_str());
  Tensor out = Tensor::zeros({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h / 2; ++y)
      for (int x = 0; x < w / 2; ++x)
        out.at(ch, y, x) = 0.25 * (in.at(ch, 2 * y, 2 * x) + in.at(ch, 2 * y, 2 * x + 1) +
                                   in.at(ch, 2 * y + 1, 2 * x) + in.at(ch, 2 * y + 1, 2 * x + 1));
  return out;
}

Tensor avgpool2_backward(const std::vector<int>& in_shape, const Tensor& upstream) {
  const int c = in_shape[0], h = in_shape[1], w = in_shape[2];
  if (upstream.shape != std::vector<int>{c, h / 2, w / 2})
    throw DimensionError("avgpool2 backward: upstream " + upstream.shape_str() +
                         " does not match pooled extents");
  Tensor din = Tensor::zeros(in_shape);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h / 2; ++y)
      for (int x = 0; x < w / 2; ++x) {
        const double g = 0.25 * upstream.at(ch, y, x);
        din.at(ch, 2 * y, 2 * x) += g;
        din.at(ch, 2 * y, 2 * x + 1) += g;
        din.at(ch, 2 * y + 1, 2 * x) += g;
        din.at(ch, 2 * y + 1, 2 * x + 1) += g;
      }
  return din;
}

namespace {

void sgd_apply(const std::string& name, Tensor& w, Tensor& g, Tensor& v, double lr, double mu) {
  for (std::size_t i = 0; i < w.data.size(); ++i) {
    if (!std::isfinite(g.data[i]))
      throw NumericError("sgd_step: non-finite gradient in tensor '" + name + "'");
    v.data[i] = mu * v.data[i] + g.data[i];
    w.data[i] -= lr * v.data[i];
    g.data[i] = 0.0;
  }
}

}  // namespace

void sgd_step(LayerParams& p, double learning_rate, double momentum) {
  if (!(learning_rate > 0.0)) throw ValidationError("sgd_step: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ValidationError("sgd_step: momentum must be in [0, 1)");
  sgd_apply(p.name + ".w", p.w, p.gw, p.vw, learning_rate, momentum);
  sgd_apply(p.name + ".b", p.b, p.gb, p.vb, learning_rate, momentum);
}

}  // namespace pairstn
