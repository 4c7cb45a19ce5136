#pragma once

#include <string>
#include <vector>

#include "pairstn/rng.hpp"
#include "pairstn/tensor.hpp"

namespace pairstn {

// One learnable layer: weights + bias, with gradient accumulators and SGD
// momentum buffers of identical shapes. `name` shows up in diagnostics,
// gradient-check tables and checkpoint directories.
struct LayerParams {
  std::string name;
  Tensor w, b;
  Tensor gw, gb;
  Tensor vw, vb;

  // Convolution kernel (out_c, in_c, kh, kw); fan-in scaled uniform init.
  static LayerParams conv(std::string name, int out_c, int in_c, int kh, int kw, Rng& rng);
  // Fully connected (out_dim, in_dim); fan-in scaled uniform init.
  static LayerParams fc(std::string name, int out_dim, int in_dim, Rng& rng);

  void zero_grad() {
    gw.fill(0.0);
    gb.fill(0.0);
  }
};

// Valid (no padding) 2-d convolution of a (in_c, h, w) tensor.
// Output extents are floor((in - k) / stride) + 1.
Tensor conv2d_forward(const Tensor& in, const LayerParams& p, int stride);

// Accumulates parameter gradients into p.gw / p.gb and returns the input
// gradient. `upstream` must match the forward output shape.
Tensor conv2d_backward(const Tensor& in, LayerParams& p, int stride, const Tensor& upstream);

// Affine map W*x + b on the flattened input.
Tensor fc_forward(const Tensor& in, const LayerParams& p);
Tensor fc_backward(const Tensor& in, LayerParams& p, const Tensor& upstream);

Tensor relu_forward(const Tensor& in);
Tensor relu_backward(const Tensor& in, const Tensor& upstream);

// 2x2 non-overlapping mean pooling; spatial extents must be even.
Tensor avgpool2_forward(const Tensor& in);
Tensor avgpool2_backward(const std::vector<int>& in_shape, const Tensor& upstream);

// buffer <- momentum * buffer + grad; weight <- weight - lr * buffer;
// gradients are zeroed afterwards. Aborts on non-finite gradients.
void sgd_step(LayerParams& p, double learning_rate, double momentum);

}  // namespace pairstn
