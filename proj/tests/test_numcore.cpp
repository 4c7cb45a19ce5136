#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fd_oracle.hpp"
#include "pairstn/error.hpp"
#include "pairstn/layers.hpp"
#include "pairstn/rng.hpp"
#include "pairstn/tensor.hpp"

using namespace pairstn;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("tensor shape/value invariants") {
  Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.numel() == 24);
  t.at(1, 2, 3) = 5.0;
  CHECK(t.data[23] == 5.0);
  CHECK(t.all_finite());
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
}

TEST_CASE("rng: identical seeds give identical sequences, despite platform") {
  Rng a(42), b(42), c(43);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 1000; ++i) {
    const double va = a.uniform(), vb = b.uniform(), vc = c.uniform();
    all_equal = all_equal && va == vb;
    any_diff = any_diff || va != vc;
    CHECK(va >= 0.0);
    CHECK(va < 1.0);
  }
  CHECK(all_equal);
  CHECK(any_diff);

  Rng d(7);
  for (int i = 0; i < 200; ++i) {
    int v = d.uniform_int(13);
    CHECK(v >= 0);
    CHECK(v < 13);
  }
}

TEST_CASE("conv2d: identity-like 1x1 kernel") {
  Rng rng(1);
  Tensor in = Tensor::full({1, 3, 3}, 1.0);
  LayerParams p = LayerParams::conv("k", 1, 1, 1, 1, rng);
  p.w.fill(2.0);
  p.b.fill(0.0);
  Tensor out = conv2d_forward(in, p, 1);
  CHECK(out.shape == std::vector<int>{1, 3, 3});
  for (double v : out.data) CHECK(v == 2.0);
}

TEST_CASE("conv2d: zero kernel gives constant bias") {
  Rng rng(1);
  Tensor in = random_tensor({2, 5, 6}, rng);
  LayerParams p = LayerParams::conv("k", 3, 2, 3, 3, rng);
  p.w.fill(0.0);
  p.b.fill(0.75);
  Tensor out = conv2d_forward(in, p, 1);
  CHECK(out.shape == std::vector<int>{3, 3, 4});
  for (double v : out.data) CHECK(v == 0.75);
}

TEST_CASE("conv2d: hand-computed 2x2 averaging kernel on a 4x4 ramp") {
  Rng rng(1);
  Tensor in = Tensor::zeros({1, 4, 4});
  for (int i = 0; i < 16; ++i) in.data[static_cast<std::size_t>(i)] = i;
  LayerParams p = LayerParams::conv("avg", 1, 1, 2, 2, rng);
  p.w.fill(0.25);
  p.b.fill(0.0);
  Tensor out = conv2d_forward(in, p, 1);
  // Each 2x2 block of the ramp averages to its top-left value + 2.5.
  const double expected[9] = {2.5, 3.5, 4.5, 6.5, 7.5, 8.5, 10.5, 11.5, 12.5};
  REQUIRE(out.numel() == 9);
  for (int i = 0; i < 9; ++i) CHECK(out.data[static_cast<std::size_t>(i)] ==
                                    doctest::Approx(expected[i]).epsilon(1e-14));
}

TEST_CASE("conv2d: shape errors name the offending axis") {
  Rng rng(1);
  Tensor in = random_tensor({2, 5, 5}, rng);
  LayerParams p = LayerParams::conv("k", 1, 3, 3, 3, rng);
  CHECK_THROWS_WITH_AS(conv2d_forward(in, p, 1),
                       doctest::Contains("channel"), DimensionError);
  LayerParams big = LayerParams::conv("k", 1, 2, 7, 7, rng);
  CHECK_THROWS_AS(conv2d_forward(in, big, 1), DimensionError);
}

TEST_CASE("conv2d backward: zero upstream, scalar chain rule, finite differences") {
  Rng rng(2);

  SUBCASE("zero upstream -> zero grads") {
    Tensor in = random_tensor({2, 4, 4}, rng);
    LayerParams p = LayerParams::conv("k", 2, 2, 3, 3, rng);
    Tensor up = Tensor::zeros({2, 2, 2});
    Tensor din = conv2d_backward(in, p, 1, up);
    for (double v : din.data) CHECK(v == 0.0);
    for (double v : p.gw.data) CHECK(v == 0.0);
    for (double v : p.gb.data) CHECK(v == 0.0);
  }

  SUBCASE("1x1 scalar case reduces to the product rule") {
    Tensor in = Tensor::full({1, 1, 1}, 3.0);
    LayerParams p = LayerParams::conv("k", 1, 1, 1, 1, rng);
    p.w.fill(5.0);
    Tensor up = Tensor::full({1, 1, 1}, 2.0);
    Tensor din = conv2d_backward(in, p, 1, up);
    CHECK(din.data[0] == 10.0);  // w * u
    CHECK(p.gw.data[0] == 6.0);  // x * u
    CHECK(p.gb.data[0] == 2.0);  // u
  }

  SUBCASE("random instance matches central differences") {
    for (int stride : {1, 2}) {
      Tensor in = random_tensor({2, 7, 7}, rng);
      LayerParams p = LayerParams::conv("k", 3, 2, 3, 3, rng);
      const int oh = (7 - 3) / stride + 1;
      Tensor up = random_tensor({3, oh, oh}, rng);

      auto loss = [&]() {
        Tensor out = conv2d_forward(in, p, stride);
        double s = 0.0;
        for (std::size_t i = 0; i < out.numel(); ++i) s += out.data[i] * up.data[i];
        return s;
      };
      p.zero_grad();
      Tensor din = conv2d_backward(in, p, stride, up);
      for (int i = 0; i < 20; ++i) {
        const int wi = rng.uniform_int(static_cast<int>(p.w.numel()));
        const double num = fd::central_diff(loss, p.w.data[static_cast<std::size_t>(wi)], 1e-5);
        CHECK(fd::rel_err(num, p.gw.data[static_cast<std::size_t>(wi)]) < 1e-6);
        const int xi = rng.uniform_int(static_cast<int>(in.numel()));
        const double numx = fd::central_diff(loss, in.data[static_cast<std::size_t>(xi)], 1e-5);
        CHECK(fd::rel_err(numx, din.data[static_cast<std::size_t>(xi)]) < 1e-6);
      }
      const double numb = fd::central_diff(loss, p.b.data[0], 1e-5);
      CHECK(fd::rel_err(numb, p.gb.data[0]) < 1e-6);
    }
  }
}

TEST_CASE("fc: identity weights, bias pass-through, finite differences") {
  Rng rng(3);

  SUBCASE("identity weights, zero bias") {
    Tensor in = random_tensor({4}, rng);
    LayerParams p = LayerParams::fc("f", 4, 4, rng);
    p.w.fill(0.0);
    for (int i = 0; i < 4; ++i) p.w.at(i, i) = 1.0;
    p.b.fill(0.0);
    Tensor out = fc_forward(in, p);
    for (int i = 0; i < 4; ++i) CHECK(out[static_cast<std::size_t>(i)] ==
                                      in[static_cast<std::size_t>(i)]);
  }

  SUBCASE("zero weights give the bias") {
    Tensor in = random_tensor({6}, rng);
    LayerParams p = LayerParams::fc("f", 3, 6, rng);
    p.w.fill(0.0);
    p.b.fill(-0.5);
    Tensor out = fc_forward(in, p);
    for (double v : out.data) CHECK(v == -0.5);
  }

  SUBCASE("random instance matches central differences") {
    Tensor in = random_tensor({2, 3, 3}, rng);  // fc flattens rank-3 inputs
    LayerParams p = LayerParams::fc("f", 5, 18, rng);
    Tensor up = random_tensor({5}, rng);
    auto loss = [&]() {
      Tensor out = fc_forward(in, p);
      double s = 0.0;
      for (std::size_t i = 0; i < out.numel(); ++i) s += out.data[i] * up.data[i];
      return s;
    };
    p.zero_grad();
    Tensor din = fc_backward(in, p, up);
    CHECK(din.shape == in.shape);
    for (int i = 0; i < 20; ++i) {
      const int wi = rng.uniform_int(static_cast<int>(p.w.numel()));
      CHECK(fd::rel_err(fd::central_diff(loss, p.w.data[static_cast<std::size_t>(wi)], 1e-5),
                        p.gw.data[static_cast<std::size_t>(wi)]) < 1e-6);
      const int xi = rng.uniform_int(static_cast<int>(in.numel()));
      CHECK(fd::rel_err(fd::central_diff(loss, in.data[static_cast<std::size_t>(xi)], 1e-5),
                        din.data[static_cast<std::size_t>(xi)]) < 1e-6);
    }
  }
}

TEST_CASE("relu forward/backward") {
  Rng rng(4);
  Tensor neg = random_tensor({2, 3, 3}, rng, -2.0, -0.1);
  Tensor up = random_tensor({2, 3, 3}, rng);
  Tensor out = relu_forward(neg);
  for (double v : out.data) CHECK(v == 0.0);
  Tensor din = relu_backward(neg, up);
  for (double v : din.data) CHECK(v == 0.0);

  Tensor pos = random_tensor({2, 3, 3}, rng, 0.1, 2.0);
  out = relu_forward(pos);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.data[i] == pos.data[i]);
  din = relu_backward(pos, up);
  for (std::size_t i = 0; i < din.numel(); ++i) CHECK(din.data[i] == up.data[i]);

  // Mixed input away from the kink matches finite differences.
  Tensor mixed = random_tensor({10}, rng, -1.0, 1.0);
  for (double& v : mixed.data)
    if (std::fabs(v) < 1e-3) v = 0.5;  // keep clear of the kink
  Tensor upm = random_tensor({10}, rng);
  auto loss = [&]() {
    Tensor o = relu_forward(mixed);
    double s = 0.0;
    for (std::size_t i = 0; i < o.numel(); ++i) s += o.data[i] * upm.data[i];
    return s;
  };
  Tensor dm = relu_backward(mixed, upm);
  for (std::size_t i = 0; i < mixed.numel(); ++i)
    CHECK(fd::rel_err(fd::central_diff(loss, mixed.data[i], 1e-5), dm.data[i]) < 1e-6);
}

TEST_CASE("avgpool2: constants, the 2x2 example, mean preservation") {
  Rng rng(5);
  Tensor c = Tensor::full({3, 6, 8}, 0.4);
  Tensor out = avgpool2_forward(c);
  CHECK(out.shape == std::vector<int>{3, 3, 4});
  for (double v : out.data) CHECK(v == 0.4);

  Tensor tiny = Tensor::zeros({1, 2, 2});
  tiny.data = {0.0, 1.0, 2.0, 3.0};
  CHECK(avgpool2_forward(tiny).data[0] == 1.5);

  Tensor r = random_tensor({2, 8, 8}, rng);
  Tensor p = avgpool2_forward(r);
  double mean_in = 0.0, mean_out = 0.0;
  for (double v : r.data) mean_in += v;
  for (double v : p.data) mean_out += v;
  CHECK(std::fabs(mean_in / r.numel() - mean_out / p.numel()) < 1e-12);

  Tensor odd = Tensor::zeros({1, 3, 4});
  CHECK_THROWS_AS(avgpool2_forward(odd), DimensionError);

  // Backward distributes evenly.
  Tensor up = random_tensor({2, 4, 4}, rng);
  Tensor din = avgpool2_backward({2, 8, 8}, up);
  auto loss = [&]() {
    Tensor o = avgpool2_forward(r);
    double s = 0.0;
    for (std::size_t i = 0; i < o.numel(); ++i) s += o.data[i] * up.data[i];
    return s;
  };
  for (int i = 0; i < 20; ++i) {
    const int xi = rng.uniform_int(static_cast<int>(r.numel()));
    CHECK(fd::rel_err(fd::central_diff(loss, r.data[static_cast<std::size_t>(xi)], 1e-5),
                      din.data[static_cast<std::size_t>(xi)]) < 1e-6);
  }
}

TEST_CASE("sgd_step") {
  Rng rng(6);

  SUBCASE("zero gradient, zero buffer: parameters unchanged") {
    LayerParams p = LayerParams::fc("f", 3, 3, rng);
    Tensor before = p.w;
    sgd_step(p, 0.1, 0.9);
    for (std::size_t i = 0; i < p.w.numel(); ++i) CHECK(p.w.data[i] == before.data[i]);
  }

  SUBCASE("momentum 0 is plain gradient descent") {
    LayerParams p = LayerParams::fc("f", 2, 2, rng);
    Tensor before = p.w;
    p.gw.fill(1.0);
    sgd_step(p, 0.05, 0.0);
    for (std::size_t i = 0; i < p.w.numel(); ++i)
      CHECK(p.w.data[i] == doctest::Approx(before.data[i] - 0.05).epsilon(1e-15));
    for (double v : p.gw.data) CHECK(v == 0.0);  // gradients zeroed after the step
  }

  SUBCASE("two-step momentum recurrence: deltas -0.1 then -0.19") {
    LayerParams p = LayerParams::fc("f", 1, 1, rng);
    p.w.fill(1.0);
    p.gw.fill(1.0);
    sgd_step(p, 0.1, 0.9);
    CHECK(p.w.data[0] == doctest::Approx(0.9).epsilon(1e-15));
    p.gw.fill(1.0);
    sgd_step(p, 0.1, 0.9);
    CHECK(p.w.data[0] == doctest::Approx(0.9 - 0.19).epsilon(1e-14));
  }

  SUBCASE("non-finite gradient aborts naming the tensor") {
    LayerParams p = LayerParams::fc("broken", 2, 2, rng);
    p.gw.data[1] = std::nan("");
    CHECK_THROWS_WITH_AS(sgd_step(p, 0.1, 0.9), doctest::Contains("broken"), NumericError);
  }

  SUBCASE("momentum and gradient buffers keep parameter shapes") {
    LayerParams p = LayerParams::conv("c", 3, 2, 5, 5, rng);
    CHECK(p.gw.shape == p.w.shape);
    CHECK(p.vw.shape == p.w.shape);
    CHECK(p.gb.shape == p.b.shape);
    CHECK(p.vb.shape == p.b.shape);
  }
}

TEST_CASE("conv and fc are linear in the input for fixed parameters") {
  Rng rng(7);
  LayerParams conv = LayerParams::conv("c", 3, 2, 3, 3, rng);
  conv.b.fill(0.0);  // linearity (not affinity) needs zero bias
  LayerParams fc = LayerParams::fc("f", 4, 50, rng);
  fc.b.fill(0.0);
  Tensor x = random_tensor({2, 5, 5}, rng), y = random_tensor({2, 5, 5}, rng);
  const double a = 0.7, b = -1.3;

  Tensor combo = Tensor::zeros({2, 5, 5});
  for (std::size_t i = 0; i < combo.numel(); ++i) combo.data[i] = a * x.data[i] + b * y.data[i];

  Tensor ca = conv2d_forward(x, conv, 1), cb = conv2d_forward(y, conv, 1);
  Tensor cc = conv2d_forward(combo, conv, 1);
  for (std::size_t i = 0; i < cc.numel(); ++i)
    CHECK(std::fabs(cc.data[i] - (a * ca.data[i] + b * cb.data[i])) < 1e-10);

  Tensor fx = fc_forward(x, fc), fy = fc_forward(y, fc), fcb = fc_forward(combo, fc);
  for (std::size_t i = 0; i < fcb.numel(); ++i)
    CHECK(std::fabs(fcb.data[i] - (a * fx.data[i] + b * fy.data[i])) < 1e-10);
}

TEST_CASE("fan-in init stays within the +-sqrt(6/fan_in) bound, biases start at zero") {
  Rng rng(8);
  LayerParams p = LayerParams::conv("c", 4, 3, 5, 5, rng);
  const double limit = std::sqrt(6.0 / (3 * 5 * 5));
  for (double v : p.w.data) {
    CHECK(v <= limit);
    CHECK(v >= -limit);
  }
  for (double v : p.b.data) CHECK(v == 0.0);
}
