#pragma once
// Independent reference implementations shared by the unit tests and the
// acceptance binary. They favour obviousness over speed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "dectseg/ops.hpp"

namespace dectseg::oracle {

inline std::vector<double> random_values(Index n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = u(rng);
  return v;
}

// Seven nested loops over (o, i, z, y, x, kz, ky, kx) with explicit bounds checks.
inline std::vector<double> naive_conv3d(const std::vector<double>& x, const Shape& xs, const std::vector<double>& w,
                                        const Shape& ws, const std::vector<double>& bias, Index stride, Index pad,
                                        Shape& out_shape) {
  const Index B = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
  const Index O = ws[0], K = ws[2];
  const Index od = (D + 2 * pad - K) / stride + 1;
  const Index oh = (H + 2 * pad - K) / stride + 1;
  const Index ow = (W + 2 * pad - K) / stride + 1;
  out_shape = {B, O, od, oh, ow};
  std::vector<double> y(static_cast<std::size_t>(B * O * od * oh * ow), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index o = 0; o < O; ++o)
      for (Index z = 0; z < od; ++z)
        for (Index yy = 0; yy < oh; ++yy)
          for (Index xx = 0; xx < ow; ++xx) {
            double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
            for (Index c = 0; c < C; ++c)
              for (Index kz = 0; kz < K; ++kz)
                for (Index ky = 0; ky < K; ++ky)
                  for (Index kx = 0; kx < K; ++kx) {
                    const Index iz = z * stride - pad + kz;
                    const Index iy = yy * stride - pad + ky;
                    const Index ix = xx * stride - pad + kx;
                    if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                    acc += x[static_cast<std::size_t>((((b * C + c) * D + iz) * H + iy) * W + ix)] *
                           w[static_cast<std::size_t>((((o * C + c) * K + kz) * K + ky) * K + kx)];
                  }
            y[static_cast<std::size_t>((((b * O + o) * od + z) * oh + yy) * ow + xx)] = acc;
          }
  return y;
}

// Transposed convolution by scattering every input voxel through the kernel.
// weight layout (in, out, k, k, k).
inline std::vector<double> naive_conv_transpose3d(const std::vector<double>& x, const Shape& xs,
                                                  const std::vector<double>& w, const Shape& ws,
                                                  const std::vector<double>& bias, Index stride, Index pad,
                                                  Shape& out_shape) {
  const Index B = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
  const Index O = ws[1], K = ws[2];
  const Index od = (D - 1) * stride - 2 * pad + K;
  const Index oh = (H - 1) * stride - 2 * pad + K;
  const Index ow = (W - 1) * stride - 2 * pad + K;
  out_shape = {B, O, od, oh, ow};
  std::vector<double> y(static_cast<std::size_t>(B * O * od * oh * ow), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      for (Index z = 0; z < D; ++z)
        for (Index yy = 0; yy < H; ++yy)
          for (Index xx = 0; xx < W; ++xx) {
            const double v = x[static_cast<std::size_t>((((b * C + c) * D + z) * H + yy) * W + xx)];
            for (Index o = 0; o < O; ++o)
              for (Index kz = 0; kz < K; ++kz)
                for (Index ky = 0; ky < K; ++ky)
                  for (Index kx = 0; kx < K; ++kx) {
                    const Index tz = z * stride - pad + kz;
                    const Index ty = yy * stride - pad + ky;
                    const Index tx = xx * stride - pad + kx;
                    if (tz < 0 || tz >= od || ty < 0 || ty >= oh || tx < 0 || tx >= ow) continue;
                    y[static_cast<std::size_t>((((b * O + o) * od + tz) * oh + ty) * ow + tx)] +=
                        v * w[static_cast<std::size_t>((((c * O + o) * K + kz) * K + ky) * K + kx)];
                  }
          }
  if (!bias.empty()) {
    const Index plane = od * oh * ow;
    for (Index b = 0; b < B; ++b)
      for (Index o = 0; o < O; ++o)
        for (Index i = 0; i < plane; ++i) y[static_cast<std::size_t>((b * O + o) * plane + i)] += bias[o];
  }
  return y;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct GradCheck {
  std::size_t sampled = 0;
  std::size_t kinked = 0;      // a ReLU or max-pool decision changed within +-h
  std::size_t checked = 0;     // sampled - kinked
  std::size_t passed = 0;      // among checked
  std::size_t raw_passed = 0;  // among all sampled, kinks included
  double worst = 0.0;          // among checked

  double pass_fraction() const { return checked == 0 ? 0.0 : static_cast<double>(passed) / checked; }
  double raw_pass_fraction() const { return sampled == 0 ? 0.0 : static_cast<double>(raw_passed) / sampled; }
};

// Central differences on up to `per_tensor` coordinates of every input.
// `loss` must rebuild the graph from the current input values on each call.
// A central difference across a ReLU or max-pool switch does not estimate
// the derivative; such coordinates are counted as kinked and kept out of
// `passed` / `worst`.
inline GradCheck grad_check(std::vector<Tensor<double>> inputs, const std::function<Tensor<double>()>& loss,
                            std::uint64_t seed, std::size_t per_tensor = 24, double h = 1e-3, double tol = 1e-3) {
  for (auto& t : inputs) t.zero_grad();
  std::uint64_t base_pattern = 0;
  {
    ActivationPatternProbe probe;
    loss().backward();
    base_pattern = probe.digest();
  }
  auto evaluate = [&](std::uint64_t& pattern) {
    NoGradGuard guard;
    ActivationPatternProbe probe;
    const double v = loss().item();
    pattern = probe.digest();
    return v;
  };
  std::mt19937_64 rng(seed);
  GradCheck out;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const auto n = static_cast<std::size_t>(t.numel());
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(per_tensor);
    }
    for (std::size_t i : coords) {
      auto data = t.mutable_data();
      const double saved = data[i];
      std::uint64_t pp = 0, pm = 0;
      data[i] = saved + h;
      const double fp = evaluate(pp);
      data[i] = saved - h;
      const double fm = evaluate(pm);
      data[i] = saved;
      const double err = relative_error(analytic[i], (fp - fm) / (2.0 * h));
      ++out.sampled;
      out.raw_passed += err < tol;
      if (pp != base_pattern || pm != base_pattern) {
        ++out.kinked;
        continue;
      }
      ++out.checked;
      out.passed += err < tol;
      out.worst = std::max(out.worst, err);
    }
  }
  return out;
}

// Labels are compared as raw integers; the oracle counts set membership
// voxel by voxel with no shortcuts.
inline double dice_by_counting(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                               std::uint8_t label) {
  std::size_t in_a = 0, in_b = 0, in_both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] == label;
    const bool pb = b[i] == label;
    in_a += pa;
    in_b += pb;
    in_both += pa && pb;
  }
  if (in_a + in_b == 0) return 1.0;
  return 2.0 * static_cast<double>(in_both) / static_cast<double>(in_a + in_b);
}

}  // namespace dectseg::oracle
