#include "dectseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace dectseg {
namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
using NodePtr = std::shared_ptr<detail::Node<S>>;

// Geometry of a strided, zero-padded cubic-kernel correlation from `in` to
// `out` spatial extents (depth, height, width).
struct ConvGeometry {
  Index channels = 0;
  std::array<Index, 3> in{};
  std::array<Index, 3> out{};
  Index k = 1;
  Index stride = 1;
  Index pad = 0;

  Index in_voxels() const { return in[0] * in[1] * in[2]; }
  Index out_voxels() const { return out[0] * out[1] * out[2]; }
  Index rows() const { return channels * k * k * k; }
};

Index conv_out_extent(Index in, Index k, Index stride, Index pad) {
  const Index span = in + 2 * pad - k;
  if (span < 0) return 0;
  return span / stride + 1;
}

// Output "lines" are (z, y) pairs; work is chunked over ranges of lines so
// that one column block stays cache resident through its GEMM.
constexpr Index kChunkColumns = 256;

Index lines_per_chunk(const ConvGeometry& g) { return std::max<Index>(1, kChunkColumns / g.out[2]); }
Index line_count(const ConvGeometry& g) { return g.out[0] * g.out[1]; }

// Fills col (row-major, rows() x (lines * out width)) for output lines
// [line0, line1).
template <typename S>
void im2col(const S* src, const ConvGeometry& g, Index line0, Index line1, S* col) {
  const Index oh = g.out[1], ow = g.out[2];
  const Index id = g.in[0], ih = g.in[1], iw = g.in[2];
  const Index cols = (line1 - line0) * ow;
  for (Index c = 0; c < g.channels; ++c) {
    const S* plane = src + c * g.in_voxels();
    for (Index kd = 0; kd < g.k; ++kd)
      for (Index kh = 0; kh < g.k; ++kh)
        for (Index kw = 0; kw < g.k; ++kw) {
          S* row = col + (((c * g.k + kd) * g.k + kh) * g.k + kw) * cols;
          const Index x0 = g.pad - kw;  // stride 1: first x with a valid source
          const Index lo = std::clamp<Index>(x0, 0, ow);
          const Index hi = std::clamp<Index>(iw + g.pad - kw, lo, ow);
          for (Index line = line0; line < line1; ++line) {
            const Index z = line / oh, y = line % oh;
            S* dst = row + (line - line0) * ow;
            const Index sz = z * g.stride - g.pad + kd;
            const Index sy = y * g.stride - g.pad + kh;
            if (sz < 0 || sz >= id || sy < 0 || sy >= ih) {
              std::fill(dst, dst + ow, S(0));
              continue;
            }
            const S* in_line = plane + (sz * ih + sy) * iw;
            if (g.stride == 1) {
              std::fill(dst, dst + lo, S(0));
              std::copy(in_line + lo - x0, in_line + hi - x0, dst + lo);
              std::fill(dst + hi, dst + ow, S(0));
            } else {
              for (Index x = 0; x < ow; ++x) {
                const Index sx = x * g.stride - g.pad + kw;
                dst[x] = (sx >= 0 && sx < iw) ? in_line[sx] : S(0);
              }
            }
          }
        }
  }
}

// Adjoint of im2col over the same line range: accumulates into dst.
template <typename S>
void col2im(const S* col, const ConvGeometry& g, Index line0, Index line1, S* dst) {
  const Index oh = g.out[1], ow = g.out[2];
  const Index id = g.in[0], ih = g.in[1], iw = g.in[2];
  const Index cols = (line1 - line0) * ow;
  for (Index c = 0; c < g.channels; ++c) {
    S* plane = dst + c * g.in_voxels();
    for (Index kd = 0; kd < g.k; ++kd)
      for (Index kh = 0; kh < g.k; ++kh)
        for (Index kw = 0; kw < g.k; ++kw) {
          const S* row = col + (((c * g.k + kd) * g.k + kh) * g.k + kw) * cols;
          const Index x0 = g.pad - kw;
          const Index lo = std::clamp<Index>(x0, 0, ow);
          const Index hi = std::clamp<Index>(iw + g.pad - kw, lo, ow);
          for (Index line = line0; line < line1; ++line) {
            const Index z = line / oh, y = line % oh;
            const Index sz = z * g.stride - g.pad + kd;
            const Index sy = y * g.stride - g.pad + kh;
            if (sz < 0 || sz >= id || sy < 0 || sy >= ih) continue;
            const S* src = row + (line - line0) * ow;
            S* out_line = plane + (sz * ih + sy) * iw;
            if (g.stride == 1) {
              for (Index x = lo; x < hi; ++x) out_line[x - x0] += src[x];
            } else {
              for (Index x = 0; x < ow; ++x) {
                const Index sx = x * g.stride - g.pad + kw;
                if (sx >= 0 && sx < iw) out_line[sx] += src[x];
              }
            }
          }
        }
  }
}

template <typename S>
using StridedMap = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using ConstStridedMap = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <typename S>
void check_feature_map(const Tensor<S>& t, const char* op) {
  require(t.defined() && t.ndim() == 5, std::string(op) + ": expected a 5-axis (B, C, D, H, W) tensor");
}

template <typename S>
NodePtr<S> node_or_null(const Tensor<S>& t) {
  return t.defined() ? t.node() : nullptr;
}

thread_local std::uint64_t* t_pattern_digest = nullptr;

void fold_pattern(std::uint64_t value) {
  std::uint64_t& h = *t_pattern_digest;
  h = (h ^ value) * 0x100000001b3ULL;
}

// Fixed-order double accumulation. Eigen's vectorised reductions peel
// according to pointer alignment, which varies between runs.
template <typename S>
void add_channel_sums(const S* values, Index channels, Index n, S* out) {
  for (Index c = 0; c < channels; ++c) {
    double acc = 0.0;
    const S* row = values + c * n;
    for (Index i = 0; i < n; ++i) acc += row[i];
    out[c] += static_cast<S>(acc);
  }
}

}  // namespace

template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias, ConvOptions opts) {
  check_feature_map(input, "conv3d");
  require(weight.defined() && weight.ndim() == 5, "conv3d: weight must be (out, in, k, k, k)");
  const Index batch = input.dim(0), cin = input.dim(1);
  const Index cout = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == cin, "conv3d: input has " + std::to_string(cin) + " channels, weight expects " +
                                    std::to_string(weight.dim(1)));
  require(weight.dim(3) == k && weight.dim(4) == k, "conv3d: only cubic kernels are supported");
  require(!bias.defined() || (bias.ndim() == 1 && bias.dim(0) == cout), "conv3d: bias must have shape (out)");
  require(opts.stride >= 1 && opts.padding >= 0, "conv3d: stride must be >= 1 and padding >= 0");

  ConvGeometry g;
  g.channels = cin;
  g.k = k;
  g.stride = opts.stride;
  g.pad = opts.padding;
  for (int a = 0; a < 3; ++a) {
    g.in[a] = input.dim(2 + a);
    g.out[a] = conv_out_extent(g.in[a], k, opts.stride, opts.padding);
    require(g.out[a] > 0, "conv3d: non-positive output extent");
  }
  const Index n_in = g.in_voxels(), n_out = g.out_voxels(), rows = g.rows();
  const Index lines = line_count(g), step = lines_per_chunk(g), ow = g.out[2];

  std::vector<S> out(static_cast<std::size_t>(batch * cout * n_out));
  std::vector<S> col(static_cast<std::size_t>(rows * step * ow));
  Eigen::Map<const RowMat<S>> w(weight.data().data(), cout, rows);
  for (Index b = 0; b < batch; ++b) {
    const S* x = input.data().data() + b * cin * n_in;
    S* y = out.data() + b * cout * n_out;
    for (Index l0 = 0; l0 < lines; l0 += step) {
      const Index l1 = std::min(lines, l0 + step), cols = (l1 - l0) * ow;
      im2col(x, g, l0, l1, col.data());
      StridedMap<S> yc(y + l0 * ow, cout, cols, Eigen::OuterStride<>(n_out));
      yc.noalias() = w * Eigen::Map<const RowMat<S>>(col.data(), rows, cols);
    }
    if (bias.defined()) {
      Eigen::Map<RowMat<S>>(y, cout, n_out).colwise() += Eigen::Map<const Vec<S>>(bias.data().data(), cout);
    }
  }

  Shape shape{batch, cout, g.out[0], g.out[1], g.out[2]};
  return detail::make_result<S>(
      "conv3d", shape, std::move(out), {input.node(), weight.node(), node_or_null(bias)},
      [g, batch, cin, cout](detail::Node<S>& self) {
        auto& x = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto* bn = self.inputs[2].get();
        const Index n_in = g.in_voxels(), n_out = g.out_voxels(), rows = g.rows();
        const Index lines = line_count(g), step = lines_per_chunk(g), ow = g.out[2];
        Eigen::Map<const RowMat<S>> w(wn.value.data(), cout, rows);
        Eigen::Map<RowMat<S>> dw(wn.grad.data(), cout, rows);
        std::vector<S> col(static_cast<std::size_t>(rows * step * ow));
        for (Index b = 0; b < batch; ++b) {
          const S* dy = self.grad.data() + b * cout * n_out;
          if (bn && bn->requires_grad) {
            add_channel_sums(dy, cout, n_out, bn->grad.data());
          }
          for (Index l0 = 0; l0 < lines; l0 += step) {
            const Index l1 = std::min(lines, l0 + step), cols = (l1 - l0) * ow;
            ConstStridedMap<S> dyc(dy + l0 * ow, cout, cols, Eigen::OuterStride<>(n_out));
            Eigen::Map<RowMat<S>> cm(col.data(), rows, cols);
            if (wn.requires_grad) {
              im2col(x.value.data() + b * cin * n_in, g, l0, l1, col.data());
              dw.noalias() += dyc * cm.transpose();
            }
            if (x.requires_grad) {
              cm.noalias() = w.transpose() * dyc;
              col2im(col.data(), g, l0, l1, x.grad.data() + b * cin * n_in);
            }
          }
        }
      });
}

template <typename S>
Tensor<S> conv_transpose3d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias, ConvOptions opts) {
  check_feature_map(input, "conv_transpose3d");
  require(weight.defined() && weight.ndim() == 5, "conv_transpose3d: weight must be (in, out, k, k, k)");
  require(opts.stride >= 1, "conv_transpose3d: unsupported stride " + std::to_string(opts.stride));
  require(opts.padding >= 0, "conv_transpose3d: padding must be >= 0");
  const Index batch = input.dim(0), cin = input.dim(1);
  const Index cout = weight.dim(1), k = weight.dim(2);
  require(weight.dim(0) == cin, "conv_transpose3d: channel mismatch between input and weight");
  require(weight.dim(3) == k && weight.dim(4) == k, "conv_transpose3d: only cubic kernels are supported");
  require(!bias.defined() || (bias.ndim() == 1 && bias.dim(0) == cout),
          "conv_transpose3d: bias must have shape (out)");

  // Geometry of the forward correlation whose adjoint this is: its input is
  // our output, its output is our input.
  ConvGeometry g;
  g.channels = cout;
  g.k = k;
  g.stride = opts.stride;
  g.pad = opts.padding;
  for (int a = 0; a < 3; ++a) {
    g.out[a] = input.dim(2 + a);
    g.in[a] = (g.out[a] - 1) * opts.stride - 2 * opts.padding + k;
    require(g.in[a] > 0, "conv_transpose3d: non-positive output extent");
  }
  const Index n_x = g.out_voxels(), n_y = g.in_voxels(), rows = g.rows();
  const Index lines = line_count(g), step = lines_per_chunk(g), ow = g.out[2];

  std::vector<S> out(static_cast<std::size_t>(batch * cout * n_y), S(0));
  std::vector<S> col(static_cast<std::size_t>(rows * step * ow));
  Eigen::Map<const RowMat<S>> w(weight.data().data(), cin, rows);
  for (Index b = 0; b < batch; ++b) {
    const S* x = input.data().data() + b * cin * n_x;
    S* y = out.data() + b * cout * n_y;
    for (Index l0 = 0; l0 < lines; l0 += step) {
      const Index l1 = std::min(lines, l0 + step), cols = (l1 - l0) * ow;
      Eigen::Map<RowMat<S>> cm(col.data(), rows, cols);
      cm.noalias() = w.transpose() * ConstStridedMap<S>(x + l0 * ow, cin, cols, Eigen::OuterStride<>(n_x));
      col2im(col.data(), g, l0, l1, y);
    }
    if (bias.defined()) {
      Eigen::Map<RowMat<S>>(y, cout, n_y).colwise() += Eigen::Map<const Vec<S>>(bias.data().data(), cout);
    }
  }

  Shape shape{batch, cout, g.in[0], g.in[1], g.in[2]};
  return detail::make_result<S>(
      "conv_transpose3d", shape, std::move(out), {input.node(), weight.node(), node_or_null(bias)},
      [g, batch, cin, cout](detail::Node<S>& self) {
        auto& x = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto* bn = self.inputs[2].get();
        const Index n_x = g.out_voxels(), n_y = g.in_voxels(), rows = g.rows();
        const Index lines = line_count(g), step = lines_per_chunk(g), ow = g.out[2];
        Eigen::Map<const RowMat<S>> w(wn.value.data(), cin, rows);
        std::vector<S> col(static_cast<std::size_t>(rows * step * ow));
        for (Index b = 0; b < batch; ++b) {
          const S* dy = self.grad.data() + b * cout * n_y;
          if (bn && bn->requires_grad) {
            add_channel_sums(dy, cout, n_y, bn->grad.data());
          }
          if (!x.requires_grad && !wn.requires_grad) continue;
          for (Index l0 = 0; l0 < lines; l0 += step) {
            const Index l1 = std::min(lines, l0 + step), cols = (l1 - l0) * ow;
            im2col(dy, g, l0, l1, col.data());
            Eigen::Map<const RowMat<S>> dcol(col.data(), rows, cols);
            if (x.requires_grad) {
              StridedMap<S>(x.grad.data() + b * cin * n_x + l0 * ow, cin, cols, Eigen::OuterStride<>(n_x)).noalias() +=
                  w * dcol;
            }
            if (wn.requires_grad) {
              ConstStridedMap<S> xv(x.value.data() + b * cin * n_x + l0 * ow, cin, cols, Eigen::OuterStride<>(n_x));
              Eigen::Map<RowMat<S>>(wn.grad.data(), cin, rows).noalias() += xv * dcol.transpose();
            }
          }
        }
      });
}

template <typename S>
Tensor<S> maxpool3d(const Tensor<S>& input) {
  check_feature_map(input, "maxpool3d");
  const Index bc = input.dim(0) * input.dim(1);
  const Index id = input.dim(2), ih = input.dim(3), iw = input.dim(4);
  const Index od = (id + 1) / 2, oh = (ih + 1) / 2, ow = (iw + 1) / 2;
  const Index n_in = id * ih * iw, n_out = od * oh * ow;
  std::vector<S> out(static_cast<std::size_t>(bc * n_out));
  std::vector<std::int64_t> argmax(out.size());
  const S* src = input.data().data();
  for (Index p = 0; p < bc; ++p) {
    for (Index z = 0; z < od; ++z)
      for (Index y = 0; y < oh; ++y)
        for (Index x = 0; x < ow; ++x) {
          S best = -std::numeric_limits<S>::infinity();
          Index best_i = -1;
          for (Index dz = 0; dz < 2; ++dz) {
            const Index sz = 2 * z + dz;
            if (sz >= id) continue;
            for (Index dy = 0; dy < 2; ++dy) {
              const Index sy = 2 * y + dy;
              if (sy >= ih) continue;
              for (Index dx = 0; dx < 2; ++dx) {
                const Index sx = 2 * x + dx;
                if (sx >= iw) continue;
                const Index i = p * n_in + (sz * ih + sy) * iw + sx;
                if (best_i < 0 || src[i] > best) {
                  best = src[i];
                  best_i = i;
                }
              }
            }
          }
          const Index o = p * n_out + (z * oh + y) * ow + x;
          out[o] = best;
          argmax[o] = best_i;
        }
  }
  if (t_pattern_digest) {
    for (std::int64_t a : argmax) fold_pattern(static_cast<std::uint64_t>(a));
  }
  Shape shape{input.dim(0), input.dim(1), od, oh, ow};
  return detail::make_result<S>("maxpool3d", shape, std::move(out), {input.node()},
                                [argmax = std::move(argmax)](detail::Node<S>& self) {
                                  auto& x = *self.inputs[0];
                                  for (std::size_t o = 0; o < argmax.size(); ++o) x.grad[argmax[o]] += self.grad[o];
                                });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& input) {
  std::vector<S> out(input.data().begin(), input.data().end());
  for (S& v : out) v = v > S(0) ? v : S(0);
  if (t_pattern_digest) {
    for (S v : out) fold_pattern(v > S(0));
  }
  return detail::make_result<S>("relu", input.shape(), std::move(out), {input.node()}, [](detail::Node<S>& self) {
    auto& x = *self.inputs[0];
    for (std::size_t i = 0; i < x.value.size(); ++i) {
      if (x.value[i] > S(0)) x.grad[i] += self.grad[i];
    }
  });
}

template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b) {
  check_feature_map(a, "concat");
  check_feature_map(b, "concat");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3) && a.dim(4) == b.dim(4),
          "concat: non-channel extents differ: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const Index batch = a.dim(0);
  const Index na = a.numel() / batch, nb = b.numel() / batch;
  std::vector<S> out;
  out.reserve(static_cast<std::size_t>(a.numel() + b.numel()));
  for (Index i = 0; i < batch; ++i) {
    out.insert(out.end(), a.data().begin() + i * na, a.data().begin() + (i + 1) * na);
    out.insert(out.end(), b.data().begin() + i * nb, b.data().begin() + (i + 1) * nb);
  }
  Shape shape = a.shape();
  shape[1] += b.dim(1);
  return detail::make_result<S>("concat", shape, std::move(out), {a.node(), b.node()},
                                [batch, na, nb](detail::Node<S>& self) {
                                  auto& an = *self.inputs[0];
                                  auto& bnode = *self.inputs[1];
                                  for (Index i = 0; i < batch; ++i) {
                                    const S* g = self.grad.data() + i * (na + nb);
                                    if (an.requires_grad) {
                                      for (Index j = 0; j < na; ++j) an.grad[i * na + j] += g[j];
                                    }
                                    if (bnode.requires_grad) {
                                      for (Index j = 0; j < nb; ++j) bnode.grad[i * nb + j] += g[na + j];
                                    }
                                  }
                                });
}

template <typename S>
Tensor<S> batchnorm3d(const Tensor<S>& input, const Tensor<S>& gamma, const Tensor<S>& beta,
                      BatchNormState<S>& state, Mode mode, BatchNormOptions opts) {
  check_feature_map(input, "batchnorm3d");
  const Index batch = input.dim(0), channels = input.dim(1);
  const Index spatial = input.dim(2) * input.dim(3) * input.dim(4);
  require(gamma.numel() == channels && beta.numel() == channels, "batchnorm3d: parameter count != channels");
  require(static_cast<Index>(state.running_mean.size()) == channels &&
              static_cast<Index>(state.running_var.size()) == channels,
          "batchnorm3d: running statistics do not match channels");
  const Index count = batch * spatial;
  if (mode == Mode::training && count < 2) {
    throw DomainError("batchnorm3d: batch statistics need more than one value per channel");
  }

  std::vector<S> mean(static_cast<std::size_t>(channels));
  std::vector<S> inv_std(static_cast<std::size_t>(channels));
  const S* x = input.data().data();
  for (Index c = 0; c < channels; ++c) {
    if (mode == Mode::training) {
      double s = 0.0;
      for (Index b = 0; b < batch; ++b) {
        const S* p = x + (b * channels + c) * spatial;
        for (Index i = 0; i < spatial; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (Index b = 0; b < batch; ++b) {
        const S* p = x + (b * channels + c) * spatial;
        for (Index i = 0; i < spatial; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<S>(mu);
      inv_std[c] = static_cast<S>(1.0 / std::sqrt(var + opts.eps));
      const double unbiased = ss / static_cast<double>(count - 1);
      state.running_mean[c] =
          static_cast<S>((1.0 - opts.momentum) * state.running_mean[c] + opts.momentum * mu);
      state.running_var[c] =
          static_cast<S>((1.0 - opts.momentum) * state.running_var[c] + opts.momentum * unbiased);
    } else {
      mean[c] = state.running_mean[c];
      inv_std[c] = static_cast<S>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + opts.eps));
    }
  }

  std::vector<S> out(static_cast<std::size_t>(input.numel()));
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) {
      const Index off = (b * channels + c) * spatial;
      const S g = gamma.data()[c], be = beta.data()[c];
      for (Index i = 0; i < spatial; ++i) out[off + i] = g * (x[off + i] - mean[c]) * inv_std[c] + be;
    }

  const bool training = mode == Mode::training;
  return detail::make_result<S>(
      "batchnorm3d", input.shape(), std::move(out), {input.node(), gamma.node(), beta.node()},
      [batch, channels, spatial, training, mean = std::move(mean), inv_std = std::move(inv_std)](
          detail::Node<S>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const double n = static_cast<double>(batch * spatial);
        for (Index c = 0; c < channels; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (Index b = 0; b < batch; ++b) {
            const Index off = (b * channels + c) * spatial;
            for (Index i = 0; i < spatial; ++i) {
              const double dy = self.grad[off + i];
              sum_dy += dy;
              sum_dy_xhat += dy * (xn.value[off + i] - mean[c]) * inv_std[c];
            }
          }
          if (gn.requires_grad) gn.grad[c] += static_cast<S>(sum_dy_xhat);
          if (bn.requires_grad) bn.grad[c] += static_cast<S>(sum_dy);
          if (!xn.requires_grad) continue;
          const double g = gn.value[c];
          const double is = inv_std[c];
          for (Index b = 0; b < batch; ++b) {
            const Index off = (b * channels + c) * spatial;
            for (Index i = 0; i < spatial; ++i) {
              const double dy = self.grad[off + i];
              if (training) {
                const double xhat = (xn.value[off + i] - mean[c]) * is;
                xn.grad[off + i] += static_cast<S>(g * is * (dy - sum_dy / n - xhat * sum_dy_xhat / n));
              } else {
                xn.grad[off + i] += static_cast<S>(g * is * dy);
              }
            }
          }
        }
      });
}

template <typename S>
Tensor<S> softmax_channel(const Tensor<S>& logits) {
  require(logits.defined() && logits.ndim() >= 2, "softmax_channel: expected (B, C, ...) tensor");
  const Index batch = logits.dim(0), channels = logits.dim(1);
  const Index voxels = logits.numel() / (batch * channels);
  const S* z = logits.data().data();
  std::vector<S> out(static_cast<std::size_t>(logits.numel()));
  for (Index b = 0; b < batch; ++b) {
    const Index base = b * channels * voxels;
    for (Index v = 0; v < voxels; ++v) {
      S m = z[base + v];
      for (Index c = 1; c < channels; ++c) m = std::max(m, z[base + c * voxels + v]);
      double s = 0.0;
      for (Index c = 0; c < channels; ++c) s += std::exp(static_cast<double>(z[base + c * voxels + v] - m));
      for (Index c = 0; c < channels; ++c) {
        out[base + c * voxels + v] = static_cast<S>(std::exp(static_cast<double>(z[base + c * voxels + v] - m)) / s);
      }
    }
  }
  return detail::make_result<S>("softmax_channel", logits.shape(), std::move(out), {logits.node()},
                                [batch, channels, voxels](detail::Node<S>& self) {
                                  auto& x = *self.inputs[0];
                                  const auto& p = self.value;
                                  const auto& g = self.grad;
                                  for (Index b = 0; b < batch; ++b) {
                                    const Index base = b * channels * voxels;
                                    for (Index v = 0; v < voxels; ++v) {
                                      double dot = 0.0;
                                      for (Index c = 0; c < channels; ++c) {
                                        const Index i = base + c * voxels + v;
                                        dot += static_cast<double>(g[i]) * p[i];
                                      }
                                      for (Index c = 0; c < channels; ++c) {
                                        const Index i = base + c * voxels + v;
                                        x.grad[i] += static_cast<S>(p[i] * (g[i] - dot));
                                      }
                                    }
                                  }
                                });
}

template <typename S>
Tensor<S> weighted_cross_entropy(const Tensor<S>& logits, std::span<const std::uint8_t> target,
                                 std::span<const double> class_weights, std::span<const std::uint8_t> voxel_mask) {
  require(logits.defined() && logits.ndim() >= 2, "weighted_cross_entropy: expected (B, C, ...) logits");
  const Index batch = logits.dim(0), channels = logits.dim(1);
  const Index voxels = logits.numel() / (batch * channels);
  require(static_cast<Index>(target.size()) == batch * voxels, "weighted_cross_entropy: target size mismatch");
  require(static_cast<Index>(voxel_mask.size()) == batch * voxels, "weighted_cross_entropy: mask size mismatch");
  require(static_cast<Index>(class_weights.size()) == channels,
          "weighted_cross_entropy: class weight count != channel count");

  constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)
  const S* z = logits.data().data();
  std::vector<S> prob(static_cast<std::size_t>(logits.numel()));
  double weight_sum = 0.0, loss = 0.0;
  Index used = 0;
  for (Index b = 0; b < batch; ++b) {
    const Index base = b * channels * voxels;
    for (Index v = 0; v < voxels; ++v) {
      double m = z[base + v];
      for (Index c = 1; c < channels; ++c) m = std::max<double>(m, z[base + c * voxels + v]);
      double s = 0.0;
      for (Index c = 0; c < channels; ++c) s += std::exp(z[base + c * voxels + v] - m);
      const double log_s = std::log(s);
      for (Index c = 0; c < channels; ++c) {
        prob[base + c * voxels + v] = static_cast<S>(std::exp(z[base + c * voxels + v] - m) / s);
      }
      const Index tv = b * voxels + v;
      if (!voxel_mask[tv]) continue;
      const std::uint8_t t = target[tv];
      require(t < channels, "weighted_cross_entropy: target class out of range");
      const double w = class_weights[t];
      const double log_p = std::max(z[base + t * voxels + v] - m - log_s, kLogFloor);
      loss -= w * log_p;
      weight_sum += w;
      ++used;
    }
  }
  if (used == 0) throw DomainError("weighted_cross_entropy: empty voxel mask");
  if (!(weight_sum > 0.0)) throw DomainError("weighted_cross_entropy: applied class weights sum to zero");
  loss /= weight_sum;

  std::vector<std::uint8_t> t_copy(target.begin(), target.end());
  std::vector<std::uint8_t> m_copy(voxel_mask.begin(), voxel_mask.end());
  std::vector<double> w_copy(class_weights.begin(), class_weights.end());
  return detail::make_result<S>(
      "weighted_cross_entropy", Shape{1}, std::vector<S>{static_cast<S>(loss)}, {logits.node()},
      [batch, channels, voxels, weight_sum, prob = std::move(prob), t = std::move(t_copy), m = std::move(m_copy),
       w = std::move(w_copy)](detail::Node<S>& self) {
        auto& x = *self.inputs[0];
        const double upstream = self.grad[0];
        for (Index b = 0; b < batch; ++b) {
          const Index base = b * channels * voxels;
          for (Index v = 0; v < voxels; ++v) {
            const Index tv = b * voxels + v;
            if (!m[tv]) continue;
            const double scale = upstream * w[t[tv]] / weight_sum;
            for (Index c = 0; c < channels; ++c) {
              const Index i = base + c * voxels + v;
              const double onehot = c == t[tv] ? 1.0 : 0.0;
              x.grad[i] += static_cast<S>(scale * (prob[i] - onehot));
            }
          }
        }
      });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  std::vector<S> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return detail::make_result<S>("add", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node<S>& self) {
    for (int k = 0; k < 2; ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<S> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return detail::make_result<S>("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node<S>& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (an.requires_grad) an.grad[i] += self.grad[i] * bn.value[i];
      if (bn.requires_grad) bn.grad[i] += self.grad[i] * an.value[i];
    }
  });
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
  std::vector<S> out(x.data().begin(), x.data().end());
  for (S& v : out) v *= v;
  return detail::make_result<S>("square", x.shape(), std::move(out), {x.node()}, [](detail::Node<S>& self) {
    auto& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += S(2) * in.value[i] * self.grad[i];
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  double s = 0.0;
  for (S v : x.data()) s += v;
  return detail::make_result<S>("sum", Shape{1}, std::vector<S>{static_cast<S>(s)}, {x.node()},
                                [](detail::Node<S>& self) {
                                  auto& in = *self.inputs[0];
                                  for (S& g : in.grad) g += self.grad[0];
                                });
}

template <typename S>
std::vector<std::uint8_t> argmax_channel(std::span<const S> values, Index channels, Index voxels) {
  require(static_cast<Index>(values.size()) == channels * voxels, "argmax_channel: size mismatch");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(voxels), 0);
  for (Index v = 0; v < voxels; ++v) {
    S best = values[v];
    for (Index c = 1; c < channels; ++c) {
      if (values[c * voxels + v] > best) {
        best = values[c * voxels + v];
        out[v] = static_cast<std::uint8_t>(c);
      }
    }
  }
  return out;
}

ActivationPatternProbe::ActivationPatternProbe() : digest_(0xcbf29ce484222325ULL), previous_(t_pattern_digest) {
  t_pattern_digest = &digest_;
}

ActivationPatternProbe::~ActivationPatternProbe() { t_pattern_digest = previous_; }

#define DECTSEG_INSTANTIATE_OPS(S)                                                                              \
  template Tensor<S> conv3d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, ConvOptions);                \
  template Tensor<S> conv_transpose3d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, ConvOptions);      \
  template Tensor<S> maxpool3d(const Tensor<S>&);                                                              \
  template Tensor<S> relu(const Tensor<S>&);                                                                   \
  template Tensor<S> concat(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> batchnorm3d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, BatchNormState<S>&,     \
                                 Mode, BatchNormOptions);                                                      \
  template Tensor<S> softmax_channel(const Tensor<S>&);                                                        \
  template Tensor<S> weighted_cross_entropy(const Tensor<S>&, std::span<const std::uint8_t>,                   \
                                            std::span<const double>, std::span<const std::uint8_t>);           \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                  \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                                  \
  template Tensor<S> square(const Tensor<S>&);                                                                 \
  template Tensor<S> sum(const Tensor<S>&);                                                                    \
  template std::vector<std::uint8_t> argmax_channel(std::span<const S>, Index, Index);

DECTSEG_INSTANTIATE_OPS(float)
DECTSEG_INSTANTIATE_OPS(double)

#undef DECTSEG_INSTANTIATE_OPS

}  // namespace dectseg
