#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dectseg/tensor.hpp"

namespace dectseg {

// Feature maps use the 5-axis layout (batch, channel, depth, height, width);
// width is the fastest axis and corresponds to volume x.

struct ConvOptions {
  Index stride = 1;
  Index padding = 0;
};

/// Cross-correlation over three spatial axes. weight: (out, in, k, k, k);
/// bias: (out) or undefined.
template <typename Scalar>
Tensor<Scalar> conv3d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      ConvOptions opts = {});

/// Adjoint of conv3d with respect to its input. weight: (in, out, k, k, k).
/// Output extent (in - 1) * stride - 2 * padding + k.
template <typename Scalar>
Tensor<Scalar> conv_transpose3d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                                const Tensor<Scalar>& bias, ConvOptions opts = {2, 0});

/// 2x2x2 max pooling, stride 2. Odd extents behave as if padded with -inf.
/// The gradient goes to the first maximal voxel of each window.
template <typename Scalar>
Tensor<Scalar> maxpool3d(const Tensor<Scalar>& input);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input);

/// Concatenation along the channel axis, `a` first.
template <typename Scalar>
Tensor<Scalar> concat(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

enum class Mode { training, inference };

/// Per-channel running statistics owned by a batch-norm layer.
template <typename Scalar>
struct BatchNormState {
  std::vector<Scalar> running_mean;
  std::vector<Scalar> running_var;

  explicit BatchNormState(Index channels = 0)
      : running_mean(static_cast<std::size_t>(channels), Scalar(0)),
        running_var(static_cast<std::size_t>(channels), Scalar(1)) {}
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Training mode normalises by batch statistics over (batch, depth, height,
/// width) and updates `state`; inference mode uses the running statistics.
template <typename Scalar>
Tensor<Scalar> batchnorm3d(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                           BatchNormState<Scalar>& state, Mode mode, BatchNormOptions opts = {});

/// Softmax across the channel axis of a (B, C, ...) tensor.
template <typename Scalar>
Tensor<Scalar> softmax_channel(const Tensor<Scalar>& logits);

/// -(1 / sum w) * sum_{v in mask} w[t(v)] log p_t(v)(v), p = softmax over
/// channels. `target` and `voxel_mask` hold one entry per (batch, voxel).
template <typename Scalar>
Tensor<Scalar> weighted_cross_entropy(const Tensor<Scalar>& logits, std::span<const std::uint8_t> target,
                                      std::span<const double> class_weights,
                                      std::span<const std::uint8_t> voxel_mask);

// Small elementwise helpers, mostly for tests and toy losses.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);

/// While alive, folds every piecewise-linear decision taken on this thread
/// (ReLU active sets, max-pool winners) into a digest. Two evaluations with
/// equal digests ran on the same linear piece of the network.
class ActivationPatternProbe {
 public:
  ActivationPatternProbe();
  ~ActivationPatternProbe();
  ActivationPatternProbe(const ActivationPatternProbe&) = delete;
  ActivationPatternProbe& operator=(const ActivationPatternProbe&) = delete;

  std::uint64_t digest() const { return digest_; }

 private:
  std::uint64_t digest_;
  std::uint64_t* previous_;
};

/// Index of the largest channel per voxel (smallest index on ties).
template <typename Scalar>
std::vector<std::uint8_t> argmax_channel(std::span<const Scalar> values, Index channels, Index voxels);

}  // namespace dectseg
