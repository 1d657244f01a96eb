#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dectseg/ops.hpp"

namespace dectseg {

struct UNetConfig {
  int levels = 3;          // analysis/synthesis depth
  int base_channels = 8;   // doubles per level
  int in_channels = 2;     // image + mask channel
  int out_channels = kNumClasses;

  /// Throws ConfigError on an invalid configuration.
  void validate() const;
  /// Spatial extents of an input patch must be multiples of this.
  Index patch_multiple() const { return Index{1} << (levels - 1); }
  int channels_at(int level) const { return base_channels << level; }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

std::string to_string(const UNetConfig& cfg);

/// Named parameter or buffer as persisted in checkpoints (always float32).
struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

/// Same-padding 3D U-Net: per level two conv(3^3)+BN+ReLU blocks, max
/// pooling between analysis levels, stride-2 transposed convolution plus skip
/// concatenation on the synthesis path, and a final 1^3 convolution.
template <typename Scalar>
class UNet {
 public:
  /// He-initialised weights drawn from `seed`; biases zero; BN gamma 1, beta 0.
  UNet(const UNetConfig& config, std::uint64_t seed);

  const UNetConfig& config() const { return config_; }

  /// input (B, in_channels, D, H, W) -> logits (B, out_channels, D, H, W).
  Tensor<Scalar> forward(const Tensor<Scalar>& input, Mode mode);

  /// Learnable tensors in a fixed registration order.
  std::vector<Tensor<Scalar>> parameters() const;
  std::vector<std::pair<std::string, Tensor<Scalar>>> named_parameters() const;
  Index parameter_count() const;

  /// Parameters followed by the batch-norm running statistics.
  std::vector<StoredTensor> state() const;
  /// Loads values by name; every tensor must be present exactly once with
  /// the expected shape.
  void load_state(const std::vector<StoredTensor>& tensors);

 private:
  struct ConvBlock {
    std::string name;
    Tensor<Scalar> weight;
    Tensor<Scalar> gamma;
    Tensor<Scalar> beta;
    BatchNormState<Scalar> stats;
  };
  struct UpConv {
    std::string name;
    Tensor<Scalar> weight;
    Tensor<Scalar> bias;
  };

  ConvBlock make_block(std::string name, int in, int out, std::mt19937_64& rng);
  Tensor<Scalar> apply(ConvBlock& block, const Tensor<Scalar>& x, Mode mode);

  UNetConfig config_;
  std::vector<ConvBlock> encoder_;  // two per level
  std::vector<UpConv> up_;          // one per synthesis level, index = target level
  std::vector<ConvBlock> decoder_;  // two per synthesis level
  Tensor<Scalar> head_weight_;
  Tensor<Scalar> head_bias_;
};

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace dectseg
