#include "dectseg/unet.hpp"

#include <cmath>
#include <map>

namespace dectseg {

void UNetConfig::validate() const {
  if (levels < 2) throw ConfigError("UNet: levels must be >= 2");
  if (levels > 8) throw ConfigError("UNet: levels must be <= 8");
  if (base_channels < 1) throw ConfigError("UNet: base_channels must be >= 1");
  if (in_channels < 1) throw ConfigError("UNet: in_channels must be >= 1");
  if (out_channels < 1 || out_channels > 255) throw ConfigError("UNet: out_channels must be in [1, 255]");
}

std::string to_string(const UNetConfig& cfg) {
  return "levels=" + std::to_string(cfg.levels) + " base=" + std::to_string(cfg.base_channels) +
         " in=" + std::to_string(cfg.in_channels) + " out=" + std::to_string(cfg.out_channels);
}

namespace {

template <typename S>
Tensor<S> he_normal(Shape shape, double fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  std::vector<S> v(static_cast<std::size_t>(shape_numel(shape)));
  for (S& x : v) x = static_cast<S>(dist(rng));
  return Tensor<S>(std::move(shape), std::move(v), true);
}

}  // namespace

template <typename S>
typename UNet<S>::ConvBlock UNet<S>::make_block(std::string name, int in, int out, std::mt19937_64& rng) {
  ConvBlock b;
  b.name = std::move(name);
  b.weight = he_normal<S>({out, in, 3, 3, 3}, 27.0 * in, rng);
  b.gamma = Tensor<S>::full({out}, S(1), true);
  b.beta = Tensor<S>::full({out}, S(0), true);
  b.stats = BatchNormState<S>(out);
  return b;
}

template <typename S>
UNet<S>::UNet(const UNetConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int levels = config_.levels;
  for (int l = 0; l < levels; ++l) {
    const int in = l == 0 ? config_.in_channels : config_.channels_at(l - 1);
    const int c = config_.channels_at(l);
    const std::string prefix = "enc" + std::to_string(l);
    encoder_.push_back(make_block(prefix + ".conv0", in, c, rng));
    encoder_.push_back(make_block(prefix + ".conv1", c, c, rng));
  }
  up_.resize(static_cast<std::size_t>(levels - 1));
  decoder_.resize(static_cast<std::size_t>(2 * (levels - 1)));
  for (int l = levels - 2; l >= 0; --l) {
    const int c = config_.channels_at(l);
    const int below = config_.channels_at(l + 1);
    UpConv& up = up_[static_cast<std::size_t>(l)];
    up.name = "up" + std::to_string(l);
    // Each output voxel of a k=2, stride=2 transposed conv sees `below` inputs.
    up.weight = he_normal<S>({below, c, 2, 2, 2}, static_cast<double>(below), rng);
    up.bias = Tensor<S>::full({c}, S(0), true);
    const std::string prefix = "dec" + std::to_string(l);
    decoder_[2 * l] = make_block(prefix + ".conv0", 2 * c, c, rng);
    decoder_[2 * l + 1] = make_block(prefix + ".conv1", c, c, rng);
  }
  const int c0 = config_.channels_at(0);
  head_weight_ = he_normal<S>({config_.out_channels, c0, 1, 1, 1}, static_cast<double>(c0), rng);
  head_bias_ = Tensor<S>::full({config_.out_channels}, S(0), true);
}

template <typename S>
Tensor<S> UNet<S>::apply(ConvBlock& block, const Tensor<S>& x, Mode mode) {
  const Tensor<S> y = conv3d(x, block.weight, Tensor<S>{}, ConvOptions{1, 1});
  return relu(batchnorm3d(y, block.gamma, block.beta, block.stats, mode));
}

template <typename S>
Tensor<S> UNet<S>::forward(const Tensor<S>& input, Mode mode) {
  if (!input.defined() || input.ndim() != 5) throw ShapeError("UNet: input must be (B, C, D, H, W)");
  if (input.dim(1) != config_.in_channels) {
    throw ShapeError("UNet: input has " + std::to_string(input.dim(1)) + " channels, expected " +
                     std::to_string(config_.in_channels));
  }
  const Index m = config_.patch_multiple();
  for (std::size_t a = 2; a < 5; ++a) {
    if (input.dim(a) % m != 0) {
      throw ShapeError("UNet: spatial extents " + shape_string(input.shape()) + " must be multiples of " +
                       std::to_string(m));
    }
  }

  const int levels = config_.levels;
  std::vector<Tensor<S>> skips;
  Tensor<S> x = input;
  for (int l = 0; l < levels; ++l) {
    x = apply(encoder_[2 * l], x, mode);
    x = apply(encoder_[2 * l + 1], x, mode);
    if (l + 1 < levels) {
      skips.push_back(x);
      x = maxpool3d(x);
    }
  }
  for (int l = levels - 2; l >= 0; --l) {
    const UpConv& up = up_[static_cast<std::size_t>(l)];
    const Tensor<S> u = conv_transpose3d(x, up.weight, up.bias, ConvOptions{2, 0});
    x = concat(skips[static_cast<std::size_t>(l)], u);
    x = apply(decoder_[2 * l], x, mode);
    x = apply(decoder_[2 * l + 1], x, mode);
  }
  return conv3d(x, head_weight_, head_bias_, ConvOptions{1, 0});
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> UNet<S>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  auto add_block = [&](const ConvBlock& b) {
    out.emplace_back(b.name + ".weight", b.weight);
    out.emplace_back(b.name + ".bn.gamma", b.gamma);
    out.emplace_back(b.name + ".bn.beta", b.beta);
  };
  for (const auto& b : encoder_) add_block(b);
  for (int l = config_.levels - 2; l >= 0; --l) {
    const UpConv& up = up_[static_cast<std::size_t>(l)];
    out.emplace_back(up.name + ".weight", up.weight);
    out.emplace_back(up.name + ".bias", up.bias);
    add_block(decoder_[2 * l]);
    add_block(decoder_[2 * l + 1]);
  }
  out.emplace_back("head.weight", head_weight_);
  out.emplace_back("head.bias", head_bias_);
  return out;
}

template <typename S>
std::vector<Tensor<S>> UNet<S>::parameters() const {
  std::vector<Tensor<S>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <typename S>
Index UNet<S>::parameter_count() const {
  Index n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

template <typename S>
std::vector<StoredTensor> UNet<S>::state() const {
  std::vector<StoredTensor> out;
  for (const auto& [name, t] : named_parameters()) {
    out.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
  auto add_stats = [&](const ConvBlock& b) {
    const Index c = static_cast<Index>(b.stats.running_mean.size());
    out.push_back({b.name + ".bn.running_mean", {c},
                   std::vector<float>(b.stats.running_mean.begin(), b.stats.running_mean.end())});
    out.push_back({b.name + ".bn.running_var", {c},
                   std::vector<float>(b.stats.running_var.begin(), b.stats.running_var.end())});
  };
  for (const auto& b : encoder_) add_stats(b);
  for (int l = config_.levels - 2; l >= 0; --l) {
    add_stats(decoder_[2 * l]);
    add_stats(decoder_[2 * l + 1]);
  }
  return out;
}

template <typename S>
void UNet<S>::load_state(const std::vector<StoredTensor>& tensors) {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t).second) throw FormatError("UNet state: duplicate tensor '" + t.name + "'");
  }
  std::size_t used = 0;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const StoredTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("UNet state: missing tensor '" + name + "'");
    if (it->second->shape != shape) {
      throw ConfigError("UNet state: tensor '" + name + "' has shape " + shape_string(it->second->shape) +
                        ", expected " + shape_string(shape));
    }
    ++used;
    return *it->second;
  };
  for (auto& [name, t] : named_parameters()) {
    const StoredTensor& src = fetch(name, t.shape());
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(src.values[i]);
  }
  auto load_stats = [&](ConvBlock& b) {
    const Shape shape{static_cast<Index>(b.stats.running_mean.size())};
    const StoredTensor& mean = fetch(b.name + ".bn.running_mean", shape);
    const StoredTensor& var = fetch(b.name + ".bn.running_var", shape);
    for (std::size_t i = 0; i < mean.values.size(); ++i) {
      b.stats.running_mean[i] = static_cast<S>(mean.values[i]);
      b.stats.running_var[i] = static_cast<S>(var.values[i]);
    }
  };
  for (auto& b : encoder_) load_stats(b);
  for (auto& b : decoder_) load_stats(b);
  if (used != tensors.size()) throw FormatError("UNet state: unexpected extra tensors");
}

template class UNet<float>;
template class UNet<double>;

}  // namespace dectseg
