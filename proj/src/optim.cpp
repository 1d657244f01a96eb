#include "dectseg/optim.hpp"

#include <cmath>

namespace dectseg {

template <typename Scalar>
Adam<Scalar>::Adam(std::vector<Tensor<Scalar>> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) {
    state_.first_moment.emplace_back(static_cast<std::size_t>(p.numel()), Scalar(0));
    state_.second_moment.emplace_back(static_cast<std::size_t>(p.numel()), Scalar(0));
  }
}

template <typename Scalar>
void Adam<Scalar>::step() {
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(opts_.beta1, t);
  const double c2 = 1.0 - std::pow(opts_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto values = params_[k].mutable_data();
    const auto grad = params_[k].grad();
    auto& m = state_.first_moment[k];
    auto& v = state_.second_moment[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      const double mi = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g;
      const double vi = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g * g;
      m[i] = static_cast<Scalar>(mi);
      v[i] = static_cast<Scalar>(vi);
      const double update = opts_.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + opts_.eps);
      values[i] = static_cast<Scalar>(values[i] - update);
    }
  }
}

template <typename Scalar>
void Adam<Scalar>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename Scalar>
Sgd<Scalar>::Sgd(std::vector<Tensor<Scalar>> params, double learning_rate, double momentum)
    : params_(std::move(params)), learning_rate_(learning_rate), momentum_(momentum) {
  for (const auto& p : params_) velocity_.emplace_back(static_cast<std::size_t>(p.numel()), Scalar(0));
}

template <typename Scalar>
void Sgd<Scalar>::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto values = params_[k].mutable_data();
    const auto grad = params_[k].grad();
    auto& vel = velocity_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      vel[i] = static_cast<Scalar>(momentum_ * vel[i] + grad[i]);
      values[i] = static_cast<Scalar>(values[i] - learning_rate_ * vel[i]);
    }
  }
}

template <typename Scalar>
void Sgd<Scalar>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class Adam<float>;
template class Adam<double>;
template class Sgd<float>;
template class Sgd<double>;

}  // namespace dectseg
