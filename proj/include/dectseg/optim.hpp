#pragma once

#include <vector>

#include "dectseg/tensor.hpp"

namespace dectseg {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter first/second moment accumulators plus the step count.
template <typename Scalar>
struct OptimizerState {
  std::vector<std::vector<Scalar>> first_moment;
  std::vector<std::vector<Scalar>> second_moment;
  long step = 0;
};

/// Adaptive-moment optimizer with bias correction.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Tensor<Scalar>> params, AdamOptions opts = {});

  /// Applies one update from the accumulated gradients.
  void step();
  void zero_grad();

  double learning_rate() const { return opts_.learning_rate; }
  void set_learning_rate(double lr) { opts_.learning_rate = lr; }
  const OptimizerState<Scalar>& state() const { return state_; }

 private:
  std::vector<Tensor<Scalar>> params_;
  AdamOptions opts_;
  OptimizerState<Scalar> state_;
};

/// Plain stochastic gradient descent with heavy-ball momentum.
template <typename Scalar>
class Sgd {
 public:
  Sgd(std::vector<Tensor<Scalar>> params, double learning_rate, double momentum = 0.9);

  void step();
  void zero_grad();

 private:
  std::vector<Tensor<Scalar>> params_;
  double learning_rate_;
  double momentum_;
  std::vector<std::vector<Scalar>> velocity_;
};

extern template class Adam<float>;
extern template class Adam<double>;
extern template class Sgd<float>;
extern template class Sgd<double>;

}  // namespace dectseg
