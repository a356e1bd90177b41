// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

namespace soda::nn {

struct DenseLayer {
  Eigen::MatrixXd weights;  // rows = outputs, cols = inputs
  Eigen::VectorXd biases;
};

struct Gradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

/// Fully connected network with ReLU hidden layers and an identity output.
/// Samples are columns throughout.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer> layers);

  /// Uniform fan-in initialization: He bound sqrt(6/fan_in) for hidden layers,
  /// sqrt(3/fan_in) for the output layer, zero biases.
  static Mlp initialized(std::span<const int> widths, std::uint64_t seed);

  [[nodiscard]] Eigen::MatrixXd forward(const Eigen::MatrixXd& inputs) const;

  /// Mean over samples of the squared Euclidean output error.
  [[nodiscard]] double mse(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets) const;

  /// Same loss as mse(), with its gradient with respect to every parameter.
  double loss_and_gradients(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                            Gradients& grads) const;

  [[nodiscard]] const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  [[nodiscard]] std::vector<DenseLayer>& layers() noexcept { return layers_; }
  [[nodiscard]] int input_size() const;
  [[nodiscard]] int output_size() const;
  [[nodiscard]] std::size_t parameter_count() const;
  [[nodiscard]] bool all_finite() const;

 private:
  std::vector<DenseLayer> layers_;
};

struct AdamSettings {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(const Mlp& model, AdamSettings settings);
  void step(Mlp& model, const Gradients& grads);

 private:
  AdamSettings settings_;
  long t_ = 0;
  Gradients m_;
  Gradients v_;
};

}  // namespace soda::nn
