// SPDX-License-Identifier: Apache-2.0
#include "soda/mlp.hpp"

#include "soda/errors.hpp"

#include <cmath>
#include <random>

namespace soda::nn {

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].biases.size() != layers_[i].weights.rows()) {
      throw ArgumentError("layer " + std::to_string(i) + ": bias size does not match weight rows");
    }
    if (i > 0 && layers_[i].weights.cols() != layers_[i - 1].weights.rows()) {
      throw ArgumentError("layer " + std::to_string(i) + ": input width does not match previous layer");
    }
  }
}

Mlp Mlp::initialized(std::span<const int> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw ArgumentError("an MLP needs at least input and output widths");
  std::mt19937_64 rng(seed);
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const int fan_in = widths[i];
    const int fan_out = widths[i + 1];
    const bool output = i + 2 == widths.size();
    const double bound = std::sqrt((output ? 3.0 : 6.0) / fan_in);
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer layer{Eigen::MatrixXd(fan_out, fan_in), Eigen::VectorXd::Zero(fan_out)};
    for (int r = 0; r < fan_out; ++r) {
      for (int c = 0; c < fan_in; ++c) layer.weights(r, c) = u(rng);
    }
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers));
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& inputs) const {
  Eigen::MatrixXd a = inputs;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Eigen::MatrixXd z = layers_[i].weights * a;
    z.colwise() += layers_[i].biases;
    if (i + 1 < layers_.size()) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a;
}

double Mlp::mse(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets) const {
  return (forward(inputs) - targets).colwise().squaredNorm().mean();
}

double Mlp::loss_and_gradients(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                               Gradients& grads) const {
  const auto n_layers = layers_.size();
  const double n = static_cast<double>(inputs.cols());
  std::vector<Eigen::MatrixXd> activations;
  activations.reserve(n_layers + 1);
  activations.push_back(inputs);
  for (std::size_t i = 0; i < n_layers; ++i) {
    Eigen::MatrixXd z = layers_[i].weights * activations.back();
    z.colwise() += layers_[i].biases;
    if (i + 1 < n_layers) z = z.cwiseMax(0.0);
    activations.push_back(std::move(z));
  }
  const Eigen::MatrixXd residual = activations.back() - targets;
  const double loss = residual.colwise().squaredNorm().mean();

  grads.weights.resize(n_layers);
  grads.biases.resize(n_layers);
  Eigen::MatrixXd delta = (2.0 / n) * residual;
  for (std::size_t k = n_layers; k-- > 0;) {
    grads.weights[k].noalias() = delta * activations[k].transpose();
    grads.biases[k] = delta.rowwise().sum();
    if (k > 0) {
      Eigen::MatrixXd back = layers_[k].weights.transpose() * delta;
      // ReLU derivative, evaluated from the post-activation values.
      delta = back.cwiseProduct((activations[k].array() > 0.0).cast<double>().matrix());
    }
  }
  return loss;
}

int Mlp::input_size() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weights.cols()); }
int Mlp::output_size() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weights.rows()); }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.biases.size());
  return n;
}

bool Mlp::all_finite() const {
  for (const auto& l : layers_) {
    if (!l.weights.allFinite() || !l.biases.allFinite()) return false;
  }
  return true;
}

Adam::Adam(const Mlp& model, AdamSettings settings) : settings_(settings) {
  for (const auto& l : model.layers()) {
    m_.weights.push_back(Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()));
    v_.weights.push_back(Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()));
    m_.biases.push_back(Eigen::VectorXd::Zero(l.biases.size()));
    v_.biases.push_back(Eigen::VectorXd::Zero(l.biases.size()));
  }
}

void Adam::step(Mlp& model, const Gradients& grads) {
  ++t_;
  const double b1 = settings_.beta1;
  const double b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = settings_.learning_rate;
  const double eps = settings_.epsilon;
  auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    m_.weights[i] = b1 * m_.weights[i] + (1.0 - b1) * grads.weights[i];
    v_.weights[i] = b2 * v_.weights[i] + (1.0 - b2) * grads.weights[i].cwiseAbs2();
    layers[i].weights.array() -=
        lr * (m_.weights[i].array() / c1) / ((v_.weights[i].array() / c2).sqrt() + eps);

    m_.biases[i] = b1 * m_.biases[i] + (1.0 - b1) * grads.biases[i];
    v_.biases[i] = b2 * v_.biases[i] + (1.0 - b2) * grads.biases[i].cwiseAbs2();
    layers[i].biases.array() -=
        lr * (m_.biases[i].array() / c1) / ((v_.biases[i].array() / c2).sqrt() + eps);
  }
}

}  // namespace soda::nn
