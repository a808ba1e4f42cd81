// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/nn.hpp"

#include <cmath>
#include <numbers>

#include "mqlrec/error.hpp"

namespace mqlrec {

ParameterSet::Slot ParameterSet::add(std::string name, Eigen::Index rows, Eigen::Index cols,
                                     bool decay) {
  TensorSlot slot{std::move(name), rows, cols, values_.size(), decay};
  const Eigen::Index old = values_.size();
  values_.conservativeResize(old + slot.size());
  values_.segment(old, slot.size()).setZero();
  slots_.push_back(std::move(slot));
  return slots_.size() - 1;
}

MatrixMap ParameterSet::view_in(Slot s, Vector& buffer) const {
  const auto& t = slots_[s];
  return MatrixMap(buffer.data() + t.offset, t.rows, t.cols);
}

ConstMatrixMap ParameterSet::view_in(Slot s, const Vector& buffer) const {
  const auto& t = slots_[s];
  return ConstMatrixMap(buffer.data() + t.offset, t.rows, t.cols);
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (slots_.size() != other.slots_.size() || values_.size() != other.values_.size()) return false;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    const auto& a = slots_[i];
    const auto& b = other.slots_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols || a.offset != b.offset) return false;
  }
  return values_ == other.values_;
}

Mlp::Mlp(ParameterSet& params, const std::string& prefix, Eigen::Index in_dim,
         const std::vector<Eigen::Index>& hidden, Eigen::Index out_dim)
    : in_dim_(in_dim), out_dim_(out_dim) {
  Eigen::Index prev = in_dim;
  std::vector<Eigen::Index> widths = hidden;
  widths.push_back(out_dim);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string name = prefix + ".layer" + std::to_string(i);
    Layer layer;
    layer.weight = params.add(name + ".weight", prev, widths[i], true);
    layer.bias = params.add(name + ".bias", 1, widths[i], false);
    layers_.push_back(layer);
    prev = widths[i];
  }
}

void Mlp::initialize(ParameterSet& params, std::mt19937_64& rng) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto w = params.view(layers_[i].weight);
    const bool last = i + 1 == layers_.size();
    // He scaling before ReLU, Glorot-like for the linear output layer.
    const double stddev = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(w.rows()));
    std::normal_distribution<double> normal(0.0, stddev);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = normal(rng);
    params.view(layers_[i].bias).setZero();
  }
}

Matrix Mlp::forward(const ParameterSet& params, const Matrix& x, Cache* cache) const {
  if (x.cols() != in_dim_) {
    throw DimensionMismatch("MLP expects input width " + std::to_string(in_dim_) + ", got " +
                            std::to_string(x.cols()));
  }
  if (cache) cache->inputs.clear();
  Matrix h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (cache) cache->inputs.push_back(h);
    Matrix next = h * params.view(layers_[i].weight);
    next.rowwise() += params.view(layers_[i].bias).row(0);
    if (i + 1 < layers_.size()) next = next.cwiseMax(0.0);
    h = std::move(next);
  }
  return h;
}

Matrix Mlp::backward(const ParameterSet& params, const Cache& cache, const Matrix& dy,
                     Vector& grad) const {
  Matrix d = dy;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const Matrix& input = cache.inputs[k];
    params.view_in(layers_[k].weight, grad).noalias() += input.transpose() * d;
    params.view_in(layers_[k].bias, grad).row(0) += d.colwise().sum();
    Matrix dx = d * params.view(layers_[k].weight).transpose();
    if (k > 0) {
      // input of layer k is relu(pre-activation of layer k-1); gate on its sign.
      dx = dx.cwiseProduct((input.array() > 0.0).cast<double>().matrix());
    }
    d = std::move(dx);
  }
  return d;
}

AdamW::AdamW(const ParameterSet& params, AdamWOptions options)
    : options_(options), m_(params.zeros()), v_(params.zeros()), decay_mask_(params.zeros()) {
  for (const auto& s : params.slots()) {
    if (s.decay) decay_mask_.segment(s.offset, s.size()).setOnes();
  }
}

void AdamW::step(ParameterSet& params, const Vector& grad, double learning_rate) {
  ++steps_;
  auto& p = params.values();
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double step_size = learning_rate / bc1;
  const double lr_wd = learning_rate * options_.weight_decay;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    p[i] -= lr_wd * decay_mask_[i] * p[i];
    m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
    const double denom = std::sqrt(v_[i]) / std::sqrt(bc2) + options_.epsilon;
    p[i] -= step_size * m_[i] / denom;
  }
}

double warmup_cosine_lr(long step, double max_lr, long warmup_steps, long total_steps) {
  if (step < warmup_steps) {
    return max_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const long decay_steps = total_steps - warmup_steps;
  if (decay_steps <= 0) return max_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
  return 0.5 * max_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mqlrec
