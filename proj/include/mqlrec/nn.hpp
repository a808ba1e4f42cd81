// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal neural-network plumbing: flat parameter storage with named views,
// a ReLU multi-layer perceptron with hand-written backward pass, AdamW, and
// learning-rate schedules.

#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "mqlrec/common.hpp"

namespace mqlrec {

struct TensorSlot {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;
  /// Whether decoupled weight decay applies (matrices yes, biases and norms no).
  bool decay = true;
  Eigen::Index size() const { return rows * cols; }
};

/// All parameters of a model in one contiguous vector. Gradients and
/// optimizer moments are vectors of the same length addressed through the
/// same slots.
class ParameterSet {
 public:
  using Slot = std::size_t;

  Slot add(std::string name, Eigen::Index rows, Eigen::Index cols, bool decay = true);

  MatrixMap view(Slot s) { return view_in(s, values_); }
  ConstMatrixMap view(Slot s) const { return view_in(s, values_); }
  MatrixMap view_in(Slot s, Vector& buffer) const;
  ConstMatrixMap view_in(Slot s, const Vector& buffer) const;

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }
  Vector zeros() const { return Vector::Zero(values_.size()); }
  const std::vector<TensorSlot>& slots() const { return slots_; }
  const TensorSlot& slot(Slot s) const { return slots_[s]; }

  bool operator==(const ParameterSet& other) const;

 private:
  std::vector<TensorSlot> slots_;
  Vector values_;
};

/// Fully connected layers with ReLU between hidden layers and a linear output.
/// Weights are stored input-major (in x out) so a batch is `X * W + b`.
class Mlp {
 public:
  struct Layer {
    ParameterSet::Slot weight;
    ParameterSet::Slot bias;
  };
  struct Cache {
    std::vector<Matrix> inputs;  // input to each layer (post-activation of the previous)
  };

  Mlp() = default;
  Mlp(ParameterSet& params, const std::string& prefix, Eigen::Index in_dim,
      const std::vector<Eigen::Index>& hidden, Eigen::Index out_dim);

  void initialize(ParameterSet& params, std::mt19937_64& rng) const;

  Matrix forward(const ParameterSet& params, const Matrix& x, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients into `grad` and returns dL/dx.
  Matrix backward(const ParameterSet& params, const Cache& cache, const Matrix& dy,
                  Vector& grad) const;

  Eigen::Index in_dim() const { return in_dim_; }
  Eigen::Index out_dim() const { return out_dim_; }
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  std::vector<Layer> layers_;
  Eigen::Index in_dim_ = 0;
  Eigen::Index out_dim_ = 0;
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay (applied to slots flagged `decay`).
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParameterSet& params, AdamWOptions options);

  void step(ParameterSet& params, const Vector& grad, double learning_rate);
  long steps() const { return steps_; }

 private:
  AdamWOptions options_;
  Vector m_;
  Vector v_;
  Vector decay_mask_;
  long steps_ = 0;
};

/// Linear warm-up to `max_lr` over `warmup_steps`, then cosine decay to zero
/// at `total_steps`. Non-decreasing during warm-up, non-increasing after.
double warmup_cosine_lr(long step, double max_lr, long warmup_steps, long total_steps);

}  // namespace mqlrec
