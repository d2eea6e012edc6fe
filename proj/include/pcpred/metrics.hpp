#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pcpred/geometry.hpp"
#include "pcpred/tensor.hpp"

namespace pcpred {

/// Sum over P of the squared distance to the nearest point of Q, plus the
/// same term from Q to P. Unnormalized.
double chamfer(const MatrixView& p, const MatrixView& q);

struct Assignment {
  double cost = 0.0;
  /// to[i] is the index in Q matched to point i of P.
  std::vector<std::size_t> to;
};

/// Optimal bijection under squared Euclidean cost (Hungarian method).
Assignment emd_exact(const MatrixView& p, const MatrixView& q);

/// Sizes at or below this go to the exact solver.
inline constexpr std::size_t kExactEmdLimit = 512;

/// Epsilon-scaling auction; delegates to emd_exact for n <= kExactEmdLimit.
/// The returned cost is within n * final_epsilon of the optimum.
Assignment emd_approx(const MatrixView& p, const MatrixView& q);

/// Dense-cost auction without the exact fallback; exposed for testing.
Assignment auction_assignment(const MatrixView& p, const MatrixView& q);

struct LossReport {
  double cd = 0.0;
  double emd = 0.0;
  double total = 0.0;
};

/// cd + emd between a predicted and a true cloud, with the gradient of the
/// total w.r.t. the prediction when `grad` is non-empty (size n*3).
LossReport point_set_loss(const MatrixView& predicted, const MatrixView& truth,
                          std::span<double> grad = {});

/// Differentiable scalar node computing point_set_loss(pred, truth).
ad::Tensor point_set_loss_node(const ad::Tensor& predicted, const MatrixView& truth,
                               LossReport* report = nullptr);

}  // namespace pcpred
