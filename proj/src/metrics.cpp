#include "pcpred/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <stdexcept>
#include <string>

namespace pcpred {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_points(const MatrixView& m, const char* what) {
  if (m.rows == 0) throw std::invalid_argument(std::string(what) + ": empty point cloud");
  if (m.cols != 3) throw std::invalid_argument(std::string(what) + ": points must be 3-D");
}

void require_bijection(const MatrixView& p, const MatrixView& q) {
  require_points(p, "emd");
  require_points(q, "emd");
  if (p.rows != q.rows) {
    throw std::invalid_argument("bijection requires equal sizes (" + std::to_string(p.rows) +
                                " vs " + std::to_string(q.rows) + ")");
  }
}

// nearest[i] = index in `to` closest to from.row(i); returns the summed
// squared distance.
double nearest_sum(const MatrixView& from, const MatrixView& to,
                   std::vector<std::size_t>* nearest) {
  double total = 0.0;
  if (nearest) nearest->resize(from.rows);
  for (std::size_t i = 0; i < from.rows; ++i) {
    double best = kInf;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < to.rows; ++j) {
      const double d = squared_distance(from.row(i), to.row(j), 3);
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    total += best;
    if (nearest) (*nearest)[i] = arg;
  }
  return total;
}

std::vector<double> cost_matrix(const MatrixView& p, const MatrixView& q) {
  const std::size_t n = p.rows;
  std::vector<double> c(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = squared_distance(p.row(i), q.row(j), 3);
  }
  return c;
}

double assignment_cost(const MatrixView& p, const MatrixView& q,
                       const std::vector<std::size_t>& to) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows; ++i) total += squared_distance(p.row(i), q.row(to[i]), 3);
  return total;
}

}  // namespace

double chamfer(const MatrixView& p, const MatrixView& q) {
  require_points(p, "chamfer");
  require_points(q, "chamfer");
  return nearest_sum(p, q, nullptr) + nearest_sum(q, p, nullptr);
}

Assignment emd_exact(const MatrixView& p, const MatrixView& q) {
  require_bijection(p, q);
  const std::size_t n = p.rows;
  const std::vector<double> c = cost_matrix(p, q);

  // Shortest augmenting path Hungarian method with row/column potentials;
  // index 0 is a sentinel, rows and columns are 1-based.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      const double* crow = c.data() + (i0 - 1) * n;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = crow[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment a;
  a.to.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) a.to[owner[j] - 1] = j - 1;
  // Recompute from the matching rather than the potentials to avoid drift.
  a.cost = assignment_cost(p, q, a.to);
  return a;
}

Assignment auction_assignment(const MatrixView& p, const MatrixView& q) {
  require_bijection(p, q);
  const std::size_t n = p.rows;
  const std::vector<double> c = cost_matrix(p, q);
  const double max_cost = *std::max_element(c.begin(), c.end());
  Assignment a;
  a.to.resize(n);
  if (max_cost <= 0.0 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) a.to[i] = i;
    a.cost = assignment_cost(p, q, a.to);
    return a;
  }

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  // Forward Gauss-Seidel auction maximizing benefit -cost.
  std::vector<double> price(n, 0.0);
  std::vector<std::size_t> owner(n), object(n);
  std::deque<std::size_t> unassigned;
  const double final_threshold = 1e-6 * max_cost;
  for (double eps = max_cost / 4.0;; eps /= 5.0) {
    std::fill(owner.begin(), owner.end(), kNone);
    std::fill(object.begin(), object.end(), kNone);
    unassigned.clear();
    for (std::size_t i = 0; i < n; ++i) unassigned.push_back(i);
    while (!unassigned.empty()) {
      const std::size_t i = unassigned.front();
      unassigned.pop_front();
      const double* crow = c.data() + i * n;
      double best = -kInf, second = -kInf;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double value = -crow[j] - price[j];
        if (value > best) {
          second = best;
          best = value;
          best_j = j;
        } else if (value > second) {
          second = value;
        }
      }
      price[best_j] += best - second + eps;
      if (owner[best_j] != kNone) {
        object[owner[best_j]] = kNone;
        unassigned.push_back(owner[best_j]);
      }
      owner[best_j] = i;
      object[i] = best_j;
    }
    if (eps < final_threshold) break;
  }
  a.to = object;
  a.cost = assignment_cost(p, q, a.to);
  return a;
}

Assignment emd_approx(const MatrixView& p, const MatrixView& q) {
  require_bijection(p, q);
  if (p.rows <= kExactEmdLimit) return emd_exact(p, q);
  return auction_assignment(p, q);
}

LossReport point_set_loss(const MatrixView& predicted, const MatrixView& truth,
                          std::span<double> grad) {
  require_bijection(predicted, truth);
  const std::size_t n = predicted.rows;
  std::vector<std::size_t> pred_to_truth, truth_to_pred;
  LossReport r;
  r.cd = nearest_sum(predicted, truth, &pred_to_truth) +
         nearest_sum(truth, predicted, &truth_to_pred);
  const Assignment a = emd_approx(predicted, truth);
  r.emd = a.cost;
  r.total = r.cd + r.emd;
  if (!grad.empty()) {
    if (grad.size() != n * 3) throw std::invalid_argument("loss gradient buffer size");
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = predicted.row(i);
      const double* qn = truth.row(pred_to_truth[i]);
      const double* qe = truth.row(a.to[i]);
      for (std::size_t d = 0; d < 3; ++d) grad[i * 3 + d] += 2.0 * (p[d] - qn[d]) + 2.0 * (p[d] - qe[d]);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t i = truth_to_pred[j];
      const double* p = predicted.row(i);
      const double* q = truth.row(j);
      for (std::size_t d = 0; d < 3; ++d) grad[i * 3 + d] += 2.0 * (p[d] - q[d]);
    }
  }
  return r;
}

ad::Tensor point_set_loss_node(const ad::Tensor& predicted, const MatrixView& truth,
                               LossReport* report) {
  if (predicted.rank() != 2 || predicted.cols() != 3) {
    throw ad::ShapeError("point_set_loss", "prediction must be [n x 3], got " +
                                               ad::shape_string(predicted.shape()));
  }
  const MatrixView pv(predicted.values(), predicted.rows(), 3);
  std::vector<double> g(predicted.size());
  const bool want_grad = ad::grad_enabled() && predicted.requires_grad();
  const LossReport r = point_set_loss(pv, truth, want_grad ? std::span<double>(g) : std::span<double>{});
  if (report) *report = r;
  return ad::make_result("point_set_loss", {}, {r.total}, {predicted},
                         [g = std::move(g)](ad::Node& out) {
                           ad::Node& in = *out.inputs[0];
                           if (!in.requires_grad) return;
                           auto& dst = in.ensure_grad();
                           const double go = out.grad[0];
                           for (std::size_t i = 0; i < g.size(); ++i) dst[i] += go * g[i];
                         });
}

}  // namespace pcpred
