#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "oracles.hpp"
#include "pcpred/rng.hpp"
#include "pcpred/tensor.hpp"

namespace oracle {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares the backward pass of the scalar `f` against central differences
/// for every element of `leaves` (or `sample` random elements overall).
inline GradCheck gradcheck(std::vector<pcpred::ad::Tensor> leaves,
                           const std::function<pcpred::ad::Tensor()>& f, double h = 1e-5,
                           double floor = 1e-6, std::size_t sample = 0, std::uint64_t seed = 1) {
  using namespace pcpred::ad;
  for (auto& l : leaves) l.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    analytic.emplace_back(l.size(), 0.0);
    if (l.has_grad()) std::copy(l.grad().begin(), l.grad().end(), analytic.back().begin());
  }
  std::vector<std::pair<std::size_t, std::size_t>> sites;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    for (std::size_t i = 0; i < leaves[t].size(); ++i) sites.emplace_back(t, i);
  }
  if (sample && sample < sites.size()) {
    pcpred::Rng rng(seed);
    for (std::size_t i = 0; i < sample; ++i) {
      std::swap(sites[i], sites[i + rng.below(sites.size() - i)]);
    }
    sites.resize(sample);
  }
  NoGradGuard no_grad;
  GradCheck out;
  for (auto [t, i] : sites) {
    double& x = leaves[t].mutable_values()[i];
    const double numeric = central_difference([&] { return f().item(); }, x, h);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic[t][i], numeric, floor));
    ++out.checked;
  }
  return out;
}

inline pcpred::ad::Tensor random_tensor(pcpred::Rng& rng, pcpred::ad::Shape shape, double lo = -1.0,
                                        double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(pcpred::ad::shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return pcpred::ad::Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

/// Scalar probe sum(a * r) for a fixed random r, so every output element
/// gets a distinct upstream gradient.
inline pcpred::ad::Tensor probe(const pcpred::ad::Tensor& a, std::uint64_t seed = 99) {
  pcpred::Rng rng(seed);
  return pcpred::ad::sum(pcpred::ad::mul(a, random_tensor(rng, a.shape(), -1.0, 1.0, false)));
}

}  // namespace oracle
