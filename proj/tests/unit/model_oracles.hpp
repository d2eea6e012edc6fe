#pragma once

// Straight-line evaluations of the model blocks: explicit edge vectors run
// through a hand-written two-layer MLP.

#include <algorithm>
#include <limits>
#include <vector>

#include "oracles.hpp"
#include "pcpred/layers.hpp"

namespace oracle {

struct TwoLayer {
  std::vector<double> w0, b0, w1, b1;  // w0 is [in x hidden], w1 is [hidden x out]
  std::size_t in = 0, hidden = 0, out = 0;

  static TwoLayer from(const pcpred::ad::ParamStore& store, const std::string& prefix) {
    TwoLayer t;
    const auto& w0 = store.get(prefix + ".l0.w");
    const auto& w1 = store.get(prefix + ".l1.w");
    t.in = w0.rows();
    t.hidden = w0.cols();
    t.out = w1.cols();
    t.w0.assign(w0.values().begin(), w0.values().end());
    t.b0.assign(store.get(prefix + ".l0.b").values().begin(), store.get(prefix + ".l0.b").values().end());
    t.w1.assign(w1.values().begin(), w1.values().end());
    t.b1.assign(store.get(prefix + ".l1.b").values().begin(), store.get(prefix + ".l1.b").values().end());
    return t;
  }

  std::vector<double> operator()(const std::vector<double>& x) const {
    std::vector<double> h(hidden), y(out);
    for (std::size_t j = 0; j < hidden; ++j) {
      double s = b0[j];
      for (std::size_t i = 0; i < in; ++i) s += x[i] * w0[i * hidden + j];
      h[j] = std::max(0.0, s);
    }
    for (std::size_t j = 0; j < out; ++j) {
      double s = b1[j];
      for (std::size_t i = 0; i < hidden; ++i) s += h[i] * w1[i * out + j];
      y[j] = s;
    }
    return y;
  }
};

inline void append(std::vector<double>& x, const double* v, std::size_t d) { x.insert(x.end(), v, v + d); }

inline void append_diff(std::vector<double>& x, const double* a, const double* b, std::size_t d) {
  for (std::size_t i = 0; i < d; ++i) x.push_back(b[i] - a[i]);
}

inline void max_into(std::vector<double>& acc, const std::vector<double>& v) {
  if (acc.empty()) acc.assign(v.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < v.size(); ++i) acc[i] = std::max(acc[i], v[i]);
}

/// Edge vectors [f_i ; p_i ; p_j - p_i ; c_j - c_i] over the self-loop
/// coordinate graph; `colors` may be empty.
inline std::vector<double> gnn_layer(const std::vector<double>& p, const std::vector<double>& c,
                                     const std::vector<double>& f, std::size_t df, std::size_t k,
                                     const TwoLayer& mlp) {
  const std::size_t n = p.size() / 3;
  const auto nb = knn(p, p, 3, k, true);
  const std::vector<double> zero(3, 0.0);
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> pooled;
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t j = nb[i * k + s];
      std::vector<double> x;
      if (df) append(x, &f[i * df], df);
      append(x, &p[3 * i], 3);
      append_diff(x, &p[3 * i], &p[3 * j], 3);
      if (c.empty()) append(x, zero.data(), 3);
      else append_diff(x, &c[3 * i], &c[3 * j], 3);
      max_into(pooled, mlp(x));
    }
    out.insert(out.end(), pooled.begin(), pooled.end());
  }
  return out;
}

/// Edge vectors [s_i ; s_j ; p_j - p_i ; f_j - f_i ; dt] over k current
/// (feature self-loop) and k past feature neighbors. Empty `s` means zero.
inline std::vector<double> graph_cell(const std::vector<double>& p, const std::vector<double>& f,
                                      const std::vector<double>& s, const std::vector<double>& mp,
                                      const std::vector<double>& mf, const std::vector<double>& ms,
                                      std::size_t df, std::size_t ds, std::size_t k, const TwoLayer& mlp) {
  const std::size_t n = p.size() / 3;
  const auto cur = knn(f, f, df, k, true);
  const auto past = knn(f, mf, df, k, false);
  const std::vector<double> zeros(n * ds, 0.0);
  const std::vector<double>& si = s.empty() ? zeros : s;
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> pooled;
    for (int half = 0; half < 2; ++half) {
      for (std::size_t q = 0; q < k; ++q) {
        const std::size_t j = (half ? past : cur)[i * k + q];
        const auto& pj = half ? mp : p;
        const auto& fj = half ? mf : f;
        const auto& sj = half ? ms : si;
        std::vector<double> x;
        append(x, &si[i * ds], ds);
        append(x, &sj[j * ds], ds);
        append_diff(x, &p[3 * i], &pj[3 * j], 3);
        append_diff(x, &f[i * df], &fj[j * df], df);
        x.push_back(half);
        max_into(pooled, mlp(x));
      }
    }
    out.insert(out.end(), pooled.begin(), pooled.end());
  }
  return out;
}

/// Edge vectors [s_i ; s_j ; p_j - p_i] over k past coordinate neighbors.
inline std::vector<double> point_cell(const std::vector<double>& p, const std::vector<double>& s,
                                      const std::vector<double>& mp, const std::vector<double>& ms,
                                      std::size_t ds, std::size_t k, const TwoLayer& mlp) {
  const std::size_t n = p.size() / 3;
  const auto past = knn(p, mp, 3, k, false);
  const std::vector<double> zeros(n * ds, 0.0);
  const std::vector<double>& si = s.empty() ? zeros : s;
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> pooled;
    for (std::size_t q = 0; q < k; ++q) {
      const std::size_t j = past[i * k + q];
      std::vector<double> x;
      append(x, &si[i * ds], ds);
      append(x, &ms[j * ds], ds);
      append_diff(x, &p[3 * i], &mp[3 * j], 3);
      max_into(pooled, mlp(x));
    }
    out.insert(out.end(), pooled.begin(), pooled.end());
  }
  return out;
}

}  // namespace oracle
