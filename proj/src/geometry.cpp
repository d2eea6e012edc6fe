#include "pcpred/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

namespace pcpred {

MatrixView::MatrixView(std::span<const double> d, std::size_t r, std::size_t c)
    : data(d), rows(r), cols(c) {
  if (d.size() != r * c) {
    throw std::invalid_argument("matrix view of " + std::to_string(r) + "x" +
                                std::to_string(c) + " over " + std::to_string(d.size()) +
                                " values");
  }
}

double squared_distance(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

namespace {

using Candidate = std::pair<double, std::size_t>;  // (squared distance, index)

// Appends the k smallest candidates of `scratch` (lexicographic order) to g.
void take_smallest(std::vector<Candidate>& scratch, std::size_t k, NeighborGraph& g,
                   NeighborSource source) {
  if (k < scratch.size()) {
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k),
                     scratch.end());
  }
  std::sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k));
  for (std::size_t s = 0; s < k; ++s) {
    g.neighbor_index.push_back(scratch[s].second);
    g.neighbor_source.push_back(source);
    g.neighbor_distance.push_back(std::sqrt(scratch[s].first));
  }
}

void append_rows(const MatrixView& queries, const MatrixView& targets, std::size_t k,
                 bool self_loop, NeighborSource source, std::size_t query,
                 std::vector<Candidate>& scratch, NeighborGraph& g) {
  const double* q = queries.row(query);
  scratch.clear();
  if (self_loop) {
    for (std::size_t j = 0; j < targets.rows; ++j) {
      if (j != query) scratch.emplace_back(squared_distance(q, targets.row(j), targets.cols), j);
    }
    g.neighbor_index.push_back(query);
    g.neighbor_source.push_back(source);
    g.neighbor_distance.push_back(0.0);
    take_smallest(scratch, k - 1, g, source);
  } else {
    for (std::size_t j = 0; j < targets.rows; ++j) {
      scratch.emplace_back(squared_distance(q, targets.row(j), targets.cols), j);
    }
    take_smallest(scratch, k, g, source);
  }
}

void check_knn_args(const MatrixView& queries, const MatrixView& targets, std::size_t k) {
  if (k == 0) throw std::invalid_argument("k must be positive");
  if (k > targets.rows) {
    throw std::invalid_argument("k=" + std::to_string(k) + " exceeds target count " +
                                std::to_string(targets.rows));
  }
  if (queries.cols != targets.cols) {
    throw std::invalid_argument("query and target dimensions differ");
  }
}

}  // namespace

NeighborGraph knn_graph(const MatrixView& queries, const MatrixView& targets,
                        std::size_t k, bool self_loop) {
  check_knn_args(queries, targets, k);
  if (self_loop && queries.rows != targets.rows) {
    throw std::invalid_argument("self-loop graph needs queries and targets to be one set");
  }
  NeighborGraph g;
  g.query_count = queries.rows;
  g.k = k;
  g.neighbor_index.reserve(queries.rows * k);
  g.neighbor_source.reserve(queries.rows * k);
  g.neighbor_distance.reserve(queries.rows * k);
  std::vector<Candidate> scratch;
  scratch.reserve(targets.rows);
  for (std::size_t i = 0; i < queries.rows; ++i) {
    append_rows(queries, targets, k, self_loop, NeighborSource::current, i, scratch, g);
  }
  return g;
}

NeighborGraph spatio_temporal_knn(const MatrixView& current, const MatrixView& past,
                                  std::size_t k) {
  check_knn_args(current, current, k);
  check_knn_args(current, past, k);
  NeighborGraph g;
  g.query_count = current.rows;
  g.k = 2 * k;
  g.neighbor_index.reserve(current.rows * 2 * k);
  g.neighbor_source.reserve(current.rows * 2 * k);
  g.neighbor_distance.reserve(current.rows * 2 * k);
  std::vector<Candidate> scratch;
  scratch.reserve(std::max(current.rows, past.rows));
  for (std::size_t i = 0; i < current.rows; ++i) {
    append_rows(current, current, k, true, NeighborSource::current, i, scratch, g);
    append_rows(current, past, k, false, NeighborSource::previous, i, scratch, g);
  }
  return g;
}

FpsTrace fps_sample_traced(const MatrixView& points, std::size_t m, std::size_t start_index) {
  const std::size_t n = points.rows;
  if (m == 0 || m > n) {
    throw std::invalid_argument("cannot sample " + std::to_string(m) + " of " +
                                std::to_string(n) + " points");
  }
  if (start_index >= n) throw std::invalid_argument("FPS start index out of range");
  FpsTrace trace;
  trace.indices.reserve(m);
  trace.selection_distance.reserve(m);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t current = start_index;
  double current_distance = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < m; ++s) {
    trace.indices.push_back(current);
    trace.selection_distance.push_back(std::sqrt(current_distance));
    taken[current] = 1;
    if (s + 1 == m) break;
    const double* c = points.row(current);
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (taken[j]) continue;
      nearest[j] = std::min(nearest[j], squared_distance(c, points.row(j), points.cols));
      if (nearest[j] > best_d) {  // strict: lower index wins ties
        best_d = nearest[j];
        best = j;
      }
    }
    current = best;
    current_distance = best_d;
  }
  return trace;
}

std::vector<std::size_t> fps_sample(const MatrixView& points, std::size_t m,
                                    std::size_t start_index) {
  return fps_sample_traced(points, m, start_index).indices;
}

std::vector<double> inverse_distance_interpolate(const MatrixView& targets,
                                                 const MatrixView& sources,
                                                 const MatrixView& source_values,
                                                 std::size_t k) {
  if (source_values.rows != sources.rows) {
    throw std::invalid_argument("one value row per source point is required");
  }
  const NeighborGraph g = knn_graph(targets, sources, k, false);
  const std::size_t d = source_values.cols;
  std::vector<double> out(targets.rows * d, 0.0);
  for (std::size_t i = 0; i < targets.rows; ++i) {
    double total = 0.0;
    double* row = out.data() + i * d;
    for (std::size_t s = 0; s < k; ++s) {
      const double w = 1.0 / (g.neighbor_distance[i * k + s] + kInterpolationEpsilon);
      total += w;
      const double* v = source_values.row(g.at(i, s));
      for (std::size_t c = 0; c < d; ++c) row[c] += w * v[c];
    }
    for (std::size_t c = 0; c < d; ++c) row[c] /= total;
  }
  return out;
}

}  // namespace pcpred
