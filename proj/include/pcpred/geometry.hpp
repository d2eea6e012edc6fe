#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace pcpred {

/// Read-only row-major matrix over borrowed storage.
struct MatrixView {
  std::span<const double> data;
  std::size_t rows = 0;
  std::size_t cols = 0;

  MatrixView() = default;
  MatrixView(std::span<const double> d, std::size_t r, std::size_t c);

  const double* row(std::size_t i) const { return data.data() + i * cols; }
};

double squared_distance(const double* a, const double* b, std::size_t dim);

enum class NeighborSource : std::uint8_t { current = 0, previous = 1 };

/// Per-query neighbor lists, `k` per row, sorted by non-decreasing distance
/// (within each source block for spatio-temporal graphs).
struct NeighborGraph {
  std::size_t query_count = 0;
  std::size_t k = 0;  // neighbors per row
  std::vector<std::size_t> neighbor_index;
  std::vector<NeighborSource> neighbor_source;
  std::vector<double> neighbor_distance;  // Euclidean

  std::size_t at(std::size_t query, std::size_t slot) const {
    return neighbor_index[query * k + slot];
  }
};

/// Exact k nearest targets for each query; ties go to the lower index.
/// With `self_loop`, queries and targets must be the same set and row i
/// always starts with i itself.
NeighborGraph knn_graph(const MatrixView& queries, const MatrixView& targets,
                        std::size_t k, bool self_loop);

/// Row i: k current-set neighbors (self-loop) followed by k past-set
/// neighbors; every row has 2k entries.
NeighborGraph spatio_temporal_knn(const MatrixView& current, const MatrixView& past,
                                  std::size_t k);

struct FpsTrace {
  std::vector<std::size_t> indices;
  /// Distance from each selected point to the set selected before it
  /// (infinity for the seed).
  std::vector<double> selection_distance;
};

/// Greedy farthest point sampling seeded at `start_index`; ties go to the
/// lower index.
FpsTrace fps_sample_traced(const MatrixView& points, std::size_t m,
                           std::size_t start_index = 0);
std::vector<std::size_t> fps_sample(const MatrixView& points, std::size_t m,
                                    std::size_t start_index = 0);

inline constexpr double kInterpolationEpsilon = 1e-8;

/// Weights 1 / (d + eps) over the k nearest sources, normalized.
std::vector<double> inverse_distance_interpolate(const MatrixView& targets,
                                                 const MatrixView& sources,
                                                 const MatrixView& source_values,
                                                 std::size_t k);

}  // namespace pcpred
