#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pcpred/layers.hpp"

namespace pcpred::ad {

struct AdamState {
  std::uint64_t step = 0;
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<std::vector<double>> first_moment;   // one per parameter
  std::vector<std::vector<double>> second_moment;

  void validate() const;
};

/// Moment buffers sized to `params`.
AdamState make_adam(const ParamStore& params, double lr);

/// One bias-corrected Adam update from the gradients held by `params`.
/// Parameters with no gradient are treated as having a zero gradient.
void adam_step(AdamState& state, ParamStore& params);

/// Element-wise clamp into [lo, hi].
void clip_gradients(std::span<double> grads, double lo, double hi);
void clip_gradients(ParamStore& params, double lo, double hi);

// Checkpoint files: "PCCKPT1\n", u64 count, then per tensor u64 name length,
// UTF-8 name, u64 rank, u64 dims, f64 values; all little-endian.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace pcpred::ad
