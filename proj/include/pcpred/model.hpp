#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pcpred/data.hpp"
#include "pcpred/geometry.hpp"
#include "pcpred/layers.hpp"
#include "pcpred/tensor.hpp"

namespace pcpred {

enum class CellKind { graph_rnn, point_rnn };

struct LayerSpec {
  std::size_t k = 0;
  std::size_t channels = 0;

  bool operator==(const LayerSpec&) const = default;
};

/// Network layout. Defaults are the full-size architecture; `tiny()` is a
/// scaled-down variant with the same structure for CPU training.
struct ModelConfig {
  std::vector<LayerSpec> gnn_layers{{16, 64}, {16, 128}, {8, 128}};
  std::vector<LayerSpec> cells{{8, 256}, {8, 256}, {8, 256}};
  std::vector<std::size_t> point_rnn_k{24, 16, 8};
  std::size_t sg_k = 4;
  /// Point count after each down-sampling stage, as a fraction of n.
  std::vector<double> sg_ratios{0.5, 0.25, 0.125};
  std::size_t interp_k = 3;
  std::vector<std::size_t> fc_widths{128, 3};
  bool color_head = false;
  bool hierarchical = true;
  CellKind baseline = CellKind::graph_rnn;
  std::size_t fps_start = 0;  // FPS seed index in the input cloud

  std::size_t state_width() const { return cells.front().channels; }
  /// Width of the learned geometric features; 0 without a GNN stack.
  std::size_t feature_width() const;
  std::size_t cell_k(std::size_t cell) const;
  /// Point counts of the levels the cells run on, for an n-point input.
  std::vector<std::size_t> level_sizes(std::size_t n) const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;

  static ModelConfig tiny();
};

/// Plain-text `key = value` lines; `#` starts a comment. Keys not present
/// keep their value from `base`.
ModelConfig parse_model_config(const std::string& text, ModelConfig base = {});
bool is_model_config_key(const std::string& key);
std::string format_model_config(const ModelConfig& cfg);
ModelConfig load_model_config(const std::string& path);
void save_model_config(const ModelConfig& cfg, const std::string& path);

enum class InitMode {
  glorot,
  zero_head,  // glorot everywhere except a zero final motion layer
  zero,
};

ad::ParamStore init_model_params(const ModelConfig& cfg, std::uint64_t seed,
                                 InitMode mode = InitMode::glorot);
/// Throws ad::ShapeError naming the first missing or misshapen tensor.
void validate_model_params(const ModelConfig& cfg, const ad::ParamStore& params);

// Edge-MLP shapes of the individual blocks.
ad::MlpSpec gnn_mlp_spec(std::size_t prev_width, std::size_t channels);
ad::MlpSpec graph_cell_mlp_spec(std::size_t state_width, std::size_t feature_width);
ad::MlpSpec point_cell_mlp_spec(std::size_t state_width);
ad::MlpSpec sp_mlp_spec(std::size_t state_width, std::size_t skip_width);
ad::MlpSpec fc_mlp_spec(std::size_t state_width, const std::vector<std::size_t>& widths);

/// Points, features, and states at one hierarchy level. Absent members are
/// undefined tensors (an absent state means all-zero).
struct LevelState {
  ad::Tensor points;    // n x 3
  ad::Tensor features;  // n x d_f
  ad::Tensor states;    // n x d_s
  ad::Tensor colors;    // n x 3

  std::size_t size() const { return points.rows(); }
};

/// One coordinate-graph edge-convolution layer: rows of the first weight
/// are [f_prev ; p_i ; dp_ij ; dc_ij]. `colors` may be undefined (dc = 0).
ad::Tensor gnn_layer(const ad::Tensor& points, const ad::Tensor& colors,
                     const ad::Tensor& prev_features, std::size_t k,
                     const ad::MlpSpec& spec, const ad::MlpParams& params);

/// Spatio-temporal recurrent cell; first-weight rows are
/// [s_i ; s_j ; dp_ij ; df_ij ; dt_ij]. `memory.states` must be defined.
ad::Tensor graph_rnn_cell(const LevelState& input, const LevelState& memory, std::size_t k,
                          const ad::MlpSpec& spec, const ad::MlpParams& params);

/// Coordinate-only baseline cell over past-frame neighbors; first-weight rows
/// are [s_i ; s_j ; dp_ij].
ad::Tensor point_rnn_cell(const LevelState& input, const LevelState& memory, std::size_t k,
                          const ad::MlpSpec& spec, const ad::MlpParams& params);

/// FPS down-sampling to `count` centroids, each pooling features and states
/// over its `sg_k` nearest input points.
LevelState sample_and_group(const LevelState& level, std::size_t count, std::size_t sg_k,
                            std::size_t fps_start = 0);

/// Differentiable inverse-distance interpolation of `values` (rows of
/// `sources`) onto `targets` over the k nearest sources.
ad::Tensor interpolate_states(const ad::Tensor& targets, const ad::Tensor& sources,
                              const ad::Tensor& values, std::size_t k);

/// Interpolates coarse states onto fine points, concatenates the skip states
/// (if defined) and applies the shared MLP.
ad::Tensor state_propagation(const LevelState& coarse, const ad::Tensor& fine_points,
                             const ad::Tensor& skip_states, std::size_t k,
                             const ad::MlpSpec& spec, const ad::MlpParams& params);

/// Per-cell outputs from the previous time step.
struct RecurrentMemory {
  std::vector<LevelState> cells;

  bool empty() const { return cells.empty(); }
};

struct StepOutput {
  ad::Tensor points;          // predicted next coordinates, n x 3
  ad::Tensor motion;          // n x 3
  std::vector<double> colors; // predicted colors (empty without input colors)
  std::vector<std::size_t> cell_sizes;  // point count per cell
  std::vector<std::size_t> sp_sizes;    // point count after each propagation stage
};

/// One prediction step. An empty memory is initialized from the current
/// frame with zero states.
StepOutput predict_step(const ModelConfig& cfg, const ad::ParamStore& params,
                        const ad::Tensor& points, const std::vector<double>& colors,
                        RecurrentMemory& memory);

enum class RolloutMode { short_term, long_term };

/// Ground-truth frames fed before self-feeding starts.
std::size_t warmup_length(std::size_t frames, RolloutMode mode);
/// Index of the first predicted frame; predictions run through the end.
std::size_t first_target(std::size_t frames, RolloutMode mode);

/// Hooks for checking which frames a rollout reads.
class RolloutObserver {
 public:
  virtual ~RolloutObserver() = default;
  virtual void frame_read(std::size_t index) = 0;
  virtual void prediction_made(std::size_t target_index) = 0;
};

struct RolloutStep {
  std::size_t target = 0;  // index of the frame this predicts
  ad::Tensor points;
  std::vector<double> colors;
};

/// Short mode feeds ground truth at every step; long mode feeds the
/// warm-up frames then its own predictions. Colors are carried forward
/// unchanged when self-feeding.
std::vector<RolloutStep> rollout(const ModelConfig& cfg, const ad::ParamStore& params,
                                 const Sequence& seq, RolloutMode mode,
                                 RolloutObserver* observer = nullptr);

/// Gradient-free rollout converted to frames.
std::vector<Frame> rollout_frames(const ModelConfig& cfg, const ad::ParamStore& params,
                                  const Sequence& seq, RolloutMode mode);

/// Each prediction is the last frame available as input.
std::vector<Frame> copy_last_baseline(const Sequence& seq, RolloutMode mode);

}  // namespace pcpred
