#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcpred/data.hpp"
#include "pcpred/metrics.hpp"
#include "pcpred/model.hpp"
#include "pcpred/optim.hpp"

namespace pcpred {

struct TrainConfig {
  double lr = 1e-5;
  std::size_t batch = 4;
  std::size_t iterations = 1000;
  double clip_lo = -5.0;
  double clip_hi = 5.0;
  bool per_point_loss = false;         // divide the loss by the cloud size
  RolloutMode mode = RolloutMode::short_term;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;        // 0 logs only the final iteration
  std::size_t checkpoint_every = 0;    // 0 writes only at the end
  std::string train_dir;
  std::string test_dir;
  std::string checkpoint_path;         // empty: no checkpoint files
  std::string log_path;                // empty: no CSV log
  InitMode init = InitMode::glorot;

  void validate() const;
};

/// Applies PCSEQ_SEED from the environment when set.
std::uint64_t resolve_seed(std::uint64_t configured);

/// Everything needed to continue training bit-exactly.
struct TrainState {
  ad::ParamStore params;
  ad::AdamState adam;
  std::size_t iteration = 0;    // completed iterations
  std::size_t point_count = 0;  // cloud size seen in training; 0 if unknown
};

TrainState init_train_state(const ModelConfig& model, const TrainConfig& cfg);

void save_train_state(const TrainState& state, const std::string& path);
/// Checks every parameter against `model`; Adam moments are optional so a
/// bare parameter file loads as a fresh optimizer.
TrainState load_train_state(const ModelConfig& model, const std::string& path, double lr);

class NumericError : public std::runtime_error {
 public:
  NumericError(std::size_t iteration, std::vector<std::size_t> batch, const std::string& detail);
  std::size_t iteration() const noexcept { return iteration_; }
  const std::vector<std::size_t>& batch() const noexcept { return batch_; }

 private:
  std::size_t iteration_;
  std::vector<std::size_t> batch_;
};

/// Indices of the sequences used at `iteration`; depends only on the seed
/// and the iteration number.
std::vector<std::size_t> sample_batch(std::uint64_t seed, std::size_t iteration,
                                      std::size_t batch, std::size_t dataset_size);

/// Summed loss over a rollout's predicted frames.
struct RolloutLoss {
  ad::Tensor total;  // scalar node
  double cd = 0.0;
  double emd = 0.0;
  std::size_t frames = 0;
};

RolloutLoss rollout_loss(const ModelConfig& model, const ad::ParamStore& params, const Sequence& seq,
                         RolloutMode mode, RolloutObserver* observer = nullptr);

struct AggregateMetrics {
  double cd_sum = 0.0;    // sum over predicted frames, averaged over sequences
  double cd_mean = 0.0;   // per-frame average, averaged over sequences
  double emd_sum = 0.0;
  double emd_mean = 0.0;
};

struct IterationReport {
  std::size_t iteration = 0;  // 1-based number of the finished iteration
  std::vector<std::size_t> batch;
  AggregateMetrics train;
  std::optional<AggregateMetrics> test;  // filled on evaluation iterations
};

struct TrainHooks {
  /// Called after every iteration; returning false stops training.
  std::function<bool(const IterationReport&, const TrainState&)> on_iteration;
  RolloutObserver* observer = nullptr;
};

/// Runs iterations state.iteration + 1 .. cfg.iterations.
void train(const TrainConfig& cfg, const ModelConfig& model, const std::vector<Sequence>& train_set,
           const std::vector<Sequence>& test_set, TrainState& state, const TrainHooks& hooks = {});

struct SequenceMetrics {
  std::size_t sequence_id = 0;
  std::vector<std::size_t> frames;  // target frame indices
  std::vector<double> cd;
  std::vector<double> emd;

  double cd_sum() const;
  double emd_sum() const;
};

struct EvalReport {
  std::vector<SequenceMetrics> sequences;
  AggregateMetrics aggregate;
};

/// Scores predictions against the last frames of each truth sequence.
/// `normalize` divides every metric by the point count.
EvalReport score_predictions(const std::vector<std::vector<Frame>>& predictions,
                             const std::vector<Sequence>& truth, bool normalize = false);

EvalReport evaluate(const ModelConfig& model, const ad::ParamStore& params,
                    const std::vector<Sequence>& seqs, RolloutMode mode, bool normalize = false);
EvalReport evaluate_copy_last(const std::vector<Sequence>& seqs, RolloutMode mode,
                              bool normalize = false);

std::vector<Sequence> load_dataset(const std::string& dir);

}  // namespace pcpred
