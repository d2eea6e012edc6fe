#include "pcpred/train.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>

namespace pcpred {

using ad::Tensor;

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be >= 0");
  if (batch == 0) throw std::invalid_argument("batch size must be positive");
  if (!(clip_lo <= clip_hi)) throw std::invalid_argument("clip bounds must satisfy lo <= hi");
}

std::uint64_t resolve_seed(std::uint64_t configured) {
  const char* env = std::getenv("PCSEQ_SEED");
  if (!env || !*env) return configured;
  std::uint64_t out = 0;
  const char* end = env + std::char_traits<char>::length(env);
  auto [ptr, ec] = std::from_chars(env, end, out);
  if (ec != std::errc() || ptr != end) {
    throw std::invalid_argument(std::string("PCSEQ_SEED is not an unsigned integer: ") + env);
  }
  return out;
}

TrainState init_train_state(const ModelConfig& model, const TrainConfig& cfg) {
  TrainState s;
  s.params = init_model_params(model, cfg.seed, cfg.init);
  s.adam = ad::make_adam(s.params, cfg.lr);
  return s;
}

namespace {

const std::string kFirstMoment = "adam.m/";
const std::string kSecondMoment = "adam.v/";

Tensor meta_value(double v) { return Tensor::from_values({1}, {v}); }

}  // namespace

void save_train_state(const TrainState& state, const std::string& path) {
  ad::NamedTensors out;
  const auto& entries = state.params.entries();
  for (const auto& [name, t] : entries) out.emplace_back(name, t);
  for (std::size_t i = 0; i < entries.size() && i < state.adam.first_moment.size(); ++i) {
    const ad::Shape& shape = entries[i].second.shape();
    out.emplace_back(kFirstMoment + entries[i].first, Tensor::from_values(shape, state.adam.first_moment[i]));
    out.emplace_back(kSecondMoment + entries[i].first, Tensor::from_values(shape, state.adam.second_moment[i]));
  }
  out.emplace_back("meta.adam_step", meta_value(static_cast<double>(state.adam.step)));
  out.emplace_back("meta.iteration", meta_value(static_cast<double>(state.iteration)));
  out.emplace_back("meta.point_count", meta_value(static_cast<double>(state.point_count)));
  const std::string tmp = path + ".tmp";
  ad::save_checkpoint(tmp, out);
  std::filesystem::rename(tmp, path);
}

TrainState load_train_state(const ModelConfig& model, const std::string& path, double lr) {
  const ad::NamedTensors file = ad::load_checkpoint(path);
  TrainState s;
  s.params = init_model_params(model, 0, InitMode::zero);
  s.adam = ad::make_adam(s.params, lr);

  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : file) by_name[name] = &t;
  auto fetch = [&](const std::string& name, const ad::Shape& shape, bool required) -> const Tensor* {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (required) throw ad::ShapeError("load_train_state", "checkpoint lacks '" + name + "'");
      return nullptr;
    }
    if (it->second->shape() != shape) {
      throw ad::ShapeError("load_train_state", "'" + name + "' has shape " +
                                                   ad::shape_string(it->second->shape()) +
                                                   ", model expects " + ad::shape_string(shape));
    }
    return it->second;
  };

  auto& entries = s.params.entries();
  bool has_moments = true;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& [name, t] = entries[i];
    const Tensor* src = fetch(name, t.shape(), true);
    std::copy(src->values().begin(), src->values().end(), t.mutable_values().begin());
    const Tensor* m = fetch(kFirstMoment + name, t.shape(), false);
    const Tensor* v = fetch(kSecondMoment + name, t.shape(), false);
    if (m && v) {
      s.adam.first_moment[i].assign(m->values().begin(), m->values().end());
      s.adam.second_moment[i].assign(v->values().begin(), v->values().end());
    } else {
      has_moments = false;
    }
  }
  for (const auto& [name, t] : file) {
    const bool known = s.params.contains(name) || name.starts_with("adam.") || name.starts_with("meta.");
    if (!known) throw ad::ShapeError("load_train_state", "unexpected tensor '" + name + "'");
  }
  auto meta = [&](const std::string& name) -> std::size_t {
    const Tensor* t = fetch(name, {1}, false);
    return t ? static_cast<std::size_t>(t->values()[0]) : 0;
  };
  if (has_moments) {
    s.adam.step = meta("meta.adam_step");
    s.iteration = meta("meta.iteration");
  } else {
    s.adam = ad::make_adam(s.params, lr);
  }
  s.point_count = meta("meta.point_count");
  return s;
}

namespace {

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + std::to_string(ids[i]);
  return out;
}

}  // namespace

NumericError::NumericError(std::size_t iteration, std::vector<std::size_t> batch,
                           const std::string& detail)
    : std::runtime_error("non-finite value at iteration " + std::to_string(iteration) +
                         " (batch " + join_ids(batch) + "): " + detail),
      iteration_(iteration),
      batch_(std::move(batch)) {}

std::vector<std::size_t> sample_batch(std::uint64_t seed, std::size_t iteration, std::size_t batch,
                                      std::size_t dataset_size) {
  if (dataset_size == 0) throw std::invalid_argument("empty training set");
  Rng rng(mix_seed(seed, iteration));
  std::vector<std::size_t> out(batch);
  for (auto& id : out) id = static_cast<std::size_t>(rng.below(dataset_size));
  return out;
}

RolloutLoss rollout_loss(const ModelConfig& model, const ad::ParamStore& params, const Sequence& seq,
                         RolloutMode mode, RolloutObserver* observer) {
  RolloutLoss out;
  for (const RolloutStep& step : rollout(model, params, seq, mode, observer)) {
    LossReport r;
    Tensor l = point_set_loss_node(step.points, seq.frames[step.target].view(), &r);
    out.total = out.total.defined() ? ad::add(out.total, l) : l;
    out.cd += r.cd;
    out.emd += r.emd;
    ++out.frames;
  }
  return out;
}

namespace {

class CsvLog {
 public:
  explicit CsvLog(const std::string& path) {
    if (path.empty()) return;
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    os_.open(path, std::ios::app);
    if (!os_) throw DataError(DataErrc::io_failure, "cannot write log '" + path + "'");
    if (fresh) os_ << "iteration,split,cd_sum,cd_mean,emd_sum,emd_mean\n";
  }

  void row(std::size_t iteration, const char* split, const AggregateMetrics& m) {
    if (!os_.is_open()) return;
    os_ << iteration << ',' << split << ',' << fmt(m.cd_sum) << ',' << fmt(m.cd_mean) << ','
        << fmt(m.emd_sum) << ',' << fmt(m.emd_mean) << '\n';
    os_.flush();
  }

 private:
  static std::string fmt(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
  }

  std::ofstream os_;
};

bool gradients_finite(const ad::ParamStore& params) {
  for (const auto& [name, t] : params.entries()) {
    for (double g : t.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  return true;
}

}  // namespace

void train(const TrainConfig& cfg, const ModelConfig& model, const std::vector<Sequence>& train_set,
           const std::vector<Sequence>& test_set, TrainState& state, const TrainHooks& hooks) {
  cfg.validate();
  model.validate();
  validate_model_params(model, state.params);
  if (train_set.empty()) throw std::invalid_argument("empty training set");
  state.adam.lr = cfg.lr;
  if (state.point_count == 0) state.point_count = train_set.front().point_count();

  CsvLog log(cfg.log_path);
  for (std::size_t it = state.iteration + 1; it <= cfg.iterations; ++it) {
    IterationReport report;
    report.iteration = it;
    report.batch = sample_batch(cfg.seed, it, cfg.batch, train_set.size());
    const double share = 1.0 / static_cast<double>(report.batch.size());
    const double loss_weight = cfg.per_point_loss ? share / static_cast<double>(state.point_count) : share;

    state.params.zero_grad();
    try {
      for (std::size_t id : report.batch) {
        const RolloutLoss rl = rollout_loss(model, state.params, train_set[id], cfg.mode, hooks.observer);
        if (!std::isfinite(rl.total.item())) throw std::domain_error("loss is not finite");
        ad::backward(ad::scale(rl.total, loss_weight));
        const double frames = static_cast<double>(rl.frames);
        report.train.cd_sum += share * rl.cd;
        report.train.cd_mean += share * rl.cd / frames;
        report.train.emd_sum += share * rl.emd;
        report.train.emd_mean += share * rl.emd / frames;
      }
    } catch (const std::domain_error& e) {
      throw NumericError(it, report.batch, e.what());
    }
    if (!gradients_finite(state.params)) throw NumericError(it, report.batch, "gradient is not finite");

    ad::clip_gradients(state.params, cfg.clip_lo, cfg.clip_hi);
    ad::adam_step(state.adam, state.params);
    state.iteration = it;

    const bool last = it == cfg.iterations;
    const bool eval_due = last || (cfg.eval_every && it % cfg.eval_every == 0);
    if (eval_due) {
      if (!test_set.empty()) report.test = evaluate(model, state.params, test_set, cfg.mode).aggregate;
      log.row(it, "train", report.train);
      if (report.test) log.row(it, "test", *report.test);
    }
    const bool keep_going = !hooks.on_iteration || hooks.on_iteration(report, state);
    const bool ckpt_due = last || !keep_going || (cfg.checkpoint_every && it % cfg.checkpoint_every == 0);
    if (ckpt_due && !cfg.checkpoint_path.empty()) save_train_state(state, cfg.checkpoint_path);
    if (!keep_going) break;
  }
}

double SequenceMetrics::cd_sum() const {
  double s = 0.0;
  for (double v : cd) s += v;
  return s;
}

double SequenceMetrics::emd_sum() const {
  double s = 0.0;
  for (double v : emd) s += v;
  return s;
}

EvalReport score_predictions(const std::vector<std::vector<Frame>>& predictions,
                             const std::vector<Sequence>& truth, bool normalize) {
  if (predictions.size() != truth.size()) {
    throw std::invalid_argument("prediction and truth sequence counts differ");
  }
  EvalReport report;
  for (std::size_t s = 0; s < truth.size(); ++s) {
    const auto& pred = predictions[s];
    const auto& frames = truth[s].frames;
    if (pred.size() > frames.size()) {
      throw DataError(DataErrc::inconsistent_point_count,
                      "sequence " + std::to_string(s) + " has more predictions than frames");
    }
    SequenceMetrics m;
    m.sequence_id = s;
    const std::size_t offset = frames.size() - pred.size();
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const Frame& target = frames[offset + i];
      if (pred[i].size() != target.size()) {
        throw DataError(DataErrc::inconsistent_point_count,
                        "sequence " + std::to_string(s) + " frame " + std::to_string(offset + i) +
                            ": " + std::to_string(pred[i].size()) + " predicted points vs " +
                            std::to_string(target.size()));
      }
      const double scale = normalize ? 1.0 / static_cast<double>(target.size()) : 1.0;
      m.frames.push_back(offset + i);
      m.cd.push_back(scale * chamfer(pred[i].view(), target.view()));
      m.emd.push_back(scale * emd_approx(pred[i].view(), target.view()).cost);
    }
    report.sequences.push_back(std::move(m));
  }
  const double share = truth.empty() ? 0.0 : 1.0 / static_cast<double>(truth.size());
  for (const auto& m : report.sequences) {
    const double frames = m.cd.empty() ? 1.0 : static_cast<double>(m.cd.size());
    report.aggregate.cd_sum += share * m.cd_sum();
    report.aggregate.cd_mean += share * m.cd_sum() / frames;
    report.aggregate.emd_sum += share * m.emd_sum();
    report.aggregate.emd_mean += share * m.emd_sum() / frames;
  }
  return report;
}

EvalReport evaluate(const ModelConfig& model, const ad::ParamStore& params,
                    const std::vector<Sequence>& seqs, RolloutMode mode, bool normalize) {
  std::vector<std::vector<Frame>> preds;
  for (const auto& s : seqs) preds.push_back(rollout_frames(model, params, s, mode));
  return score_predictions(preds, seqs, normalize);
}

EvalReport evaluate_copy_last(const std::vector<Sequence>& seqs, RolloutMode mode, bool normalize) {
  std::vector<std::vector<Frame>> preds;
  for (const auto& s : seqs) preds.push_back(copy_last_baseline(s, mode));
  return score_predictions(preds, seqs, normalize);
}

std::vector<Sequence> load_dataset(const std::string& dir) {
  const auto paths = list_sequences(dir);
  if (paths.empty()) throw DataError(DataErrc::io_failure, "no .pcsq files in '" + dir + "'");
  std::vector<Sequence> out;
  for (const auto& p : paths) out.push_back(read_sequence(p.string()));
  return out;
}

}  // namespace pcpred
