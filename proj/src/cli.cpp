#include "pcpred/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "pcpred/train.hpp"

namespace pcpred::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  T out{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw UsageError("bad value '" + text + "' for " + key);
  }
  return out;
}

bool parse_flag(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw UsageError("bad value '" + text + "' for " + key);
}

RolloutMode parse_mode(const std::string& s) {
  if (s == "short") return RolloutMode::short_term;
  if (s == "long") return RolloutMode::long_term;
  throw UsageError("mode must be short or long, got '" + s + "'");
}

const char* mode_name(RolloutMode m) { return m == RolloutMode::short_term ? "short" : "long"; }

InitMode parse_init(const std::string& s) {
  if (s == "glorot") return InitMode::glorot;
  if (s == "zero-head") return InitMode::zero_head;
  if (s == "zero") return InitMode::zero;
  throw UsageError("init must be glorot, zero-head or zero, got '" + s + "'");
}

ModelConfig preset_config(const std::string& name) {
  if (name == "tiny") return ModelConfig::tiny();
  if (name == "full") return ModelConfig{};
  throw UsageError("preset must be tiny or full, got '" + name + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Model keys are collected verbatim for parse_model_config; the rest are
// run settings.
struct ConfigFile {
  std::map<std::string, std::string> settings;
  std::string model_text;
};

ConfigFile read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError(DataErrc::io_failure, "cannot open config '" + path + "'");
  ConfigFile out;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ": expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (is_model_config_key(key)) {
      out.model_text += line + "\n";
    } else {
      out.settings[key] = trim(line.substr(eq + 1));
    }
  }
  return out;
}

std::string sidecar_path(const std::string& ckpt) { return ckpt + ".cfg"; }

/// Model layout for an existing checkpoint: the sidecar, overridden by the
/// model keys of --config when given.
ModelConfig checkpoint_model(const std::string& ckpt, const std::string& config_path) {
  ModelConfig base;
  const std::string sidecar = sidecar_path(ckpt);
  if (fs::exists(sidecar)) {
    base = load_model_config(sidecar);
  } else if (config_path.empty()) {
    throw DataError(DataErrc::io_failure, "missing model config '" + sidecar + "'; pass --config");
  }
  if (config_path.empty()) return base;
  const ConfigFile file = read_config_file(config_path);
  if (!fs::exists(sidecar)) {
    auto it = file.settings.find("preset");
    base = preset_config(it == file.settings.end() ? "tiny" : it->second);
  }
  return parse_model_config(file.model_text, base);
}

std::vector<Sequence> load_sequences(const std::string& path) {
  if (fs::is_directory(path)) return load_dataset(path);
  return {read_sequence(path)};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void print_aggregate(std::ostream& out, const char* label, const AggregateMetrics& m) {
  out << label << "  cd_sum " << fmt(m.cd_sum) << "  cd_mean " << fmt(m.cd_mean) << "  emd_sum "
      << fmt(m.emd_sum) << "  emd_mean " << fmt(m.emd_mean) << "\n";
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  int digits = 1;
  std::size_t count = 0;
  std::size_t frames = 20;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t points_per_digit = 128;
  double speed_min = 3.0;
  double speed_max = 4.0;
  std::string glyphs;
};

int gen_data(const GenDataArgs& a, std::ostream& out) {
  const std::uint64_t seed = resolve_seed(a.seed);
  out << "seed: " << seed << "\n";
  std::vector<Glyph> glyphs;
  if (!a.glyphs.empty()) glyphs = load_idx_glyphs(a.glyphs);
  MnistGenConfig cfg;
  cfg.digits = a.digits;
  cfg.frames = a.frames;
  cfg.points_per_digit = a.points_per_digit;
  cfg.speed_min = a.speed_min;
  cfg.speed_max = a.speed_max;
  cfg.glyphs = glyphs.empty() ? nullptr : &glyphs;
  cfg.validate();
  fs::create_directories(a.out);
  for (std::size_t i = 0; i < a.count; ++i) {
    cfg.seed = mix_seed(seed, i);
    char name[32];
    std::snprintf(name, sizeof name, "seq_%05zu.pcsq", i);
    write_sequence(generate_mnist_sequence(cfg), (fs::path(a.out) / name).string());
  }
  out << "wrote " << a.count << " sequences to " << a.out << "\n";
  return ok;
}

struct TrainArgs {
  std::string config;
  std::optional<std::string> preset, train_dir, test_dir, ckpt, log, mode, init;
  std::optional<double> lr;
  std::optional<std::size_t> batch, iterations, eval_every, checkpoint_every;
  std::optional<std::uint64_t> seed;
  bool resume = false;
};

int train_command(const TrainArgs& a, std::ostream& out) {
  ConfigFile file;
  if (!a.config.empty()) file = read_config_file(a.config);
  auto setting = [&](const std::string& key) -> std::optional<std::string> {
    auto it = file.settings.find(key);
    if (it == file.settings.end()) return std::nullopt;
    return it->second;
  };

  TrainConfig tc;
  tc.lr = 1e-3;
  tc.iterations = 1000;
  std::string preset = "tiny";
  for (const auto& [key, value] : file.settings) {
    if (key == "preset") preset = value;
    else if (key == "lr") tc.lr = parse_value<double>(key, value);
    else if (key == "batch") tc.batch = parse_value<std::size_t>(key, value);
    else if (key == "iterations") tc.iterations = parse_value<std::size_t>(key, value);
    else if (key == "clip_lo") tc.clip_lo = parse_value<double>(key, value);
    else if (key == "clip_hi") tc.clip_hi = parse_value<double>(key, value);
    else if (key == "per_point_loss") tc.per_point_loss = parse_flag(key, value);
    else if (key == "mode") tc.mode = parse_mode(value);
    else if (key == "seed") tc.seed = parse_value<std::uint64_t>(key, value);
    else if (key == "eval_every") tc.eval_every = parse_value<std::size_t>(key, value);
    else if (key == "checkpoint_every") tc.checkpoint_every = parse_value<std::size_t>(key, value);
    else if (key == "train_dir") tc.train_dir = value;
    else if (key == "test_dir") tc.test_dir = value;
    else if (key == "checkpoint") tc.checkpoint_path = value;
    else if (key == "log") tc.log_path = value;
    else if (key == "init") tc.init = parse_init(value);
    else throw UsageError(a.config + ": unknown key '" + key + "'");
  }
  if (a.preset) preset = *a.preset;
  if (a.lr) tc.lr = *a.lr;
  if (a.batch) tc.batch = *a.batch;
  if (a.iterations) tc.iterations = *a.iterations;
  if (a.mode) tc.mode = parse_mode(*a.mode);
  if (a.seed) tc.seed = *a.seed;
  if (a.eval_every) tc.eval_every = *a.eval_every;
  if (a.checkpoint_every) tc.checkpoint_every = *a.checkpoint_every;
  if (a.train_dir) tc.train_dir = *a.train_dir;
  if (a.test_dir) tc.test_dir = *a.test_dir;
  if (a.ckpt) tc.checkpoint_path = *a.ckpt;
  if (a.log) tc.log_path = *a.log;
  if (a.init) tc.init = parse_init(*a.init);
  tc.seed = resolve_seed(tc.seed);
  out << "seed: " << tc.seed << "\n";

  if (tc.checkpoint_path.empty()) throw UsageError("train needs --ckpt");
  const ModelConfig model = parse_model_config(file.model_text, preset_config(preset));
  tc.validate();

  TrainState state;
  if (a.resume && fs::exists(tc.checkpoint_path)) {
    state = load_train_state(model, tc.checkpoint_path, tc.lr);
    out << "resuming at iteration " << state.iteration << "\n";
  } else {
    state = init_train_state(model, tc);
  }
  std::vector<Sequence> train_set, test_set;
  if (tc.iterations > state.iteration) {
    if (tc.train_dir.empty()) throw UsageError("train needs --train-dir");
    train_set = load_dataset(tc.train_dir);
    if (!tc.test_dir.empty()) test_set = load_dataset(tc.test_dir);
  }
  save_model_config(model, sidecar_path(tc.checkpoint_path));

  TrainHooks hooks;
  hooks.on_iteration = [&](const IterationReport& r, const TrainState&) {
    if (!r.test && r.iteration != tc.iterations &&
        !(tc.eval_every && r.iteration % tc.eval_every == 0)) {
      return true;
    }
    out << "iteration " << r.iteration << "  train cd_mean " << fmt(r.train.cd_mean)
        << "  emd_mean " << fmt(r.train.emd_mean);
    if (r.test) out << "  test cd_mean " << fmt(r.test->cd_mean) << "  emd_mean " << fmt(r.test->emd_mean);
    out << std::endl;
    return true;
  };
  if (!train_set.empty()) train(tc, model, train_set, test_set, state, hooks);
  save_train_state(state, tc.checkpoint_path);
  out << "checkpoint: " << tc.checkpoint_path << " (iteration " << state.iteration << ")\n";
  return ok;
}

struct PredictArgs {
  std::string ckpt, config, seq, out, mode = "short";
  std::uint64_t seed = 0;
};

void check_point_count(const TrainState& state, const std::vector<Sequence>& seqs) {
  for (const auto& s : seqs) {
    if (state.point_count && s.point_count() != state.point_count) {
      throw DataError(DataErrc::inconsistent_point_count,
                      "model was trained on " + std::to_string(state.point_count) +
                          "-point clouds, data has " + std::to_string(s.point_count()));
    }
  }
}

int predict_command(const PredictArgs& a, std::ostream& out) {
  out << "seed: " << resolve_seed(a.seed) << "\n";
  const RolloutMode mode = parse_mode(a.mode);
  const ModelConfig model = checkpoint_model(a.ckpt, a.config);
  const TrainState state = load_train_state(model, a.ckpt, 0.0);
  const Sequence seq = read_sequence(a.seq);
  check_point_count(state, {seq});
  Sequence pred{rollout_frames(model, state.params, seq, mode)};
  write_sequence(pred, a.out);
  out << "wrote " << pred.length() << " predicted frames to " << a.out << "\n";
  return ok;
}

struct EvalArgs {
  std::string truth, pred, ckpt, config, csv, mode = "short", metrics = "cd,emd";
  bool normalize = false;
  std::uint64_t seed = 0;
};

int eval_command(const EvalArgs& a, std::ostream& out) {
  out << "seed: " << resolve_seed(a.seed) << "\n";
  if (a.pred.empty() == a.ckpt.empty()) throw UsageError("eval needs exactly one of --pred or --ckpt");
  bool want_cd = false, want_emd = false;
  {
    std::stringstream ss(a.metrics);
    std::string m;
    while (std::getline(ss, m, ',')) {
      m = trim(m);
      if (m == "cd") want_cd = true;
      else if (m == "emd") want_emd = true;
      else throw UsageError("unknown metric '" + m + "'");
    }
    if (!want_cd && !want_emd) throw UsageError("--metrics selects nothing");
  }
  const RolloutMode mode = parse_mode(a.mode);
  const std::vector<Sequence> truth = load_sequences(a.truth);

  EvalReport report;
  std::optional<EvalReport> baseline;
  if (!a.pred.empty()) {
    const std::vector<Sequence> pred = load_sequences(a.pred);
    std::vector<std::vector<Frame>> frames;
    for (const auto& p : pred) frames.push_back(p.frames);
    report = score_predictions(frames, truth, a.normalize);
    print_aggregate(out, "predictions", report.aggregate);
  } else {
    const ModelConfig model = checkpoint_model(a.ckpt, a.config);
    const TrainState state = load_train_state(model, a.ckpt, 0.0);
    check_point_count(state, truth);
    report = evaluate(model, state.params, truth, mode, a.normalize);
    baseline = evaluate_copy_last(truth, mode, a.normalize);
    out << "mode " << mode_name(mode) << ", " << truth.size() << " sequences\n";
    print_aggregate(out, "model    ", report.aggregate);
    print_aggregate(out, "copy-last", baseline->aggregate);
  }

  if (!a.csv.empty()) {
    std::ofstream os(a.csv, std::ios::trunc);
    if (!os) throw DataError(DataErrc::io_failure, "cannot write '" + a.csv + "'");
    os << "sequence_id,frame" << (want_cd ? ",cd" : "") << (want_emd ? ",emd" : "") << "\n";
    for (const auto& s : report.sequences) {
      for (std::size_t i = 0; i < s.frames.size(); ++i) {
        os << s.sequence_id << ',' << s.frames[i];
        if (want_cd) os << ',' << fmt(s.cd[i]);
        if (want_emd) os << ',' << fmt(s.emd[i]);
        os << "\n";
      }
    }
  }
  return ok;
}

struct ExportArgs {
  std::string seq, out;
  std::size_t frame = 0;
  std::uint64_t seed = 0;
};

int export_command(const ExportArgs& a, std::ostream& out) {
  out << "seed: " << resolve_seed(a.seed) << "\n";
  const Sequence seq = read_sequence(a.seq);
  if (a.frame >= seq.length()) {
    throw DataError(DataErrc::invalid_value, "frame " + std::to_string(a.frame) + " out of range (" +
                                                 std::to_string(seq.length()) + " frames)");
  }
  export_ply(seq.frames[a.frame], a.out);
  out << "wrote " << a.out << "\n";
  return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Point cloud sequence prediction", "pcpred"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate moving-digit point cloud sequences");
  gen_cmd->add_option("--digits", gen.digits, "Digits per sequence")->check(CLI::Range(1, 2));
  gen_cmd->add_option("--count", gen.count, "Number of sequences")->required();
  gen_cmd->add_option("--frames", gen.frames, "Frames per sequence");
  gen_cmd->add_option("--seed", gen.seed, "Base seed");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--points-per-digit", gen.points_per_digit, "Points sampled per digit");
  gen_cmd->add_option("--speed-min", gen.speed_min, "Minimum speed in pixels per frame");
  gen_cmd->add_option("--speed-max", gen.speed_max, "Maximum speed in pixels per frame");
  gen_cmd->add_option("--glyphs", gen.glyphs, "IDX3 file of 28x28 digit rasters");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "Key/value config file");
  train_cmd->add_option("--preset", tr.preset, "Base architecture: tiny or full");
  train_cmd->add_option("--train-dir", tr.train_dir, "Directory of training sequences");
  train_cmd->add_option("--test-dir", tr.test_dir, "Directory of evaluation sequences");
  train_cmd->add_option("--ckpt", tr.ckpt, "Checkpoint file to write");
  train_cmd->add_option("--log", tr.log, "CSV metrics log");
  train_cmd->add_option("--lr", tr.lr, "Adam learning rate");
  train_cmd->add_option("--batch", tr.batch, "Sequences per iteration");
  train_cmd->add_option("--iters", tr.iterations, "Total iterations");
  train_cmd->add_option("--mode", tr.mode, "Rollout mode: short or long");
  train_cmd->add_option("--seed", tr.seed, "Seed for initialization and batches");
  train_cmd->add_option("--eval-every", tr.eval_every, "Logging and evaluation cadence");
  train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "Checkpoint cadence");
  train_cmd->add_option("--init", tr.init, "Initialization: glorot, zero-head or zero");
  train_cmd->add_flag("--resume", tr.resume, "Continue from --ckpt if it exists");

  PredictArgs pr;
  auto* predict_cmd = app.add_subcommand("predict", "Write predicted frames for one sequence");
  predict_cmd->add_option("--ckpt", pr.ckpt, "Checkpoint")->required();
  predict_cmd->add_option("--config", pr.config, "Model config overriding the checkpoint sidecar");
  predict_cmd->add_option("--seq", pr.seq, "Input sequence")->required();
  predict_cmd->add_option("--mode", pr.mode, "Rollout mode: short or long");
  predict_cmd->add_option("--out", pr.out, "Output .pcsq file")->required();
  predict_cmd->add_option("--seed", pr.seed, "Seed (unused by inference, printed)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions or a checkpoint");
  eval_cmd->add_option("--truth", ev.truth, "Ground-truth sequence file or directory")->required();
  eval_cmd->add_option("--pred", ev.pred, "Predicted sequence file or directory");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint to roll out (also reports Copy-Last)");
  eval_cmd->add_option("--config", ev.config, "Model config overriding the checkpoint sidecar");
  eval_cmd->add_option("--mode", ev.mode, "Rollout mode: short or long");
  eval_cmd->add_option("--metrics", ev.metrics, "Comma-separated subset of cd,emd");
  eval_cmd->add_option("--csv", ev.csv, "Per-frame CSV output");
  eval_cmd->add_flag("--normalize", ev.normalize, "Divide metrics by the point count");
  eval_cmd->add_option("--seed", ev.seed, "Seed (unused by evaluation, printed)");

  ExportArgs ex;
  auto* export_cmd = app.add_subcommand("export-ply", "Write one frame as ASCII PLY");
  export_cmd->add_option("--seq", ex.seq, "Sequence file")->required();
  export_cmd->add_option("--frame", ex.frame, "Frame index")->required();
  export_cmd->add_option("--out", ex.out, "Output .ply file")->required();
  export_cmd->add_option("--seed", ex.seed, "Seed (unused, printed)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return usage_error;
  }

  try {
    if (gen_cmd->parsed()) return gen_data(gen, out);
    if (train_cmd->parsed()) return train_command(tr, out);
    if (predict_cmd->parsed()) return predict_command(pr, out);
    if (eval_cmd->parsed()) return eval_command(ev, out);
    return export_command(ex, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return numeric_error;
  } catch (const std::domain_error& e) {
    err << "numeric error: " << e.what() << "\n";
    return numeric_error;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return usage_error;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const ad::ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return usage_error;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return data_error;
  }
}

}  // namespace pcpred::cli
