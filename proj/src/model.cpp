#include "pcpred/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pcpred {

using ad::Tensor;

namespace {

MatrixView view(const Tensor& t) { return {t.values(), t.rows(), t.cols()}; }

std::vector<std::size_t> repeat_each(std::size_t n, std::size_t times) {
  std::vector<std::size_t> out;
  out.reserve(n * times);
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), times, i);
  return out;
}

// First layer evaluated as per_query[i] + per_neighbor[j] (the concatenated
// edge input times the first weight, split into the parts that depend on
// each endpoint), then the remaining layers, then a max over each query's
// `group` edges.
Tensor pooled_edge_mlp(const ad::MlpSpec& spec, const ad::MlpParams& p, const Tensor& per_query,
                       const Tensor& per_neighbor, const std::vector<std::size_t>& query_index,
                       const std::vector<std::size_t>& neighbor_index, std::size_t group) {
  Tensor x = ad::add(ad::gather_rows(per_query, query_index),
                     ad::gather_rows(per_neighbor, neighbor_index));
  if (spec.activations[0] == ad::Activation::relu) x = ad::relu(x);
  for (std::size_t l = 1; l < p.weights.size(); ++l) {
    x = ad::add_bias(ad::matmul(x, p.weights[l]), p.biases[l]);
    if (spec.activations[l] == ad::Activation::relu) x = ad::relu(x);
  }
  return ad::max_pool_groups(x, group);
}

void require_input_width(const char* block, const ad::MlpSpec& spec, std::size_t expected) {
  if (spec.input_width != expected) {
    throw ad::ShapeError(block, "edge input width " + std::to_string(expected) +
                                    " but MLP expects " + std::to_string(spec.input_width));
  }
}

void require_rows(const char* block, const Tensor& t, std::size_t rows, const char* what) {
  if (t.defined() && (t.rank() != 2 || t.rows() != rows)) {
    throw ad::ShapeError(block, std::string(what) + " has shape " + ad::shape_string(t.shape()) +
                                    ", expected " + std::to_string(rows) + " rows");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// config

std::size_t ModelConfig::feature_width() const {
  if (baseline == CellKind::point_rnn || gnn_layers.empty()) return 0;
  return gnn_layers.back().channels;
}

std::size_t ModelConfig::cell_k(std::size_t cell) const {
  return baseline == CellKind::point_rnn ? point_rnn_k.at(cell) : cells.at(cell).k;
}

std::vector<std::size_t> ModelConfig::level_sizes(std::size_t n) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    out.push_back(hierarchical ? static_cast<std::size_t>(std::floor(static_cast<double>(n) *
                                                                     sg_ratios[c] + 1e-9))
                               : n);
  }
  return out;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (cells.empty()) fail("at least one recurrent cell is required");
  for (const auto& c : cells) {
    if (c.k == 0 || c.channels == 0) fail("cell k and channels must be positive");
    if (c.channels != cells.front().channels) fail("all cells must share one state width");
  }
  if (baseline == CellKind::graph_rnn) {
    if (gnn_layers.empty()) fail("graph_rnn needs at least one GNN layer");
  } else if (point_rnn_k.size() != cells.size()) {
    fail("point_rnn_k needs one entry per cell");
  }
  for (const auto& l : gnn_layers) {
    if (l.k == 0 || l.channels == 0) fail("GNN k and channels must be positive");
  }
  for (std::size_t k : point_rnn_k) {
    if (k == 0) fail("point_rnn_k entries must be positive");
  }
  if (hierarchical) {
    if (sg_ratios.size() != cells.size()) fail("sg_ratios needs one entry per cell");
    double prev = 1.0;
    for (double r : sg_ratios) {
      if (!(r > 0.0 && r <= prev)) fail("sg_ratios must be non-increasing in (0, 1]");
      prev = r;
    }
  }
  if (sg_k == 0 || interp_k == 0) fail("sg_k and interp_k must be positive");
  if (fc_widths.empty() || fc_widths.back() != 3) fail("fc_widths must end with 3");
  for (std::size_t w : fc_widths) {
    if (w == 0) fail("fc widths must be positive");
  }
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.gnn_layers = {{16, 16}, {16, 32}, {8, 32}};
  c.cells = {{8, 32}, {8, 32}, {8, 32}};
  c.fc_widths = {32, 3};
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("model config: bad integer '" + v + "' for " + key);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("model config: bad number '" + v + "' for " + key);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("model config: bad boolean '" + v + "' for " + key);
}

std::vector<LayerSpec> parse_layers(const std::string& key, const std::string& v) {
  std::vector<LayerSpec> out;
  for (const auto& item : split_list(v)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw std::invalid_argument("model config: " + key + " entries are k:channels");
    }
    out.push_back({parse_size(key, trim(item.substr(0, colon))),
                   parse_size(key, trim(item.substr(colon + 1)))});
  }
  return out;
}

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    out += fmt(items[i]);
  }
  return out;
}

}  // namespace

bool is_model_config_key(const std::string& key) {
  static const char* const keys[] = {"gnn_layers", "cells",     "point_rnn_k",  "sg_k",
                                     "sg_ratios",  "interp_k",  "fc_widths",    "color_head",
                                     "hierarchical", "baseline", "fps_start"};
  return std::find(std::begin(keys), std::end(keys), key) != std::end(keys);
}

ModelConfig parse_model_config(const std::string& text, ModelConfig base) {
  ModelConfig cfg = std::move(base);
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("model config: expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "gnn_layers") {
      cfg.gnn_layers = parse_layers(key, value);
    } else if (key == "cells") {
      cfg.cells = parse_layers(key, value);
    } else if (key == "point_rnn_k") {
      cfg.point_rnn_k.clear();
      for (const auto& s : split_list(value)) cfg.point_rnn_k.push_back(parse_size(key, s));
    } else if (key == "sg_k") {
      cfg.sg_k = parse_size(key, value);
    } else if (key == "sg_ratios") {
      cfg.sg_ratios.clear();
      for (const auto& s : split_list(value)) cfg.sg_ratios.push_back(parse_double(key, s));
    } else if (key == "interp_k") {
      cfg.interp_k = parse_size(key, value);
    } else if (key == "fc_widths") {
      cfg.fc_widths.clear();
      for (const auto& s : split_list(value)) cfg.fc_widths.push_back(parse_size(key, s));
    } else if (key == "color_head") {
      cfg.color_head = parse_bool(key, value);
    } else if (key == "hierarchical") {
      cfg.hierarchical = parse_bool(key, value);
    } else if (key == "baseline") {
      if (value == "graph_rnn") {
        cfg.baseline = CellKind::graph_rnn;
      } else if (value == "point_rnn") {
        cfg.baseline = CellKind::point_rnn;
      } else {
        throw std::invalid_argument("model config: baseline is graph_rnn or point_rnn");
      }
    } else if (key == "fps_start") {
      cfg.fps_start = parse_size(key, value);
    } else {
      throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

std::string format_model_config(const ModelConfig& cfg) {
  auto layer = [](const LayerSpec& l) { return std::to_string(l.k) + ":" + std::to_string(l.channels); };
  auto size = [](std::size_t v) { return std::to_string(v); };
  std::ostringstream os;
  os << "gnn_layers = " << join(cfg.gnn_layers, layer) << "\n"
     << "cells = " << join(cfg.cells, layer) << "\n"
     << "point_rnn_k = " << join(cfg.point_rnn_k, size) << "\n"
     << "sg_k = " << cfg.sg_k << "\n"
     << "sg_ratios = " << join(cfg.sg_ratios, format_double) << "\n"
     << "interp_k = " << cfg.interp_k << "\n"
     << "fc_widths = " << join(cfg.fc_widths, size) << "\n"
     << "color_head = " << (cfg.color_head ? "true" : "false") << "\n"
     << "hierarchical = " << (cfg.hierarchical ? "true" : "false") << "\n"
     << "baseline = " << (cfg.baseline == CellKind::graph_rnn ? "graph_rnn" : "point_rnn") << "\n"
     << "fps_start = " << cfg.fps_start << "\n";
  return os.str();
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open model config '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_model_config(ss.str());
}

void save_model_config(const ModelConfig& cfg, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write model config '" + path + "'");
  os << format_model_config(cfg);
}

// ---------------------------------------------------------------------------
// parameters

ad::MlpSpec gnn_mlp_spec(std::size_t prev_width, std::size_t channels) {
  return {prev_width + 9, {channels, channels}, {ad::Activation::relu, ad::Activation::none}};
}

ad::MlpSpec graph_cell_mlp_spec(std::size_t state_width, std::size_t feature_width) {
  return {2 * state_width + 3 + feature_width + 1,
          {state_width, state_width},
          {ad::Activation::relu, ad::Activation::none}};
}

ad::MlpSpec point_cell_mlp_spec(std::size_t state_width) {
  return {2 * state_width + 3, {state_width, state_width},
          {ad::Activation::relu, ad::Activation::none}};
}

ad::MlpSpec sp_mlp_spec(std::size_t state_width, std::size_t skip_width) {
  return {state_width + skip_width, {state_width}, {ad::Activation::relu}};
}

ad::MlpSpec fc_mlp_spec(std::size_t state_width, const std::vector<std::size_t>& widths) {
  ad::MlpSpec s{state_width, widths, {}};
  s.activations.assign(widths.size(), ad::Activation::relu);
  s.activations.back() = ad::Activation::none;
  return s;
}

namespace {

struct BlockSpecs {
  std::vector<ad::MlpSpec> gnn, cells, sp;
  ad::MlpSpec fc, fc_color;
};

BlockSpecs block_specs(const ModelConfig& cfg) {
  BlockSpecs b;
  const std::size_t ds = cfg.state_width();
  if (cfg.baseline == CellKind::graph_rnn) {
    std::size_t prev = 0;
    for (const auto& l : cfg.gnn_layers) {
      b.gnn.push_back(gnn_mlp_spec(prev, l.channels));
      prev = l.channels;
    }
  }
  for (std::size_t c = 0; c < cfg.cells.size(); ++c) {
    b.cells.push_back(cfg.baseline == CellKind::graph_rnn
                          ? graph_cell_mlp_spec(ds, cfg.feature_width())
                          : point_cell_mlp_spec(ds));
  }
  if (cfg.hierarchical) {
    const std::size_t stages = cfg.cells.size();
    for (std::size_t s = 0; s < stages; ++s) b.sp.push_back(sp_mlp_spec(ds, s + 1 < stages ? ds : 0));
  }
  b.fc = fc_mlp_spec(ds, cfg.fc_widths);
  b.fc_color = fc_mlp_spec(ds, cfg.fc_widths);
  return b;
}

std::string gnn_name(std::size_t l) { return "gnn." + std::to_string(l); }
std::string cell_name(std::size_t c) { return "cell." + std::to_string(c); }
std::string sp_name(std::size_t s) { return "sp." + std::to_string(s); }

}  // namespace

ad::ParamStore init_model_params(const ModelConfig& cfg, std::uint64_t seed, InitMode mode) {
  cfg.validate();
  const BlockSpecs specs = block_specs(cfg);
  ad::ParamStore store;
  Rng rng(seed);
  const auto scheme = mode == InitMode::zero ? ad::InitScheme::zero : ad::InitScheme::glorot;
  for (std::size_t l = 0; l < specs.gnn.size(); ++l) ad::init_mlp(specs.gnn[l], gnn_name(l), store, rng, scheme);
  for (std::size_t c = 0; c < specs.cells.size(); ++c) ad::init_mlp(specs.cells[c], cell_name(c), store, rng, scheme);
  for (std::size_t s = 0; s < specs.sp.size(); ++s) ad::init_mlp(specs.sp[s], sp_name(s), store, rng, scheme);
  ad::init_mlp(specs.fc, "fc", store, rng, scheme);
  if (cfg.color_head) ad::init_mlp(specs.fc_color, "fc_color", store, rng, scheme);
  if (mode == InitMode::zero_head) {
    const std::string last = "fc.l" + std::to_string(cfg.fc_widths.size() - 1);
    for (double& v : store.get(last + ".w").mutable_values()) v = 0.0;
    for (double& v : store.get(last + ".b").mutable_values()) v = 0.0;
  }
  return store;
}

void validate_model_params(const ModelConfig& cfg, const ad::ParamStore& params) {
  cfg.validate();
  const BlockSpecs specs = block_specs(cfg);
  auto& store = const_cast<ad::ParamStore&>(params);  // bind_mlp only reads
  for (std::size_t l = 0; l < specs.gnn.size(); ++l) ad::bind_mlp(specs.gnn[l], gnn_name(l), store);
  for (std::size_t c = 0; c < specs.cells.size(); ++c) ad::bind_mlp(specs.cells[c], cell_name(c), store);
  for (std::size_t s = 0; s < specs.sp.size(); ++s) ad::bind_mlp(specs.sp[s], sp_name(s), store);
  ad::bind_mlp(specs.fc, "fc", store);
  if (cfg.color_head) ad::bind_mlp(specs.fc_color, "fc_color", store);
}

// ---------------------------------------------------------------------------
// blocks

Tensor gnn_layer(const Tensor& points, const Tensor& colors, const Tensor& prev_features,
                 std::size_t k, const ad::MlpSpec& spec, const ad::MlpParams& params) {
  const std::size_t n = points.rows();
  require_rows("gnn_layer", colors, n, "colors");
  require_rows("gnn_layer", prev_features, n, "features");
  const std::size_t dprev = prev_features.defined() ? prev_features.cols() : 0;
  require_input_width("gnn_layer", spec, dprev + 9);

  const NeighborGraph graph = knn_graph(view(points), view(points), k, true);
  const Tensor& w0 = params.weights[0];
  const Tensor w_p = ad::slice_rows(w0, dprev, dprev + 3);
  const Tensor w_dp = ad::slice_rows(w0, dprev + 3, dprev + 6);

  const Tensor p_dp = ad::matmul(points, w_dp);
  Tensor per_query = ad::sub(ad::matmul(points, w_p), p_dp);
  Tensor per_neighbor = p_dp;
  if (dprev) per_query = ad::add(per_query, ad::matmul(prev_features, ad::slice_rows(w0, 0, dprev)));
  if (colors.defined()) {
    const Tensor c_dc = ad::matmul(colors, ad::slice_rows(w0, dprev + 6, dprev + 9));
    per_query = ad::sub(per_query, c_dc);
    per_neighbor = ad::add(per_neighbor, c_dc);
  }
  per_query = ad::add_bias(per_query, params.biases[0]);
  return pooled_edge_mlp(spec, params, per_query, per_neighbor, repeat_each(n, k),
                         graph.neighbor_index, k);
}

Tensor graph_rnn_cell(const LevelState& input, const LevelState& memory, std::size_t k,
                      const ad::MlpSpec& spec, const ad::MlpParams& params) {
  const std::size_t n = input.size(), m = memory.size();
  if (!input.features.defined() || !memory.features.defined() || !memory.states.defined()) {
    throw ad::ShapeError("graph_rnn_cell", "features and memory states are required");
  }
  const std::size_t ds = memory.states.cols(), df = input.features.cols();
  require_rows("graph_rnn_cell", input.features, n, "features");
  require_rows("graph_rnn_cell", input.states, n, "input states");
  require_rows("graph_rnn_cell", memory.features, m, "memory features");
  require_rows("graph_rnn_cell", memory.states, m, "memory states");
  if (input.states.defined() && input.states.cols() != ds) {
    throw ad::ShapeError("graph_rnn_cell", "input and memory state widths differ");
  }
  if (memory.features.cols() != df) {
    throw ad::ShapeError("graph_rnn_cell", "input and memory feature widths differ");
  }
  require_input_width("graph_rnn_cell", spec, 2 * ds + 3 + df + 1);

  const NeighborGraph graph = spatio_temporal_knn(view(input.features), view(memory.features), k);
  const Tensor& w0 = params.weights[0];
  const Tensor w_si = ad::slice_rows(w0, 0, ds);
  const Tensor w_sj = ad::slice_rows(w0, ds, 2 * ds);
  const Tensor w_p = ad::slice_rows(w0, 2 * ds, 2 * ds + 3);
  const Tensor w_f = ad::slice_rows(w0, 2 * ds + 3, 2 * ds + 3 + df);
  const Tensor w_t = ad::slice_rows(w0, 2 * ds + 3 + df, 2 * ds + 4 + df);

  // dp, df enter as (neighbor - query); dt is 0 for current and 1 for past.
  const Tensor cur_pf = ad::add(ad::matmul(input.points, w_p), ad::matmul(input.features, w_f));
  Tensor per_query = ad::scale(cur_pf, -1.0);
  Tensor cur_neighbor = cur_pf;
  if (input.states.defined()) {
    per_query = ad::add(per_query, ad::matmul(input.states, w_si));
    cur_neighbor = ad::add(cur_neighbor, ad::matmul(input.states, w_sj));
  }
  per_query = ad::add_bias(per_query, params.biases[0]);
  Tensor past_neighbor = ad::add(ad::matmul(memory.points, w_p), ad::matmul(memory.features, w_f));
  past_neighbor = ad::add_bias(ad::add(past_neighbor, ad::matmul(memory.states, w_sj)), w_t);

  std::vector<std::size_t> neighbor(graph.neighbor_index);
  for (std::size_t e = 0; e < neighbor.size(); ++e) {
    if (graph.neighbor_source[e] == NeighborSource::previous) neighbor[e] += n;
  }
  return pooled_edge_mlp(spec, params, per_query, ad::concat_rows({cur_neighbor, past_neighbor}),
                         repeat_each(n, 2 * k), neighbor, 2 * k);
}

Tensor point_rnn_cell(const LevelState& input, const LevelState& memory, std::size_t k,
                      const ad::MlpSpec& spec, const ad::MlpParams& params) {
  const std::size_t n = input.size(), m = memory.size();
  if (!memory.states.defined()) throw ad::ShapeError("point_rnn_cell", "memory states are required");
  const std::size_t ds = memory.states.cols();
  require_rows("point_rnn_cell", input.states, n, "input states");
  require_rows("point_rnn_cell", memory.states, m, "memory states");
  if (input.states.defined() && input.states.cols() != ds) {
    throw ad::ShapeError("point_rnn_cell", "input and memory state widths differ");
  }
  require_input_width("point_rnn_cell", spec, 2 * ds + 3);

  const NeighborGraph graph = knn_graph(view(input.points), view(memory.points), k, false);
  const Tensor& w0 = params.weights[0];
  const Tensor w_p = ad::slice_rows(w0, 2 * ds, 2 * ds + 3);
  Tensor per_query = ad::scale(ad::matmul(input.points, w_p), -1.0);
  if (input.states.defined()) per_query = ad::add(per_query, ad::matmul(input.states, ad::slice_rows(w0, 0, ds)));
  per_query = ad::add_bias(per_query, params.biases[0]);
  const Tensor per_neighbor = ad::add(ad::matmul(memory.points, w_p),
                                      ad::matmul(memory.states, ad::slice_rows(w0, ds, 2 * ds)));
  return pooled_edge_mlp(spec, params, per_query, per_neighbor, repeat_each(n, k),
                         graph.neighbor_index, k);
}

LevelState sample_and_group(const LevelState& level, std::size_t count, std::size_t sg_k,
                            std::size_t fps_start) {
  const std::vector<std::size_t> centers = fps_sample(view(level.points), count, fps_start);
  LevelState out;
  out.points = ad::gather_rows(level.points, centers);
  if (level.colors.defined()) out.colors = ad::gather_rows(level.colors, centers);
  if (!level.features.defined() && !level.states.defined()) return out;
  const NeighborGraph region = knn_graph(view(out.points), view(level.points), sg_k, false);
  if (level.features.defined()) {
    out.features = ad::max_pool_groups(ad::gather_rows(level.features, region.neighbor_index), sg_k);
  }
  if (level.states.defined()) {
    out.states = ad::max_pool_groups(ad::gather_rows(level.states, region.neighbor_index), sg_k);
  }
  return out;
}

Tensor interpolate_states(const Tensor& targets, const Tensor& sources, const Tensor& values,
                          std::size_t k) {
  require_rows("interpolate_states", values, sources.rows(), "values");
  if (targets.cols() != 3 || sources.cols() != 3) {
    throw ad::ShapeError("interpolate_states", "coordinates must be n x 3");
  }
  const NeighborGraph g = knn_graph(view(targets), view(sources), k, false);
  const std::size_t n = targets.rows(), d = values.cols();
  std::vector<double> weight(n * k), total(n, 0.0), out(n * d, 0.0);
  const double* v = values.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < k; ++s) {
      const double w = 1.0 / (g.neighbor_distance[i * k + s] + kInterpolationEpsilon);
      weight[i * k + s] = w;
      total[i] += w;
      const double* src = v + g.at(i, s) * d;
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += w * src[c];
    }
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] /= total[i];
  }
  return ad::make_result(
      "interpolate_states", {n, d}, out, {targets, sources, values},
      [g, weight = std::move(weight), total = std::move(total), out, n, d, k](ad::Node& node) {
        ad::Node& tn = *node.inputs[0];
        ad::Node& sn = *node.inputs[1];
        ad::Node& vn = *node.inputs[2];
        const double* grad = node.grad.data();
        double* gv = vn.requires_grad ? vn.ensure_grad().data() : nullptr;
        double* gt = tn.requires_grad ? tn.ensure_grad().data() : nullptr;
        double* gs = sn.requires_grad ? sn.ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
          const double* gi = grad + i * d;
          for (std::size_t s = 0; s < k; ++s) {
            const std::size_t j = g.at(i, s);
            const double w = weight[i * k + s];
            const double a = w / total[i];
            const double* vj = vn.value.data() + j * d;
            if (gv) {
              for (std::size_t c = 0; c < d; ++c) gv[j * d + c] += a * gi[c];
            }
            if (!gt && !gs) continue;
            const double dist = g.neighbor_distance[i * k + s];
            if (dist == 0.0) continue;  // kink; use the zero subgradient
            // d out_i / d w = (v_j - out_i) / total; d w / d dist = -w^2.
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += gi[c] * (vj[c] - out[i * d + c]);
            const double coeff = -dot / total[i] * w * w / dist;
            for (std::size_t x = 0; x < 3; ++x) {
              const double diff = tn.value[i * 3 + x] - sn.value[j * 3 + x];
              if (gt) gt[i * 3 + x] += coeff * diff;
              if (gs) gs[j * 3 + x] -= coeff * diff;
            }
          }
        }
      });
}

Tensor state_propagation(const LevelState& coarse, const Tensor& fine_points,
                         const Tensor& skip_states, std::size_t k, const ad::MlpSpec& spec,
                         const ad::MlpParams& params) {
  if (!coarse.points.defined() || coarse.size() == 0 || !coarse.states.defined()) {
    throw ad::ShapeError("state_propagation", "coarse level needs points and states");
  }
  require_rows("state_propagation", skip_states, fine_points.rows(), "skip states");
  Tensor x = interpolate_states(fine_points, coarse.points, coarse.states,
                                std::min(k, coarse.size()));
  if (skip_states.defined()) x = ad::concat_cols({x, skip_states});
  return ad::mlp_forward(spec, params, x);
}

// ---------------------------------------------------------------------------
// full step

StepOutput predict_step(const ModelConfig& cfg, const ad::ParamStore& params, const Tensor& points,
                        const std::vector<double>& colors, RecurrentMemory& memory) {
  cfg.validate();
  if (points.rank() != 2 || points.cols() != 3) {
    throw ad::ShapeError("predict_step", "points must be n x 3, got " + ad::shape_string(points.shape()));
  }
  const std::size_t n = points.rows();
  if (!colors.empty() && colors.size() != n * 3) {
    throw ad::ShapeError("predict_step", "colors must be n x 3");
  }
  auto& store = const_cast<ad::ParamStore&>(params);  // bind_mlp only reads
  const BlockSpecs specs = block_specs(cfg);
  const std::size_t cells = cfg.cells.size();
  const std::size_t ds = cfg.state_width();
  const std::vector<std::size_t> sizes = cfg.level_sizes(n);
  if (!memory.empty() && memory.cells.size() != cells) {
    throw ad::ShapeError("predict_step", "memory holds " + std::to_string(memory.cells.size()) +
                                             " cells, model has " + std::to_string(cells));
  }

  const Tensor color_tensor = colors.empty() ? Tensor() : Tensor::from_values({n, 3}, colors);
  const bool use_color = cfg.color_head && color_tensor.defined();

  LevelState base{points, {}, {}, color_tensor};
  LevelState level = base;
  if (cfg.hierarchical) level = sample_and_group(base, sizes[0], cfg.sg_k, cfg.fps_start);

  if (cfg.baseline == CellKind::graph_rnn) {
    Tensor f;
    for (std::size_t l = 0; l < specs.gnn.size(); ++l) {
      f = gnn_layer(level.points, use_color ? level.colors : Tensor(), f, cfg.gnn_layers[l].k,
                    specs.gnn[l], ad::bind_mlp(specs.gnn[l], gnn_name(l), store));
    }
    level.features = f;
  }

  StepOutput out;
  std::vector<LevelState> outputs;
  for (std::size_t c = 0; c < cells; ++c) {
    if (c > 0 && cfg.hierarchical) level = sample_and_group(level, sizes[c], cfg.sg_k, 0);
    LevelState past;
    if (memory.empty()) {
      past = {level.points, level.features, Tensor::zeros({level.size(), ds}), {}};
    } else {
      past = memory.cells[c];
      if (past.size() != level.size()) {
        throw ad::ShapeError("predict_step", "memory of cell " + std::to_string(c) + " has " +
                                                 std::to_string(past.size()) + " points, level has " +
                                                 std::to_string(level.size()));
      }
    }
    const ad::MlpParams p = ad::bind_mlp(specs.cells[c], cell_name(c), store);
    const Tensor s = cfg.baseline == CellKind::graph_rnn
                         ? graph_rnn_cell(level, past, cfg.cell_k(c), specs.cells[c], p)
                         : point_rnn_cell(level, past, cfg.cell_k(c), specs.cells[c], p);
    level.states = s;
    outputs.push_back({level.points, level.features, s, {}});
    out.cell_sizes.push_back(level.size());
  }
  memory.cells = outputs;

  Tensor final_states = outputs.back().states;
  if (cfg.hierarchical) {
    LevelState coarse = outputs.back();
    for (std::size_t s = 0; s < cells; ++s) {
      const bool to_base = s + 1 == cells;
      const LevelState& fine = to_base ? base : outputs[cells - 2 - s];
      const Tensor skip = to_base ? Tensor() : fine.states;
      final_states = state_propagation(coarse, fine.points, skip, cfg.interp_k, specs.sp[s],
                                       ad::bind_mlp(specs.sp[s], sp_name(s), store));
      coarse = {fine.points, {}, final_states, {}};
      out.sp_sizes.push_back(final_states.rows());
    }
  }

  out.motion = ad::mlp_forward(specs.fc, ad::bind_mlp(specs.fc, "fc", store), final_states);
  out.points = ad::add(points, out.motion);
  out.colors = colors;
  if (use_color) {
    ad::NoGradGuard no_grad;  // colors do not enter the loss
    const Tensor dc = ad::mlp_forward(specs.fc_color, ad::bind_mlp(specs.fc_color, "fc_color", store),
                                      final_states);
    for (std::size_t i = 0; i < out.colors.size(); ++i) {
      out.colors[i] = std::clamp(out.colors[i] + dc.values()[i], 0.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// rollouts

std::size_t warmup_length(std::size_t frames, RolloutMode mode) {
  return mode == RolloutMode::short_term ? frames - 1 : frames / 2;
}

std::size_t first_target(std::size_t frames, RolloutMode mode) {
  return mode == RolloutMode::short_term ? 1 : frames / 2;
}

std::vector<RolloutStep> rollout(const ModelConfig& cfg, const ad::ParamStore& params,
                                 const Sequence& seq, RolloutMode mode, RolloutObserver* observer) {
  seq.validate();
  const std::size_t frames = seq.length();
  const std::size_t n = seq.point_count();
  const std::size_t warmup = warmup_length(frames, mode);
  auto read = [&](std::size_t t) -> const Frame& {
    if (observer) observer->frame_read(t);
    return seq.frames[t];
  };

  std::vector<RolloutStep> steps;
  RecurrentMemory memory;
  Tensor fed;
  std::vector<double> fed_colors;
  for (std::size_t t = 0; t + 1 < frames; ++t) {
    Tensor input;
    std::vector<double> input_colors;
    if (t < warmup) {
      const Frame& f = read(t);
      input = Tensor::from_values({n, 3}, f.points);
      input_colors = f.colors;
    } else {
      input = fed;
      input_colors = fed_colors;
    }
    StepOutput o = predict_step(cfg, params, input, input_colors, memory);
    if (t + 1 < first_target(frames, mode)) continue;
    if (mode == RolloutMode::long_term) o.colors = input_colors;  // null color displacement
    if (observer) observer->prediction_made(t + 1);
    fed = o.points;
    fed_colors = o.colors;
    steps.push_back({t + 1, o.points, std::move(o.colors)});
  }
  return steps;
}

std::vector<Frame> rollout_frames(const ModelConfig& cfg, const ad::ParamStore& params,
                                  const Sequence& seq, RolloutMode mode) {
  ad::NoGradGuard no_grad;
  std::vector<Frame> out;
  for (auto& s : rollout(cfg, params, seq, mode)) {
    Frame f;
    f.points.assign(s.points.values().begin(), s.points.values().end());
    f.colors = std::move(s.colors);
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<Frame> copy_last_baseline(const Sequence& seq, RolloutMode mode) {
  seq.validate();
  const std::size_t frames = seq.length();
  std::vector<Frame> out;
  for (std::size_t target = first_target(frames, mode); target < frames; ++target) {
    const std::size_t source = mode == RolloutMode::short_term ? target - 1 : frames / 2 - 1;
    out.push_back(seq.frames[source]);
  }
  return out;
}

}  // namespace pcpred
