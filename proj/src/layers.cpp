#include "pcpred/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace pcpred::ad {

Tensor& ParamStore::add(const std::string& name, Tensor tensor) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(tensor));
  return entries_.back().second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamStore::value_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore copy;
  for (const auto& [name, t] : entries_) {
    copy.add(name, Tensor::from_values(t.shape(), {t.values().begin(), t.values().end()},
                                       t.requires_grad()));
  }
  return copy;
}

void MlpSpec::validate() const {
  if (layer_widths.empty()) throw std::invalid_argument("MLP needs at least one layer");
  if (activations.size() != layer_widths.size()) {
    throw std::invalid_argument("MLP needs one activation per layer");
  }
  if (input_width == 0) throw std::invalid_argument("MLP input width must be positive");
  for (std::size_t w : layer_widths) {
    if (w == 0) throw std::invalid_argument("MLP layer widths must be positive");
  }
}

Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = rng.uniform(-a, a);
  return Tensor::from_values({fan_in, fan_out}, std::move(v), true);
}

MlpParams init_mlp(const MlpSpec& spec, const std::string& prefix, ParamStore& store,
                   Rng& rng, InitScheme scheme) {
  spec.validate();
  std::size_t in = spec.input_width;
  for (std::size_t l = 0; l < spec.layer_widths.size(); ++l) {
    const std::size_t out = spec.layer_widths[l];
    const std::string base = prefix + ".l" + std::to_string(l);
    Tensor w = scheme == InitScheme::glorot ? glorot_uniform(in, out, rng)
                                            : Tensor::zeros({in, out}, true);
    store.add(base + ".w", std::move(w));
    store.add(base + ".b", Tensor::zeros({out}, true));
    in = out;
  }
  return bind_mlp(spec, prefix, store);
}

MlpParams bind_mlp(const MlpSpec& spec, const std::string& prefix, ParamStore& store) {
  spec.validate();
  MlpParams p;
  std::size_t in = spec.input_width;
  for (std::size_t l = 0; l < spec.layer_widths.size(); ++l) {
    const std::string base = prefix + ".l" + std::to_string(l);
    for (const char* part : {".w", ".b"}) {
      if (!store.contains(base + part)) throw ShapeError("bind_mlp", "missing parameter '" + base + part + "'");
    }
    const Tensor& w = store.get(base + ".w");
    const Tensor& b = store.get(base + ".b");
    if (w.shape() != Shape{in, spec.layer_widths[l]} || b.shape() != Shape{spec.layer_widths[l]}) {
      throw ShapeError("bind_mlp", base + " has shape " + shape_string(w.shape()) +
                                       ", expected " +
                                       shape_string({in, spec.layer_widths[l]}));
    }
    p.weights.push_back(w);
    p.biases.push_back(b);
    in = spec.layer_widths[l];
  }
  return p;
}

Tensor mlp_forward(const MlpSpec& spec, const MlpParams& params, const Tensor& input) {
  if (input.rank() != 2 || input.cols() != spec.input_width) {
    throw ShapeError("mlp_forward", "input " + shape_string(input.shape()) +
                                        " for MLP of input width " +
                                        std::to_string(spec.input_width));
  }
  Tensor x = input;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    x = add_bias(matmul(x, params.weights[l]), params.biases[l]);
    if (spec.activations[l] == Activation::relu) x = relu(x);
  }
  return x;
}

}  // namespace pcpred::ad
