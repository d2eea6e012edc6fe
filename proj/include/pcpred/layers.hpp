#pragma once

#include <map>
#include <string>
#include <vector>

#include "pcpred/rng.hpp"
#include "pcpred/tensor.hpp"

namespace pcpred::ad {

/// Named learnable tensors in insertion order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor tensor);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  std::size_t value_count() const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  void zero_grad();
  /// Deep copy: fresh leaves with the same names and values.
  ParamStore clone() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class Activation { relu, none };

struct MlpSpec {
  std::size_t input_width = 0;
  std::vector<std::size_t> layer_widths;
  std::vector<Activation> activations;  // one per layer

  std::size_t output_width() const { return layer_widths.back(); }
  void validate() const;
};

/// Handles into a ParamStore: `<prefix>.l<i>.w` is [in x out], `.b` is [out].
struct MlpParams {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
};

enum class InitScheme { glorot, zero };

/// Weights uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases zero.
Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

MlpParams init_mlp(const MlpSpec& spec, const std::string& prefix, ParamStore& store,
                   Rng& rng, InitScheme scheme = InitScheme::glorot);
MlpParams bind_mlp(const MlpSpec& spec, const std::string& prefix, ParamStore& store);

/// Applies the same layers to every row of `input` [n x input_width].
Tensor mlp_forward(const MlpSpec& spec, const MlpParams& params, const Tensor& input);

}  // namespace pcpred::ad
