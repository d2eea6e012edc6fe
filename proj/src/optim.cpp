#include "pcpred/optim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pcpred::ad {

void AdamState::validate() const {
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in (0, 1)");
  }
  if (!(lr >= 0.0) || !(eps > 0.0)) throw std::invalid_argument("Adam lr/eps out of range");
}

AdamState make_adam(const ParamStore& params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& [name, t] : params.entries()) {
    s.first_moment.emplace_back(t.size(), 0.0);
    s.second_moment.emplace_back(t.size(), 0.0);
  }
  return s;
}

void adam_step(AdamState& state, ParamStore& params) {
  state.validate();
  auto& entries = params.entries();
  if (state.first_moment.size() != entries.size() ||
      state.second_moment.size() != entries.size()) {
    throw ShapeError("adam_step", "moment buffers do not match parameter count");
  }
  for (std::size_t p = 0; p < entries.size(); ++p) {
    if (state.first_moment[p].size() != entries[p].second.size() ||
        state.second_moment[p].size() != entries[p].second.size()) {
      throw ShapeError("adam_step", "moment buffer shape for '" + entries[p].first + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t p = 0; p < entries.size(); ++p) {
    Tensor& param = entries[p].second;
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    auto values = param.mutable_values();
    const auto grads = param.grad();
    const bool has = !grads.empty();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has ? grads[i] : 0.0;
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      values[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void clip_gradients(std::span<double> grads, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clip range has lo > hi");
  for (double& g : grads) g = std::clamp(g, lo, hi);
}

void clip_gradients(ParamStore& params, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clip range has lo > hi");
  for (auto& [name, t] : params.entries()) {
    if (t.has_grad()) clip_gradients(t.mutable_grad(), lo, hi);
  }
}

// ---------------------------------------------------------------------------
// checkpoint I/O

namespace {

constexpr char kMagic[] = "PCCKPT1\n";
constexpr std::size_t kMagicLen = 8;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t get_u64(std::istream& is, const std::string& path) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error("truncated checkpoint '" + path + "'");
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.write(kMagic, kMagicLen);
  put_u64(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(os, t.rank());
    for (std::size_t d : t.shape()) put_u64(os, d);
    os.write(reinterpret_cast<const char*>(t.values().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[kMagicLen];
  if (!is.read(magic, kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw std::runtime_error("'" + path + "' is not a checkpoint (bad magic)");
  }
  const std::uint64_t count = get_u64(is, path);
  NamedTensors out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t len = get_u64(is, path);
    if (len > (1u << 20)) throw std::runtime_error("corrupt checkpoint '" + path + "'");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) {
      throw std::runtime_error("truncated checkpoint '" + path + "'");
    }
    const std::uint64_t rank = get_u64(is, path);
    if (rank > 8) throw std::runtime_error("corrupt checkpoint '" + path + "'");
    Shape shape(rank);
    for (auto& d : shape) d = get_u64(is, path);
    std::vector<double> values(shape_size(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw std::runtime_error("truncated checkpoint '" + path + "'");
    }
    out.emplace_back(std::move(name), Tensor::from_values(std::move(shape), std::move(values)));
  }
  return out;
}

}  // namespace pcpred::ad
