#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pcpred/optim.hpp"

using namespace pcpred::ad;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("pcpred_optim_" + name)).string();
}

}  // namespace

TEST_CASE("Adam descends a scalar quadratic") {
  ParamStore store;
  Tensor& w = store.add("w", Tensor::from_values({1}, {0.0}, true));
  AdamState adam = make_adam(store, 0.1);
  for (int i = 0; i < 200; ++i) {
    store.zero_grad();
    backward(squared_norm(sub(w, Tensor::from_values({1}, {3.0}))));
    adam_step(adam, store);
  }
  CHECK(std::abs(w.values()[0] - 3.0) < 0.05);
  CHECK(adam.step == 200);
}

TEST_CASE("first Adam step moves each parameter by lr against the gradient sign") {
  ParamStore store;
  Tensor& w = store.add("w", Tensor::from_values({2}, {1.0, 1.0}, true));
  w.mutable_grad()[0] = 0.5;
  w.mutable_grad()[1] = -4.0;
  AdamState adam = make_adam(store, 0.01);
  adam_step(adam, store);
  // Bias-corrected moments give m/sqrt(v) = sign(g) on the first step.
  CHECK(w.values()[0] == doctest::Approx(1.0 - 0.01 * 0.5 / (0.5 + 1e-8)));
  CHECK(w.values()[1] == doctest::Approx(1.0 + 0.01 * 4.0 / (4.0 + 1e-8)));
}

TEST_CASE("zero gradient leaves parameters but decays moments") {
  ParamStore store;
  Tensor& w = store.add("w", Tensor::from_values({1}, {2.0}, true));
  AdamState adam = make_adam(store, 0.1);
  w.mutable_grad()[0] = 1.0;
  adam_step(adam, store);
  const double after_first = w.values()[0];
  const double m1 = adam.first_moment[0][0], v1 = adam.second_moment[0][0];
  store.zero_grad();
  w.mutable_grad();
  adam_step(adam, store);
  CHECK(adam.first_moment[0][0] == doctest::Approx(0.9 * m1));
  CHECK(adam.second_moment[0][0] == doctest::Approx(0.999 * v1));
  CHECK(w.values()[0] != after_first);  // decaying moments still carry momentum

  ParamStore fresh;
  Tensor& z = fresh.add("z", Tensor::from_values({1}, {2.0}, true));
  AdamState still = make_adam(fresh, 0.1);
  z.mutable_grad();
  adam_step(still, fresh);
  CHECK(z.values()[0] == 2.0);
}

TEST_CASE("lr 0 leaves parameters unchanged") {
  ParamStore store;
  Tensor& w = store.add("w", Tensor::from_values({3}, {1.0, -2.0, 0.5}, true));
  AdamState adam = make_adam(store, 0.0);
  for (int i = 0; i < 5; ++i) {
    for (double& g : w.mutable_grad()) g = 3.0;
    adam_step(adam, store);
  }
  CHECK(w.values()[0] == 1.0);
  CHECK(w.values()[1] == -2.0);
  CHECK(w.values()[2] == 0.5);
}

TEST_CASE("moment buffer mismatch is a shape error") {
  ParamStore store;
  store.add("w", Tensor::zeros({2}, true));
  AdamState adam = make_adam(store, 0.1);
  store.add("extra", Tensor::zeros({1}, true));
  CHECK_THROWS_AS(adam_step(adam, store), ShapeError);
}

TEST_CASE("element-wise clipping") {
  std::vector<double> g{-7.0, 0.2, 9.0};
  clip_gradients(g, -5.0, 5.0);
  CHECK(g == std::vector<double>{-5.0, 0.2, 5.0});
  std::vector<double> inside{-1.0, 4.0};
  clip_gradients(inside, -5.0, 5.0);
  CHECK(inside == std::vector<double>{-1.0, 4.0});
  std::vector<double> flat{-1.0, 2.0};
  clip_gradients(flat, 0.0, 0.0);
  CHECK(flat == std::vector<double>{0.0, 0.0});
  CHECK_THROWS_AS(clip_gradients(flat, 1.0, -1.0), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit exact") {
  NamedTensors in{{"a", Tensor::from_values({2, 2}, {1.0, -0.1, 1e-300, 3.5})},
                  {"scalar", Tensor::from_values({1}, {0.1 + 0.2})}};
  const std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, in);
  const NamedTensors out = load_checkpoint(path);
  REQUIRE(out.size() == 2);
  CHECK(out[0].first == "a");
  CHECK(out[0].second.shape() == Shape{2, 2});
  CHECK(std::equal(out[0].second.values().begin(), out[0].second.values().end(),
                   in[0].second.values().begin()));
  CHECK(out[1].second.values()[0] == 0.1 + 0.2);

  std::ifstream is(path, std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  CHECK(std::string(magic, 8) == "PCCKPT1\n");
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::string path = temp_path("bad.ckpt");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  save_checkpoint(path, {{"a", Tensor::zeros({4})}});
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
}
