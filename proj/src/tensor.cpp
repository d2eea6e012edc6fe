#include "pcpred/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace pcpred::ad {

namespace {

thread_local bool g_grad_enabled = true;

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::domain_error(std::string("non-finite value produced by op '") +
                              op + "'");
    }
  }
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

ShapeError::ShapeError(std::string op, const std::string& detail)
    : std::invalid_argument("shape mismatch in op '" + op + "': " + detail),
      op_(std::move(op)) {}

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value.assign(shape_size(shape), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("from_values", shape_string(shape) + " holds " +
                                        std::to_string(shape_size(shape)) +
                                        " values, got " +
                                        std::to_string(values.size()));
  }
  check_finite("from_values", values);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({}, {value}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item", "tensor of shape " + shape_string(shape()) +
                                 " is not a single value");
  }
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return from_values(shape(), node_->value, false);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (auto& t : inputs) n->inputs.push_back(t.node_ptr());
      n->backward = std::move(backward_fn);
    }
  }
  return Tensor(std::move(n));
}

void backward(const Tensor& root, std::span<const double> seed) {
  Node* r = root.node();
  if (seed.empty()) {
    if (r->value.size() != 1) {
      throw ShapeError("backward", "root of shape " + shape_string(r->shape) +
                                       " needs an explicit seed");
    }
  } else if (seed.size() != r->value.size()) {
    throw ShapeError("backward", "seed size does not match root");
  }
  if (!r->requires_grad) return;

  // Iterative post-order DFS; BPTT graphs are too deep for recursion.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{r, 0}};
  visited.insert(r);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto& g = r->ensure_grad();
  if (seed.empty()) {
    g[0] += 1.0;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (Node* node : order) {
    if (!node->inputs.empty()) {
      node->inputs.clear();
      node->backward = nullptr;
      node->grad.clear();
    }
  }
}

// ---------------------------------------------------------------------------
// ops

namespace {

void require_rank2(const char* op, const Tensor& t, const char* name) {
  if (t.rank() != 2) {
    throw ShapeError(op, std::string(name) + " must be rank 2, got " +
                             shape_string(t.shape()));
  }
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(op, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

// Accumulate into an input's gradient only when it wants one.
inline double* grad_of(Node& out, std::size_t input) {
  Node& in = *out.inputs[input];
  return in.requires_grad ? in.ensure_grad().data() : nullptr;
}

// Four independent partial sums so the loop vectorizes without reassociation.
double dot(const double* x, const double* y, std::size_t len) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t j = 0;
  for (; j + 4 <= len; j += 4) {
    for (std::size_t l = 0; l < 4; ++l) acc[l] += x[j + l] * y[j + l];
  }
  for (; j < len; ++j) acc[0] += x[j] * y[j];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a, "lhs");
  require_rank2("matmul", b, "rhs");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<double> c(n * m, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
  return make_result("matmul", {n, m}, std::move(c), {a, b}, [n, k, m](Node& out) {
    const double* G = out.grad.data();
    const double* A = out.inputs[0]->value.data();
    const double* B = out.inputs[1]->value.data();
    if (double* gA = grad_of(out, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = G + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B + p * m;
          gA[i * k + p] += dot(grow, brow, m);
        }
      }
    }
    if (double* gB = grad_of(out, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = G + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          double* gbrow = gB + p * m;
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  return make_result("add", a.shape(), std::move(v), {a, b}, [](Node& out) {
    for (std::size_t in = 0; in < 2; ++in) {
      if (double* g = grad_of(out, in)) {
        for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  return make_result("sub", a.shape(), std::move(v), {a, b}, [](Node& out) {
    if (double* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    }
    if (double* g = grad_of(out, 1)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] -= out.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  return make_result("mul", a.shape(), std::move(v), {a, b}, [](Node& out) {
    const auto& av = out.inputs[0]->value;
    const auto& bv = out.inputs[1]->value;
    if (double* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * bv[i];
    }
    if (double* g = grad_of(out, 1)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> v(a.values().begin(), a.values().end());
  for (double& x : v) x *= factor;
  return make_result("scale", a.shape(), std::move(v), {a}, [factor](Node& out) {
    if (double* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += factor * out.grad[i];
    }
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_rank2("add_bias", a, "input");
  const std::size_t n = a.rows(), d = a.cols();
  const bool ok = (bias.rank() == 1 && bias.dim(0) == d) ||
                  (bias.rank() == 2 && bias.rows() == 1 && bias.cols() == d);
  if (!ok) {
    throw ShapeError("add_bias", "bias " + shape_string(bias.shape()) +
                                     " for input " + shape_string(a.shape()));
  }
  std::vector<double> v(a.values().begin(), a.values().end());
  const double* b = bias.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] += b[j];
  }
  return make_result("add_bias", a.shape(), std::move(v), {a, bias}, [n, d](Node& out) {
    if (double* g = grad_of(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    }
    if (double* g = grad_of(out, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) g[j] += out.grad[i * d + j];
      }
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> v(a.values().begin(), a.values().end());
  for (double& x : v) x = x > 0.0 ? x : 0.0;
  return make_result("relu", a.shape(), std::move(v), {a}, [](Node& out) {
    if (double* g = grad_of(out, 0)) {
      const auto& av = out.inputs[0]->value;
      for (std::size_t i = 0; i < out.grad.size(); ++i) {
        if (av[i] > 0.0) g[i] += out.grad[i];
      }
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols", "no operands");
  for (const auto& p : parts) require_rank2("concat_cols", p, "operand");
  const std::size_t n = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) {
      throw ShapeError("concat_cols", "row counts differ: " + std::to_string(n) +
                                          " vs " + std::to_string(p.rows()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> v(n * total);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const double* src = parts[pi].values().data();
    const std::size_t w = widths[pi];
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(src + i * w, w, v.data() + i * total + offset);
    }
    offset += w;
  }
  return make_result("concat_cols", {n, total}, std::move(v), parts,
                     [n, total, widths](Node& out) {
                       std::size_t offset = 0;
                       for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                         const std::size_t w = widths[pi];
                         if (double* g = grad_of(out, pi)) {
                           for (std::size_t i = 0; i < n; ++i) {
                             const double* src = out.grad.data() + i * total + offset;
                             for (std::size_t j = 0; j < w; ++j) g[i * w + j] += src[j];
                           }
                         }
                         offset += w;
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows", "no operands");
  for (const auto& p : parts) require_rank2("concat_rows", p, "operand");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.cols() != d) {
      throw ShapeError("concat_rows", "column counts differ: " + std::to_string(d) +
                                          " vs " + std::to_string(p.cols()));
    }
    total += p.rows();
    sizes.push_back(p.size());
  }
  std::vector<double> v;
  v.reserve(total * d);
  for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  return make_result("concat_rows", {total, d}, std::move(v), parts, [sizes](Node& out) {
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < sizes.size(); ++pi) {
      if (double* g = grad_of(out, pi)) {
        for (std::size_t i = 0; i < sizes[pi]; ++i) g[i] += out.grad[offset + i];
      }
      offset += sizes[pi];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2("slice_rows", a, "input");
  if (begin > end || end > a.rows()) {
    throw ShapeError("slice_rows", "range [" + std::to_string(begin) + "," +
                                       std::to_string(end) + ") of " +
                                       shape_string(a.shape()));
  }
  const std::size_t d = a.cols();
  std::vector<double> v(a.values().begin() + begin * d, a.values().begin() + end * d);
  return make_result("slice_rows", {end - begin, d}, std::move(v), {a},
                     [begin, d](Node& out) {
                       if (double* g = grad_of(out, 0)) {
                         double* dst = g + begin * d;
                         for (std::size_t i = 0; i < out.grad.size(); ++i) dst[i] += out.grad[i];
                       }
                     });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_rank2("gather_rows", a, "input");
  const std::size_t n = a.rows(), d = a.cols();
  for (std::size_t r : index) {
    if (r >= n) {
      throw ShapeError("gather_rows", "row " + std::to_string(r) + " out of range for " +
                                          shape_string(a.shape()));
    }
  }
  std::vector<double> v(index.size() * d);
  const double* src = a.values().data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    std::copy_n(src + index[i] * d, d, v.data() + i * d);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result("gather_rows", {index.size(), d}, std::move(v), {a},
                     [idx = std::move(idx), d](Node& out) {
                       if (double* g = grad_of(out, 0)) {
                         for (std::size_t i = 0; i < idx.size(); ++i) {
                           double* dst = g + idx[i] * d;
                           const double* src = out.grad.data() + i * d;
                           for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                         }
                       }
                     });
}

Tensor max_pool_groups(const Tensor& a, std::size_t group) {
  require_rank2("max_pool_groups", a, "input");
  if (group == 0 || a.rows() % group != 0) {
    throw ShapeError("max_pool_groups", std::to_string(a.rows()) +
                                            " rows do not split into groups of " +
                                            std::to_string(group));
  }
  const std::size_t n = a.rows() / group, d = a.cols();
  std::vector<double> v(n * d);
  std::vector<std::size_t> arg(n * d);
  const double* src = a.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* base = src + i * group * d;
    for (std::size_t j = 0; j < d; ++j) {
      std::size_t best = 0;
      double bv = base[j];
      for (std::size_t r = 1; r < group; ++r) {
        const double x = base[r * d + j];
        if (x > bv) {  // strict: ties keep the lowest index
          bv = x;
          best = r;
        }
      }
      v[i * d + j] = bv;
      arg[i * d + j] = (i * group + best) * d + j;
    }
  }
  return make_result("max_pool_groups", {n, d}, std::move(v), {a},
                     [arg = std::move(arg)](Node& out) {
                       if (double* g = grad_of(out, 0)) {
                         for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += out.grad[i];
                       }
                     });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return make_result("sum", {}, {s}, {a}, [](Node& out) {
    if (double* g = grad_of(out, 0)) {
      const double go = out.grad[0];
      const std::size_t n = out.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += go;
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor squared_norm(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x * x;
  return make_result("squared_norm", {}, {s}, {a}, [](Node& out) {
    if (double* g = grad_of(out, 0)) {
      const double go = out.grad[0];
      const auto& av = out.inputs[0]->value;
      for (std::size_t i = 0; i < av.size(); ++i) g[i] += 2.0 * go * av[i];
    }
  });
}

}  // namespace pcpred::ad
