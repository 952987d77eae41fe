#include "ilm/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "ilm/error.hpp"

namespace ilm {

using detail::Node;

namespace {

thread_local bool t_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void check_finite(std::string_view op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericalError("non-finite value produced by op '" + std::string(op) + "'");
    }
  }
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> value,
                   std::span<const Tensor> inputs, std::function<void(Node&)> rule) {
  check_finite(op, value);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  node->op = op;
  bool needs_grad = false;
  if (t_grad_enabled) {
    for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(rule);
  }
  return Tensor(std::move(node));
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> value,
                   std::initializer_list<Tensor> inputs, std::function<void(Node&)> rule) {
  return make_result(op, std::move(shape), std::move(value),
                     std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(rule));
}

// Gradient buffer of an input, or nullptr when it does not need one.
std::vector<double>* grad_of(Node& self, std::size_t input) {
  Node& in = *self.inputs[input];
  return in.requires_grad ? &in.grad : nullptr;
}

const std::vector<double>& value_of(Node& self, std::size_t input) { return self.inputs[input]->value; }

void require_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
}

void require_matrix(const Tensor& t, std::string_view op) {
  require_defined(t, op);
  if (t.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
  }
}

void require_nonempty_axis(const Tensor& t, std::string_view op) {
  require_defined(t, op);
  if (t.ndim() == 0 || t.cols() == 0 || t.size() == 0) {
    throw DimensionError(std::string(op) + ": empty axis");
  }
}

bool broadcastable(const Shape& a, const Shape& b) {
  if (shape_size(b) == 1) return true;
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

void require_broadcast(const Tensor& a, const Tensor& b, std::string_view op) {
  require_defined(a, op);
  require_defined(b, op);
  if (!broadcastable(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) + " onto " +
                         shape_string(a.shape()));
  }
}

template <typename Fn, typename Deriv>
Tensor unary(std::string_view op, const Tensor& a, Fn fn, Deriv deriv) {
  require_defined(a, op);
  const auto& x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fn(x[i]);
  return make_result(op, a.shape(), std::move(y), {a}, [deriv](Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& x = value_of(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += self.grad[i] * deriv(x[i], self.value[i]);
  });
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor needs at least one extent");
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_size(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
  }
  check_finite("from_data", data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw UsageError("shape of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->value.size() : 0; }

std::size_t Tensor::cols() const { return shape().back(); }

std::size_t Tensor::rows() const { return size() / cols(); }

std::span<const double> Tensor::data() const {
  if (!node_) throw UsageError("data of undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw UsageError("data of undefined tensor");
  if (!node_->leaf) throw UsageError("only leaf tensors are writable");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && node_->leaf; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw UsageError("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
}

std::string_view Tensor::op() const { return node_ ? node_->op : std::string_view("undefined"); }

Tensor Tensor::detach() const { return from_data(shape(), std::vector<double>(data().begin(), data().end())); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

// ---- Graph / backward ---------------------------------------------------------

Graph::Graph(const Tensor& root) {
  require_defined(root, "graph");
  if (!root.requires_grad()) return;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.id());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& child = node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    order_.push_back(node);
    stack.pop_back();
  }
}

Tensor Gradients::operator[](const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) return Tensor::zeros(leaf.shape());
  return Tensor::from_data(leaf.shape(), it->second);
}

std::span<const double> Gradients::view(const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) return {};
  return it->second;
}

Gradients backward(const Graph& graph, const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  Gradients out;
  if (!loss.requires_grad()) return out;
  const auto nodes = graph.nodes();
  if (nodes.empty() || nodes.back().get() != loss.id()) {
    throw UsageError("backward: loss is not the root of the graph");
  }
  for (const auto& node : nodes) node->grad.assign(node->value.size(), 0.0);
  nodes.back()->grad[0] = 1.0;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node& node = **it;
    if (!node.leaf && node.backward) node.backward(node);
  }
  for (const auto& node : nodes) {
    if (node->leaf) out.set(node.get(), std::move(node->grad));
    node->grad = std::vector<double>();
  }
  return out;
}

Gradients backward(const Tensor& loss) { return backward(Graph(loss), loss); }

// ---- linear algebra ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> c(m * n);
  MutMap(c.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return make_result("matmul", {m, n}, std::move(c), {a, b}, [m, k, n](Node& self) {
    ConstMap g(self.grad.data(), m, n);
    if (auto* ga = grad_of(self, 0)) {
      MutMap(ga->data(), m, k).noalias() += g * ConstMap(value_of(self, 1).data(), k, n).transpose();
    }
    if (auto* gb = grad_of(self, 1)) {
      MutMap(gb->data(), k, n).noalias() += ConstMap(value_of(self, 0).data(), m, k).transpose() * g;
    }
  });
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_transposed");
  require_matrix(b, "matmul_transposed");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_transposed: inner extents differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  std::vector<double> c(m * n);
  MutMap(c.data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), n, k).transpose();
  return make_result("matmul_transposed", {m, n}, std::move(c), {a, b}, [m, k, n](Node& self) {
    ConstMap g(self.grad.data(), m, n);
    if (auto* ga = grad_of(self, 0)) {
      MutMap(ga->data(), m, k).noalias() += g * ConstMap(value_of(self, 1).data(), n, k);
    }
    if (auto* gb = grad_of(self, 1)) {
      MutMap(gb->data(), n, k).noalias() += g.transpose() * ConstMap(value_of(self, 0).data(), m, k);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> y(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  return make_result("transpose", {n, m}, std::move(y), {a}, [m, n](Node& self) {
    auto* ga = grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += self.grad[j * m + i];
  });
}

// ---- elementwise --------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_broadcast(a, b, "add");
  const auto x = a.data();
  const auto z = b.data();
  const std::size_t period = z.size();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + z[i % period];
  return make_result("add", a.shape(), std::move(y), {a, b}, [period](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
    if (auto* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % period] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_broadcast(a, b, "sub");
  const auto x = a.data();
  const auto z = b.data();
  const std::size_t period = z.size();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - z[i % period];
  return make_result("sub", a.shape(), std::move(y), {a, b}, [period](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
    if (auto* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % period] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_broadcast(a, b, "mul");
  const auto x = a.data();
  const auto z = b.data();
  const std::size_t period = z.size();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * z[i % period];
  return make_result("mul", a.shape(), std::move(y), {a, b}, [period](Node& self) {
    const auto& x = value_of(self, 0);
    const auto& z = value_of(self, 1);
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * z[i % period];
    }
    if (auto* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % period] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor reciprocal(const Tensor& a) {
  return unary(
      "reciprocal", a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  require_nonempty_axis(a, "log");
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// ---- reductions -----------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result("sum", {1}, {total}, {a}, [](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      for (auto& g : *ga) g += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  double total = 0.0;
  for (double v : a.data()) total += v;
  const double n = static_cast<double>(a.size());
  return make_result("mean", {1}, {total / n}, {a}, [n](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      for (auto& g : *ga) g += self.grad[0] / n;
    }
  });
}

Tensor softmax(const Tensor& a) {
  require_nonempty_axis(a, "softmax");
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double* yi = y.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < c; ++j) yi[j] /= z;
  }
  return make_result("softmax", a.shape(), std::move(y), {a}, [r, c](Node& self) {
    auto* ga = grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i) {
      const double* yi = self.value.data() + i * c;
      const double* gi = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += yi[j] * (gi[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  require_nonempty_axis(a, "log_softmax");
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xi[j] - lse;
  }
  return make_result("log_softmax", a.shape(), std::move(y), {a}, [r, c](Node& self) {
    auto* ga = grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i) {
      const double* gi = self.grad.data() + i * c;
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += gi[j];
      for (std::size_t j = 0; j < c; ++j) {
        (*ga)[i * c + j] += gi[j] - std::exp(self.value[i * c + j]) * total;
      }
    }
  });
}

Tensor masked_softmax(const Tensor& a, std::span<const std::uint8_t> allowed) {
  require_nonempty_axis(a, "masked_softmax");
  if (allowed.size() != a.size()) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(allowed.size()) +
                         " entries for shape " + shape_string(a.shape()));
  }
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data();
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = 0.0;
    bool any = false;
    for (std::size_t j = 0; j < c; ++j) {
      if (allowed[i * c + j] && (!any || x[i * c + j] > mx)) {
        mx = x[i * c + j];
        any = true;
      }
    }
    if (!any) throw DegenerateInputError("attention mask excludes every key for query " + std::to_string(i));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (allowed[i * c + j]) z += (y[i * c + j] = std::exp(x[i * c + j] - mx));
    }
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] /= z;
  }
  return make_result("masked_softmax", a.shape(), std::move(y), {a}, [r, c](Node& self) {
    auto* ga = grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i) {
      const double* yi = self.value.data() + i * c;
      const double* gi = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += yi[j] * (gi[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& a, double eps) {
  require_nonempty_axis(a, "layer_norm");
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data();
  std::vector<double> y(x.size());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = (xi[j] - mu) * inv_std[i];
  }
  return make_result("layer_norm", a.shape(), std::move(y), {a},
                     [r, c, inv_std = std::move(inv_std)](Node& self) {
                       auto* ga = grad_of(self, 0);
                       if (!ga) return;
                       const double n = static_cast<double>(c);
                       for (std::size_t i = 0; i < r; ++i) {
                         const double* yi = self.value.data() + i * c;
                         const double* gi = self.grad.data() + i * c;
                         double g_mean = 0.0, gy_mean = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           g_mean += gi[j];
                           gy_mean += gi[j] * yi[j];
                         }
                         g_mean /= n;
                         gy_mean /= n;
                         for (std::size_t j = 0; j < c; ++j) {
                           (*ga)[i * c + j] += inv_std[i] * (gi[j] - g_mean - yi[j] * gy_mean);
                         }
                       }
                     });
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  require_nonempty_axis(a, "l2_normalize_rows");
  const std::size_t r = a.rows(), c = a.cols();
  const auto x = a.data();
  std::vector<double> y(x.size());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j] * x[i * c + j];
    norms[i] = std::sqrt(s);
    if (norms[i] <= eps) throw DegenerateInputError("zero-norm row " + std::to_string(i) + " in normalization");
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = x[i * c + j] / norms[i];
  }
  return make_result("l2_normalize_rows", a.shape(), std::move(y), {a},
                     [r, c, norms = std::move(norms)](Node& self) {
                       auto* ga = grad_of(self, 0);
                       if (!ga) return;
                       for (std::size_t i = 0; i < r; ++i) {
                         const double* yi = self.value.data() + i * c;
                         const double* gi = self.grad.data() + i * c;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
                         for (std::size_t j = 0; j < c; ++j) {
                           (*ga)[i * c + j] += (gi[j] - yi[j] * dot) / norms[i];
                         }
                       }
                     });
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps) {
  require_defined(u, "cosine_similarity");
  require_defined(v, "cosine_similarity");
  if (u.size() != v.size()) {
    throw DimensionError("cosine_similarity: sizes differ: " + shape_string(u.shape()) + " vs " +
                         shape_string(v.shape()));
  }
  const auto x = u.data();
  const auto z = v.data();
  double dot = 0.0, nx = 0.0, nz = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * z[i];
    nx += x[i] * x[i];
    nz += z[i] * z[i];
  }
  nx = std::sqrt(nx);
  nz = std::sqrt(nz);
  if (nx <= eps || nz <= eps) throw DegenerateInputError("cosine_similarity of a zero-norm vector");
  const double cos = dot / (nx * nz);
  return make_result("cosine_similarity", {1}, {cos}, {u, v}, [nx, nz, cos](Node& self) {
    const auto& x = value_of(self, 0);
    const auto& z = value_of(self, 1);
    const double g = self.grad[0];
    if (auto* gu = grad_of(self, 0)) {
      for (std::size_t i = 0; i < x.size(); ++i) (*gu)[i] += g * (z[i] / (nx * nz) - cos * x[i] / (nx * nx));
    }
    if (auto* gv = grad_of(self, 1)) {
      for (std::size_t i = 0; i < z.size(); ++i) (*gv)[i] += g * (x[i] / (nx * nz) - cos * z[i] / (nz * nz));
    }
  });
}

// ---- indexing and layout -----------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "gather_rows");
  if (ids.empty()) throw DimensionError("gather_rows: no ids");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  const auto t = table.data();
  std::vector<double> y(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(vocab) + " rows");
    }
    std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result("gather_rows", {ids.size(), d}, std::move(y), {table},
                     [d, saved = std::move(saved)](Node& self) {
                       auto* gt = grad_of(self, 0);
                       if (!gt) return;
                       for (std::size_t i = 0; i < saved.size(); ++i) {
                         double* dst = gt->data() + static_cast<std::size_t>(saved[i]) * d;
                         const double* src = self.grad.data() + i * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                       }
                     });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  require_matrix(a, "slice_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (count == 0 || start + count > m) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + std::to_string(m) + " rows");
  }
  const auto x = a.data();
  std::vector<double> y(x.begin() + static_cast<std::ptrdiff_t>(start * n),
                        x.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return make_result("slice_rows", {count, n}, std::move(y), {a}, [start, n](Node& self) {
    auto* ga = grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[start * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  require_matrix(a, "slice_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (count == 0 || start + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + std::to_string(n) + " columns");
  }
  const auto x = a.data();
  std::vector<double> y(m * count);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(x.data() + i * n + start, count, y.data() + i * count);
  return make_result("slice_cols", {m, count}, std::move(y), {a}, [m, n, start, count](Node& self) {
    auto* ga = grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) (*ga)[i * n + start + j] += self.grad[i * count + j];
  });
}

Tensor row(const Tensor& a, std::size_t index) { return slice_rows(a, index, 1); }

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    m += p.shape()[0];
  }
  if (parts.size() == 1) return parts.front();
  std::vector<double> y;
  y.reserve(m * n);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(y.size());
    y.insert(y.end(), p.data().begin(), p.data().end());
  }
  return make_result("concat_rows", {m, n}, std::move(y), parts, [offsets = std::move(offsets)](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto* gk = grad_of(self, k);
      if (!gk) continue;
      for (std::size_t i = 0; i < gk->size(); ++i) (*gk)[i] += self.grad[offsets[k] + i];
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.shape()[0] != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.shape()[1]);
    n += p.shape()[1];
  }
  if (parts.size() == 1) return parts.front();
  std::vector<double> y(m * n);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(x.data() + i * widths[k], widths[k], y.data() + i * n + offset);
    offset += widths[k];
  }
  return make_result("concat_cols", {m, n}, std::move(y), parts, [m, n, widths = std::move(widths)](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (auto* gk = grad_of(self, k)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) (*gk)[i * widths[k] + j] += self.grad[i * n + offset + j];
      }
      offset += widths[k];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> y(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(y), {a}, [](Node& self) {
    auto* ga = grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
  });
}

// ---- fused losses ---------------------------------------------------------------------------

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets,
                             std::span<const double> weights) {
  require_nonempty_axis(logits, "softmax_cross_entropy");
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r || weights.size() != r) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(r) + " rows but " +
                         std::to_string(targets.size()) + " targets / " + std::to_string(weights.size()) +
                         " weights");
  }
  const auto x = logits.data();
  double total_weight = 0.0;
  double loss = 0.0;
  std::vector<double> probs(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[i * c + j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    if (weights[i] == 0.0) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw DimensionError("softmax_cross_entropy: target " + std::to_string(targets[i]) + " outside " +
                           std::to_string(c) + " classes");
    }
    loss += weights[i] * (mx + std::log(z) - xi[targets[i]]);
    total_weight += weights[i];
  }
  if (total_weight == 0.0) throw DegenerateInputError("cross-entropy with every position masked");
  std::vector<int> saved_targets(targets.begin(), targets.end());
  std::vector<double> saved_weights(weights.begin(), weights.end());
  return make_result("softmax_cross_entropy", {1}, {loss / total_weight}, {logits},
                     [r, c, total_weight, probs = std::move(probs), saved_targets = std::move(saved_targets),
                      saved_weights = std::move(saved_weights)](Node& self) {
                       auto* gl = grad_of(self, 0);
                       if (!gl) return;
                       const double g = self.grad[0] / total_weight;
                       for (std::size_t i = 0; i < r; ++i) {
                         if (saved_weights[i] == 0.0) continue;
                         const double w = g * saved_weights[i];
                         for (std::size_t j = 0; j < c; ++j) (*gl)[i * c + j] += w * probs[i * c + j];
                         (*gl)[i * c + static_cast<std::size_t>(saved_targets[i])] -= w;
                       }
                     });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  require_defined(logits, "bce_with_logits");
  if (labels.size() != logits.size()) throw DimensionError("bce_with_logits: label count mismatch");
  const auto x = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    loss += std::max(x[i], 0.0) - x[i] * labels[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  const double n = static_cast<double>(x.size());
  std::vector<double> saved(labels.begin(), labels.end());
  return make_result("bce_with_logits", {1}, {loss / n}, {logits}, [n, saved = std::move(saved)](Node& self) {
    auto* gl = grad_of(self, 0);
    if (!gl) return;
    const auto& x = value_of(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double p = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      (*gl)[i] += self.grad[0] * (p - saved[i]) / n;
    }
  });
}

}  // namespace ilm
