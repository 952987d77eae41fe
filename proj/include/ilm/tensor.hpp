#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every op result remembers its inputs and a local gradient rule. A Graph is
// the topologically ordered set of differentiable nodes reachable from a loss;
// backward() walks it in reverse exactly once per call and returns gradients
// for the requires_grad leaves.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ilm {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Accumulates this node's grad into the grads of its inputs.
  std::function<void(Node&)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t size() const;
  // Product of all extents but the last.
  std::size_t rows() const;
  // Last extent.
  std::size_t cols() const;

  std::span<const double> data() const;
  // Writable view of a leaf's values (parameter updates, tests).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool is_leaf() const;
  void set_requires_grad(bool flag);
  std::string_view op() const;

  // A new leaf holding a copy of the values.
  Tensor detach() const;

  const detail::Node* id() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

class Graph {
 public:
  explicit Graph(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  // Inputs precede the ops that consume them.
  std::span<const std::shared_ptr<detail::Node>> nodes() const { return order_; }

 private:
  std::vector<std::shared_ptr<detail::Node>> order_;
};

class Gradients {
 public:
  // Gradient for a leaf; zeros when the leaf is not on any path to the loss.
  Tensor operator[](const Tensor& leaf) const;
  std::span<const double> view(const Tensor& leaf) const;
  bool reached(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }

  void set(const detail::Node* node, std::vector<double> grad) { grads_[node] = std::move(grad); }

 private:
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

Gradients backward(const Graph& graph, const Tensor& loss);
Gradients backward(const Tensor& loss);

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a (m×k) times b (n×k) transposed -> m×n.
Tensor matmul_transposed(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- elementwise ----------------------------------------------------------
// Binary ops broadcast b over a when b's shape is a trailing suffix of a's
// shape, or when b holds a single value.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor reciprocal(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// ---- reductions and normalizations over the last axis ---------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
// Softmax over the entries with allowed[r * cols + c] != 0; others get 0.
Tensor masked_softmax(const Tensor& a, std::span<const std::uint8_t> allowed);
// Zero-mean, unit-variance rows (pre-affine layer norm).
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);

Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps = 1e-12);

// ---- indexing and layout ---------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor row(const Tensor& a, std::size_t index);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor reshape(const Tensor& a, Shape shape);

// ---- fused losses -----------------------------------------------------------

// Mean over rows with weight != 0 of weight * -log softmax(logits)[row, target].
// Weights are 0/1 masks in practice.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets,
                             std::span<const double> weights);
// Mean binary cross-entropy of sigmoid(logits) against labels in {0,1}.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);

}  // namespace ilm
