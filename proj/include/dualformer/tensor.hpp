#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualformer {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller breaks an operation's precondition (e.g. backward on
/// a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Internal invariant broken; indicates a bug rather than bad input.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string to_string(const Shape& shape);
Index num_elements(const Shape& shape);

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  Vector<Scalar> value;
  Vector<Scalar> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs[i]->grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  void accumulate(const Vector<Scalar>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
  Vector<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Vector<Scalar>::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

/// Whether ops record a graph for reverse-mode differentiation (thread local).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor and a handle onto its node in the computation graph.
/// Copies share storage; use clone() for a deep copy.
template <typename Scalar>
class Tensor {
 public:
  using NodeType = detail::Node<Scalar>;
  using NodePtr = std::shared_ptr<NodeType>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, Vector<Scalar> data,
                            bool requires_grad = false);
  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values,
                            bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return node_->value.size(); }

  const Vector<Scalar>& data() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (parameters, inputs).
  Vector<Scalar>& mutable_data() { return node_->value; }
  Scalar operator[](Index i) const { return node_->value[i]; }
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_->grad.size() != 0; }
  const Vector<Scalar>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  /// Leaf holding a copy of the values, outside any graph.
  Tensor detach() const;
  Tensor clone() const;

  Eigen::Map<const RowMatrix<Scalar>> matrix() const;

  NodeType& node() const { return *node_; }
  const NodePtr& node_ptr() const { return node_; }
  const char* op_name() const { return node_->op; }

 private:
  NodePtr node_;
};

namespace detail {

/// Builds a result node; records the graph edge only when a gradient can flow.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, Vector<Scalar> value, const char* op,
                           std::vector<Tensor<Scalar>> inputs,
                           std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled())
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

}  // namespace detail

/// Nodes reachable from `root`, ordered so every node follows its inputs.
template <typename Scalar>
std::vector<detail::Node<Scalar>*> topological_order(const Tensor<Scalar>& root);

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed on every call.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

}  // namespace dualformer
