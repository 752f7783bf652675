#include "dualformer/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace dualformer {

namespace {
thread_local bool g_grad_enabled = true;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index num_elements(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad) {
  const Index n = num_elements(shape);
  return from_vector(std::move(shape), Vector<Scalar>::Constant(n, value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_vector(Shape shape, Vector<Scalar> data,
                                           bool requires_grad) {
  if (num_elements(shape) != data.size())
    throw ShapeError("shape " + to_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  auto node = std::make_shared<NodeType>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_values(Shape shape,
                                           std::initializer_list<Scalar> values,
                                           bool requires_grad) {
  Vector<Scalar> v(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar x : values) v[i++] = x;
  return from_vector(std::move(shape), std::move(v), requires_grad);
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1)
    throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool flag) {
  if (!node_->is_leaf())
    throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
  return *this;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return from_vector(shape(), data(), false);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  return from_vector(shape(), data(), requires_grad());
}

template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> Tensor<Scalar>::matrix() const {
  if (rank() != 2)
    throw ShapeError("matrix view needs rank 2, got " + to_string(shape()));
  return Eigen::Map<const RowMatrix<Scalar>>(data().data(), dim(0), dim(1));
}

template <typename Scalar>
std::vector<detail::Node<Scalar>*> topological_order(const Tensor<Scalar>& root) {
  using NodeT = detail::Node<Scalar>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  // Iterative post-order DFS; deep graphs must not blow the stack.
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(&root.node(), 0);
  visited.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) return;
  auto order = topological_order(loss);
  for (auto* node : order)
    if (!node->is_leaf()) node->grad.resize(0);
  loss.node().accumulate(Vector<Scalar>::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (!node->is_leaf() && node->grad.size() != 0) node->backward(*node);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template std::vector<detail::Node<float>*> topological_order(const Tensor<float>&);
template std::vector<detail::Node<double>*> topological_order(const Tensor<double>&);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace dualformer
