#include "soa/autodiff/tensor.h"

#include <atomic>
#include <sstream>
#include <unordered_set>

#include "soa/errors.h"

namespace soa::ad {

namespace {

std::atomic<uint64_t> g_next_node_id{1};

std::shared_ptr<Node> NewNode(std::string kind, Shape shape,
                              std::vector<double> values) {
  SOA_REQUIRE(NumElements(shape) == static_cast<int64_t>(values.size()),
              ContractError,
              "value count " + std::to_string(values.size()) +
                  " does not match shape " + ShapeToString(shape));
  auto node = std::make_shared<Node>();
  node->id = g_next_node_id.fetch_add(1);
  node->kind = std::move(kind);
  node->shape = std::move(shape);
  node->value = std::move(values);
  return node;
}

}  // namespace

int64_t NumElements(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    SOA_REQUIRE(d >= 0, ContractError, "negative extent in shape");
    n *= d;
  }
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& Node::MutableGrad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::Constant(Shape shape, std::vector<double> values) {
  return Tensor(NewNode("constant", std::move(shape), std::move(values)));
}

Tensor Tensor::Parameter(Shape shape, std::vector<double> values) {
  auto node = NewNode("parameter", std::move(shape), std::move(values));
  node->requires_grad = true;
  return Tensor(std::move(node));
}

Tensor Tensor::Zeros(Shape shape, bool requires_grad) {
  std::vector<double> values(NumElements(shape), 0.0);
  return requires_grad ? Parameter(std::move(shape), std::move(values))
                       : Constant(std::move(shape), std::move(values));
}

Tensor Tensor::Scalar(double value) { return Constant({}, {value}); }

int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  SOA_REQUIRE(axis >= 0 && axis < r, ContractError, "axis out of range");
  return node_->shape[axis];
}

double Tensor::item() const {
  SOA_REQUIRE(numel() == 1, ContractError,
              "item() on tensor of shape " + ShapeToString(shape()));
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

std::span<double> Tensor::mutable_values() {
  SOA_REQUIRE(node_->inputs.empty() && !node_->backward, ContractError,
              "only leaf tensors may be mutated");
  return node_->value;
}

void Tensor::set_requires_grad(bool on) {
  SOA_REQUIRE(node_->inputs.empty() && !node_->backward, ContractError,
              "only leaf tensors may change requires_grad");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

Tensor MakeResult(std::string kind, Shape shape, std::vector<double> values,
                  std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = NewNode(std::move(kind), std::move(shape), std::move(values));
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

std::vector<GraphRecord> TopologicalOrder(const Tensor& root) {
  std::vector<GraphRecord> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<const Node*> visited;
  // Iterative post-order DFS; the graph can be deep enough to make recursion
  // uncomfortable.
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    GraphRecord rec{node->id, node->kind, {}, node};
    for (const auto& in : node->inputs) rec.input_ids.push_back(in->id);
    order.push_back(std::move(rec));
    stack.pop_back();
  }
  return order;
}

void Backward(const Tensor& loss) {
  SOA_REQUIRE(loss.defined() && loss.numel() == 1, ContractError,
              "backward requires a scalar loss");
  if (!loss.requires_grad()) return;
  std::vector<GraphRecord> order = TopologicalOrder(loss);
  loss.node()->MutableGrad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->node;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

}  // namespace soa::ad
