#ifndef SOA_AUTODIFF_TENSOR_H_
#define SOA_AUTODIFF_TENSOR_H_

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace soa::ad {

using Shape = std::vector<int64_t>;

int64_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(Node& self)>;

// One record of the computation graph. Inputs always have smaller ids than
// their consumers, so creation order is a topological order.
struct Node {
  uint64_t id = 0;
  std::string kind;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  // Returns the gradient buffer, allocating zeros on first use.
  std::vector<double>& MutableGrad();
};

// Handle to a node. Copies share the node; values are immutable once the
// node is created, except for leaves updated by an optimizer between steps.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor Constant(Shape shape, std::vector<double> values);
  static Tensor Parameter(Shape shape, std::vector<double> values);
  static Tensor Zeros(Shape shape, bool requires_grad = false);
  static Tensor Scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  std::span<const double> values() const { return node_->value; }
  double item() const;
  double at(int64_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient accumulated by Backward; zeros when the tensor did not take part.
  std::vector<double> grad() const;
  void ZeroGrad() { node_->grad.clear(); }

  // Leaf-only mutation hooks for optimizers and freezing.
  std::span<double> mutable_values();
  void set_requires_grad(bool on);

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Creates an op output. When no input requires a gradient the backward
// closure and the input references are dropped.
Tensor MakeResult(std::string kind, Shape shape, std::vector<double> values,
                  std::vector<Tensor> inputs, BackwardFn backward);

struct GraphRecord {
  uint64_t id;
  std::string kind;
  std::vector<uint64_t> input_ids;
  Node* node;
};

// Nodes reachable from root that require gradients, ordered so that every
// input precedes its consumer.
std::vector<GraphRecord> TopologicalOrder(const Tensor& root);

// Reverse-mode pass. Gradients accumulate into every reachable tensor that
// requires them; the loss must hold exactly one value.
void Backward(const Tensor& loss);

}  // namespace soa::ad

#endif  // SOA_AUTODIFF_TENSOR_H_
