#ifndef ADAPTSENSE_TENSOR_H_
#define ADAPTSENSE_TENSOR_H_

// Minimal reverse-mode automatic differentiation over dense double arrays.
//
// Every operation returns a new Var whose node remembers its parents and a
// closure that pushes the node's gradient into them. Nodes are reference
// counted, so a forward graph lives exactly as long as the Vars that reach
// it. Leaf Vars created with requires_grad accumulate gradients across
// Backward() calls until ZeroGrad().

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace adaptsense::ag {

using Shape = std::vector<int>;

int NumElements(const Shape& shape);
std::string ShapeString(const Shape& shape);

struct Node {
  std::vector<double> value;
  std::vector<double> grad;
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node& self)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var Constant(std::vector<double> values, Shape shape);
  static Var Constant(std::vector<double> values);
  static Var Scalar(double value);
  static Var Zeros(Shape shape);
  static Var Leaf(std::vector<double> values, Shape shape, bool requires_grad);

  bool defined() const { return node_ != nullptr; }
  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& mutable_value() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() { return node_->grad; }
  const Shape& shape() const { return node_->shape; }
  int size() const { return static_cast<int>(node_->value.size()); }
  int dim(int i) const { return node_->shape.at(i); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;
  double operator[](int i) const { return node_->value[i]; }

  // Seeds d(this)/d(this) = 1 (this must be a scalar) and propagates.
  void Backward() const;
  void ZeroGrad();
  void set_requires_grad(bool on);

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Elementwise arithmetic. Binary ops require identical element counts; the
// result takes the shape of the first operand.
Var Add(const Var& a, const Var& b);
Var Sub(const Var& a, const Var& b);
Var Mul(const Var& a, const Var& b);
Var Scale(const Var& x, double c);
Var AddScalar(const Var& x, double c);
// x * s where s holds a single element; differentiable in both.
Var MulScalar(const Var& x, const Var& s);
Var Neg(const Var& x);
Var Relu(const Var& x);
Var Sigmoid(const Var& x);
Var Tanh(const Var& x);
Var Exp(const Var& x);
Var Log(const Var& x);
Var Abs(const Var& x);
Var Square(const Var& x);

Var Sum(const Var& x);
Var Mean(const Var& x);

// y = W x + b with W of shape [out, in]; x is read flat.
Var Linear(const Var& x, const Var& weight, const Var& bias);
Var MatMul(const Var& a, const Var& b);
Var Transpose(const Var& a);
Var AddRowBias(const Var& a, const Var& bias);

Var Softmax(const Var& x);
Var LogSoftmax(const Var& x);
Var SoftmaxRows(const Var& a);

Var Reshape(const Var& x, Shape shape);
Var Concat(std::span<const Var> parts);
Var Slice(const Var& x, int begin, int end);
Var ColSlice(const Var& a, int begin, int end);
Var ConcatCols(std::span<const Var> parts);
Var Row(const Var& a, int i);
Var StackRows(std::span<const Var> rows);

// Same-padded, stride-1 convolutions with odd kernels.
// Conv2d: x [C, H, W], weight [O, C, kh, kw], bias [O] -> [O, H, W].
Var Conv2d(const Var& x, const Var& weight, const Var& bias);
// Conv1d: x [C, L], weight [O, C, k], bias [O] -> [O, L].
Var Conv1d(const Var& x, const Var& weight, const Var& bias);
// Non-overlapping max pooling with floor semantics.
Var MaxPool2d(const Var& x, int k);
Var MaxPool1d(const Var& x, int k);

// Per-channel normalization with statistics over all non-channel axes of x.
Var BatchNorm(const Var& x, const Var& gamma, const Var& beta,
              double eps = 1e-5);
// Mean over the last axis: [..., D] -> [...].
Var MeanLastAxis(const Var& x);
// y[c, ...] = x[c, ...] * m[c].
Var MulChannels(const Var& x, const Var& m);

// Forward value is `hard`; the gradient passes to `soft` unchanged.
Var StraightThrough(std::vector<double> hard, const Var& soft);
Var StopGradient(const Var& x);

}  // namespace adaptsense::ag

#endif  // ADAPTSENSE_TENSOR_H_
