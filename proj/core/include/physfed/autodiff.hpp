#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace physfed::ad {

/// Dense row-major double tensor. Plain value type.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const;

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<int>& shape);
std::size_t shape_size(const std::vector<int>& shape);

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape(); }
};

/// Gradients indexed by node id. Leaves that did not influence the loss
/// hold zero tensors of their own shape.
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  const Tensor& of(Var v) const { return grads_.at(static_cast<std::size_t>(v.id)); }
  const Tensor& of(int node_id) const { return grads_.at(static_cast<std::size_t>(node_id)); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

/// Records operations in execution order, which is a topological order.
/// Single-threaded; use one tape per worker.
class Tape {
 public:
  using Backward = std::function<void(const Tensor& grad_out, std::vector<Tensor>& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var record(Tensor value, std::vector<int> inputs, Backward backward);

  const Tensor& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse accumulation from a scalar loss node.
  Gradients backward(Var loss) const;

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    Backward backward;  // empty for leaves
  };
  // deque: references returned by value() survive later records.
  std::deque<Node> nodes_;
};

// Forward ops. Every op records onto the tape of its first argument.

/// input C_in x H x W, kernels C_out x C_in x 3 x 3, bias C_out; stride 1,
/// zero padding 1.
Var conv2d(Var input, Var kernels, Var bias);
/// x 1 x n, w n x m, b m.
Var linear(Var x, Var w, Var b);
Var relu(Var x);
/// x 1 x d -> 1 x d/factor.
Var avgpool1d(Var x, int factor = 4);
/// Over the last axis of a rank-2 tensor.
Var softmax(Var x);
Var matmul(Var a, Var b);
Var transpose(Var a);
/// Same-rank broadcasting: each axis of a and b is equal or 1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var reshape(Var a, std::vector<int> shape);
Var mean(Var a);
Var sum(Var a);
/// x C x H x W, alpha C, beta C -> alpha_c * x + beta_c.
Var channel_affine(Var x, Var alpha, Var beta);
/// Columns [begin, begin + count) of a rank-2 tensor.
Var slice_cols(Var a, int begin, int count);
Var concat_cols(std::span<const Var> parts);
/// Inner product of two tensors of equal size, as a scalar.
Var dot(Var a, Var b);

struct CheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct CheckReport {
  std::vector<CheckEntry> entries;
  bool pass = true;
};

/// Builds a scalar graph from leaves created for each input tensor.
using GraphFn = std::function<Var(Tape& tape, std::span<const Var> leaves)>;

struct NamedInput {
  std::string name;
  Tensor value;
};

/// Central differences against backward() for every coordinate of every
/// input. rel error = |a - n| / max(|a|, |n|, 1e-8).
CheckReport finite_diff_check(const GraphFn& graph, std::span<const NamedInput> inputs, double h, double tol);

/// Deliberate backward faults for mutation tests of the checker.
enum class Fault { None, ConvTransposedKernel };
void inject_fault(Fault f);
Fault injected_fault();

}  // namespace physfed::ad
