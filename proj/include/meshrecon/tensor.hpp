#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "meshrecon/rng.hpp"

namespace meshrecon {

// Dense row-major tensor of doubles.  Shape {1} is the scalar convention
// used throughout (losses, learning rates on tape, ...).
using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tensor {
public:
  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  // 2-D accessors (row-major)
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

// Handle to a tensor that may participate in differentiation.  A Var built
// straight from a Tensor is a constant: ops on constants evaluate eagerly and
// record nothing, which doubles as the no-grad evaluation mode.
class Var {
public:
  Var() = default;
  Var(Tensor v) : value_(std::make_shared<Tensor>(std::move(v))) {}

  const Tensor& value() const { return *value_; }
  // shared ownership handle; backward closures capture this to keep operand
  // values alive without copying them
  const std::shared_ptr<const Tensor>& ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// node id -> gradient tensor, filled during the backward sweep
class GradientMap {
public:
  const Tensor* find(int node) const;
  Tensor& ensure(int node, const Shape& shape);
  // gradient of a leaf/var; zeros if the var never influenced the loss
  Tensor get(const Var& v) const;

private:
  std::unordered_map<int, Tensor> grads_;
};

using BackwardFn = std::function<void(const Tensor& upstream, GradientMap& grads)>;

// Records one forward computation.  Node creation order is a topological
// order, so the backward sweep just walks ids in reverse; that fixed order is
// what makes gradients bit-identical across runs.  A tape is single-threaded
// by contract; concurrent work uses one tape per thread (no shared state).
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // parameter entry point: a leaf var whose gradient can be queried later
  Var leaf(Tensor value);
  // used by every op (including custom ops in other modules) to append a node
  Var record(Tensor output, const std::vector<Var>& parents, BackwardFn backward);

  // Reverse sweep from a scalar loss.  Consumes the tape: a second call
  // without rebuilding the forward pass throws.
  GradientMap backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

private:
  struct Node {
    std::shared_ptr<const Tensor> value;
    BackwardFn backward;  // empty for leaves/constants
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---- primitive ops ----------------------------------------------------
// Same-shape elementwise arithmetic; no implicit broadcasting anywhere
// (mismatches throw with the op name and both shapes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
// explicit shape-changing / scalar forms instead of broadcasting
Var scale_by(const Var& x, const Var& s);  // s has shape {1}
Var add_scalar(const Var& x, double c);
Var mul_scalar(const Var& x, double c);
Var bias_add(const Var& x, const Var& b);  // [n,d] + [d] row vector
Var matmul(const Var& a, const Var& b);    // [n,k] x [k,m]
Var transpose2d(const Var& x);
Var sum(const Var& x);   // full reduction -> {1}
Var mean(const Var& x);  // full reduction -> {1}
Var pow(const Var& x, double e);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope = 0.01);
Var softmax(const Var& x);  // along the last axis; 1-D or 2-D
Var concat(const std::vector<Var>& xs, std::size_t axis);  // 1-D axis 0, 2-D axis 0/1
Var reshape(const Var& x, Shape shape);
// rows of a 2-D tensor / elements of a 1-D tensor; indices are plain data
Var gather_rows(const Var& x, std::vector<std::size_t> idx);
Var clamp(const Var& x, double lo, double hi);
Var abs(const Var& x);
// mean over rows of the row-wise L2 norm; zero rows get zero gradient
Var row_norm_mean(const Var& x);
// normalize the last axis to zero mean / unit variance (eps 1e-5)
Var layer_norm(const Var& x);
Var repeat_rows(const Var& v, std::size_t n);  // [d] or [1,d] -> [n,d]
// Inverted dropout drawing mask bits from the caller's counter stream; the
// same keys always produce the same mask.  train=false is the identity.
Var dropout(const Var& x, double rate, const CounterRng& rng, std::uint64_t k0,
            std::uint64_t k1, std::uint64_t k2, bool train);

// ---- gradient verification oracle --------------------------------------
// Central differences (f(x+h)-f(x-h))/2h per coordinate against the tape
// gradient.  Relative error uses max(1, |numeric|) in the denominator so
// near-zero gradients are compared absolutely.
struct FdiffReport {
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

FdiffReport finite_difference_check(const std::function<Var(Tape&, const Var&)>& f,
                                    const Tensor& x0, double step = 1e-6);
// multi-parameter variant (used for whole-model checks)
FdiffReport finite_difference_check_many(
    const std::function<Var(Tape&, const std::vector<Var>&)>& f,
    const std::vector<Tensor>& x0, double step = 1e-6);

}  // namespace meshrecon
