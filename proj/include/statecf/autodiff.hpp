#pragma once

// Tape-based reverse-mode automatic differentiation over dense double tensors.
//
// Parameters and constants live in `Tensor` values. A `Tape` records the
// operations of one forward pass; `Var` is a lightweight handle to a recorded
// node. Calling `Tape::backward` on a scalar node writes gradients into every
// parameter tensor bound to the tape with `Tape::leaf`.
//
// Shapes are explicit: no broadcasting happens except for the scalar ops and
// the named row-wise ops (`add_row`, `softmax_rows`, `l2_normalize_rows`).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace statecf::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  bool requires_grad() const { return requires_grad_; }
  const std::optional<std::vector<double>>& grad() const { return grad_; }
  void set_grad(std::vector<double> grad);
  void zero_grad() { grad_.emplace(values_.size(), 0.0); }
  void clear_grad() { grad_.reset(); }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kMatMul,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kMulScalar,
  kAddScalar,
  kExp,
  kLog,
  kTanh,
  kSum,
  kMean,
  kLogSumExp,
  kSoftmax,
  kSoftmaxRows,
  kL2Normalize,
  kL2NormalizeRows,
  kAddRow,
  kMeanRows,
  kGather,
  kConcat,
  kStackRows,
  kSliceRows,
  kReshape,
};

std::string_view op_name(Op op);
std::optional<Op> op_from_name(std::string_view name);

struct TapeOptions {
  // Test hook: the named op's backward rule receives a scaled adjoint, which
  // makes its gradient wrong by 50%. Used to prove the checker catches bugs.
  std::optional<Op> corrupt_gradient;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::size_t size() const;
  std::span<const double> value() const;
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  // Receives the node's output adjoint and adds contributions into its inputs.
  using BackwardFn = std::function<void(Tape&, std::span<const double> out_adjoint)>;

  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(const Tensor& t);
  Var constant(Shape shape, std::vector<double> values);
  // Binds a parameter. After backward(), `param.grad()` holds d(loss)/d(param),
  // summed over every leaf node created for it on this tape.
  Var leaf(Tensor& param);

  Var record(Op op, Shape shape, std::vector<double> value, std::vector<std::uint32_t> inputs,
             BackwardFn backward);

  void backward(Var loss);

  const Shape& shape(std::uint32_t id) const { return nodes_[id].shape; }
  std::span<const double> value(std::uint32_t id) const { return nodes_[id].value; }
  std::span<double> adjoint(std::uint32_t id) { return nodes_[id].adjoint; }
  std::span<const double> adjoint(std::uint32_t id) const { return nodes_[id].adjoint; }
  Op op(std::uint32_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }
  const TapeOptions& options() const { return options_; }

 private:
  struct Node {
    Op op = Op::kConstant;
    Shape shape;
    std::vector<double> value;
    std::vector<double> adjoint;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    Tensor* param = nullptr;
  };

  TapeOptions options_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Matrix ops. Matrices are rank-2, row-major.
Var matmul(Var a, Var b);
Var transpose(Var a);

// Elementwise ops on identically shaped operands.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var mul_scalar(Var a, double c);
Var add_scalar(Var a, double c);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);

// Reductions to a scalar.
Var sum(Var a);
Var mean(Var a);
Var log_sum_exp(Var v);

// Vector ops (rank 1) and their row-wise counterparts (rank 2).
Var softmax(Var v);
Var softmax_rows(Var a);
Var l2_normalize(Var v);
Var l2_normalize_rows(Var a);
// a[m,n] + b[n] added to every row.
Var add_row(Var a, Var b);
// [m,n] -> [n], average over rows; exactly invariant to row order.
Var mean_rows(Var a);

// Indexing and layout. Indices address the flattened row-major storage.
Var gather(Var a, std::span<const std::size_t> indices);
Var concat(std::span<const Var> parts);
Var stack_rows(std::span<const Var> rows);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var row(Var a, std::size_t r);
Var reshape(Var a, Shape shape);

// Gradient checker.
//
// `LossBuilder` records a scalar loss on the given tape from the leaf handles
// (one per entry of `params`, in order). It must be deterministic.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
  double step = 1e-5;
  // 0 probes every coordinate; otherwise a seeded sample per tensor.
  std::size_t max_probes_per_tensor = 0;
  std::uint64_t probe_seed = 0;
  TapeOptions tape;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
};

// Returns max over probed coordinates of
// |analytic - central| / max(1, |central|). Throws DomainError if the loss is
// non-finite at any probe point.
GradCheckResult grad_check(const LossBuilder& f, std::span<Tensor* const> params,
                           const GradCheckOptions& options);
double grad_check(const LossBuilder& f, std::span<Tensor* const> params, double step);

}  // namespace statecf::ad
