#include "statecf/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include <fmt/format.h>

#include "statecf/rng.hpp"

namespace statecf::ad {
namespace {

void require_shape(bool ok, std::string_view what) {
  if (!ok) throw ShapeError(std::string(what));
}

void require_same_tape(Var a, Var b) {
  require_shape(&a.tape() == &b.tape(), "operands recorded on different tapes");
}

void require_matrix(Var a, std::string_view op) {
  require_shape(a.shape().size() == 2,
                fmt::format("{}: expected rank-2 operand, got {}", op, shape_string(a.shape())));
}

void require_vector(Var a, std::string_view op) {
  require_shape(a.shape().size() == 1,
                fmt::format("{}: expected rank-1 operand, got {}", op, shape_string(a.shape())));
}

void require_nonempty(Var a, std::string_view op) {
  if (a.size() == 0) throw ShapeError(fmt::format("{}: empty input", op));
}

std::vector<double> copy_of(std::span<const double> s) { return {s.begin(), s.end()}; }

// Stable log-sum-exp and softmax over a contiguous span.
double lse_span(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

void softmax_span(std::span<const double> v, std::span<double> out) {
  const double m = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    acc += out[i];
  }
  for (double& y : out) y /= acc;
}

void softmax_backward_span(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx) {
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += dy[i] * y[i];
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] += y[i] * (dy[i] - dot);
}

double norm_span(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

void normalize_backward_span(std::span<const double> y, double norm, std::span<const double> dy,
                             std::span<double> dx) {
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += dy[i] * y[i];
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] += (dy[i] - y[i] * dot) / norm;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, ",")); }

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : shape_(std::move(shape)), values_(std::move(values)), requires_grad_(requires_grad) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError(fmt::format("tensor shape {} has a zero extent", shape_string(shape_)));
  }
  if (shape_size(shape_) != values_.size()) {
    throw ShapeError(fmt::format("tensor shape {} needs {} values, got {}", shape_string(shape_),
                                 shape_size(shape_), values_.size()));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() on a tensor that is not rank 2");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() on a tensor that is not rank 2");
  return shape_[1];
}

void Tensor::set_grad(std::vector<double> grad) {
  if (grad.size() != values_.size()) throw ShapeError("gradient size does not match tensor");
  grad_ = std::move(grad);
}

// ---------------------------------------------------------------------------
// Op names

namespace {
constexpr std::array<std::pair<Op, std::string_view>, 26> kOpNames{{
    {Op::kLeaf, "leaf"},
    {Op::kConstant, "constant"},
    {Op::kMatMul, "matmul"},
    {Op::kTranspose, "transpose"},
    {Op::kAdd, "add"},
    {Op::kSub, "sub"},
    {Op::kMul, "mul"},
    {Op::kMulScalar, "mul_scalar"},
    {Op::kAddScalar, "add_scalar"},
    {Op::kExp, "exp"},
    {Op::kLog, "log"},
    {Op::kTanh, "tanh"},
    {Op::kSum, "sum"},
    {Op::kMean, "mean"},
    {Op::kLogSumExp, "log_sum_exp"},
    {Op::kSoftmax, "softmax"},
    {Op::kSoftmaxRows, "softmax_rows"},
    {Op::kL2Normalize, "l2_normalize"},
    {Op::kL2NormalizeRows, "l2_normalize_rows"},
    {Op::kAddRow, "add_row"},
    {Op::kMeanRows, "mean_rows"},
    {Op::kGather, "gather"},
    {Op::kConcat, "concat"},
    {Op::kStackRows, "stack_rows"},
    {Op::kSliceRows, "slice_rows"},
    {Op::kReshape, "reshape"},
}};
}  // namespace

std::string_view op_name(Op op) {
  for (const auto& [o, name] : kOpNames) {
    if (o == op) return name;
  }
  return "unknown";
}

std::optional<Op> op_from_name(std::string_view name) {
  for (const auto& [o, n] : kOpNames) {
    if (n == name) return o;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Var / Tape

const Shape& Var::shape() const { return tape_->shape(id_); }
std::size_t Var::size() const { return tape_->value(id_).size(); }
std::span<const double> Var::value() const { return tape_->value(id_); }

double Var::item() const {
  auto v = value();
  if (v.size() != 1) throw ShapeError(fmt::format("item() on non-scalar {}", shape_string(shape())));
  return v[0];
}

Var Tape::constant(const Tensor& t) {
  return record(Op::kConstant, t.shape(), copy_of(t.values()), {}, nullptr);
}

Var Tape::constant(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  return constant(t);
}

Var Tape::leaf(Tensor& param) {
  Var v = record(Op::kLeaf, param.shape(), copy_of(param.values()), {}, nullptr);
  nodes_[v.id()].param = &param;
  return v;
}

Var Tape::record(Op op, Shape shape, std::vector<double> value, std::vector<std::uint32_t> inputs,
                 BackwardFn backward) {
  if (backward_done_) throw std::logic_error("tape already consumed by backward()");
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw std::logic_error("node input does not precede it on the tape");
  }
  Node node;
  node.op = op;
  node.shape = std::move(shape);
  node.value = std::move(value);
  node.inputs = std::move(inputs);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::logic_error("loss was recorded on a different tape");
  if (nodes_[loss.id()].value.size() != 1) {
    throw ShapeError(fmt::format("backward() needs a scalar loss, got {}",
                                 shape_string(nodes_[loss.id()].shape)));
  }
  for (auto& n : nodes_) n.adjoint.assign(n.value.size(), 0.0);
  nodes_[loss.id()].adjoint[0] = 1.0;

  std::vector<double> scratch;
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.backward) continue;
    if (options_.corrupt_gradient && *options_.corrupt_gradient == n.op) {
      scratch.assign(n.adjoint.begin(), n.adjoint.end());
      for (double& x : scratch) x *= 1.5;
      n.backward(*this, scratch);
    } else {
      n.backward(*this, nodes_[k].adjoint);
    }
  }

  // Every bound parameter gets a gradient; unreachable ones get zeros.
  for (auto& n : nodes_) {
    if (n.param != nullptr) n.param->zero_grad();
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr) continue;
    std::vector<double> g = *n.param->grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.adjoint[i];
    n.param->set_grad(std::move(g));
  }
  backward_done_ = true;
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require_shape(b.shape()[0] == k, fmt::format("matmul: inner dimensions differ ({} vs {})",
                                               shape_string(a.shape()), shape_string(b.shape())));
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aip * bv[p * n + j];
    }
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(Op::kMatMul, {m, n}, std::move(c), {ia, ib},
                         [ia, ib, m, k, n](Tape& t, std::span<const double> dc) {
                           auto av = t.value(ia);
                           auto bv = t.value(ib);
                           {
                             auto da = t.adjoint(ia);
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t p = 0; p < k; ++p) {
                                 double acc = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * bv[p * n + j];
                                 da[i * k + p] += acc;
                               }
                             }
                           }
                           auto db = t.adjoint(ib);
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t p = 0; p < k; ++p) {
                               const double aip = av[i * k + p];
                               for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * dc[i * n + j];
                             }
                           }
                         });
}

Var transpose(Var a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  auto av = a.value();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  const auto ia = a.id();
  return a.tape().record(Op::kTranspose, {n, m}, std::move(out), {ia},
                         [ia, m, n](Tape& t, std::span<const double> dy) {
                           auto da = t.adjoint(ia);
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < n; ++j) da[i * n + j] += dy[j * m + i];
                           }
                         });
}

namespace {

Var binary_same_shape(Var a, Var b, Op op, std::string_view name) {
  require_same_tape(a, b);
  require_shape(a.shape() == b.shape(), fmt::format("{}: shapes differ ({} vs {})", name,
                                                    shape_string(a.shape()), shape_string(b.shape())));
  auto av = a.value();
  auto bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    switch (op) {
      case Op::kAdd: out[i] = av[i] + bv[i]; break;
      case Op::kSub: out[i] = av[i] - bv[i]; break;
      default: out[i] = av[i] * bv[i]; break;
    }
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(op, a.shape(), std::move(out), {ia, ib},
                         [ia, ib, op](Tape& t, std::span<const double> dy) {
                           if (op == Op::kMul) {
                             auto av = t.value(ia);
                             auto bv = t.value(ib);
                             {
                               auto da = t.adjoint(ia);
                               for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
                             }
                             auto db = t.adjoint(ib);
                             for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
                             return;
                           }
                           const double sign = op == Op::kSub ? -1.0 : 1.0;
                           {
                             auto da = t.adjoint(ia);
                             for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                           }
                           auto db = t.adjoint(ib);
                           for (std::size_t i = 0; i < dy.size(); ++i) db[i] += sign * dy[i];
                         });
}

// Elementwise map whose derivative is expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var elementwise(Var a, Op op, Fwd fwd, Deriv deriv) {
  auto in = a.value();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  const auto ia = a.id();
  Tape& tape = a.tape();
  const auto ir = static_cast<std::uint32_t>(tape.size());
  return tape.record(op, a.shape(), std::move(out), {ia},
                     [ia, ir, deriv](Tape& t, std::span<const double> dy) {
                       auto x = t.value(ia);
                       auto y = t.value(ir);
                       auto dx = t.adjoint(ia);
                       for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * deriv(x[i], y[i]);
                     });
}

}  // namespace

Var add(Var a, Var b) { return binary_same_shape(a, b, Op::kAdd, "add"); }
Var sub(Var a, Var b) { return binary_same_shape(a, b, Op::kSub, "sub"); }
Var mul(Var a, Var b) { return binary_same_shape(a, b, Op::kMul, "mul"); }

Var mul_scalar(Var a, double c) {
  return elementwise(
      a, Op::kMulScalar, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return elementwise(
      a, Op::kAddScalar, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var exp(Var a) {
  return elementwise(
      a, Op::kExp, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double x : a.value()) {
    if (x <= 0.0) throw DomainError(fmt::format("log of non-positive value {}", x));
  }
  return elementwise(
      a, Op::kLog, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return elementwise(
      a, Op::kTanh, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double x : a.value()) acc += x;
  const auto ia = a.id();
  return a.tape().record(Op::kSum, {}, {acc}, {ia}, [ia](Tape& t, std::span<const double> dy) {
    for (double& d : t.adjoint(ia)) d += dy[0];
  });
}

Var mean(Var a) {
  require_nonempty(a, "mean");
  double acc = 0.0;
  for (double x : a.value()) acc += x;
  const double n = static_cast<double>(a.size());
  const auto ia = a.id();
  return a.tape().record(Op::kMean, {}, {acc / n}, {ia}, [ia, n](Tape& t, std::span<const double> dy) {
    for (double& d : t.adjoint(ia)) d += dy[0] / n;
  });
}

Var log_sum_exp(Var v) {
  require_nonempty(v, "log_sum_exp");
  const double out = lse_span(v.value());
  const auto iv = v.id();
  return v.tape().record(Op::kLogSumExp, {}, {out}, {iv}, [iv](Tape& t, std::span<const double> dy) {
    auto x = t.value(iv);
    std::vector<double> p(x.size());
    softmax_span(x, p);
    auto dx = t.adjoint(iv);
    for (std::size_t i = 0; i < p.size(); ++i) dx[i] += dy[0] * p[i];
  });
}

Var softmax(Var v) {
  require_vector(v, "softmax");
  require_nonempty(v, "softmax");
  std::vector<double> out(v.size());
  softmax_span(v.value(), out);
  const auto iv = v.id();
  Tape& tape = v.tape();
  const auto ir = static_cast<std::uint32_t>(tape.size());
  return tape.record(Op::kSoftmax, v.shape(), std::move(out), {iv},
                     [iv, ir](Tape& t, std::span<const double> dy) {
                       softmax_backward_span(t.value(ir), dy, t.adjoint(iv));
                     });
}

Var softmax_rows(Var a) {
  require_matrix(a, "softmax_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  auto av = a.value();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    softmax_span(av.subspan(i * n, n), std::span<double>(out).subspan(i * n, n));
  }
  const auto ia = a.id();
  Tape& tape = a.tape();
  const auto ir = static_cast<std::uint32_t>(tape.size());
  return tape.record(Op::kSoftmaxRows, a.shape(), std::move(out), {ia},
                     [ia, ir, m, n](Tape& t, std::span<const double> dy) {
                       auto y = t.value(ir);
                       auto dx = t.adjoint(ia);
                       for (std::size_t i = 0; i < m; ++i) {
                         softmax_backward_span(y.subspan(i * n, n), dy.subspan(i * n, n),
                                               dx.subspan(i * n, n));
                       }
                     });
}

Var l2_normalize(Var v) {
  require_vector(v, "l2_normalize");
  double norm = norm_span(v.value());
  if (norm == 0.0) throw DomainError("l2_normalize of a zero vector");
  // An overflowed norm would silently map the input to zeros.
  if (std::isinf(norm)) norm = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> out = copy_of(v.value());
  for (double& x : out) x /= norm;
  const auto iv = v.id();
  Tape& tape = v.tape();
  const auto ir = static_cast<std::uint32_t>(tape.size());
  return tape.record(Op::kL2Normalize, v.shape(), std::move(out), {iv},
                     [iv, ir, norm](Tape& t, std::span<const double> dy) {
                       normalize_backward_span(t.value(ir), norm, dy, t.adjoint(iv));
                     });
}

Var l2_normalize_rows(Var a) {
  require_matrix(a, "l2_normalize_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  auto av = a.value();
  std::vector<double> norms(m);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    norms[i] = norm_span(av.subspan(i * n, n));
    if (norms[i] == 0.0) throw DomainError(fmt::format("l2_normalize_rows: row {} is zero", i));
    if (std::isinf(norms[i])) norms[i] = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] / norms[i];
  }
  const auto ia = a.id();
  Tape& tape = a.tape();
  const auto ir = static_cast<std::uint32_t>(tape.size());
  return tape.record(Op::kL2NormalizeRows, a.shape(), std::move(out), {ia},
                     [ia, ir, m, n, norms = std::move(norms)](Tape& t, std::span<const double> dy) {
                       auto y = t.value(ir);
                       auto dx = t.adjoint(ia);
                       for (std::size_t i = 0; i < m; ++i) {
                         normalize_backward_span(y.subspan(i * n, n), norms[i], dy.subspan(i * n, n),
                                                 dx.subspan(i * n, n));
                       }
                     });
}

Var add_row(Var a, Var b) {
  require_same_tape(a, b);
  require_matrix(a, "add_row");
  require_vector(b, "add_row");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  require_shape(b.shape()[0] == n, fmt::format("add_row: row length {} vs vector {}", n, b.shape()[0]));
  std::vector<double> out = copy_of(a.value());
  auto bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(Op::kAddRow, a.shape(), std::move(out), {ia, ib},
                         [ia, ib, m, n](Tape& t, std::span<const double> dy) {
                           {
                             auto da = t.adjoint(ia);
                             for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                           }
                           auto db = t.adjoint(ib);
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
                           }
                         });
}

Var mean_rows(Var a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  auto av = a.value();
  // Each column is summed in sorted order so the result is exactly invariant
  // to row permutations.
  std::vector<double> out(n, 0.0);
  std::vector<double> column(m);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) column[i] = av[i * n + j];
    std::sort(column.begin(), column.end());
    for (double x : column) out[j] += x;
    out[j] /= static_cast<double>(m);
  }
  const auto ia = a.id();
  return a.tape().record(Op::kMeanRows, {n}, std::move(out), {ia},
                         [ia, m, n](Tape& t, std::span<const double> dy) {
                           auto da = t.adjoint(ia);
                           const double inv = 1.0 / static_cast<double>(m);
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < n; ++j) da[i * n + j] += dy[j] * inv;
                           }
                         });
}

Var gather(Var a, std::span<const std::size_t> indices) {
  require_shape(!indices.empty(), "gather: empty index list");
  auto av = a.value();
  std::vector<double> out(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    require_shape(indices[k] < av.size(),
                  fmt::format("gather: index {} out of range for {}", indices[k], shape_string(a.shape())));
    out[k] = av[indices[k]];
  }
  const auto ia = a.id();
  return a.tape().record(Op::kGather, {indices.size()}, std::move(out), {ia},
                         [ia, idx = std::vector<std::size_t>(indices.begin(), indices.end())](
                             Tape& t, std::span<const double> dy) {
                           auto da = t.adjoint(ia);
                           for (std::size_t k = 0; k < idx.size(); ++k) da[idx[k]] += dy[k];
                         });
}

Var concat(std::span<const Var> parts) {
  require_shape(!parts.empty(), "concat: no parts");
  std::vector<double> out;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    auto v = p.value();
    out.insert(out.end(), v.begin(), v.end());
    ids.push_back(p.id());
    sizes.push_back(v.size());
  }
  const std::size_t total = out.size();
  return parts[0].tape().record(Op::kConcat, {total}, std::move(out), ids,
                                [ids, sizes](Tape& t, std::span<const double> dy) {
                                  std::size_t offset = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    auto d = t.adjoint(ids[k]);
                                    for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += dy[offset + i];
                                    offset += sizes[k];
                                  }
                                });
}

Var stack_rows(std::span<const Var> rows) {
  require_shape(!rows.empty(), "stack_rows: no rows");
  const std::size_t n = rows[0].size();
  for (const Var& r : rows) {
    require_vector(r, "stack_rows");
    require_shape(r.size() == n, "stack_rows: rows differ in length");
  }
  Var flat = concat(rows);
  // Re-label the concatenation as a matrix; gradients pass straight through.
  Tape& tape = flat.tape();
  const auto ic = flat.id();
  return tape.record(Op::kStackRows, {rows.size(), n}, copy_of(flat.value()), {ic},
                     [ic](Tape& t, std::span<const double> dy) {
                       auto d = t.adjoint(ic);
                       for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
                     });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  require_shape(begin < end && end <= m, fmt::format("slice_rows: [{}, {}) out of range for {} rows",
                                                     begin, end, m));
  auto av = a.value().subspan(begin * n, (end - begin) * n);
  const auto ia = a.id();
  return a.tape().record(Op::kSliceRows, {end - begin, n}, copy_of(av), {ia},
                         [ia, offset = begin * n](Tape& t, std::span<const double> dy) {
                           auto da = t.adjoint(ia);
                           for (std::size_t i = 0; i < dy.size(); ++i) da[offset + i] += dy[i];
                         });
}

Var row(Var a, std::size_t r) {
  Var s = slice_rows(a, r, r + 1);
  return reshape(s, {a.shape()[1]});
}

Var reshape(Var a, Shape shape) {
  require_shape(shape_size(shape) == a.size(),
                fmt::format("reshape: {} to {} changes size", shape_string(a.shape()), shape_string(shape)));
  const auto ia = a.id();
  return a.tape().record(Op::kReshape, std::move(shape), copy_of(a.value()), {ia},
                         [ia](Tape& t, std::span<const double> dy) {
                           auto da = t.adjoint(ia);
                           for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                         });
}

// ---------------------------------------------------------------------------
// Gradient checker

namespace {

double evaluate(const LossBuilder& f, std::span<Tensor* const> params, const TapeOptions& options) {
  Tape tape(options);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (Tensor* p : params) leaves.push_back(tape.leaf(*p));
  const double v = f(tape, leaves).item();
  if (!std::isfinite(v)) throw DomainError("grad_check: loss is not finite at a probe point");
  return v;
}

Tensor with_entry(const Tensor& t, std::size_t i, double value) {
  std::vector<double> v(t.values().begin(), t.values().end());
  v[i] = value;
  return Tensor(t.shape(), std::move(v), t.requires_grad());
}

}  // namespace

GradCheckResult grad_check(const LossBuilder& f, std::span<Tensor* const> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  std::vector<std::vector<double>> analytic;
  {
    Tape tape(options.tape);
    std::vector<Var> leaves;
    for (Tensor* p : params) leaves.push_back(tape.leaf(*p));
    Var loss = f(tape, leaves);
    if (!std::isfinite(loss.item())) throw DomainError("grad_check: loss is not finite");
    tape.backward(loss);
    for (Tensor* p : params) analytic.push_back(*p->grad());
  }

  // Probes always run on clean tapes; only the analytic pass sees options.tape.
  const TapeOptions clean{};
  Rng rng(options.probe_seed);
  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_probes_per_tensor > 0 && coords.size() > options.max_probes_per_tensor) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(options.max_probes_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    const Tensor saved = p;
    for (std::size_t i : coords) {
      const double x = saved[i];
      p = with_entry(saved, i, x + options.step);
      const double fp = evaluate(f, params, clean);
      p = with_entry(saved, i, x - options.step);
      const double fm = evaluate(f, params, clean);
      p = saved;
      const double central = (fp - fm) / (2.0 * options.step);
      const double err = std::abs(analytic[k][i] - central) / std::max(1.0, std::abs(central));
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.probes;
    }
    p.set_grad(analytic[k]);
  }
  return result;
}

double grad_check(const LossBuilder& f, std::span<Tensor* const> params, double step) {
  GradCheckOptions options;
  options.step = step;
  return grad_check(f, params, options).max_rel_error;
}

}  // namespace statecf::ad
