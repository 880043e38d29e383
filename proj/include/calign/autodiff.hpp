#pragma once

// Reverse-mode differentiation over dense row-major float64 tensors.
//
// A Tape owns every value produced during one computation. Ops are free
// functions over Var handles; an op is recorded with a backward rule only
// when at least one input requires a gradient. Broadcasting is limited to
// the right operand of add/sub/mul, which may match the left operand's
// full shape, its trailing dimensions, or be a single element.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "calign/errors.hpp"

namespace calign::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(element_count(shape_), fill);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
    }
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void validate_shape() const {
    if (shape_.empty() || std::find(shape_.begin(), shape_.end(), std::size_t{0}) != shape_.end()) {
      throw ShapeError("tensor: shape " + shape_str(shape_) + " must be nonempty with positive dims");
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  std::shared_ptr<const Tensor> value_ptr() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool has_grad() const;
  // Gradient buffer after backward; zeros if nothing flowed into this value.
  Tensor grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var constant(Tensor value) { return leaf(std::make_shared<const Tensor>(std::move(value)), false); }
  Var constant(std::shared_ptr<const Tensor> value) { return leaf(std::move(value), false); }
  Var parameter(Tensor value) { return leaf(std::make_shared<const Tensor>(std::move(value)), true); }
  Var parameter(std::shared_ptr<const Tensor> value) { return leaf(std::move(value), true); }

  // Records an op output. `fn` is kept only when some input requires grad.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool any_grad = false;
    for (const Var& in : inputs) {
      check_owned(in, op);
      any_grad = any_grad || nodes_[in.id()].requires_grad;
    }
    if (!value.all_finite()) {
      throw NumericError(std::string(op) + ": produced a non-finite value");
    }
    Node node;
    node.value = std::make_shared<const Tensor>(std::move(value));
    node.requires_grad = any_grad;
    if (any_grad) {
      node.backward = std::move(fn);
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  // Populates gradients of every grad-requiring value with respect to `loss`.
  // A tape supports exactly one backward pass.
  void backward(const Var& loss) {
    if (loss.tape() != this) {
      throw UsageError("backward: loss was not produced on this tape");
    }
    if (backward_done_) {
      throw UsageError("backward: already called on this tape");
    }
    const Tensor& lv = *nodes_[loss.id()].value;
    if (lv.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
    }
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) {
      return;
    }
    grad_buffer(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.requires_grad || !node.grad || !node.backward) {
        continue;
      }
      node.backward(*this, *node.grad);
    }
  }

  bool backward_done() const noexcept { return backward_done_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return *nodes_.at(id).value; }
  std::shared_ptr<const Tensor> value_ptr(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::optional<Tensor>& grad(std::size_t id) const { return nodes_.at(id).grad; }

  // Zero-initialised on first access. Backward rules accumulate into it.
  Tensor& grad_buffer(std::size_t id) {
    Node& node = nodes_.at(id);
    if (!node.grad) {
      node.grad.emplace(node.value->shape(), 0.0);
    }
    return *node.grad;
  }

  void check_owned(const Var& v, std::string_view op) const {
    if (v.tape() != this) {
      throw UsageError(std::string(op) + ": operand belongs to a different tape");
    }
  }

 private:
  struct Node {
    std::shared_ptr<const Tensor> value;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var leaf(std::shared_ptr<const Tensor> value, bool requires_grad) {
    if (!value || value->empty()) {
      throw UsageError("leaf: empty tensor");
    }
    if (!value->all_finite()) {
      throw NumericError("leaf: non-finite input value");
    }
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw UsageError("var: uninitialised handle");
  return tape_->value(id_);
}
inline std::shared_ptr<const Tensor> Var::value_ptr() const {
  if (!tape_) throw UsageError("var: uninitialised handle");
  return tape_->value_ptr(id_);
}
inline bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }
inline bool Var::has_grad() const { return tape_ && tape_->grad(id_).has_value(); }
inline Tensor Var::grad() const {
  if (!tape_) throw UsageError("var: uninitialised handle");
  const auto& g = tape_->grad(id_);
  return g ? *g : Tensor(value().shape(), 0.0);
}

namespace detail {

inline Tape& common_tape(std::string_view op, const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) throw UsageError(std::string(op) + ": uninitialised operand");
  if (a.tape() != b.tape()) throw UsageError(std::string(op) + ": operands live on different tapes");
  return *a.tape();
}

inline Tape& tape_of(std::string_view op, const Var& a) {
  if (!a.valid()) throw UsageError(std::string(op) + ": uninitialised operand");
  return *a.tape();
}

inline void add_into(Tape& tape, const Var& v, std::span<const double> g) {
  if (!v.requires_grad()) return;
  auto dst = tape.grad_buffer(v.id()).data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// How the right operand of a binary elementwise op maps onto the left.
enum class Broadcast { none, trailing, scalar };

inline Broadcast broadcast_kind(std::string_view op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::none;
  if (element_count(b) == 1) return Broadcast::scalar;
  if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    return Broadcast::trailing;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

inline std::size_t b_index(Broadcast kind, std::size_t i, std::size_t b_size) {
  switch (kind) {
    case Broadcast::none: return i;
    case Broadcast::scalar: return 0;
    case Broadcast::trailing: return i % b_size;
  }
  return i;
}

// C[m,n] (+)= op(A) * op(B), row-major.
inline void gemm(std::size_t m, std::size_t k, std::size_t n, const double* a, bool trans_a, const double* b,
                 bool trans_b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      if (!trans_b) {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      }
    }
  }
}

inline std::pair<std::size_t, std::size_t> outer_inner(const Shape& s, std::size_t axis) {
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

enum class BinaryKind { add, sub, mul };

inline Var binary(BinaryKind kind, const Var& a, const Var& b) {
  static constexpr std::string_view names[] = {"add", "sub", "mul"};
  const std::string_view op = names[static_cast<int>(kind)];
  Tape& tape = detail::common_tape(op, a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto bk = detail::broadcast_kind(op, av.shape(), bv.shape());
  const std::size_t bn = bv.size();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    const double y = bv[detail::b_index(bk, i, bn)];
    out[i] = kind == BinaryKind::add ? x + y : kind == BinaryKind::sub ? x - y : x * y;
  }
  return tape.record(op, std::move(out), {a, b}, [a, b, kind, bk, bn](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (a.requires_grad()) {
      auto ga = t.grad_buffer(a.id()).data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += kind == BinaryKind::mul ? g[i] * bv[detail::b_index(bk, i, bn)] : g[i];
      }
    }
    if (b.requires_grad()) {
      auto gb = t.grad_buffer(b.id()).data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = kind == BinaryKind::add ? g[i] : kind == BinaryKind::sub ? -g[i] : g[i] * av[i];
        gb[detail::b_index(bk, i, bn)] += d;
      }
    }
  });
}

inline Var add(const Var& a, const Var& b) { return binary(BinaryKind::add, a, b); }
inline Var sub(const Var& a, const Var& b) { return binary(BinaryKind::sub, a, b); }
inline Var mul(const Var& a, const Var& b) { return binary(BinaryKind::mul, a, b); }

// y = scale * x + shift
inline Var affine(const Var& a, double scale, double shift = 0.0) {
  Tape& tape = detail::tape_of("affine", a);
  Tensor out(a.shape());
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = scale * av[i] + shift;
  return tape.record("affine", std::move(out), {a}, [a, scale](Tape& t, const Tensor& g) {
    auto ga = t.grad_buffer(a.id()).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
  });
}

inline Var scale(const Var& a, double s) { return affine(a, s, 0.0); }
inline Var one_minus(const Var& a) { return affine(a, -1.0, 1.0); }

inline Var sigmoid(const Var& a) {
  Tape& tape = detail::tape_of("sigmoid", a);
  Tensor out(a.shape());
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = detail::stable_sigmoid(av[i]);
  auto y = std::make_shared<Tensor>(out);
  return tape.record("sigmoid", std::move(out), {a}, [a, y](Tape& t, const Tensor& g) {
    auto ga = t.grad_buffer(a.id()).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*y)[i] * (1.0 - (*y)[i]);
  });
}

// Exact (erf) GELU.
inline Var gelu(const Var& a) {
  Tape& tape = detail::tape_of("gelu", a);
  Tensor out(a.shape());
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  }
  return tape.record("gelu", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    auto ga = t.grad_buffer(a.id()).data();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = av[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      ga[i] += g[i] * (cdf + x * pdf);
    }
  });
}

inline constexpr double kLogFloor = 1e-12;

// Natural log with inputs floored at kLogFloor; no gradient flows below the floor.
inline Var log(const Var& a) {
  Tape& tape = detail::tape_of("log", a);
  Tensor out(a.shape());
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::log(std::max(av[i], kLogFloor));
  return tape.record("log", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    auto ga = t.grad_buffer(a.id()).data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > kLogFloor) ga[i] += g[i] / av[i];
    }
  });
}

// --------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  Tape& tape = detail::tape_of("sum", a);
  const auto d = a.value().data();
  const double s = std::accumulate(d.begin(), d.end(), 0.0);
  return tape.record("sum", Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    for (double& v : t.grad_buffer(a.id()).data()) v += g[0];
  });
}

inline Var mean(const Var& a) {
  Tape& tape = detail::tape_of("mean", a);
  const auto d = a.value().data();
  const double n = static_cast<double>(d.size());
  const double s = std::accumulate(d.begin(), d.end(), 0.0) / n;
  return tape.record("mean", Tensor::scalar(s), {a}, [a, n](Tape& t, const Tensor& g) {
    for (double& v : t.grad_buffer(a.id()).data()) v += g[0] / n;
  });
}

// ------------------------------------------------------------ linear algebra

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::common_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  detail::gemm(m, k, n, av.data().data(), false, bv.data().data(), false, out.data().data());
  return tape.record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (a.requires_grad()) {
      // dA = G * B^T
      detail::gemm(m, n, k, g.data().data(), false, b.value().data().data(), true,
                   t.grad_buffer(a.id()).data().data());
    }
    if (b.requires_grad()) {
      // dB = A^T * G
      detail::gemm(k, m, n, a.value().data().data(), true, g.data().data(), false,
                   t.grad_buffer(b.id()).data().data());
    }
  });
}

inline Var transpose(const Var& a) {
  Tape& tape = detail::tape_of("transpose", a);
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(av.shape()));
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return tape.record("transpose", std::move(out), {a}, [a, r, c](Tape& t, const Tensor& g) {
    auto ga = t.grad_buffer(a.id()).data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tape& tape = detail::tape_of("reshape", a);
  if (element_count(shape) != a.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> data(a.value().data().begin(), a.value().data().end());
  return tape.record("reshape", Tensor(std::move(shape), std::move(data)), {a},
                     [a](Tape& t, const Tensor& g) { detail::add_into(t, a, g.data()); });
}

// --------------------------------------------------------------- structural

// Elements [begin, end) along `axis`.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& tape = detail::tape_of("slice", a);
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(s));
  }
  const auto [outer, inner] = detail::outer_inner(s, axis);
  const std::size_t len = end - begin;
  const std::size_t full = s[axis];
  Shape os = s;
  os[axis] = len;
  Tensor out(os);
  const auto src = a.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * full + begin) * inner), len * inner,
                out.data().begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return tape.record("slice", std::move(out), {a},
                     [a, outer = outer, inner = inner, len, full, begin](Tape& t, const Tensor& g) {
                       auto ga = t.grad_buffer(a.id()).data();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < len * inner; ++i)
                           ga[(o * full + begin) * inner + i] += g[o * len * inner + i];
                     });
}

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& tape = detail::tape_of("concat", parts[0]);
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const Var& p : parts) {
    tape.check_owned(p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    total += s[axis];
  }
  const auto [outer, inner] = detail::outer_inner(s0, axis);
  Shape os = s0;
  os[axis] = total;
  Tensor out(os);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t len = p.shape()[axis];
    const auto src = p.value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    offset += len;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record("concat", std::move(out), std::span<const Var>(inputs),
                     [inputs, axis, outer = outer, inner = inner, total](Tape& t, const Tensor& g) {
                       std::size_t off = 0;
                       for (const Var& p : inputs) {
                         const std::size_t len = p.shape()[axis];
                         if (p.requires_grad()) {
                           auto gp = t.grad_buffer(p.id()).data();
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < len * inner; ++i)
                               gp[o * len * inner + i] += g[(o * total + off) * inner + i];
                         }
                         off += len;
                       }
                     });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

// Rows of `table` ([vocab, d]) selected by token ids -> [len, d].
inline Var embed_lookup(const Var& table, std::span<const int> tokens) {
  Tape& tape = detail::tape_of("embed_lookup", table);
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embed_lookup: table must be rank 2, got " + shape_str(tv.shape()));
  if (tokens.empty()) throw ShapeError("embed_lookup: empty token sequence");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  for (int tok : tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
      throw ShapeError("embed_lookup: token " + std::to_string(tok) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  Tensor out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i)
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(tokens[i]) * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  std::vector<int> toks(tokens.begin(), tokens.end());
  return tape.record("embed_lookup", std::move(out), {table}, [table, toks, d](Tape& t, const Tensor& g) {
    auto gt = t.grad_buffer(table.id()).data();
    for (std::size_t i = 0; i < toks.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(toks[i]) * d + j] += g[i * d + j];
  });
}

// ------------------------------------------------------------ row-wise maps

namespace detail {
inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
  const std::size_t cols = t.shape().back();
  return {t.size() / cols, cols};
}
}  // namespace detail

inline Var softmax_last_dim(const Var& a) {
  Tape& tape = detail::tape_of("softmax_last_dim", a);
  const Tensor& av = a.value();
  const auto [rows, cols] = detail::rows_cols(av);
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * cols;
    double* y = out.data().data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  auto y = std::make_shared<Tensor>(out);
  return tape.record("softmax_last_dim", std::move(out), {a},
                     [a, y, rows = rows, cols = cols](Tape& t, const Tensor& g) {
                       auto ga = t.grad_buffer(a.id()).data();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * (*y)[r * cols + c];
                         for (std::size_t c = 0; c < cols; ++c)
                           ga[r * cols + c] += (*y)[r * cols + c] * (g[r * cols + c] - dot);
                       }
                     });
}

inline Var log_softmax_last_dim(const Var& a) {
  Tape& tape = detail::tape_of("log_softmax_last_dim", a);
  const Tensor& av = a.value();
  const auto [rows, cols] = detail::rows_cols(av);
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * cols;
    double* y = out.data().data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lz;
  }
  auto y = std::make_shared<Tensor>(out);
  return tape.record("log_softmax_last_dim", std::move(out), {a},
                     [a, y, rows = rows, cols = cols](Tape& t, const Tensor& g) {
                       auto ga = t.grad_buffer(a.id()).data();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double gs = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
                         for (std::size_t c = 0; c < cols; ++c)
                           ga[r * cols + c] += g[r * cols + c] - std::exp((*y)[r * cols + c]) * gs;
                       }
                     });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalises over the last dim, then applies per-feature gain and bias.
inline Var layernorm(const Var& x, const Var& gain, const Var& bias) {
  Tape& tape = detail::common_tape("layernorm", x, gain);
  tape.check_owned(bias, "layernorm");
  const Tensor& xv = x.value();
  const auto [rows, cols] = detail::rows_cols(xv);
  if (gain.value().shape() != Shape{cols} || bias.value().shape() != Shape{cols}) {
    throw ShapeError("layernorm: gain/bias must be [" + std::to_string(cols) + "], got " +
                     shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * is;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = gv[c] * h + bv[c];
    }
  }
  return tape.record(
      "layernorm", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, inv_std, rows = rows, cols = cols](Tape& t, const Tensor& g) {
        const Tensor& gv = gain.value();
        if (gain.requires_grad()) {
          auto gg = t.grad_buffer(gain.id()).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * (*xhat)[r * cols + c];
        }
        if (bias.requires_grad()) {
          auto gb = t.grad_buffer(bias.id()).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
        }
        if (x.requires_grad()) {
          auto gx = t.grad_buffer(x.id()).data();
          const double n = static_cast<double>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double d = g[r * cols + c] * gv[c];
              mean_d += d;
              mean_dx += d * (*xhat)[r * cols + c];
            }
            mean_d /= n;
            mean_dx /= n;
            for (std::size_t c = 0; c < cols; ++c) {
              const double d = g[r * cols + c] * gv[c];
              gx[r * cols + c] += (*inv_std)[r] * (d - mean_d - (*xhat)[r * cols + c] * mean_dx);
            }
          }
        }
      });
}

// ------------------------------------------------------------ grad checking

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw UsageError("finite_diff_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Single-coordinate variant for spot checks on large inputs.
inline double finite_diff_entry(const std::function<double(const Tensor&)>& f, const Tensor& x, std::size_t i,
                                double h) {
  if (!(h > 0.0)) throw UsageError("finite_diff_entry: step must be positive");
  Tensor probe = x;
  const double orig = probe[i];
  probe[i] = orig + h;
  const double up = f(probe);
  probe[i] = orig - h;
  const double down = f(probe);
  return (up - down) / (2.0 * h);
}

}  // namespace calign::ad
