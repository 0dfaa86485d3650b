#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "petal/errors.hpp"

// Dense row-major tensors with reverse-mode automatic differentiation.
// Tensors are handles onto shared storage; operations record pull-back
// closures onto the thread-local active GradTape. Without an active tape
// the same operations run value-only, which is what evaluation paths and
// finite-difference probes rely on.

namespace petal {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;       // same length as values whenever requires_grad
    bool requires_grad = false;
    bool grad_live = false;    // grad received a contribution in the current backward
};

template <typename T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

// Seeds/accumulates into a storage's grad buffer, marking it live so the
// tape can skip branches the loss never touched (their grads stay exactly 0).
template <typename T>
inline std::vector<T>& grad_buffer(TensorStorage<T>& s) {
    if (s.grad.size() != s.values.size()) s.grad.assign(s.values.size(), T(0));
    s.grad_live = true;
    return s.grad;
}

}  // namespace detail

template <typename T>
class GradTape;

template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.d_ = std::make_shared<detail::TensorStorage<T>>();
        t.d_->shape = std::move(shape);
        t.d_->values.assign(shape_numel(t.d_->shape), T(0));
        return t;
    }

    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.d_->values.begin(), t.d_->values.end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor data size " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.d_ = std::make_shared<detail::TensorStorage<T>>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        return t;
    }

    static Tensor scalar(T v) { return from({}, {v}); }

    static Tensor gaussian(Shape shape, std::mt19937_64& rng, T stddev) {
        Tensor t = zeros(std::move(shape));
        std::normal_distribution<double> gauss(0.0, static_cast<double>(stddev));
        for (auto& x : t.d_->values) x = static_cast<T>(gauss(rng));
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return data().shape; }
    std::size_t rank() const { return data().shape.size(); }
    std::size_t numel() const { return data().values.size(); }
    std::size_t dim(std::size_t i) const { return data().shape.at(i); }

    std::vector<T>& values() { return data().values; }
    const std::vector<T>& values() const { return data().values; }

    bool requires_grad() const { return data().requires_grad; }
    Tensor& set_requires_grad(bool on) {
        auto& s = data();
        s.requires_grad = on;
        if (on) {
            if (s.grad.size() != s.values.size()) s.grad.assign(s.values.size(), T(0));
        } else {
            s.grad.clear();
            s.grad_live = false;
        }
        return *this;
    }

    // Gradient accumulator; zeros until backward reaches this tensor.
    const std::vector<T>& grad() const {
        auto& s = data();
        if (s.grad.size() != s.values.size()) {
            const_cast<detail::TensorStorage<T>&>(s).grad.assign(s.values.size(), T(0));
        }
        return s.grad;
    }

    void zero_grad() {
        auto& s = data();
        std::fill(s.grad.begin(), s.grad.end(), T(0));
        s.grad_live = false;
    }

    T item() const {
        if (numel() != 1) {
            throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
        }
        return data().values[0];
    }

    T at(std::size_t i) const { return data().values.at(i); }
    T at(std::size_t r, std::size_t c) const {
        if (rank() != 2) throw DimensionError("2-index access on tensor of shape " + shape_str(shape()));
        return data().values.at(r * dim(1) + c);
    }

    bool all_finite() const {
        for (T v : data().values) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    detail::StoragePtr<T> storage() const { return d_; }

  private:
    detail::TensorStorage<T>& data() const {
        if (!d_) throw ContractError("operation on an undefined tensor handle");
        return *d_;
    }

    detail::StoragePtr<T> d_;
};

// Reverse-mode tape. Construction order is a topological order of the graph,
// so walking it backwards is a valid reverse sweep. One tape per thread may
// be active at a time; explicit reset is required between backward passes.
template <typename T>
class GradTape {
  public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    class Scope {
      public:
        explicit Scope(GradTape* t) : prev_(current_slot()) { current_slot() = t; }
        ~Scope() { current_slot() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

      private:
        GradTape* prev_;
    };

    [[nodiscard]] Scope activate() { return Scope(this); }

    static GradTape* current() { return current_slot(); }

    void record(detail::StoragePtr<T> out, std::function<void()> pull) {
        nodes_.push_back(Node{std::move(out), std::move(pull)});
    }

    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
        }
        if (used_) {
            throw ContractError("backward called twice on the same tape without reset");
        }
        used_ = true;
        auto s = loss.storage();
        if (!s) throw ContractError("backward on an undefined tensor");
        detail::grad_buffer(*s)[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->out->grad_live) it->pull();
        }
    }

    void reset() {
        for (auto& n : nodes_) n.out->grad_live = false;
        nodes_.clear();
        used_ = false;
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return used_; }

  private:
    struct Node {
        detail::StoragePtr<T> out;
        std::function<void()> pull;
    };

    static GradTape*& current_slot() {
        thread_local GradTape* cur = nullptr;
        return cur;
    }

    std::vector<Node> nodes_;
    bool used_ = false;
};

namespace detail {

template <typename T>
inline void record_op(const Tensor<T>& out, bool any_input_grad, std::function<void()> pull) {
    auto* tape = GradTape<T>::current();
    if (!tape || !any_input_grad) return;
    const_cast<Tensor<T>&>(out).set_requires_grad(true);
    tape->record(out.storage(), std::move(pull));
}

// Trailing-dimension broadcasting: shapes are compatible when equal, when one
// operand is a single element, or when the smaller shape is a suffix of the
// larger. Flat indices into the smaller operand repeat with period numel.
struct BroadcastPlan {
    Shape out_shape;
    std::size_t a_period = 0;
    std::size_t b_period = 0;
};

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
    const std::size_t an = shape_numel(a), bn = shape_numel(b);
    BroadcastPlan p;
    if (a == b) {
        p.out_shape = a;
    } else if (bn == 1) {
        p.out_shape = a;
    } else if (an == 1) {
        p.out_shape = b;
    } else if (is_suffix(b, a)) {
        p.out_shape = a;
    } else if (is_suffix(a, b)) {
        p.out_shape = b;
    } else {
        throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
    }
    p.a_period = an;
    p.b_period = bn;
    return p;
}

}  // namespace detail

enum class EwKind { add, sub, mul };

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwKind kind) {
    const auto plan = detail::broadcast_plan(a.shape(), b.shape());
    auto out = Tensor<T>::zeros(plan.out_shape);
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    const std::size_t n = ov.size();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = av[i % plan.a_period];
        const T y = bv[i % plan.b_period];
        ov[i] = kind == EwKind::add ? x + y : kind == EwKind::sub ? x - y : x * y;
    }
    detail::record_op(out, a.requires_grad() || b.requires_grad(),
                      [as = a.storage(), bs = b.storage(), os = out.storage(), plan, kind]() {
                          const auto& g = os->grad;
                          if (as->requires_grad) {
                              auto& ga = detail::grad_buffer(*as);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  T contrib = g[i];
                                  if (kind == EwKind::mul) contrib *= bs->values[i % plan.b_period];
                                  ga[i % plan.a_period] += contrib;
                              }
                          }
                          if (bs->requires_grad) {
                              auto& gb = detail::grad_buffer(*bs);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  T contrib = g[i];
                                  if (kind == EwKind::mul) contrib *= as->values[i % plan.a_period];
                                  if (kind == EwKind::sub) contrib = -contrib;
                                  gb[i % plan.b_period] += contrib;
                              }
                          }
                      });
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, EwKind::add); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, EwKind::sub); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, EwKind::mul); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    auto out = Tensor<T>::zeros(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * c;
    detail::record_op(out, a.requires_grad(), [as = a.storage(), os = out.storage(), c]() {
        auto& ga = detail::grad_buffer(*as);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += os->grad[i] * c;
    });
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = Tensor<T>::zeros({m, n});
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[p * n + j];
            ov[i * n + j] = acc;
        }
    }
    detail::record_op(out, a.requires_grad() || b.requires_grad(),
                      [as = a.storage(), bs = b.storage(), os = out.storage(), m, k, n]() {
                          const auto& g = os->grad;
                          if (as->requires_grad) {
                              auto& ga = detail::grad_buffer(*as);  // dA = G B^T
                              for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t p = 0; p < k; ++p) {
                                      T acc = T(0);
                                      for (std::size_t j = 0; j < n; ++j)
                                          acc += g[i * n + j] * bs->values[p * n + j];
                                      ga[i * k + p] += acc;
                                  }
                          }
                          if (bs->requires_grad) {
                              auto& gb = detail::grad_buffer(*bs);  // dB = A^T G
                              for (std::size_t p = 0; p < k; ++p)
                                  for (std::size_t j = 0; j < n; ++j) {
                                      T acc = T(0);
                                      for (std::size_t i = 0; i < m; ++i)
                                          acc += as->values[i * k + p] * g[i * n + j];
                                      gb[p * n + j] += acc;
                                  }
                          }
                      });
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    auto out = Tensor<T>::zeros({n, m});
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    detail::record_op(out, a.requires_grad(), [as = a.storage(), os = out.storage(), m, n]() {
        auto& ga = detail::grad_buffer(*as);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += os->grad[j * m + i];
    });
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    }
    auto out = Tensor<T>::from(std::move(shape), a.values());
    detail::record_op(out, a.requires_grad(), [as = a.storage(), os = out.storage()]() {
        auto& ga = detail::grad_buffer(*as);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += os->grad[i];
    });
    return out;
}

// Contiguous range [start, start+len) along an axis of a rank-1/2 tensor.
template <typename T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
    if (a.rank() == 0 || a.rank() > 2 || axis >= a.rank()) {
        throw DimensionError("narrow supports rank 1 or 2, got " + shape_str(a.shape()) +
                             " axis " + std::to_string(axis));
    }
    if (start + len > a.dim(axis)) {
        throw DimensionError("narrow range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") exceeds extent " +
                             std::to_string(a.dim(axis)));
    }
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    auto out = Tensor<T>::zeros(out_shape);
    const std::size_t cols = a.rank() == 2 ? a.dim(1) : 1;
    const std::size_t rows = a.dim(0);
    const auto& av = a.values();
    auto& ov = out.values();
    if (axis == 0) {
        std::copy(av.begin() + static_cast<std::ptrdiff_t>(start * cols),
                  av.begin() + static_cast<std::ptrdiff_t>((start + len) * cols), ov.begin());
    } else {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < len; ++c) ov[r * len + c] = av[r * cols + start + c];
    }
    detail::record_op(out, a.requires_grad(),
                      [as = a.storage(), os = out.storage(), axis, start, len, rows, cols]() {
                          auto& ga = detail::grad_buffer(*as);
                          const auto& g = os->grad;
                          if (axis == 0) {
                              for (std::size_t i = 0; i < g.size(); ++i) ga[start * cols + i] += g[i];
                          } else {
                              for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t c = 0; c < len; ++c)
                                      ga[r * cols + start + c] += g[r * len + c];
                          }
                      });
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    const std::size_t rank = parts.front().rank();
    if (rank == 0 || rank > 2 || axis >= rank) {
        throw DimensionError("concat supports rank 1 or 2 tensors");
    }
    Shape out_shape = parts.front().shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw DimensionError("concat rank mismatch");
        for (std::size_t d = 0; d < rank; ++d) {
            if (d != axis && p.dim(d) != out_shape[d]) {
                throw DimensionError("concat extent mismatch on axis " + std::to_string(d));
            }
        }
        total += p.dim(axis);
    }
    out_shape[axis] = total;
    auto out = Tensor<T>::zeros(out_shape);
    auto& ov = out.values();
    const std::size_t out_cols = rank == 2 ? out_shape[1] : 1;
    bool any_grad = false;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        any_grad = any_grad || p.requires_grad();
        const auto& pv = p.values();
        if (axis == 0) {
            std::copy(pv.begin(), pv.end(), ov.begin() + static_cast<std::ptrdiff_t>(offset * out_cols));
            offset += p.dim(0);
        } else {
            const std::size_t pc = p.dim(1);
            for (std::size_t r = 0; r < p.dim(0); ++r)
                for (std::size_t c = 0; c < pc; ++c) ov[r * out_cols + offset + c] = pv[r * pc + c];
            offset += pc;
        }
    }
    std::vector<detail::StoragePtr<T>> sources;
    sources.reserve(parts.size());
    for (const auto& p : parts) sources.push_back(p.storage());
    detail::record_op(out, any_grad,
                      [sources, os = out.storage(), axis, out_cols, rank]() {
                          const auto& g = os->grad;
                          std::size_t offset = 0;
                          for (const auto& s : sources) {
                              const std::size_t prows = s->shape[0];
                              const std::size_t pcols = rank == 2 ? s->shape[1] : 1;
                              if (s->requires_grad) {
                                  auto& gs = detail::grad_buffer(*s);
                                  if (axis == 0) {
                                      for (std::size_t i = 0; i < gs.size(); ++i)
                                          gs[i] += g[offset * out_cols + i];
                                  } else {
                                      for (std::size_t r = 0; r < prows; ++r)
                                          for (std::size_t c = 0; c < pcols; ++c)
                                              gs[r * pcols + c] += g[r * out_cols + offset + c];
                                  }
                              }
                              offset += axis == 0 ? prows : pcols;
                          }
                      });
    return out;
}

namespace detail {

// Iterates length-n slices along `axis`: out-of-slice layout is
// (outer, axis, inner) with strides (n*inner, inner, 1).
struct AxisLayout {
    std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
    if (shape.empty() || axis >= shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(shape));
    }
    AxisLayout l;
    for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
    l.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
    return l;
}

}  // namespace detail

// Max-shifted softmax along `axis`; slices sum to one for all finite inputs.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (!x.all_finite()) throw NumericError("softmax input contains NaN or Inf");
    const auto l = detail::axis_layout(x.shape(), axis);
    auto out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t i = 0; i < l.inner; ++i) {
            const std::size_t base = o * l.n * l.inner + i;
            T mx = xv[base];
            for (std::size_t j = 1; j < l.n; ++j) mx = std::max(mx, xv[base + j * l.inner]);
            T denom = T(0);
            for (std::size_t j = 0; j < l.n; ++j) {
                const T e = std::exp(xv[base + j * l.inner] - mx);
                ov[base + j * l.inner] = e;
                denom += e;
            }
            for (std::size_t j = 0; j < l.n; ++j) ov[base + j * l.inner] /= denom;
        }
    }
    detail::record_op(out, x.requires_grad(), [xs = x.storage(), os = out.storage(), l]() {
        auto& gx = detail::grad_buffer(*xs);
        const auto& g = os->grad;
        const auto& y = os->values;
        for (std::size_t o = 0; o < l.outer; ++o) {
            for (std::size_t i = 0; i < l.inner; ++i) {
                const std::size_t base = o * l.n * l.inner + i;
                T dot = T(0);
                for (std::size_t j = 0; j < l.n; ++j)
                    dot += g[base + j * l.inner] * y[base + j * l.inner];
                for (std::size_t j = 0; j < l.n; ++j) {
                    const std::size_t idx = base + j * l.inner;
                    gx[idx] += y[idx] * (g[idx] - dot);
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) { return softmax(x, x.rank() - 1); }

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
    if (!x.all_finite()) throw NumericError("log_softmax input contains NaN or Inf");
    const auto l = detail::axis_layout(x.shape(), axis);
    auto out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t i = 0; i < l.inner; ++i) {
            const std::size_t base = o * l.n * l.inner + i;
            T mx = xv[base];
            for (std::size_t j = 1; j < l.n; ++j) mx = std::max(mx, xv[base + j * l.inner]);
            T denom = T(0);
            for (std::size_t j = 0; j < l.n; ++j) denom += std::exp(xv[base + j * l.inner] - mx);
            const T lse = mx + std::log(denom);
            for (std::size_t j = 0; j < l.n; ++j)
                ov[base + j * l.inner] = xv[base + j * l.inner] - lse;
        }
    }
    detail::record_op(out, x.requires_grad(), [xs = x.storage(), os = out.storage(), l]() {
        auto& gx = detail::grad_buffer(*xs);
        const auto& g = os->grad;
        const auto& y = os->values;  // log-probabilities
        for (std::size_t o = 0; o < l.outer; ++o) {
            for (std::size_t i = 0; i < l.inner; ++i) {
                const std::size_t base = o * l.n * l.inner + i;
                T gsum = T(0);
                for (std::size_t j = 0; j < l.n; ++j) gsum += g[base + j * l.inner];
                for (std::size_t j = 0; j < l.n; ++j) {
                    const std::size_t idx = base + j * l.inner;
                    gx[idx] += g[idx] - std::exp(y[idx]) * gsum;
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    auto out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
    detail::record_op(out, x.requires_grad(), [xs = x.storage(), os = out.storage()]() {
        auto& gx = detail::grad_buffer(*xs);
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (xs->values[i] > T(0)) gx[i] += os->grad[i];
    });
    return out;
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    auto out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = static_cast<double>(xv[i]);
        ov[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    detail::record_op(out, x.requires_grad(), [xs = x.storage(), os = out.storage()]() {
        auto& gx = detail::grad_buffer(*xs);
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double v = static_cast<double>(xs->values[i]);
            const double d = 0.5 * (1.0 + std::erf(v * inv_sqrt2)) +
                             v * inv_sqrt2pi * std::exp(-0.5 * v * v);
            gx[i] += os->grad[i] * static_cast<T>(d);
        }
    });
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    auto out = Tensor<T>::zeros({});
    T acc = T(0);
    for (T v : x.values()) acc += v;
    out.values()[0] = acc;
    detail::record_op(out, x.requires_grad(), [xs = x.storage(), os = out.storage()]() {
        auto& gx = detail::grad_buffer(*xs);
        const T g = os->grad[0];
        for (auto& v : gx) v += g;
    });
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    if (x.numel() == 0) throw ContractError("mean_all of empty tensor");
    return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Mean over rows of a [T x H] matrix -> length-H vector.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
    if (x.rank() != 2) throw DimensionError("mean_rows expects rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (rows == 0) throw ContractError("mean_rows of zero rows");
    auto out = Tensor<T>::zeros({cols});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ov[c] += xv[r * cols + c];
    const T inv = T(1) / static_cast<T>(rows);
    for (auto& v : ov) v *= inv;
    detail::record_op(out, x.requires_grad(), [xs = x.storage(), os = out.storage(), rows, cols, inv]() {
        auto& gx = detail::grad_buffer(*xs);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += os->grad[c] * inv;
    });
    return out;
}

// Row-wise layer normalization of a [T x H] matrix with affine parameters.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (x.rank() != 2) throw DimensionError("layer_norm expects rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw DimensionError("layer_norm affine parameters must have length " + std::to_string(cols));
    }
    auto out = Tensor<T>::zeros(x.shape());
    std::vector<T> inv_std(rows), xhat(rows * cols);
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    auto& ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        T mean = T(0);
        for (std::size_t c = 0; c < cols; ++c) mean += xv[r * cols + c];
        mean /= static_cast<T>(cols);
        T var = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            const T d = xv[r * cols + c] - mean;
            var += d * d;
        }
        var /= static_cast<T>(cols);
        const T w = T(1) / std::sqrt(var + eps);
        inv_std[r] = w;
        for (std::size_t c = 0; c < cols; ++c) {
            const T h = (xv[r * cols + c] - mean) * w;
            xhat[r * cols + c] = h;
            ov[r * cols + c] = gv[c] * h + bv[c];
        }
    }
    detail::record_op(
        out, x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
        [xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage(),
         inv_std = std::move(inv_std), xhat = std::move(xhat), rows, cols]() {
            const auto& g = os->grad;
            if (bs->requires_grad) {
                auto& gb = detail::grad_buffer(*bs);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
            }
            if (gs->requires_grad) {
                auto& gg = detail::grad_buffer(*gs);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c)
                        gg[c] += g[r * cols + c] * xhat[r * cols + c];
            }
            if (xs->requires_grad) {
                auto& gx = detail::grad_buffer(*xs);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_dh = T(0), mean_dh_h = T(0);
                    for (std::size_t c = 0; c < cols; ++c) {
                        const T dh = g[r * cols + c] * gs->values[c];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * cols + c];
                    }
                    mean_dh /= static_cast<T>(cols);
                    mean_dh_h /= static_cast<T>(cols);
                    for (std::size_t c = 0; c < cols; ++c) {
                        const T dh = g[r * cols + c] * gs->values[c];
                        gx[r * cols + c] +=
                            inv_std[r] * (dh - mean_dh - xhat[r * cols + c] * mean_dh_h);
                    }
                }
            }
        });
    return out;
}

// Rows scaled to unit L2 norm (eps inside the square root keeps zero rows at
// zero and the derivative finite).
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
    if (x.rank() != 2) throw DimensionError("normalize_rows expects rank 2");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    auto out = Tensor<T>::zeros(x.shape());
    std::vector<T> norms(rows);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        T sq = T(0);
        for (std::size_t c = 0; c < cols; ++c) sq += xv[r * cols + c] * xv[r * cols + c];
        const T n = std::sqrt(sq + eps);
        norms[r] = n;
        for (std::size_t c = 0; c < cols; ++c) ov[r * cols + c] = xv[r * cols + c] / n;
    }
    detail::record_op(out, x.requires_grad(),
                      [xs = x.storage(), os = out.storage(), norms = std::move(norms), rows, cols]() {
                          auto& gx = detail::grad_buffer(*xs);
                          const auto& g = os->grad;
                          for (std::size_t r = 0; r < rows; ++r) {
                              T dot = T(0);
                              for (std::size_t c = 0; c < cols; ++c)
                                  dot += g[r * cols + c] * xs->values[r * cols + c];
                              const T n = norms[r];
                              const T n3 = n * n * n;
                              for (std::size_t c = 0; c < cols; ++c)
                                  gx[r * cols + c] +=
                                      g[r * cols + c] / n - xs->values[r * cols + c] * dot / n3;
                          }
                      });
    return out;
}

// Negative log-likelihood of `label` under softmax(logits); logits rank 1.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label) {
    if (logits.rank() != 1) {
        throw DimensionError("cross_entropy expects a rank-1 logit vector, got " +
                             shape_str(logits.shape()));
    }
    if (!logits.all_finite()) throw NumericError("cross_entropy logits contain NaN or Inf");
    const std::size_t n = logits.numel();
    if (label >= n) throw LookupError("label " + std::to_string(label) + " out of range");
    const auto& xv = logits.values();
    T mx = xv[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xv[i]);
    T denom = T(0);
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(xv[i] - mx);
    auto out = Tensor<T>::scalar(mx + std::log(denom) - xv[label]);
    detail::record_op(out, logits.requires_grad(),
                      [xs = logits.storage(), os = out.storage(), label, mx, denom, n]() {
                          auto& gx = detail::grad_buffer(*xs);
                          const T g = os->grad[0];
                          for (std::size_t i = 0; i < n; ++i) {
                              T p = std::exp(xs->values[i] - mx) / denom;
                              if (i == label) p -= T(1);
                              gx[i] += g * p;
                          }
                      });
    return out;
}

}  // namespace petal
