#pragma once

// Reverse-mode automatic differentiation over dense 64-bit tensors.
//
// A Tape owns every value produced during one forward pass. Each primitive
// that touches a gradient-carrying input appends an Entry holding the
// closure that maps the upstream gradient onto its inputs. Entries are kept
// in creation order, which is a topological order, so backward() is a single
// reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "errors.hpp"
#include "tensor.hpp"

namespace seegraph::ad {

class Tape;

/// Handle to a value on a tape. Cheap to copy; valid while its tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t numel() const { return value().numel(); }
    bool requires_grad() const;
    bool valid() const noexcept { return tape_ != nullptr; }

    Tape& tape() const {
        if (!tape_) throw ContractError("use of an unbound Var");
        return *tape_;
    }
    std::size_t id() const noexcept { return id_; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Maps the upstream gradient of one recorded output onto its inputs through
/// Tape::accumulate. Receives the forward output for ops that reuse it.
using BackwardFn = std::function<void(Tape&, const Tensor& output, const Tensor& upstream)>;

class Tape {
public:
    struct Entry {
        const char* op;
        std::vector<std::size_t> inputs;
        std::size_t output;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value) { return push(std::move(value), false); }
    Var variable(Tensor value) { return push(std::move(value), true); }

    /// Stores an op result. The backward closure is kept only when some input
    /// carries a gradient; otherwise the result is a constant.
    Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        return record(op, std::move(value), std::vector<Var>(inputs), std::move(fn));
    }

    Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
        bool any = false;
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        for (const Var& v : inputs) {
            if (&v.tape() != this) throw ContractError(std::string(op) + ": inputs live on different tapes");
            ids.push_back(v.id());
            any = any || nodes_[v.id()].requires_grad;
        }
        if (!value.all_finite()) throw NumericalError(std::string(op) + " produced a non-finite value");
        Var out = push(std::move(value), any);
        if (any) entries_.push_back(Entry{op, std::move(ids), out.id(), std::move(fn)});
        return out;
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t num_nodes() const noexcept { return nodes_.size(); }
    const std::deque<Entry>& entries() const noexcept { return entries_; }

    /// Gradient of the last backward() loss with respect to v; zeros when v
    /// did not influence the loss.
    Tensor grad(const Var& v) const {
        const Node& n = nodes_.at(v.id());
        return n.grad ? *n.grad : Tensor(n.value.shape());
    }

    void accumulate(std::size_t id, const Tensor& g) {
        Node& n = nodes_.at(id);
        if (!n.requires_grad) return;
        if (g.shape() != n.value.shape())
            throw ShapeError("gradient shape " + shape_str(g.shape()) + " for value " + shape_str(n.value.shape()));
        if (n.grad) *n.grad += g;
        else n.grad = g;
    }

    void accumulate(std::size_t id, Tensor&& g) {
        Node& n = nodes_.at(id);
        if (!n.requires_grad) return;
        if (g.shape() != n.value.shape())
            throw ShapeError("gradient shape " + shape_str(g.shape()) + " for value " + shape_str(n.value.shape()));
        if (n.grad) *n.grad += g;
        else n.grad = std::move(g);
    }

    /// Reverse sweep from a scalar loss. Clears gradients of any earlier sweep.
    void backward(const Var& loss) {
        if (&loss.tape() != this) throw ContractError("loss belongs to another tape");
        if (loss.numel() != 1)
            throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
        for (Node& n : nodes_) n.grad.reset();
        if (!nodes_[loss.id()].requires_grad) return;
        nodes_[loss.id()].grad = Tensor(loss.shape(), 1.0);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            Node& out = nodes_[it->output];
            if (!out.grad) continue;
            it->backward(*this, out.value, *out.grad);
        }
    }

private:
    struct Node {
        Tensor value;
        std::optional<Tensor> grad;
        bool requires_grad;
    };

    Var push(Tensor value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), std::nullopt, requires_grad});
        return Var(this, nodes_.size() - 1);
    }

    // deque: references to stored values stay valid while the tape grows.
    std::deque<Node> nodes_;
    std::deque<Entry> entries_;
};

inline const Tensor& Var::value() const { return tape().value(id_); }
inline bool Var::requires_grad() const { return tape().requires_grad(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap cmap(const double* p, std::size_t r, std::size_t c) {
    return ConstMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap mmap(double* p, std::size_t r, std::size_t c) {
    return MutMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` expressed over the dimensions of `out`; 0 on broadcast axes.
inline std::vector<std::size_t> aligned_strides(const Shape& out, const Shape& in) {
    std::vector<std::size_t> s(out.size(), 0);
    std::size_t stride = 1;
    for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t i = in.size() - 1 - k;
        const std::size_t o = out.size() - 1 - k;
        s[o] = in[i] == 1 ? 0 : stride;
        stride *= in[i];
    }
    return s;
}

/// Visits every output index with the matching flat index into each input.
template <class F>
void broadcast_loop(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& f) {
    const std::size_t r = out.size();
    if (r == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    const std::size_t inner = out[r - 1];
    const std::size_t ia_step = sa[r - 1], ib_step = sb[r - 1];
    const std::size_t outer = shape_numel(out) / std::max<std::size_t>(inner, 1);
    std::vector<std::size_t> counter(r, 0);
    std::size_t o = 0;
    for (std::size_t block = 0; block < outer; ++block) {
        std::size_t ia = 0, ib = 0;
        for (std::size_t d = 0; d + 1 < r; ++d) {
            ia += counter[d] * sa[d];
            ib += counter[d] * sb[d];
        }
        for (std::size_t k = 0; k < inner; ++k, ++o) f(o, ia + k * ia_step, ib + k * ib_step);
        for (std::size_t d = r - 1; d-- > 0;) {
            if (++counter[d] < out[d]) break;
            counter[d] = 0;
        }
    }
}

/// Sums `g` (shaped like the broadcast output) back down to `target`.
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor r(target);
    const auto st = aligned_strides(g.shape(), target);
    const std::vector<std::size_t> zero(g.rank(), 0);
    broadcast_loop(g.shape(), st, zero, [&](std::size_t o, std::size_t it, std::size_t) { r[it] += g[o]; });
    return r;
}

// (outer, axis length, inner) split of a shape around one axis.
struct AxisSplit {
    std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
    if (axis >= s.size()) throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSplit a{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

template <class F, class DF>
Var unary(const char* op, const Var& x, F f, DF df) {
    const Tensor& xv = x.value();
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = f(xv[i]);
    const std::size_t xid = x.id();
    return x.tape().record(op, std::move(y), {x}, [xid, df](Tape& t, const Tensor& out, const Tensor& up) {
        const Tensor& xv = t.value(xid);
        Tensor g(xv.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = up[i] * df(xv[i], out[i]);
        t.accumulate(xid, std::move(g));
    });
}

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
    if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
    return a.tape();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with numpy-style broadcasting.

inline Var add(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "add");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor y;
    if (av.shape() == bv.shape()) {
        y = Tensor(av.shape());
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] + bv[i];
    } else {
        y = Tensor(detail::broadcast_shape(av.shape(), bv.shape(), "add"));
        detail::broadcast_loop(y.shape(), detail::aligned_strides(y.shape(), av.shape()),
                               detail::aligned_strides(y.shape(), bv.shape()),
                               [&](std::size_t o, std::size_t i, std::size_t j) { y[o] = av[i] + bv[j]; });
    }
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("add", std::move(y), {a, b}, [ia, ib](Tape& t, const Tensor&, const Tensor& up) {
        if (t.requires_grad(ia)) t.accumulate(ia, detail::reduce_to(up, t.value(ia).shape()));
        if (t.requires_grad(ib)) t.accumulate(ib, detail::reduce_to(up, t.value(ib).shape()));
    });
}

inline Var sub(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "sub");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor y(detail::broadcast_shape(av.shape(), bv.shape(), "sub"));
    detail::broadcast_loop(y.shape(), detail::aligned_strides(y.shape(), av.shape()),
                           detail::aligned_strides(y.shape(), bv.shape()),
                           [&](std::size_t o, std::size_t i, std::size_t j) { y[o] = av[i] - bv[j]; });
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("sub", std::move(y), {a, b}, [ia, ib](Tape& t, const Tensor&, const Tensor& up) {
        if (t.requires_grad(ia)) t.accumulate(ia, detail::reduce_to(up, t.value(ia).shape()));
        if (t.requires_grad(ib)) {
            Tensor g = detail::reduce_to(up, t.value(ib).shape());
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] = -g[i];
            t.accumulate(ib, std::move(g));
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "mul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor y(detail::broadcast_shape(av.shape(), bv.shape(), "mul"));
    const auto sa = detail::aligned_strides(y.shape(), av.shape());
    const auto sb = detail::aligned_strides(y.shape(), bv.shape());
    detail::broadcast_loop(y.shape(), sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { y[o] = av[i] * bv[j]; });
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("mul", std::move(y), {a, b}, [ia, ib, sa, sb](Tape& t, const Tensor&, const Tensor& up) {
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        if (t.requires_grad(ia)) {
            Tensor g(av.shape());
            detail::broadcast_loop(up.shape(), sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { g[i] += up[o] * bv[j]; });
            t.accumulate(ia, std::move(g));
        }
        if (t.requires_grad(ib)) {
            Tensor g(bv.shape());
            detail::broadcast_loop(up.shape(), sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { g[j] += up[o] * av[i]; });
            t.accumulate(ib, std::move(g));
        }
    });
}

inline Var scale(const Var& x, double s) {
    return detail::unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& x, double c) {
    return detail::unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var broadcast_to(const Var& x, const Shape& shape) {
    const Tensor& xv = x.value();
    if (detail::broadcast_shape(xv.shape(), shape, "broadcast") != shape)
        throw ShapeError("broadcast: cannot expand " + shape_str(xv.shape()) + " to " + shape_str(shape));
    Tensor y(shape);
    const auto sx = detail::aligned_strides(shape, xv.shape());
    detail::broadcast_loop(shape, sx, sx, [&](std::size_t o, std::size_t i, std::size_t) { y[o] = xv[i]; });
    const std::size_t ix = x.id();
    return x.tape().record("broadcast", std::move(y), {x}, [ix](Tape& t, const Tensor&, const Tensor& up) {
        t.accumulate(ix, detail::reduce_to(up, t.value(ix).shape()));
    });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

inline Var sigmoid(const Var& x) {
    return detail::unary(
        "sigmoid", x,
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(const Var& x) {
    return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(const Var& x) {
    for (double v : x.value().data())
        if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
    return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var sqrt(const Var& x) {
    for (double v : x.value().data())
        if (!(v > 0.0)) throw DomainError("sqrt of non-positive value " + std::to_string(v));
    return detail::unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Var leaky_relu(const Var& x, double slope) {
    return detail::unary(
        "leaky_relu", x, [slope](double v) { return v > 0 ? v : slope * v; },
        [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

/// ELU with unit alpha: x for x > 0, exp(x) - 1 otherwise.
inline Var elu(const Var& x) {
    return detail::unary(
        "elu", x, [](double v) { return v > 0 ? v : std::expm1(v); },
        [](double v, double y) { return v > 0 ? 1.0 : y + 1.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape ops.

/// (..., m, k) x (k, n) -> (..., m, n), or batched (..., m, k) x (..., k, n).
inline Var matmul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "matmul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() < 2 || bv.rank() < 2)
        throw ShapeError("matmul needs rank >= 2, got " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const std::size_t m = av.dim(av.rank() - 2), k = av.dim(av.rank() - 1);
    const std::size_t kb = bv.dim(bv.rank() - 2), n = bv.dim(bv.rank() - 1);
    if (k != kb) throw ShapeError("matmul inner dims " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const bool batched = bv.rank() > 2;
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < av.rank(); ++i) batch *= av.dim(i);
    if (batched && (bv.rank() != av.rank() ||
                    !std::equal(av.shape().begin(), av.shape().end() - 2, bv.shape().begin())))
        throw ShapeError("matmul batch dims " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    Shape os = av.shape();
    os.back() = n;
    Tensor y(os);
    if (!batched) {
        detail::mmap(y.data().data(), batch * m, n).noalias() =
            detail::cmap(av.data().data(), batch * m, k) * detail::cmap(bv.data().data(), k, n);
    } else {
        for (std::size_t p = 0; p < batch; ++p)
            detail::mmap(y.data().data() + p * m * n, m, n).noalias() =
                detail::cmap(av.data().data() + p * m * k, m, k) * detail::cmap(bv.data().data() + p * k * n, k, n);
    }
    const std::size_t ia = a.id(), ib = b.id();
    return t.record("matmul", std::move(y), {a, b}, [ia, ib, batched, batch, m, k, n](Tape& t, const Tensor&, const Tensor& up) {
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        if (t.requires_grad(ia)) {
            Tensor g(av.shape());
            if (!batched) {
                detail::mmap(g.data().data(), batch * m, k).noalias() =
                    detail::cmap(up.data().data(), batch * m, n) * detail::cmap(bv.data().data(), k, n).transpose();
            } else {
                for (std::size_t p = 0; p < batch; ++p)
                    detail::mmap(g.data().data() + p * m * k, m, k).noalias() =
                        detail::cmap(up.data().data() + p * m * n, m, n) *
                        detail::cmap(bv.data().data() + p * k * n, k, n).transpose();
            }
            t.accumulate(ia, std::move(g));
        }
        if (t.requires_grad(ib)) {
            Tensor g(bv.shape());
            if (!batched) {
                detail::mmap(g.data().data(), k, n).noalias() =
                    detail::cmap(av.data().data(), batch * m, k).transpose() * detail::cmap(up.data().data(), batch * m, n);
            } else {
                for (std::size_t p = 0; p < batch; ++p)
                    detail::mmap(g.data().data() + p * k * n, k, n).noalias() =
                        detail::cmap(av.data().data() + p * m * k, m, k).transpose() *
                        detail::cmap(up.data().data() + p * m * n, m, n);
            }
            t.accumulate(ib, std::move(g));
        }
    });
}

namespace detail {
inline Tensor swap_last_two(const Tensor& x) {
    const std::size_t r = x.rank();
    const std::size_t m = x.dim(r - 2), n = x.dim(r - 1);
    Shape s = x.shape();
    std::swap(s[r - 2], s[r - 1]);
    Tensor y(s);
    const std::size_t batch = x.numel() / (m * n);
    for (std::size_t p = 0; p < batch; ++p)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) y[p * m * n + j * m + i] = x[p * m * n + i * n + j];
    return y;
}
}  // namespace detail

/// Swaps the last two axes.
inline Var transpose(const Var& x) {
    if (x.value().rank() < 2) throw ShapeError("transpose needs rank >= 2");
    const std::size_t ix = x.id();
    return x.tape().record("transpose", detail::swap_last_two(x.value()), {x},
                           [ix](Tape& t, const Tensor&, const Tensor& up) { t.accumulate(ix, detail::swap_last_two(up)); });
}

inline Var reshape(const Var& x, Shape shape) {
    const std::size_t ix = x.id();
    return x.tape().record("reshape", x.value().reshaped(std::move(shape)), {x},
                           [ix](Tape& t, const Tensor&, const Tensor& up) {
                               t.accumulate(ix, up.reshaped(t.value(ix).shape()));
                           });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat axis out of range");
    Shape os = first;
    os[axis] = 0;
    std::vector<std::size_t> lens;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != first[i])
                throw ShapeError("concat shape mismatch " + shape_str(first) + " vs " + shape_str(s));
        lens.push_back(s[axis]);
        os[axis] += s[axis];
    }
    const auto sp = detail::split_axis(os, axis, "concat");
    Tensor y(os);
    std::size_t offset = 0;
    for (std::size_t q = 0; q < parts.size(); ++q) {
        const Tensor& pv = parts[q].value();
        const std::size_t chunk = lens[q] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(pv.data().data() + o * chunk, chunk, y.data().data() + o * sp.len * sp.inner + offset * sp.inner);
        offset += lens[q];
    }
    std::vector<std::size_t> ids;
    for (const Var& p : parts) ids.push_back(p.id());
    return parts.front().tape().record("concat", std::move(y), parts, [ids, lens, sp](Tape& t, const Tensor&, const Tensor& up) {
        std::size_t offset = 0;
        for (std::size_t q = 0; q < ids.size(); ++q) {
            if (t.requires_grad(ids[q])) {
                Tensor g(t.value(ids[q]).shape());
                const std::size_t chunk = lens[q] * sp.inner;
                for (std::size_t o = 0; o < sp.outer; ++o)
                    std::copy_n(up.data().data() + o * sp.len * sp.inner + offset * sp.inner, chunk, g.data().data() + o * chunk);
                t.accumulate(ids[q], std::move(g));
            }
            offset += lens[q];
        }
    });
}

/// Half-open range [begin, end) along one axis.
inline Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Tensor& xv = x.value();
    const auto sp = detail::split_axis(xv.shape(), axis, "slice");
    if (begin >= end || end > sp.len)
        throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of axis length " + std::to_string(sp.len));
    Shape os = xv.shape();
    os[axis] = end - begin;
    Tensor y(os);
    const std::size_t chunk = (end - begin) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(xv.data().data() + (o * sp.len + begin) * sp.inner, chunk, y.data().data() + o * chunk);
    const std::size_t ix = x.id();
    return x.tape().record("slice", std::move(y), {x}, [ix, sp, begin, chunk](Tape& t, const Tensor&, const Tensor& up) {
        Tensor g(t.value(ix).shape());
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(up.data().data() + o * chunk, chunk, g.data().data() + (o * sp.len + begin) * sp.inner);
        t.accumulate(ix, std::move(g));
    });
}

/// out[k] = x[index[k]], or 0 where index[k] < 0. Backward scatter-adds, so an
/// input element referenced twice receives both contributions.
inline Var gather(const Var& x, std::vector<std::int64_t> index, Shape out_shape) {
    if (shape_numel(out_shape) != index.size()) throw ShapeError("gather index count does not match output shape");
    const Tensor& xv = x.value();
    Tensor y(std::move(out_shape));
    for (std::size_t k = 0; k < index.size(); ++k) {
        if (index[k] >= static_cast<std::int64_t>(xv.numel())) throw ShapeError("gather index out of range");
        y[k] = index[k] < 0 ? 0.0 : xv[static_cast<std::size_t>(index[k])];
    }
    const std::size_t ix = x.id();
    return x.tape().record("gather", std::move(y), {x}, [ix, index = std::move(index)](Tape& t, const Tensor&, const Tensor& up) {
        Tensor g(t.value(ix).shape());
        for (std::size_t k = 0; k < index.size(); ++k)
            if (index[k] >= 0) g[static_cast<std::size_t>(index[k])] += up[k];
        t.accumulate(ix, std::move(g));
    });
}

// ---------------------------------------------------------------------------
// Reductions.

/// Sum over one axis; the axis is removed.
inline Var sum(const Var& x, std::size_t axis) {
    const Tensor& xv = x.value();
    const auto sp = detail::split_axis(xv.shape(), axis, "sum");
    Shape os = xv.shape();
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor y(os);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i) y[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
    const std::size_t ix = x.id();
    return x.tape().record("sum", std::move(y), {x}, [ix, sp](Tape& t, const Tensor&, const Tensor& up) {
        Tensor g(t.value(ix).shape());
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t l = 0; l < sp.len; ++l)
                for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.len + l) * sp.inner + i] = up[o * sp.inner + i];
        t.accumulate(ix, std::move(g));
    });
}

inline Var mean(const Var& x, std::size_t axis) {
    const double n = static_cast<double>(detail::split_axis(x.shape(), axis, "mean").len);
    return scale(sum(x, axis), 1.0 / n);
}

inline Var sum_all(const Var& x) {
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    const std::size_t ix = x.id();
    return x.tape().record("sum_all", Tensor::scalar(s), {x}, [ix](Tape& t, const Tensor&, const Tensor& up) {
        t.accumulate(ix, Tensor(t.value(ix).shape(), up.item()));
    });
}

inline Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Normalizations.

inline Var softmax(const Var& x, std::size_t axis) {
    const Tensor& xv = x.value();
    const auto sp = detail::split_axis(xv.shape(), axis, "softmax");
    Tensor y(xv.shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double mx = xv[base];
            for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) z += (y[base + l * sp.inner] = std::exp(xv[base + l * sp.inner] - mx));
            for (std::size_t l = 0; l < sp.len; ++l) y[base + l * sp.inner] /= z;
        }
    const std::size_t ix = x.id();
    return x.tape().record("softmax", std::move(y), {x}, [ix, sp](Tape& t, const Tensor& y, const Tensor& up) {
        Tensor g(y.shape());
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                double dot = 0.0;
                for (std::size_t l = 0; l < sp.len; ++l) dot += up[base + l * sp.inner] * y[base + l * sp.inner];
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t k = base + l * sp.inner;
                    g[k] = y[k] * (up[k] - dot);
                }
            }
        t.accumulate(ix, std::move(g));
    });
}

inline Var log_softmax(const Var& x, std::size_t axis) {
    const Tensor& xv = x.value();
    const auto sp = detail::split_axis(xv.shape(), axis, "log_softmax");
    Tensor y(xv.shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double mx = xv[base];
            for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) z += std::exp(xv[base + l * sp.inner] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t l = 0; l < sp.len; ++l) y[base + l * sp.inner] = xv[base + l * sp.inner] - lse;
        }
    const std::size_t ix = x.id();
    return x.tape().record("log_softmax", std::move(y), {x}, [ix, sp](Tape& t, const Tensor& y, const Tensor& up) {
        Tensor g(y.shape());
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.len * sp.inner + i;
                double total = 0.0;
                for (std::size_t l = 0; l < sp.len; ++l) total += up[base + l * sp.inner];
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t k = base + l * sp.inner;
                    g[k] = up[k] - std::exp(y[k]) * total;
                }
            }
        t.accumulate(ix, std::move(g));
    });
}

/// Softmax over the last axis restricted to entries where `member` is set;
/// non-members get exactly 0. Every row needs at least one member.
inline Var masked_softmax(const Var& x, std::vector<char> member) {
    const Tensor& xv = x.value();
    if (member.size() != xv.numel()) throw ShapeError("masked_softmax mask size mismatch");
    const std::size_t len = xv.shape().back();
    const std::size_t rows = xv.numel() / len;
    Tensor y(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < len; ++l)
            if (member[base + l]) mx = std::max(mx, xv[base + l]);
        if (!std::isfinite(mx)) throw ContractError("masked_softmax row without members");
        double z = 0.0;
        for (std::size_t l = 0; l < len; ++l)
            if (member[base + l]) z += (y[base + l] = std::exp(xv[base + l] - mx));
        for (std::size_t l = 0; l < len; ++l) y[base + l] /= z;
    }
    const std::size_t ix = x.id();
    return x.tape().record("masked_softmax", std::move(y), {x}, [ix, len, rows](Tape& t, const Tensor& y, const Tensor& up) {
        Tensor g(y.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * len;
            double dot = 0.0;
            for (std::size_t l = 0; l < len; ++l) dot += up[base + l] * y[base + l];
            for (std::size_t l = 0; l < len; ++l) g[base + l] = y[base + l] * (up[base + l] - dot);
        }
        t.accumulate(ix, std::move(g));
    });
}

// ---------------------------------------------------------------------------
// Gradient checking.

using ScalarFn = std::function<Var(Tape&, const Var&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const ScalarFn& f, const Tensor& x, double step) {
    if (!(step > 0.0)) throw ContractError("grad_check step must be positive");
    Tape tape;
    const Var xv = tape.variable(x);
    const Var loss = f(tape, xv);
    tape.backward(loss);
    const Tensor analytic = tape.grad(xv);

    auto eval = [&](const Tensor& at) {
        Tape t;
        const double v = f(t, t.constant(at)).value().item();
        if (!std::isfinite(v)) throw DomainError("grad_check: non-finite function value");
        return v;
    };
    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        probe[i] = x[i] + step;
        const double up = eval(probe);
        probe[i] = x[i] - step;
        const double down = eval(probe);
        probe[i] = x[i];
        const double fd = (up - down) / (2.0 * step);
        worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    return worst;
}

}  // namespace seegraph::ad
