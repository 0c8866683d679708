#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "docparse/common.hpp"
#include "docparse/kernels.hpp"

namespace docparse {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline void check_shape(const Shape& s) {
    if (s.empty() || s.size() > 4) throw ShapeError("rank must be 1..4, got " + shape_str(s));
    for (int64_t d : s) {
        if (d < 1) throw ShapeError("dimensions must be positive, got " + shape_str(s));
    }
}

enum class Mode { Train, Eval };

template <typename S>
class Tape;

// ---------------------------------------------------------------------------
// Tensor: dense row-major array, rank 1..4, with optional gradient tracking.
// Copies share storage; clone() deep-copies. Gradients for leaves accumulate
// in the tensor itself, intermediates keep theirs on the tape.
// ---------------------------------------------------------------------------

template <typename S>
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<S> values) : shape_(std::move(shape)) {
        check_shape(shape_);
        if (shape_numel(shape_) != static_cast<int64_t>(values.size()))
            throw ShapeError("value count " + std::to_string(values.size()) + " != numel of " +
                             shape_str(shape_));
        data_ = std::make_shared<std::vector<S>>(std::move(values));
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), S(0)); }

    static Tensor full(Shape shape, S value) {
        check_shape(shape);
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<S>>(shape_numel(t.shape_), value);
        return t;
    }

    /// Uniform values in [-a, a], deterministic per rng state.
    static Tensor uniform(Shape shape, Rng& rng, S a) {
        Tensor t = zeros(std::move(shape));
        for (S& v : *t.data_) v = static_cast<S>(rng.uniform(-double(a), double(a)));
        return t;
    }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
    bool defined() const { return static_cast<bool>(data_); }

    std::span<S> data() { return {data_->data(), data_->size()}; }
    std::span<const S> data() const { return {data_->data(), data_->size()}; }
    const std::shared_ptr<std::vector<S>>& storage() const { return data_; }

    S at(std::initializer_list<int64_t> idx) const {
        int64_t off = 0;
        size_t i = 0;
        for (int64_t v : idx) off = off * shape_[i++] + v;
        return (*data_)[off];
    }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool b) {
        requires_grad_ = b;
        return *this;
    }

    bool has_grad() const { return static_cast<bool>(grad_); }
    std::span<const S> grad() const {
        if (!grad_) throw ContractError("tensor has no gradient");
        return {grad_->data(), grad_->size()};
    }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), S(0));
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<S>>(*data_);
        t.requires_grad_ = requires_grad_;
        return t;
    }

    /// Metadata-only reshape of an untracked tensor. Use reshape() for taped values.
    Tensor viewed(Shape shape) const {
        check_shape(shape);
        if (shape_numel(shape) != numel())
            throw ShapeError("view " + shape_str(shape) + " incompatible with " + shape_str(shape_));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        t.node_ = -1;
        t.tape_serial_ = 0;
        return t;
    }

private:
    friend class Tape<S>;

    Shape shape_;
    std::shared_ptr<std::vector<S>> data_;
    bool requires_grad_ = false;

    // Tape bookkeeping; logically not part of the value, hence mutable.
    mutable std::shared_ptr<std::vector<S>> grad_;
    mutable int node_ = -1;
    mutable uint64_t tape_serial_ = 0;
};

// ---------------------------------------------------------------------------
// Tape: records operations for reverse-mode differentiation. Single-threaded
// per model instance; nodes are appended in execution (topological) order.
// ---------------------------------------------------------------------------

template <typename S>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const std::vector<S>&)>;

    Tape() : serial_(next_serial()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    uint64_t serial() const { return serial_; }
    size_t size() const { return nodes_.size(); }

    /// Register a leaf. Its gradient buffer is shared with the tensor, so
    /// backward accumulates straight into tensor.grad().
    int watch(const Tensor<S>& t) {
        if (t.tape_serial_ == serial_ && t.node_ >= 0) return t.node_;
        if (!t.grad_) t.grad_ = std::make_shared<std::vector<S>>(t.numel(), S(0));
        Node n;
        n.numel = t.numel();
        n.grad = t.grad_;
        nodes_.push_back(std::move(n));
        t.node_ = static_cast<int>(nodes_.size()) - 1;
        t.tape_serial_ = serial_;
        return t.node_;
    }

    /// Node id of `t` on this tape; auto-watches leaves that require grad.
    /// Returns -1 for constants (no gradient will flow to them).
    int track(const Tensor<S>& t) {
        if (t.tape_serial_ == serial_ && t.node_ >= 0) return t.node_;
        if (t.requires_grad_) return watch(t);
        return -1;
    }

    /// Record an op node producing `out`.
    void record(Tensor<S>& out, std::initializer_list<int> inputs, BackwardFn fn) {
        bool connected = false;
        for (int id : inputs) connected |= (id >= 0);
        if (!connected) return;  // pure constant expression, nothing to record
        Node n;
        n.numel = out.numel();
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        out.node_ = static_cast<int>(nodes_.size()) - 1;
        out.tape_serial_ = serial_;
    }

    /// Gradient buffer of a node, allocated (zeroed) on first touch.
    std::vector<S>& grad(int node) {
        Node& n = nodes_.at(node);
        if (!n.grad) n.grad = std::make_shared<std::vector<S>>(n.numel, S(0));
        return *n.grad;
    }

    bool touched(int node) const { return static_cast<bool>(nodes_.at(node).grad); }

    /// Reverse sweep from a scalar loss. A tape can be played backward once.
    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (loss.tape_serial_ != serial_ || loss.node_ < 0)
            throw ContractError("backward: loss was not produced on this tape");
        if (played_) throw ContractError("backward: tape already played; build a fresh tape");
        played_ = true;
        grad(loss.node_)[0] = S(1);
        for (int i = loss.node_; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.grad || !n.backward) continue;
            n.backward(*this, *n.grad);
        }
    }

private:
    struct Node {
        int64_t numel = 0;
        std::shared_ptr<std::vector<S>> grad;  // shared with the tensor for leaves
        BackwardFn backward;                   // empty for leaves
    };

    static uint64_t next_serial() {
        static std::atomic<uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    std::vector<Node> nodes_;
    uint64_t serial_;
    bool played_ = false;
};

// ---------------------------------------------------------------------------
// Creation and core ops. Every op takes an optional tape; with tape == nullptr
// it is a plain forward computation.
// ---------------------------------------------------------------------------

enum class Fill { Zero, One };

template <typename S>
Tensor<S> tensor_create(Shape shape, S fill_value) {
    return Tensor<S>::full(std::move(shape), fill_value);
}

template <typename S>
Tensor<S> tensor_create_uniform(Shape shape, uint64_t seed, S a) {
    Rng rng(seed);
    return Tensor<S>::uniform(std::move(shape), rng, a);
}

namespace detail {

// b broadcasts over a iff b's shape equals a trailing slice of a's shape
// (missing leading dims are implicitly 1). Returns the leading multiplier.
template <typename S>
int64_t broadcast_lead(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sb.size() > sa.size()) throw ShapeError("broadcast: rank of b exceeds a");
    size_t off = sa.size() - sb.size();
    size_t skip = 0;
    while (skip < sb.size() && sb[skip] == 1) ++skip;
    for (size_t i = skip; i < sb.size(); ++i) {
        if (sb[i] != sa[off + i])
            throw ShapeError("cannot broadcast " + shape_str(sb) + " with " + shape_str(sa));
    }
    int64_t lead = 1;
    for (size_t i = 0; i < off + skip; ++i) lead *= sa[i];
    return lead;
}

}  // namespace detail

enum class EwKind { Add, Sub, Mul };

template <typename S>
Tensor<S> elementwise(EwKind kind, const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    const int64_t lead = detail::broadcast_lead(a, b);
    const int64_t bn = b.numel();
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.data();
    for (int64_t l = 0; l < lead; ++l) {
        const S* ap = av.data() + l * bn;
        S* op = ov.data() + l * bn;
        switch (kind) {
            case EwKind::Add:
                for (int64_t i = 0; i < bn; ++i) op[i] = ap[i] + bv[i];
                break;
            case EwKind::Sub:
                for (int64_t i = 0; i < bn; ++i) op[i] = ap[i] - bv[i];
                break;
            case EwKind::Mul:
                for (int64_t i = 0; i < bn; ++i) op[i] = ap[i] * bv[i];
                break;
        }
    }
    if (tape) {
        int ia = tape->track(a), ib = tape->track(b);
        // mul is the only kind whose backward reads the forward values
        auto ad = kind == EwKind::Mul ? a.storage() : nullptr;
        auto bd = kind == EwKind::Mul ? b.storage() : nullptr;
        tape->record(out, {ia, ib},
                     [=](Tape<S>& tp, const std::vector<S>& g) {
                         if (ia >= 0) {
                             auto& ga = tp.grad(ia);
                             for (int64_t l = 0; l < lead; ++l)
                                 for (int64_t i = 0; i < bn; ++i) {
                                     S gv = g[l * bn + i];
                                     if (kind == EwKind::Mul) gv *= (*bd)[i];
                                     ga[l * bn + i] += gv;
                                 }
                         }
                         if (ib >= 0) {
                             auto& gb = tp.grad(ib);
                             for (int64_t l = 0; l < lead; ++l)
                                 for (int64_t i = 0; i < bn; ++i) {
                                     S gv = g[l * bn + i];
                                     if (kind == EwKind::Mul) gv *= (*ad)[l * bn + i];
                                     else if (kind == EwKind::Sub) gv = -gv;
                                     gb[i] += gv;
                                 }
                         }
                     });
    }
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    return elementwise(EwKind::Add, a, b, tape);
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    return elementwise(EwKind::Sub, a, b, tape);
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    return elementwise(EwKind::Mul, a, b, tape);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor, Tape<S>* tape = nullptr) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto av = a.data();
    auto ov = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * factor;
    if (tape) {
        int ia = tape->track(a);
        tape->record(out, {ia}, [=](Tape<S>& tp, const std::vector<S>& g) {
            auto& ga = tp.grad(ia);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
        });
    }
    return out;
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros({m, n});
    detail::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
    if (tape) {
        int ia = tape->track(a), ib = tape->track(b);
        tape->record(out, {ia, ib},
                     [=, ad = a.storage(), bd = b.storage()](Tape<S>& tp, const std::vector<S>& g) {
                         if (ia >= 0) detail::gemm_nt(g.data(), bd->data(), tp.grad(ia).data(), m, n, k, true);
                         if (ib >= 0) detail::gemm_tn(ad->data(), g.data(), tp.grad(ib).data(), k, m, n, true);
                     });
    }
    return out;
}

// Batched matmul: a[B,M,K] x b[B,K,N] (or b[B,N,K] with transpose_b).
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool transpose_b = false, Tape<S>* tape = nullptr) {
    if (a.rank() != 3 || b.rank() != 3) throw ShapeError("bmm expects rank-3 operands");
    const int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2);
    const int64_t n = transpose_b ? b.dim(1) : b.dim(2);
    const int64_t bk = transpose_b ? b.dim(2) : b.dim(1);
    if (b.dim(0) != nb || bk != k)
        throw ShapeError("bmm shapes incompatible: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros({nb, m, n});
    const S* ap = a.data().data();
    const S* bp = b.data().data();
    S* op = out.data().data();
    for (int64_t i = 0; i < nb; ++i) {
        if (transpose_b)
            detail::gemm_nt(ap + i * m * k, bp + i * n * k, op + i * m * n, m, k, n, false);
        else
            detail::gemm_nn(ap + i * m * k, bp + i * k * n, op + i * m * n, m, k, n, false);
    }
    if (tape) {
        int ia = tape->track(a), ib = tape->track(b);
        tape->record(out, {ia, ib},
                     [=, ad = a.storage(), bd = b.storage()](Tape<S>& tp, const std::vector<S>& g) {
            for (int64_t i = 0; i < nb; ++i) {
                const S* gi = g.data() + i * m * n;
                if (ia >= 0) {
                    S* ga = tp.grad(ia).data() + i * m * k;
                    if (transpose_b) detail::gemm_nn(gi, bd->data() + i * n * k, ga, m, n, k, true);
                    else detail::gemm_nt(gi, bd->data() + i * k * n, ga, m, n, k, true);
                }
                if (ib >= 0) {
                    S* gb = tp.grad(ib).data() + i * k * n;  // same size either layout
                    if (transpose_b)
                        detail::gemm_tn(gi, ad->data() + i * m * k, gb, n, m, k, true);
                    else
                        detail::gemm_tn(ad->data() + i * m * k, gi, gb, k, m, n, true);
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape, Tape<S>* tape = nullptr) {
    check_shape(shape);
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor<S> out(shape, std::vector<S>(x.data().begin(), x.data().end()));
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=](Tape<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad(ix);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

namespace detail {

inline std::array<int64_t, 4> strides_of(const Shape& s) {
    std::array<int64_t, 4> st{0, 0, 0, 0};
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

template <typename S>
void permute_copy(const S* src, S* dst, const Shape& in_shape, const std::vector<int>& perm, bool invert) {
    const size_t r = in_shape.size();
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
    auto in_st = strides_of(in_shape);
    std::array<int64_t, 4> dim{1, 1, 1, 1}, st{0, 0, 0, 0};
    for (size_t i = 0; i < r; ++i) {
        dim[i] = out_shape[i];
        st[i] = in_st[static_cast<size_t>(perm[i])];
    }
    int64_t o = 0;
    for (int64_t i0 = 0; i0 < dim[0]; ++i0)
        for (int64_t i1 = 0; i1 < dim[1]; ++i1)
            for (int64_t i2 = 0; i2 < dim[2]; ++i2) {
                int64_t base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                if (!invert) {
                    for (int64_t i3 = 0; i3 < dim[3]; ++i3) dst[o++] = src[base + i3 * st[3]];
                } else {
                    for (int64_t i3 = 0; i3 < dim[3]; ++i3) dst[base + i3 * st[3]] += src[o++];
                }
            }
}

}  // namespace detail

template <typename S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int> perm, Tape<S>* tape = nullptr) {
    if (perm.size() != x.rank()) throw ShapeError("permute: rank mismatch");
    Shape out_shape(x.rank());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(static_cast<size_t>(perm[i]));
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    detail::permute_copy(x.data().data(), out.data().data(), x.shape(), perm, false);
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=, in_shape = x.shape()](Tape<S>& tp, const std::vector<S>& g) {
            detail::permute_copy(g.data(), tp.grad(ix).data(), in_shape, perm, true);
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    S acc = S(0);
    for (S v : x.data()) acc += v;
    Tensor<S> out({1}, {acc});
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=](Tape<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad(ix);
            for (S& v : gx) v += g[0];
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    const S inv = S(1) / static_cast<S>(x.numel());
    S acc = S(0);
    for (S v : x.data()) acc += v;
    Tensor<S> out({1}, {acc * inv});
    if (tape) {
        int ix = tape->track(x);
        tape->record(out, {ix}, [=](Tape<S>& tp, const std::vector<S>& g) {
            auto& gx = tp.grad(ix);
            for (S& v : gx) v += g[0] * inv;
        });
    }
    return out;
}

/// Run backward from a scalar loss on the given tape.
template <typename S>
void backward(Tape<S>& tape, const Tensor<S>& loss) {
    tape.backward(loss);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle: checks reverse-mode gradients of f at x against
// central differences. Returns the max relative error over coordinates.
// ---------------------------------------------------------------------------

template <typename S>
double finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&, Tape<S>*)>& f,
                         const Tensor<S>& x, double eps) {
    if (eps <= 0) throw ContractError("finite_diff_check: eps must be positive");
    Tensor<S> probe = x.clone();
    probe.set_requires_grad(true);
    Tape<S> tape;
    Tensor<S> loss = f(probe, &tape);
    tape.backward(loss);
    auto g = probe.grad();

    Tensor<S> work = x.clone();
    auto wd = work.data();
    double worst = 0.0;
    for (int64_t i = 0; i < work.numel(); ++i) {
        const S saved = wd[i];
        wd[i] = saved + static_cast<S>(eps);
        const double fp = static_cast<double>(f(work, nullptr).data()[0]);
        wd[i] = saved - static_cast<S>(eps);
        const double fm = static_cast<double>(f(work, nullptr).data()[0]);
        wd[i] = saved;
        const double cd = (fp - fm) / (2.0 * eps);
        const double err = std::abs(static_cast<double>(g[i]) - cd) / std::max(1.0, std::abs(cd));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace docparse
