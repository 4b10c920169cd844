#pragma once

// Dense row-major tensors with reverse-mode differentiation on an explicit
// tape.  Ops record pull-back closures onto the thread-local active tape;
// Tape::backward replays them in reverse registration order.  Scalar type is
// a template parameter (float is the working precision, double builds are
// used by the gradient-check suites).

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "gesme/common.hpp"

namespace gesme {

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // allocated lazily, zero-filled
    bool requires_grad = false;
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : s_(std::make_shared<TensorStorage<T>>()) {
        validate_shape(shape);
        s_->shape = std::move(shape);
        s_->values.assign(static_cast<std::size_t>(shape_numel(s_->shape)), fill);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor scalar(T v) {
        Tensor t(Shape{1});
        t.s_->values[0] = v;
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values) {
        validate_shape(shape);
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.s_ = std::make_shared<TensorStorage<T>>();
        t.s_->shape = std::move(shape);
        t.s_->values = std::move(values);
        return t;
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    int ndim() const { return static_cast<int>(s_->shape.size()); }
    std::int64_t dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(s_->values.size()); }

    std::span<T> values() { return {s_->values.data(), s_->values.size()}; }
    std::span<const T> values() const { return {s_->values.data(), s_->values.size()}; }

    // Scalar read; the tensor must hold exactly one element.
    T item() const {
        if (size() != 1)
            throw UsageError("item() called on tensor of shape " + shape_str(shape()));
        return s_->values[0];
    }

    bool requires_grad() const { return s_ && s_->requires_grad; }

    Tensor& set_requires_grad(bool r = true) {
        s_->requires_grad = r;
        return *this;
    }

    // Gradient buffer, allocated zero-filled on first access.
    std::span<T> grad() {
        ensure_grad();
        return {s_->grad.data(), s_->grad.size()};
    }
    std::span<const T> grad() const {
        const_cast<Tensor*>(this)->ensure_grad();
        return {s_->grad.data(), s_->grad.size()};
    }

    void zero_grad() {
        if (s_ && !s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }
    const void* storage_id() const { return s_.get(); }

    // Deep copy of values only (no grad, no recording).
    Tensor clone_values() const { return Tensor::from(shape(), {s_->values.begin(), s_->values.end()}); }

private:
    static void validate_shape(const Shape& shape) {
        for (auto e : shape)
            if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    }

    void ensure_grad() {
        if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
    }

    std::shared_ptr<TensorStorage<T>> s_;
};

// Append-only record of differentiable operations.  Registration order is a
// topological order of the graph by construction; backward() pulls each node
// exactly once, in reverse.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape() {
        if (active_ == this) active_ = nullptr;
    }

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_) { active_ = &t; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* active() { return active_; }

    void record(const Tensor<T>& out, std::function<void()> pull) {
        nodes_.push_back(Node{out, std::move(pull)});
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // requires_grad leaf reachable from the recorded graph.  Intermediate
    // (op-output) gradients are scratch state and are reset on entry, so
    // calling backward twice doubles the leaf gradients; leaves accumulate
    // until explicitly zeroed.
    void backward(Tensor<T>& loss) {
        if (loss.size() != 1)
            throw UsageError("backward() requires a scalar loss; got shape " +
                             shape_str(loss.shape()));
        for (auto& n : nodes_) n.out.zero_grad();
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->pull();
    }

private:
    struct Node {
        Tensor<T> out;
        std::function<void()> pull;
    };

    static thread_local Tape* active_;
    std::vector<Node> nodes_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.values())
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + " produced a non-finite value");
}

template <typename T>
inline bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::active()) return false;
    for (const auto* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

// Splits a shape into [leading batch dims] x [trailing core dims].
inline std::int64_t leading_count(const Shape& s, std::size_t core_rank) {
    std::int64_t n = 1;
    for (std::size_t i = 0; i + core_rank < s.size(); ++i) n *= s[i];
    return n;
}

inline Shape replace_trailing(const Shape& s, std::size_t core_rank, Shape core) {
    Shape out(s.begin(), s.end() - static_cast<std::ptrdiff_t>(core_rank));
    out.insert(out.end(), core.begin(), core.end());
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shapes differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor<T> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] + bv[i];
    detail::check_finite(out, "add");
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [a = a, b = b, out]() mutable {
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::int64_t i = 0; i < out.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::int64_t i = 0; i < out.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("sub: shapes differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor<T> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] - bv[i];
    detail::check_finite(out, "sub");
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [a = a, b = b, out]() mutable {
            auto go = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::int64_t i = 0; i < out.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::int64_t i = 0; i < out.size(); ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

// Elementwise product; identical shapes required (no implicit broadcasting).
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("hadamard: shapes differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor<T> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::int64_t i = 0; i < a.size(); ++i) ov[i] = av[i] * bv[i];
    detail::check_finite(out, "hadamard");
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [a = a, b = b, out]() mutable {
            auto go = out.grad();
            auto av = a.values(), bv = b.values();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::int64_t i = 0; i < out.size(); ++i) ga[i] += bv[i] * go[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::int64_t i = 0; i < out.size(); ++i) gb[i] += av[i] * go[i];
            }
        });
    }
    return out;
}

// Multiply by a compile-known constant (no gradient to the constant).
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::int64_t i = 0; i < x.size(); ++i) ov[i] = xv[i] * c;
    detail::check_finite(out, "scale");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out, c]() mutable {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::int64_t i = 0; i < out.size(); ++i) gx[i] += c * go[i];
        });
    }
    return out;
}

// x broadcast-added with `bias`, whose shape must equal the trailing suffix
// of x's shape.  This is the only broadcast the library performs implicitly.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    const Shape& xs = x.shape();
    const Shape& bs = bias.shape();
    if (bs.size() > xs.size() ||
        !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<std::ptrdiff_t>(bs.size())))
        throw DimensionError("add_bias: bias " + shape_str(bs) +
                             " is not a trailing suffix of " + shape_str(xs));
    const std::int64_t inner = bias.size();
    const std::int64_t outer = x.size() / inner;
    Tensor<T> out(xs);
    auto xv = x.values(), bv = bias.values();
    auto ov = out.values();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) ov[o * inner + i] = xv[o * inner + i] + bv[i];
    detail::check_finite(out, "add_bias");
    if (detail::tracing<T>({&x, &bias})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, bias = bias, out, outer, inner]() mutable {
            auto go = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::int64_t i = 0; i < out.size(); ++i) gx[i] += go[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < inner; ++i) gb[i] += go[o * inner + i];
            }
        });
    }
    return out;
}

// x elementwise-scaled by `w` broadcast over x's leading dims; w's shape must
// equal the trailing suffix of x's shape.  Used for per-sample application of
// shared weight masks.
template <typename T>
Tensor<T> mul_trailing(const Tensor<T>& x, const Tensor<T>& w) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (ws.size() > xs.size() ||
        !std::equal(ws.begin(), ws.end(), xs.end() - static_cast<std::ptrdiff_t>(ws.size())))
        throw DimensionError("mul_trailing: weights " + shape_str(ws) +
                             " are not a trailing suffix of " + shape_str(xs));
    const std::int64_t inner = w.size();
    const std::int64_t outer = x.size() / inner;
    Tensor<T> out(xs);
    auto xv = x.values(), wv = w.values();
    auto ov = out.values();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) ov[o * inner + i] = xv[o * inner + i] * wv[i];
    detail::check_finite(out, "mul_trailing");
    if (detail::tracing<T>({&x, &w})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, w = w, out, outer, inner]() mutable {
            auto go = out.grad();
            auto xv = x.values(), wv = w.values();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < inner; ++i)
                        gx[o * inner + i] += wv[i] * go[o * inner + i];
            }
            if (w.requires_grad()) {
                auto gw = w.grad();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < inner; ++i)
                        gw[i] += xv[o * inner + i] * go[o * inner + i];
            }
        });
    }
    return out;
}

// out[r, ...] = s[r] * x[r, ...]; s is a per-row scalar of shape [R] matching
// x's leading extent.  The expert-blending primitive.
template <typename T>
Tensor<T> rowwise_scale(const Tensor<T>& x, const Tensor<T>& s) {
    if (s.ndim() != 1 || x.ndim() < 1 || x.dim(0) != s.dim(0))
        throw DimensionError("rowwise_scale: scales " + shape_str(s.shape()) +
                             " do not match rows of " + shape_str(x.shape()));
    const std::int64_t rows = s.dim(0);
    const std::int64_t inner = x.size() / rows;
    Tensor<T> out(x.shape());
    auto xv = x.values(), sv = s.values();
    auto ov = out.values();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < inner; ++i) ov[r * inner + i] = sv[r] * xv[r * inner + i];
    detail::check_finite(out, "rowwise_scale");
    if (detail::tracing<T>({&x, &s})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, s = s, out, rows, inner]() mutable {
            auto go = out.grad();
            auto xv = x.values(), sv = s.values();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < inner; ++i)
                        gx[r * inner + i] += sv[r] * go[r * inner + i];
            }
            if (s.requires_grad()) {
                auto gs = s.grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    T acc = 0;
                    for (std::int64_t i = 0; i < inner; ++i)
                        acc += xv[r * inner + i] * go[r * inner + i];
                    gs[r] += acc;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> abs_val(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::int64_t i = 0; i < x.size(); ++i) ov[i] = std::abs(xv[i]);
    detail::check_finite(out, "abs_val");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out]() mutable {
            auto go = out.grad();
            auto xv = x.values();
            auto gx = x.grad();
            // subgradient 0 at x == 0
            for (std::int64_t i = 0; i < out.size(); ++i)
                gx[i] += (xv[i] > T(0) ? go[i] : (xv[i] < T(0) ? -go[i] : T(0)));
        });
    }
    return out;
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
    Tensor<T> out(Shape{1});
    T acc = 0;
    for (T v : x.values()) acc += v;
    out.values()[0] = acc;
    detail::check_finite(out, "reduce_sum");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out]() mutable {
            const T g = out.grad()[0];
            auto gx = x.grad();
            for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
    return scale(reduce_sum(x), T(1) / static_cast<T>(x.size()));
}

// Mean along one axis (axis removed from the output).
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.ndim())
        throw DimensionError("mean_axis: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(x.shape()));
    const Shape& xs = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xs[i];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= xs[i];
    const std::int64_t n = xs[axis];
    Shape os;
    for (int i = 0; i < x.ndim(); ++i)
        if (i != axis) os.push_back(xs[i]);
    if (os.empty()) os = {1};
    Tensor<T> out(os);
    auto xv = x.values();
    auto ov = out.values();
    const T inv = T(1) / static_cast<T>(n);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            T acc = 0;
            for (std::int64_t k = 0; k < n; ++k) acc += xv[(o * n + k) * inner + i];
            ov[o * inner + i] = acc * inv;
        }
    detail::check_finite(out, "mean_axis");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out, outer, inner, n, inv]() mutable {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < inner; ++i) {
                    const T g = go[o * inner + i] * inv;
                    for (std::int64_t k = 0; k < n; ++k) gx[(o * n + k) * inner + i] += g;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { Linear, Sigmoid, Tanh, Relu };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Linear: return "linear";
        case Activation::Sigmoid: return "sigmoid";
        case Activation::Tanh: return "tanh";
        case Activation::Relu: return "relu";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "linear") return Activation::Linear;
    if (s == "sigmoid") return Activation::Sigmoid;
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    throw ConfigError("unknown activation '" + s + "'");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::int64_t i = 0; i < x.size(); ++i) ov[i] = T(1) / (T(1) + std::exp(-xv[i]));
    detail::check_finite(out, "sigmoid");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out]() mutable {
            auto go = out.grad();
            auto ov = out.values();
            auto gx = x.grad();
            for (std::int64_t i = 0; i < out.size(); ++i) gx[i] += ov[i] * (T(1) - ov[i]) * go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> tanh_act(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::int64_t i = 0; i < x.size(); ++i) ov[i] = std::tanh(xv[i]);
    detail::check_finite(out, "tanh");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out]() mutable {
            auto go = out.grad();
            auto ov = out.values();
            auto gx = x.grad();
            for (std::int64_t i = 0; i < out.size(); ++i) gx[i] += (T(1) - ov[i] * ov[i]) * go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::int64_t i = 0; i < x.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
    detail::check_finite(out, "relu");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out]() mutable {
            auto go = out.grad();
            auto xv = x.values();
            auto gx = x.grad();
            for (std::int64_t i = 0; i < out.size(); ++i)
                if (xv[i] > T(0)) gx[i] += go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation a) {
    switch (a) {
        case Activation::Linear: return x;
        case Activation::Sigmoid: return sigmoid(x);
        case Activation::Tanh: return tanh_act(x);
        case Activation::Relu: return relu(x);
    }
    throw UsageError("bad activation");
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// a [..xpxq] times b [qxr] (or b [rxq] with transpose_b), b shared across any
// leading batch dims of a.  A 1-D b of length q is treated as [qx1] and the
// result drops the trailing unit axis.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    if (a.ndim() < 2)
        throw DimensionError("matmul: lhs must have rank >= 2, got " + shape_str(a.shape()));
    const bool vec_b = b.ndim() == 1;
    if (!vec_b && b.ndim() != 2)
        throw DimensionError("matmul: rhs must have rank 1 or 2, got " + shape_str(b.shape()));

    const std::int64_t q = vec_b ? b.dim(0) : (transpose_b ? b.dim(1) : b.dim(0));
    const std::int64_t r = vec_b ? 1 : (transpose_b ? b.dim(0) : b.dim(1));
    const std::int64_t a_q = a.dim(a.ndim() - 1);
    const std::int64_t a_p = a.dim(a.ndim() - 2);
    if (a_q != q)
        throw DimensionError("matmul: inner extents disagree, lhs " + shape_str(a.shape()) +
                             " rhs " + shape_str(b.shape()) +
                             (transpose_b ? " (rhs transposed)" : ""));

    const std::int64_t batches = detail::leading_count(a.shape(), 2);
    Shape oshape(a.shape().begin(), a.shape().end() - 1);
    if (!vec_b) oshape.push_back(r);
    Tensor<T> out(oshape);

    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::int64_t n = 0; n < batches; ++n) {
        const T* A = av.data() + n * a_p * q;
        T* O = ov.data() + n * a_p * r;
        for (std::int64_t i = 0; i < a_p; ++i)
            for (std::int64_t j = 0; j < r; ++j) O[i * r + j] = 0;
        if (!transpose_b || vec_b) {
            // O[i,j] += A[i,k] * B[k,j]
            for (std::int64_t i = 0; i < a_p; ++i)
                for (std::int64_t k = 0; k < q; ++k) {
                    const T aik = A[i * q + k];
                    for (std::int64_t j = 0; j < r; ++j) O[i * r + j] += aik * bv[k * r + j];
                }
        } else {
            // O[i,j] += A[i,k] * B[j,k]
            for (std::int64_t i = 0; i < a_p; ++i)
                for (std::int64_t j = 0; j < r; ++j) {
                    T acc = 0;
                    for (std::int64_t k = 0; k < q; ++k) acc += A[i * q + k] * bv[j * q + k];
                    O[i * r + j] = acc;
                }
        }
    }
    detail::check_finite(out, "matmul");
    if (detail::tracing<T>({&a, &b})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [a = a, b = b, out, batches, a_p, q, r, transpose_b, vec_b]() mutable {
            auto go = out.grad();
            auto av = a.values(), bv = b.values();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::int64_t n = 0; n < batches; ++n) {
                    const T* G = go.data() + n * a_p * r;
                    T* GA = ga.data() + n * a_p * q;
                    if (!transpose_b || vec_b) {
                        // dA[i,k] += G[i,j] * B[k,j]
                        for (std::int64_t i = 0; i < a_p; ++i)
                            for (std::int64_t k = 0; k < q; ++k) {
                                T acc = 0;
                                for (std::int64_t j = 0; j < r; ++j)
                                    acc += G[i * r + j] * bv[k * r + j];
                                GA[i * q + k] += acc;
                            }
                    } else {
                        // dA[i,k] += G[i,j] * B[j,k]
                        for (std::int64_t i = 0; i < a_p; ++i)
                            for (std::int64_t j = 0; j < r; ++j) {
                                const T g = G[i * r + j];
                                for (std::int64_t k = 0; k < q; ++k)
                                    GA[i * q + k] += g * bv[j * q + k];
                            }
                    }
                }
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::int64_t n = 0; n < batches; ++n) {
                    const T* G = go.data() + n * a_p * r;
                    const T* A = av.data() + n * a_p * q;
                    if (!transpose_b || vec_b) {
                        // dB[k,j] += A[i,k] * G[i,j]
                        for (std::int64_t i = 0; i < a_p; ++i)
                            for (std::int64_t k = 0; k < q; ++k) {
                                const T aik = A[i * q + k];
                                for (std::int64_t j = 0; j < r; ++j)
                                    gb[k * r + j] += aik * G[i * r + j];
                            }
                    } else {
                        // dB[j,k] += G[i,j] * A[i,k]
                        for (std::int64_t i = 0; i < a_p; ++i)
                            for (std::int64_t j = 0; j < r; ++j) {
                                const T g = G[i * r + j];
                                for (std::int64_t k = 0; k < q; ++k)
                                    gb[j * q + k] += g * A[i * q + k];
                            }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

// One-dimensional convolution over the zone axis with "same" zero padding.
// x [..xNxF], filters [KxFxL] (L odd), bias [K] -> [..xNxK].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& filters, const Tensor<T>& bias) {
    if (x.ndim() < 2)
        throw DimensionError("conv1d: input must have rank >= 2, got " + shape_str(x.shape()));
    if (filters.ndim() != 3)
        throw DimensionError("conv1d: filters must be KxFxL, got " + shape_str(filters.shape()));
    const std::int64_t N = x.dim(x.ndim() - 2);
    const std::int64_t F = x.dim(x.ndim() - 1);
    const std::int64_t K = filters.dim(0);
    const std::int64_t L = filters.dim(2);
    if (filters.dim(1) != F)
        throw DimensionError("conv1d: filter feature extent " + std::to_string(filters.dim(1)) +
                             " does not match input features " + std::to_string(F));
    if (L % 2 == 0) throw ConfigError("conv1d: filter length must be odd, got " + std::to_string(L));
    if (L > 2 * N - 1)
        throw ConfigError("conv1d: filter length " + std::to_string(L) + " exceeds 2N-1 for N=" +
                          std::to_string(N));
    if (bias.ndim() != 1 || bias.dim(0) != K)
        throw DimensionError("conv1d: bias must be [K], got " + shape_str(bias.shape()));

    const std::int64_t batches = detail::leading_count(x.shape(), 2);
    const std::int64_t c = L / 2;
    Tensor<T> out(detail::replace_trailing(x.shape(), 1, {K}));
    auto xv = x.values(), fv = filters.values(), bv = bias.values();
    auto ov = out.values();

    // Repack the filters as [L x F x K] so the hot loop runs stride-1 over
    // the output channels; each output still accumulates its terms in (l, f)
    // order, so the result matches the naive triple loop bitwise.
    std::vector<T> packed(static_cast<std::size_t>(L * F * K));
    for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t f = 0; f < F; ++f)
            for (std::int64_t l = 0; l < L; ++l)
                packed[static_cast<std::size_t>((l * F + f) * K + k)] =
                    fv[static_cast<std::size_t>((k * F + f) * L + l)];

    for (std::int64_t n = 0; n < batches; ++n) {
        const T* X = xv.data() + n * N * F;
        T* O = ov.data() + n * N * K;
        for (std::int64_t z = 0; z < N; ++z) {
            T* Oz = O + z * K;
            for (std::int64_t k = 0; k < K; ++k) Oz[k] = bv[k];
            const std::int64_t l_lo = std::max<std::int64_t>(0, c - z);
            const std::int64_t l_hi = std::min<std::int64_t>(L, N + c - z);
            for (std::int64_t l = l_lo; l < l_hi; ++l) {
                const T* Xr = X + (z + l - c) * F;
                for (std::int64_t f = 0; f < F; ++f) {
                    const T xval = Xr[f];
                    const T* W = packed.data() + (l * F + f) * K;
                    for (std::int64_t k = 0; k < K; ++k) Oz[k] += xval * W[k];
                }
            }
        }
    }
    detail::check_finite(out, "conv1d");
    if (detail::tracing<T>({&x, &filters, &bias})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, filters = filters, bias = bias, out, batches, N, F, K, L, c]() mutable {
            auto go = out.grad();
            auto xv = x.values(), fv = filters.values();
            if (x.requires_grad()) {
                // [L x K x F] puts the feature axis innermost for dX.
                std::vector<T> packed(static_cast<std::size_t>(L * K * F));
                for (std::int64_t k = 0; k < K; ++k)
                    for (std::int64_t f = 0; f < F; ++f)
                        for (std::int64_t l = 0; l < L; ++l)
                            packed[static_cast<std::size_t>((l * K + k) * F + f)] =
                                fv[static_cast<std::size_t>((k * F + f) * L + l)];
                for (std::int64_t n = 0; n < batches; ++n) {
                    const T* G = go.data() + n * N * K;
                    T* GX = x.grad().data() + n * N * F;
                    for (std::int64_t z = 0; z < N; ++z) {
                        const std::int64_t l_lo = std::max<std::int64_t>(0, c - z);
                        const std::int64_t l_hi = std::min<std::int64_t>(L, N + c - z);
                        for (std::int64_t l = l_lo; l < l_hi; ++l) {
                            T* GXr = GX + (z + l - c) * F;
                            for (std::int64_t k = 0; k < K; ++k) {
                                const T g = G[z * K + k];
                                const T* W = packed.data() + (l * K + k) * F;
                                for (std::int64_t f = 0; f < F; ++f) GXr[f] += g * W[f];
                            }
                        }
                    }
                }
            }
            if (filters.requires_grad()) {
                // Accumulate in [K x L x F] scratch (stride-1 over features),
                // then fold back into the [K x F x L] parameter layout.
                std::vector<T> scratch(static_cast<std::size_t>(K * L * F), T(0));
                for (std::int64_t n = 0; n < batches; ++n) {
                    const T* G = go.data() + n * N * K;
                    const T* X = xv.data() + n * N * F;
                    for (std::int64_t z = 0; z < N; ++z) {
                        const std::int64_t l_lo = std::max<std::int64_t>(0, c - z);
                        const std::int64_t l_hi = std::min<std::int64_t>(L, N + c - z);
                        for (std::int64_t l = l_lo; l < l_hi; ++l) {
                            const T* Xr = X + (z + l - c) * F;
                            for (std::int64_t k = 0; k < K; ++k) {
                                const T g = G[z * K + k];
                                T* S = scratch.data() + (k * L + l) * F;
                                for (std::int64_t f = 0; f < F; ++f) S[f] += g * Xr[f];
                            }
                        }
                    }
                }
                T* GW = filters.grad().data();
                for (std::int64_t k = 0; k < K; ++k)
                    for (std::int64_t l = 0; l < L; ++l)
                        for (std::int64_t f = 0; f < F; ++f)
                            GW[(k * F + f) * L + l] += scratch[static_cast<std::size_t>((k * L + l) * F + f)];
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad();
                for (std::int64_t n = 0; n < batches; ++n) {
                    const T* G = go.data() + n * N * K;
                    for (std::int64_t z = 0; z < N; ++z)
                        for (std::int64_t k = 0; k < K; ++k) gb[k] += G[z * K + k];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

// Softmax over the trailing axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    if (x.ndim() < 1) throw DimensionError("softmax: input must have rank >= 1");
    const std::int64_t m = x.dim(x.ndim() - 1);
    const std::int64_t rows = x.size() / m;
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* X = xv.data() + r * m;
        T* O = ov.data() + r * m;
        T mx = X[0];
        for (std::int64_t i = 1; i < m; ++i) mx = std::max(mx, X[i]);
        T sum = 0;
        for (std::int64_t i = 0; i < m; ++i) {
            O[i] = std::exp(X[i] - mx);
            sum += O[i];
        }
        for (std::int64_t i = 0; i < m; ++i) O[i] /= sum;
    }
    detail::check_finite(out, "softmax");
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out, rows, m]() mutable {
            auto go = out.grad();
            auto ov = out.values();
            auto gx = x.grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* P = ov.data() + r * m;
                const T* G = go.data() + r * m;
                T dot = 0;
                for (std::int64_t i = 0; i < m; ++i) dot += P[i] * G[i];
                for (std::int64_t i = 0; i < m; ++i) gx[r * m + i] += P[i] * (G[i] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Structural ops: concat / permute / reshape / slice / repeat
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw UsageError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(ref.size()))
        throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(ref));
    std::int64_t joined = 0;
    for (const auto& p : parts) {
        if (p.ndim() != static_cast<int>(ref.size()))
            throw DimensionError("concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(ref));
        for (int i = 0; i < p.ndim(); ++i)
            if (i != axis && p.dim(i) != ref[i])
                throw DimensionError("concat: shapes disagree off axis " + std::to_string(axis) +
                                     ": " + shape_str(p.shape()) + " vs " + shape_str(ref));
        joined += p.dim(axis);
    }
    Shape os = ref;
    os[axis] = joined;
    Tensor<T> out(os);

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= ref[i];
    for (int i = axis + 1; i < static_cast<int>(ref.size()); ++i) inner *= ref[i];

    auto ov = out.values();
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t pj = p.dim(axis);
        auto pv = p.values();
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(ov.data() + (o * joined + off) * inner, pv.data() + o * pj * inner,
                        static_cast<std::size_t>(pj * inner) * sizeof(T));
        off += pj;
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
    if (Tape<T>::active() && any_grad) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [parts = parts, out, outer, inner, joined]() mutable {
            auto go = out.grad();
            std::int64_t off = 0;
            for (auto& p : parts) {
                const std::int64_t pj = p.size() / (outer * inner);
                if (p.requires_grad()) {
                    auto gp = p.grad();
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t j = 0; j < pj * inner; ++j)
                            gp[o * pj * inner + j] += go[(o * joined + off) * inner + j];
                }
                off += pj;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order) {
    const int nd = x.ndim();
    if (static_cast<int>(order.size()) != nd)
        throw DimensionError("permute: order size " + std::to_string(order.size()) +
                             " does not match rank " + std::to_string(nd));
    std::vector<bool> seen(static_cast<std::size_t>(nd), false);
    for (int o : order) {
        if (o < 0 || o >= nd || seen[static_cast<std::size_t>(o)])
            throw DimensionError("permute: order is not a permutation of axes");
        seen[static_cast<std::size_t>(o)] = true;
    }
    Shape os(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) os[i] = x.dim(order[i]);
    Tensor<T> out(os);

    const Shape xstr = shape_strides(x.shape());
    const Shape ostr = shape_strides(os);
    auto xv = x.values();
    auto ov = out.values();
    const std::int64_t total = x.size();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
    for (std::int64_t lin = 0; lin < total; ++lin) {
        std::int64_t src = 0;
        for (int i = 0; i < nd; ++i) src += idx[i] * xstr[order[i]];
        ov[lin] = xv[src];
        for (int i = nd - 1; i >= 0; --i) {
            if (++idx[i] < os[i]) break;
            idx[i] = 0;
        }
    }
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out, order, xstr, os, nd]() mutable {
            auto go = out.grad();
            auto gx = x.grad();
            std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
            for (std::int64_t lin = 0; lin < out.size(); ++lin) {
                std::int64_t src = 0;
                for (int i = 0; i < nd; ++i) src += idx[i] * xstr[order[i]];
                gx[src] += go[lin];
                for (int i = nd - 1; i >= 0; --i) {
                    if (++idx[i] < os[i]) break;
                    idx[i] = 0;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw DimensionError("reshape: element count mismatch, " + shape_str(x.shape()) + " -> " +
                             shape_str(new_shape));
    Tensor<T> out = Tensor<T>::from(std::move(new_shape), {x.values().begin(), x.values().end()});
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out]() mutable {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::int64_t i = 0; i < out.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

// Select index `i` along `axis`; the axis is removed.
template <typename T>
Tensor<T> slice_index(const Tensor<T>& x, int axis, std::int64_t index) {
    if (axis < 0 || axis >= x.ndim())
        throw DimensionError("slice_index: axis out of range for " + shape_str(x.shape()));
    if (index < 0 || index >= x.dim(axis))
        throw DimensionError("slice_index: index " + std::to_string(index) +
                             " out of range for axis extent " + std::to_string(x.dim(axis)));
    const Shape& xs = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xs[i];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= xs[i];
    const std::int64_t n = xs[axis];
    Shape os;
    for (int i = 0; i < x.ndim(); ++i)
        if (i != axis) os.push_back(xs[i]);
    if (os.empty()) os = {1};
    Tensor<T> out(os);
    auto xv = x.values();
    auto ov = out.values();
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(ov.data() + o * inner, xv.data() + (o * n + index) * inner,
                    static_cast<std::size_t>(inner) * sizeof(T));
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out, outer, inner, n, index]() mutable {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < inner; ++i)
                    gx[(o * n + index) * inner + i] += go[o * inner + i];
        });
    }
    return out;
}

// Insert a new axis of extent `n` at `axis`, repeating x along it.  This is
// the repeating primitive behind f_RZ / f_RT.
template <typename T>
Tensor<T> repeat_axis(const Tensor<T>& x, int axis, std::int64_t n) {
    if (axis < 0 || axis > x.ndim())
        throw DimensionError("repeat_axis: axis out of range for " + shape_str(x.shape()));
    if (n <= 0) throw DimensionError("repeat_axis: repeat count must be positive");
    const Shape& xs = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xs[i];
    for (int i = axis; i < x.ndim(); ++i) inner *= xs[i];
    Shape os = xs;
    os.insert(os.begin() + axis, n);
    Tensor<T> out(os);
    auto xv = x.values();
    auto ov = out.values();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < n; ++k)
            std::memcpy(ov.data() + (o * n + k) * inner, xv.data() + o * inner,
                        static_cast<std::size_t>(inner) * sizeof(T));
    if (detail::tracing<T>({&x})) {
        out.set_requires_grad();
        Tape<T>::active()->record(out, [x = x, out, outer, inner, n]() mutable {
            auto go = out.grad();
            auto gx = x.grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t k = 0; k < n; ++k)
                    for (std::int64_t i = 0; i < inner; ++i)
                        gx[o * inner + i] += go[(o * n + k) * inner + i];
        });
    }
    return out;
}

}  // namespace gesme
