#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>

#include "m4/common.hpp"

namespace m4 {

template <class S>
struct NodeT {
    Shape shape;
    std::vector<S> values;
    std::vector<S> grad;  // empty until backward needs it
    bool requires_grad = false;
    uint64_t tape_epoch = 0;  // id of the tape that produced this node
};

template <class S>
class Tape;

// Dense row-major tensor handle. Copying a Tensor copies the handle, not the
// storage; values are treated as immutable once an op has consumed them
// (grad accumulation is the one sanctioned mutation).
template <class S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;

    static Tensor zeros(Shape shape) { return filled(std::move(shape), S(0)); }
    static Tensor ones(Shape shape) { return filled(std::move(shape), S(1)); }

    static Tensor filled(Shape shape, S v) {
        Tensor t;
        t.n_ = std::make_shared<NodeT<S>>();
        t.n_->shape = std::move(shape);
        t.n_->values.assign(static_cast<size_t>(shape_numel(t.n_->shape)), v);
        return t;
    }

    // For op outputs that overwrite every element before anyone reads them.
    static Tensor uninitialized(Shape shape) {
        Tensor t;
        t.n_ = std::make_shared<NodeT<S>>();
        t.n_->shape = std::move(shape);
        t.n_->values.resize(static_cast<size_t>(shape_numel(t.n_->shape)));
        return t;
    }

    static Tensor scalar(S v) { return filled(Shape{}, v); }

    static Tensor from(Shape shape, std::vector<S> values) {
        if (shape_numel(shape) != static_cast<long long>(values.size())) {
            throw ShapeError("tensor init: shape " + shape_str(shape) + " wants " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        Tensor t;
        t.n_ = std::make_shared<NodeT<S>>();
        t.n_->shape = std::move(shape);
        t.n_->values = std::move(values);
        return t;
    }

    static Tensor from(Shape shape, std::initializer_list<double> values) {
        std::vector<S> v;
        v.reserve(values.size());
        for (double x : values) v.push_back(static_cast<S>(x));
        return from(std::move(shape), std::move(v));
    }

    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.n_->values) v = static_cast<S>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor randn(Shape shape, double sd, Rng& rng) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.n_->values) v = static_cast<S>(rng.normal(0.0, sd));
        return t;
    }

    bool defined() const { return n_ != nullptr; }

    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    long long numel() const { return static_cast<long long>(n_->values.size()); }

    std::span<S> data() { return {n_->values.data(), n_->values.size()}; }
    std::span<const S> data() const { return {n_->values.data(), n_->values.size()}; }

    S& at(std::initializer_list<int> idx) { return n_->values[offset(idx)]; }
    S at(std::initializer_list<int> idx) const { return n_->values[offset(idx)]; }

    S value() const {
        if (numel() != 1) {
            throw ShapeError("value(): tensor " + shape_str(shape()) + " is not scalar");
        }
        return n_->values[0];
    }

    Tensor& set_requires_grad(bool f = true) {
        n_->requires_grad = f;
        return *this;
    }
    bool requires_grad() const { return n_->requires_grad; }

    bool has_grad() const { return n_ && !n_->grad.empty(); }

    Tensor grad() const {
        if (!has_grad()) {
            throw NumericError("grad(): no gradient recorded for tensor " + shape_str(shape()));
        }
        Tensor g;
        g.n_ = std::make_shared<NodeT<S>>();
        g.n_->shape = n_->shape;
        g.n_->values = n_->grad;
        return g;
    }

    // Allocates the buffer on first use; optimizer and backward path.
    std::span<S> grad_data() {
        if (n_->grad.empty()) n_->grad.assign(n_->values.size(), S(0));
        return {n_->grad.data(), n_->grad.size()};
    }

    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
    }

    // Deep copy with no autodiff history or flags.
    Tensor detach() const {
        Tensor t;
        t.n_ = std::make_shared<NodeT<S>>();
        t.n_->shape = n_->shape;
        t.n_->values = n_->values;
        return t;
    }

    Tensor clone() const {
        Tensor t = detach();
        t.n_->requires_grad = n_->requires_grad;
        return t;
    }

    // Converts between precisions (used by the gradient-check harness).
    template <class T>
    Tensor<T> cast() const {
        std::vector<T> v(n_->values.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(n_->values[i]);
        return Tensor<T>::from(n_->shape, std::move(v));
    }

    void assert_finite(const char* what) const {
        for (S v : n_->values) {
            if (!std::isfinite(static_cast<double>(v))) {
                throw NumericError(std::string("non-finite value in ") + what);
            }
        }
    }

    NodeT<S>* node() const { return n_.get(); }
    const std::shared_ptr<NodeT<S>>& node_ptr() const { return n_; }

private:
    size_t offset(std::initializer_list<int> idx) const {
        const Shape& s = n_->shape;
        if (idx.size() != s.size()) {
            throw ShapeError("index rank " + std::to_string(idx.size()) + " vs tensor " +
                             shape_str(s));
        }
        size_t off = 0;
        size_t k = 0;
        for (int i : idx) {
            off = off * static_cast<size_t>(s[k]) + static_cast<size_t>(i);
            ++k;
        }
        return off;
    }

    std::shared_ptr<NodeT<S>> n_;
};

namespace detail {
inline uint64_t next_tape_id() {
    static std::atomic<uint64_t> id{1};
    return id.fetch_add(1);
}
template <class S>
inline Tape<S>*& active_tape_slot() {
    thread_local Tape<S>* t = nullptr;
    return t;
}
}  // namespace detail

// Reverse-mode tape. Ops record themselves in execution order (inputs always
// precede consumers); backward replays the closures in reverse. A tape is
// confined to one logical thread and tapes do not nest.
template <class S>
class Tape {
public:
    Tape() : id_(detail::next_tape_id()) {
        auto& slot = detail::active_tape_slot<S>();
        if (slot != nullptr) {
            throw Error("Tape: a tape is already active on this thread");
        }
        slot = this;
    }

    ~Tape() { detail::active_tape_slot<S>() = nullptr; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return detail::active_tape_slot<S>(); }

    uint64_t id() const { return id_; }
    size_t recorded_ops() const { return back_.size(); }

    void record(std::shared_ptr<NodeT<S>> out, std::function<void()> back) {
        produced_.push_back(std::move(out));
        back_.push_back(std::move(back));
    }

    // Populates grads of every requires_grad leaf reachable from `loss`.
    // Repeated calls accumulate into leaf grads; intermediate grads are
    // reset per call.
    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1) {
            throw NumericError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        if (back_.empty()) {
            throw Error("backward: tape is empty");
        }
        for (auto& n : produced_) {
            if (!n->requires_grad && !n->grad.empty()) {
                std::fill(n->grad.begin(), n->grad.end(), S(0));
            }
        }
        auto* ln = loss.node();
        if (ln->grad.empty()) ln->grad.assign(ln->values.size(), S(0));
        ln->grad[0] += S(1);
        for (size_t i = back_.size(); i-- > 0;) {
            back_[i]();
        }
        // the seed must not leak into a later accumulation pass
        if (!ln->requires_grad) std::fill(ln->grad.begin(), ln->grad.end(), S(0));
    }

private:
    uint64_t id_;
    std::vector<std::function<void()>> back_;
    std::vector<std::shared_ptr<NodeT<S>>> produced_;
};

namespace detail {

template <class S>
inline bool wants_grad(const Tensor<S>& t, const Tape<S>* tape) {
    return t.requires_grad() || (tape && t.node()->tape_epoch == tape->id());
}

// Ensures the grad buffer exists and returns a raw pointer to it.
template <class S>
inline S* grad_of(NodeT<S>* n) {
    if (n->grad.empty()) n->grad.assign(n->values.size(), S(0));
    return n->grad.data();
}

}  // namespace detail

// Per-op recording context: decides whether the op participates in the
// current tape and which inputs need gradients.
template <class S>
struct OpCtx {
    Tape<S>* tape = nullptr;
    bool rec = false;
    bool want[4] = {false, false, false, false};

    explicit OpCtx(std::initializer_list<const Tensor<S>*> ins) {
        tape = Tape<S>::active();
        if (!tape) return;
        int k = 0;
        for (const Tensor<S>* t : ins) {
            bool w = t->defined() && detail::wants_grad(*t, tape);
            if (k < 4) want[k] = w;
            rec = rec || w;
            ++k;
        }
    }

    void commit(Tensor<S>& out, std::function<void()> back) const {
        if (!rec) return;
        out.node()->tape_epoch = tape->id();
        tape->record(out.node_ptr(), std::move(back));
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace m4
