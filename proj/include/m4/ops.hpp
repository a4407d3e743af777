#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "m4/tensor.hpp"

namespace m4 {

// ---------------------------------------------------------------------------
// broadcasting helpers
//
// Two tensors broadcast if they have equal rank and every dim matches or is 1,
// or if one of them is a rank-0 scalar.
// ---------------------------------------------------------------------------

namespace detail {

inline bool broadcast_shape(const Shape& a, const Shape& b, Shape& out) {
    if (a.empty()) {
        out = b;
        return true;
    }
    if (b.empty()) {
        out = a;
        return true;
    }
    if (a.size() != b.size()) return false;
    out.resize(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i]) {
            out[i] = a[i];
        } else if (a[i] == 1) {
            out[i] = b[i];
        } else if (b[i] == 1) {
            out[i] = a[i];
        } else {
            return false;
        }
    }
    return true;
}

// Row-major strides with 0 for broadcast dims (so a flat walk over the output
// can step each operand independently).
inline std::vector<long long> broadcast_strides(const Shape& t, const Shape& out) {
    std::vector<long long> st(out.size(), 0);
    if (t.empty()) return st;  // scalar: stride 0 everywhere
    long long acc = 1;
    for (size_t i = t.size(); i-- > 0;) {
        st[i] = (t[i] == 1 && out[i] != 1) ? 0 : acc;
        acc *= t[i];
    }
    return st;
}

// Walks the output index space, calling fn(out_flat, a_flat, b_flat).
// Size-1 dims are dropped and adjacent dims with compatible strides are
// coalesced, so the common layouts degenerate to one or two tight loops.
template <class F>
inline void broadcast_walk(const Shape& out, const std::vector<long long>& sa_in,
                           const std::vector<long long>& sb_in, F&& fn) {
    std::vector<long long> dims, sa, sb;
    for (size_t d = 0; d < out.size(); ++d) {
        if (out[d] == 1) continue;
        dims.push_back(out[d]);
        sa.push_back(sa_in[d]);
        sb.push_back(sb_in[d]);
    }
    if (dims.empty()) {
        fn(0, 0, 0);
        return;
    }
    for (size_t d = dims.size() - 1; d > 0; --d) {
        if (sa[d - 1] == sa[d] * dims[d] && sb[d - 1] == sb[d] * dims[d]) {
            dims[d - 1] *= dims[d];
            sa[d - 1] = sa[d];
            sb[d - 1] = sb[d];
            dims.erase(dims.begin() + static_cast<long>(d));
            sa.erase(sa.begin() + static_cast<long>(d));
            sb.erase(sb.begin() + static_cast<long>(d));
        }
    }
    long long o = 0;
    const int last = static_cast<int>(dims.size()) - 1;
    auto rec = [&](auto&& self, int d, long long ia, long long ib) -> void {
        if (d == last) {
            const long long n = dims[static_cast<size_t>(d)];
            const long long da = sa[static_cast<size_t>(d)], db = sb[static_cast<size_t>(d)];
            for (long long i = 0; i < n; ++i) {
                fn(o++, ia, ib);
                ia += da;
                ib += db;
            }
        } else {
            const long long n = dims[static_cast<size_t>(d)];
            const long long da = sa[static_cast<size_t>(d)], db = sb[static_cast<size_t>(d)];
            for (long long i = 0; i < n; ++i) {
                self(self, d + 1, ia, ib);
                ia += da;
                ib += db;
            }
        }
    };
    rec(rec, 0, 0, 0);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class S, class FwdF, class BwdF>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, const char* name, FwdF fwd, BwdF bwd) {
    Shape os;
    if (!broadcast_shape(a.shape(), b.shape(), os)) {
        throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not broadcast");
    }
    OpCtx<S> ctx({&a, &b});
    Tensor<S> out = Tensor<S>::uninitialized(os);
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    if (a.shape() == os && b.shape() == os) {
        long long n = out.numel();
        for (long long i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
        auto sa = broadcast_strides(a.shape(), os);
        auto sb = broadcast_strides(b.shape(), os);
        broadcast_walk(os, sa, sb,
                       [&](long long o, long long ia, long long ib) { po[o] = fwd(pa[ia], pb[ib]); });
    }
    ctx.commit(out, [an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr(),
                     wa = ctx.want[0], wb = ctx.want[1], bwd]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        const S* pa = an->values.data();
        const S* pb = bn->values.data();
        S* ga = wa ? grad_of(an.get()) : nullptr;
        S* gb = wb ? grad_of(bn.get()) : nullptr;
        if (an->shape == on->shape && bn->shape == on->shape) {
            long long n = static_cast<long long>(on->values.size());
            for (long long i = 0; i < n; ++i) {
                S da, db;
                bwd(pa[i], pb[i], g[i], da, db);
                if (ga) ga[i] += da;
                if (gb) gb[i] += db;
            }
        } else {
            auto sa = broadcast_strides(an->shape, on->shape);
            auto sb = broadcast_strides(bn->shape, on->shape);
            broadcast_walk(on->shape, sa, sb, [&](long long o, long long ia, long long ib) {
                S da, db;
                bwd(pa[ia], pb[ib], g[o], da, db);
                if (ga) ga[ia] += da;
                if (gb) gb[ib] += db;
            });
        }
    });
    return out;
}

using m4::detail::grad_of;

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(
        a, b, "add", [](S x, S y) { return x + y; },
        [](S, S, S g, S& da, S& db) {
            da = g;
            db = g;
        });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(
        a, b, "sub", [](S x, S y) { return x - y; },
        [](S, S, S g, S& da, S& db) {
            da = g;
            db = -g;
        });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(
        a, b, "mul", [](S x, S y) { return x * y; },
        [](S x, S y, S g, S& da, S& db) {
            da = g * y;
            db = g * x;
        });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_op(
        a, b, "div", [](S x, S y) { return x / y; },
        [](S x, S y, S g, S& da, S& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
    return add(a, b);
}
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
    return sub(a, b);
}
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) {
    return mul(a, b);
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// bwd(x, y, g) -> local gradient contribution for dx
template <class S, class FwdF, class BwdF>
Tensor<S> unary_op(const Tensor<S>& a, FwdF fwd, BwdF bwd) {
    OpCtx<S> ctx({&a});
    Tensor<S> out = Tensor<S>::uninitialized(a.shape());
    const S* pa = a.data().data();
    S* po = out.data().data();
    long long n = a.numel();
    for (long long i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    ctx.commit(out, [an = a.node_ptr(), on = out.node_ptr(), bwd]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        const S* px = an->values.data();
        const S* py = on->values.data();
        S* ga = grad_of(an.get());
        long long n = static_cast<long long>(on->values.size());
        for (long long i = 0; i < n; ++i) ga[i] += bwd(px[i], py[i], g[i]);
    });
    return out;
}

}  // namespace detail

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
    return detail::unary_op(
        a, [c](S x) { return x + c; }, [](S, S, S g) { return g; });
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
    return detail::unary_op(
        a, [c](S x) { return x * c; }, [c](S, S, S g) { return g * c; });
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
    return mul_scalar(a, S(-1));
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
    return detail::unary_op(
        a, [](S x) { return x > S(0) ? x : S(0); },
        [](S x, S, S g) { return x > S(0) ? g : S(0); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    return detail::unary_op(
        a,
        [](S x) {
            // split by sign so exp never overflows
            if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
            S e = std::exp(x);
            return e / (S(1) + e);
        },
        [](S, S y, S g) { return g * y * (S(1) - y); });
}

template <class S>
Tensor<S> tanh_op(const Tensor<S>& a) {
    return detail::unary_op(
        a, [](S x) { return std::tanh(x); }, [](S, S y, S g) { return g * (S(1) - y * y); });
}

template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
    const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
    const S k = static_cast<S>(0.044715);
    return detail::unary_op(
        a,
        [c, k](S x) {
            S u = c * (x + k * x * x * x);
            return S(0.5) * x * (S(1) + std::tanh(u));
        },
        [c, k](S x, S, S g) {
            S u = c * (x + k * x * x * x);
            S t = std::tanh(u);
            S du = c * (S(1) + S(3) * k * x * x);
            return g * (S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du);
        });
}

template <class S>
Tensor<S> sqrt_op(const Tensor<S>& a) {
    return detail::unary_op(
        a, [](S x) { return std::sqrt(x); }, [](S, S y, S g) { return g / (S(2) * y); });
}

// Binary cross-entropy from logits, elementwise; the target is data, never a
// gradient path. Stable form: max(z,0) - z*y + log1p(exp(-|z|)).
template <class S>
Tensor<S> bce_with_logits(const Tensor<S>& z, const Tensor<S>& target) {
    if (z.shape() != target.shape()) {
        throw ShapeError("bce_with_logits: logits " + shape_str(z.shape()) + " vs target " +
                         shape_str(target.shape()));
    }
    OpCtx<S> ctx({&z});
    Tensor<S> out = Tensor<S>::uninitialized(z.shape());
    const S* pz = z.data().data();
    const S* py = target.data().data();
    S* po = out.data().data();
    long long n = z.numel();
    for (long long i = 0; i < n; ++i) {
        S x = pz[i];
        po[i] = std::max(x, S(0)) - x * py[i] + std::log1p(std::exp(-std::abs(x)));
    }
    ctx.commit(out, [zn = z.node_ptr(), tn = target.node_ptr(), on = out.node_ptr()]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        const S* pz = zn->values.data();
        const S* py = tn->values.data();
        S* gz = detail::grad_of(zn.get());
        long long n = static_cast<long long>(on->values.size());
        for (long long i = 0; i < n; ++i) {
            S x = pz[i];
            S s = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
            gz[i] += g[i] * (s - py[i]);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
    OpCtx<S> ctx({&a});
    double acc = 0;
    for (S v : a.data()) acc += static_cast<double>(v);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
    ctx.commit(out, [an = a.node_ptr(), on = out.node_ptr()]() {
        if (on->grad.empty()) return;
        S g = on->grad[0];
        S* ga = detail::grad_of(an.get());
        for (size_t i = 0; i < an->values.size(); ++i) ga[i] += g;
    });
    return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
    long long n = a.numel();
    return mul_scalar(sum_all(a), static_cast<S>(1.0 / static_cast<double>(n)));
}

// Mean along one axis, keeping the axis as size 1.
template <class S>
Tensor<S> mean_axis(const Tensor<S>& a, int axis) {
    if (axis < 0 || axis >= a.rank()) {
        throw ShapeError("mean_axis: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(a.shape()));
    }
    Shape os = a.shape();
    int len = os[static_cast<size_t>(axis)];
    os[static_cast<size_t>(axis)] = 1;
    long long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);

    OpCtx<S> ctx({&a});
    Tensor<S> out = Tensor<S>::uninitialized(os);
    const S* pa = a.data().data();
    S* po = out.data().data();
    for (long long o = 0; o < outer; ++o) {
        for (long long in = 0; in < inner; ++in) {
            double acc = 0;
            for (int l = 0; l < len; ++l) acc += pa[(o * len + l) * inner + in];
            po[o * inner + in] = static_cast<S>(acc / len);
        }
    }
    ctx.commit(out, [an = a.node_ptr(), on = out.node_ptr(), outer, inner, len]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        S* ga = detail::grad_of(an.get());
        S inv = S(1) / static_cast<S>(len);
        for (long long o = 0; o < outer; ++o) {
            for (long long in = 0; in < inner; ++in) {
                S gv = g[o * inner + in] * inv;
                for (int l = 0; l < len; ++l) ga[(o * len + l) * inner + in] += gv;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const long long m = a.dim(0), k = a.dim(1), n = b.dim(1);
    OpCtx<S> ctx({&a, &b});
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(m), static_cast<int>(n)});
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    parallel_for(m, m * k * n, [&](long long r0, long long r1) {
        for (long long i = r0; i < r1; ++i) {
            for (long long p = 0; p < k; ++p) {
                S av = pa[i * k + p];
                if (av == S(0)) continue;
                const S* brow = pb + p * n;
                S* orow = po + i * n;
                for (long long j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    });
    ctx.commit(out, [an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr(),
                     wa = ctx.want[0], wb = ctx.want[1], m, k, n]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        const S* pa = an->values.data();
        const S* pb = bn->values.data();
        if (wa) {  // dA = dOut * B^T
            S* ga = detail::grad_of(an.get());
            parallel_for(m, m * k * n, [&](long long r0, long long r1) {
                for (long long i = r0; i < r1; ++i) {
                    for (long long p = 0; p < k; ++p) {
                        double acc = 0;
                        const S* grow = g + i * n;
                        const S* brow = pb + p * n;
                        for (long long j = 0; j < n; ++j) acc += double(grow[j]) * double(brow[j]);
                        ga[i * k + p] += static_cast<S>(acc);
                    }
                }
            });
        }
        if (wb) {  // dB = A^T * dOut
            S* gb = detail::grad_of(bn.get());
            parallel_for(k, m * k * n, [&](long long r0, long long r1) {
                for (long long p = r0; p < r1; ++p) {
                    for (long long i = 0; i < m; ++i) {
                        S av = pa[i * k + p];
                        if (av == S(0)) continue;
                        const S* grow = g + i * n;
                        S* brow = gb + p * n;
                        for (long long j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
                }
            });
        }
    });
    return out;
}

template <class S>
Tensor<S> transpose2(const Tensor<S>& a) {
    if (a.rank() != 2) {
        throw ShapeError("transpose2: expected rank 2, got " + shape_str(a.shape()));
    }
    const long long m = a.dim(0), n = a.dim(1);
    OpCtx<S> ctx({&a});
    Tensor<S> out = Tensor<S>::uninitialized({static_cast<int>(n), static_cast<int>(m)});
    const S* pa = a.data().data();
    S* po = out.data().data();
    for (long long i = 0; i < m; ++i)
        for (long long j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
    ctx.commit(out, [an = a.node_ptr(), on = out.node_ptr(), m, n]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        S* ga = detail::grad_of(an.get());
        for (long long i = 0; i < m; ++i)
            for (long long j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// convolution (direct, cross-correlation semantics)
// ---------------------------------------------------------------------------

struct ConvOpts {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
    int groups = 1;
};

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias = {},
                 ConvOpts opt = {}) {
    if (x.rank() != 3 || w.rank() != 4) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " weight " +
                         shape_str(w.shape()) + " (want CxHxW and OxIxKxK)");
    }
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int cout = w.dim(0), cing = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (kh != kw || kh % 2 == 0) {
        throw ShapeError("conv2d: kernel must be odd and square, got " + shape_str(w.shape()));
    }
    if (opt.groups < 1 || cin % opt.groups != 0 || cout % opt.groups != 0 ||
        cing != cin / opt.groups) {
        throw ShapeError("conv2d: channel/group mismatch, input " + shape_str(x.shape()) +
                         " weight " + shape_str(w.shape()) + " groups " +
                         std::to_string(opt.groups));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " vs out channels " +
                         std::to_string(cout));
    }
    const int s = opt.stride, p = opt.pad, dl = opt.dilation;
    const int ho = (h + 2 * p - dl * (kh - 1) - 1) / s + 1;
    const int wo = (wd + 2 * p - dl * (kw - 1) - 1) / s + 1;
    if (ho <= 0 || wo <= 0) {
        throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));
    }
    const int cpg_out = cout / opt.groups;

    OpCtx<S> ctx({&x, &w, &bias});
    Tensor<S> out = Tensor<S>::uninitialized({cout, ho, wo});
    const S* px = x.data().data();
    const S* pw = w.data().data();
    const S* pbias = bias.defined() ? bias.data().data() : nullptr;
    S* po = out.data().data();

    // per-tap valid output ranges, hoisted out of the pixel loops
    auto lo_for = [&](int off) { return off < 0 ? (-off + s - 1) / s : 0; };
    auto hi_for = [&](int off, int extent, int out_extent) {
        int hi = (extent - 1 - off) / s;
        return hi < out_extent - 1 ? hi : out_extent - 1;
    };

    const long long conv_cost = 1LL * cout * ho * wo * cing * kh * kw;
    parallel_for(cout, conv_cost, [&](long long c0, long long c1) {
        for (long long co = c0; co < c1; ++co) {
            S* oplane = po + co * ho * wo;
            const S bv = pbias ? pbias[co] : S(0);
            for (int i = 0; i < ho * wo; ++i) oplane[i] = bv;
            const int grp = static_cast<int>(co) / cpg_out;
            const int ci0 = grp * cing;
            for (int ci = 0; ci < cing; ++ci) {
                const S* xc = px + static_cast<long long>(ci0 + ci) * h * wd;
                const S* wc = pw + (co * cing + ci) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    const int off_y = ky * dl - p;
                    const int yo_lo = lo_for(off_y), yo_hi = hi_for(off_y, h, ho);
                    for (int kx = 0; kx < kw; ++kx) {
                        const S wv = wc[ky * kw + kx];
                        if (wv == S(0)) continue;
                        const int off_x = kx * dl - p;
                        const int xo_lo = lo_for(off_x), xo_hi = hi_for(off_x, wd, wo);
                        for (int yo = yo_lo; yo <= yo_hi; ++yo) {
                            S* orow = oplane + yo * wo;
                            const S* xrow = xc + (yo * s + off_y) * wd + off_x;
                            if (s == 1) {
                                for (int xo = xo_lo; xo <= xo_hi; ++xo) orow[xo] += wv * xrow[xo];
                            } else {
                                for (int xo = xo_lo; xo <= xo_hi; ++xo) {
                                    orow[xo] += wv * xrow[xo * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    ctx.commit(out, [xn = x.node_ptr(), wn = w.node_ptr(),
                     bn = bias.defined() ? bias.node_ptr() : nullptr, on = out.node_ptr(),
                     wx = ctx.want[0], ww = ctx.want[1], wbias = ctx.want[2], cin, h, wd, cout,
                     cing, kh, kw, s, p, dl, ho, wo, cpg_out]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        const S* px = xn->values.data();
        const S* pw = wn->values.data();
        auto lo_for = [&](int off) { return off < 0 ? (-off + s - 1) / s : 0; };
        auto hi_for = [&](int off, int extent, int out_extent) {
            int hi = (extent - 1 - off) / s;
            return hi < out_extent - 1 ? hi : out_extent - 1;
        };
        if (wx) {  // every thread owns a disjoint slice of input channels
            S* gx = detail::grad_of(xn.get());
            parallel_for(cin, 1LL * cin * h * wd * kh * kw * cpg_out, [&](long long i0, long long i1) {
                for (long long ci = i0; ci < i1; ++ci) {
                    const int grp = static_cast<int>(ci) / cing;
                    const int cig = static_cast<int>(ci) % cing;
                    S* gxc = gx + ci * h * wd;
                    for (int co = grp * cpg_out; co < (grp + 1) * cpg_out; ++co) {
                        const S* gco = g + static_cast<long long>(co) * ho * wo;
                        const S* wc = pw + (static_cast<long long>(co) * cing + cig) * kh * kw;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int off_y = ky * dl - p;
                            const int yo_lo = lo_for(off_y), yo_hi = hi_for(off_y, h, ho);
                            for (int kx = 0; kx < kw; ++kx) {
                                const S wv = wc[ky * kw + kx];
                                if (wv == S(0)) continue;
                                const int off_x = kx * dl - p;
                                const int xo_lo = lo_for(off_x), xo_hi = hi_for(off_x, wd, wo);
                                for (int yo = yo_lo; yo <= yo_hi; ++yo) {
                                    const S* grow = gco + yo * wo;
                                    S* xrow = gxc + (yo * s + off_y) * wd + off_x;
                                    if (s == 1) {
                                        for (int xo = xo_lo; xo <= xo_hi; ++xo) {
                                            xrow[xo] += wv * grow[xo];
                                        }
                                    } else {
                                        for (int xo = xo_lo; xo <= xo_hi; ++xo) {
                                            xrow[xo * s] += wv * grow[xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if (ww) {
            S* gw = detail::grad_of(wn.get());
            parallel_for(cout, 1LL * cout * cing * kh * kw * ho * wo, [&](long long c0, long long c1) {
                for (long long co = c0; co < c1; ++co) {
                    const int grp = static_cast<int>(co) / cpg_out;
                    const S* gco = g + co * ho * wo;
                    for (int cig = 0; cig < cing; ++cig) {
                        const S* xc = px + static_cast<long long>(grp * cing + cig) * h * wd;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int off_y = ky * dl - p;
                            const int yo_lo = lo_for(off_y), yo_hi = hi_for(off_y, h, ho);
                            for (int kx = 0; kx < kw; ++kx) {
                                const int off_x = kx * dl - p;
                                const int xo_lo = lo_for(off_x), xo_hi = hi_for(off_x, wd, wo);
                                double acc = 0;
                                for (int yo = yo_lo; yo <= yo_hi; ++yo) {
                                    const S* grow = gco + yo * wo;
                                    const S* xrow = xc + (yo * s + off_y) * wd + off_x;
                                    if (s == 1) {
                                        for (int xo = xo_lo; xo <= xo_hi; ++xo) {
                                            acc += double(grow[xo]) * double(xrow[xo]);
                                        }
                                    } else {
                                        for (int xo = xo_lo; xo <= xo_hi; ++xo) {
                                            acc += double(grow[xo]) * double(xrow[xo * s]);
                                        }
                                    }
                                }
                                gw[(co * cing + cig) * kh * kw + ky * kw + kx] += static_cast<S>(acc);
                            }
                        }
                    }
                }
            });
        }
        if (wbias && bn) {
            S* gb = detail::grad_of(bn.get());
            for (int co = 0; co < cout; ++co) {
                double acc = 0;
                for (int i = 0; i < ho * wo; ++i) acc += g[static_cast<long long>(co) * ho * wo + i];
                gb[co] += static_cast<S>(acc);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
    if (axis < 0 || axis >= a.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(a.shape()));
    }
    long long outer = 1, inner = 1;
    const int len = a.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);

    OpCtx<S> ctx({&a});
    Tensor<S> out = Tensor<S>::uninitialized(a.shape());
    const S* pa = a.data().data();
    S* po = out.data().data();
    parallel_for(outer, outer * inner * len, [&](long long o0, long long o1) {
        for (long long o = o0; o < o1; ++o) {
            for (long long in = 0; in < inner; ++in) {
                const S* src = pa + o * len * inner + in;
                S* dst = po + o * len * inner + in;
                S mx = src[0];
                for (int l = 1; l < len; ++l) mx = std::max(mx, src[l * inner]);
                double sum = 0;
                for (int l = 0; l < len; ++l) {
                    double e = std::exp(double(src[l * inner] - mx));
                    dst[l * inner] = static_cast<S>(e);
                    sum += e;
                }
                S inv = static_cast<S>(1.0 / sum);
                for (int l = 0; l < len; ++l) dst[l * inner] *= inv;
            }
        }
    });
    ctx.commit(out, [an = a.node_ptr(), on = out.node_ptr(), outer, inner, len]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        const S* y = on->values.data();
        S* ga = detail::grad_of(an.get());
        for (long long o = 0; o < outer; ++o) {
            for (long long in = 0; in < inner; ++in) {
                const long long base = o * len * inner + in;
                double dot = 0;
                for (int l = 0; l < len; ++l) dot += double(g[base + l * inner]) * double(y[base + l * inner]);
                for (int l = 0; l < len; ++l) {
                    const long long i = base + l * inner;
                    ga[i] += y[i] * (g[i] - static_cast<S>(dot));
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

// Average pooling; padding cells are excluded from the divisor, so pooling a
// constant map returns the same constant.
template <class S>
Tensor<S> avg_pool2d(const Tensor<S>& x, int k, int stride, int pad) {
    if (x.rank() != 3) {
        throw ShapeError("avg_pool2d: expected CxHxW, got " + shape_str(x.shape()));
    }
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (w + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) {
        throw ShapeError("avg_pool2d: empty output for " + shape_str(x.shape()));
    }
    OpCtx<S> ctx({&x});
    Tensor<S> out = Tensor<S>::uninitialized({c, ho, wo});
    const S* px = x.data().data();
    S* po = out.data().data();
    for (int ci = 0; ci < c; ++ci) {
        for (int yo = 0; yo < ho; ++yo) {
            const int y0 = yo * stride - pad;
            for (int xo = 0; xo < wo; ++xo) {
                const int x0 = xo * stride - pad;
                double acc = 0;
                int cnt = 0;
                for (int ky = 0; ky < k; ++ky) {
                    const int yi = y0 + ky;
                    if (yi < 0 || yi >= h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int xi = x0 + kx;
                        if (xi < 0 || xi >= w) continue;
                        acc += px[(static_cast<long long>(ci) * h + yi) * w + xi];
                        ++cnt;
                    }
                }
                po[(static_cast<long long>(ci) * ho + yo) * wo + xo] = static_cast<S>(acc / cnt);
            }
        }
    }
    ctx.commit(out, [xn = x.node_ptr(), on = out.node_ptr(), c, h, w, ho, wo, k, stride, pad]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        S* gx = detail::grad_of(xn.get());
        for (int ci = 0; ci < c; ++ci) {
            for (int yo = 0; yo < ho; ++yo) {
                const int y0 = yo * stride - pad;
                for (int xo = 0; xo < wo; ++xo) {
                    const int x0 = xo * stride - pad;
                    int cnt = 0;
                    for (int ky = 0; ky < k; ++ky) {
                        const int yi = y0 + ky;
                        if (yi < 0 || yi >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int xi = x0 + kx;
                            if (xi >= 0 && xi < w) ++cnt;
                        }
                    }
                    const S gv = g[(static_cast<long long>(ci) * ho + yo) * wo + xo] / static_cast<S>(cnt);
                    for (int ky = 0; ky < k; ++ky) {
                        const int yi = y0 + ky;
                        if (yi < 0 || yi >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int xi = x0 + kx;
                            if (xi < 0 || xi >= w) continue;
                            gx[(static_cast<long long>(ci) * h + yi) * w + xi] += gv;
                        }
                    }
                }
            }
        }
    });
    return out;
}

template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    if (x.rank() != 3) {
        throw ShapeError("global_avg_pool: expected CxHxW, got " + shape_str(x.shape()));
    }
    const int c = x.dim(0);
    const long long hw = static_cast<long long>(x.dim(1)) * x.dim(2);
    OpCtx<S> ctx({&x});
    Tensor<S> out = Tensor<S>::uninitialized({c, 1, 1});
    const S* px = x.data().data();
    S* po = out.data().data();
    for (int ci = 0; ci < c; ++ci) {
        double acc = 0;
        for (long long i = 0; i < hw; ++i) acc += px[ci * hw + i];
        po[ci] = static_cast<S>(acc / hw);
    }
    ctx.commit(out, [xn = x.node_ptr(), on = out.node_ptr(), c, hw]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        S* gx = detail::grad_of(xn.get());
        for (int ci = 0; ci < c; ++ci) {
            const S gv = g[ci] / static_cast<S>(hw);
            for (long long i = 0; i < hw; ++i) gx[ci * hw + i] += gv;
        }
    });
    return out;
}

// Bilinear resize with half-pixel centers (align-corners off).
template <class S>
Tensor<S> bilinear_resize(const Tensor<S>& x, int oh, int ow) {
    if (x.rank() != 3) {
        throw ShapeError("bilinear_resize: expected CxHxW, got " + shape_str(x.shape()));
    }
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (oh == h && ow == w) {
        // identity resize still records so gradients pass through
        return mul_scalar(x, S(1));
    }
    OpCtx<S> ctx({&x});
    Tensor<S> out = Tensor<S>::uninitialized({c, oh, ow});
    const double sy = static_cast<double>(h) / oh;
    const double sx = static_cast<double>(w) / ow;

    struct Tap {
        int i0, i1;
        S w0, w1;
    };
    std::vector<Tap> ty(static_cast<size_t>(oh)), tx(static_cast<size_t>(ow));
    auto make_tap = [](int o, double scale, int extent) {
        double src = (o + 0.5) * scale - 0.5;
        double f = std::floor(src);
        int i0 = static_cast<int>(f);
        double frac = src - f;
        int i1 = i0 + 1;
        i0 = std::clamp(i0, 0, extent - 1);
        i1 = std::clamp(i1, 0, extent - 1);
        return Tap{i0, i1, static_cast<S>(1.0 - frac), static_cast<S>(frac)};
    };
    for (int y = 0; y < oh; ++y) ty[static_cast<size_t>(y)] = make_tap(y, sy, h);
    for (int xo = 0; xo < ow; ++xo) tx[static_cast<size_t>(xo)] = make_tap(xo, sx, w);

    const S* px = x.data().data();
    S* po = out.data().data();
    for (int ci = 0; ci < c; ++ci) {
        const S* xc = px + static_cast<long long>(ci) * h * w;
        S* oc = po + static_cast<long long>(ci) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            const Tap& a = ty[static_cast<size_t>(y)];
            for (int xo = 0; xo < ow; ++xo) {
                const Tap& b = tx[static_cast<size_t>(xo)];
                oc[y * ow + xo] = a.w0 * (b.w0 * xc[a.i0 * w + b.i0] + b.w1 * xc[a.i0 * w + b.i1]) +
                                  a.w1 * (b.w0 * xc[a.i1 * w + b.i0] + b.w1 * xc[a.i1 * w + b.i1]);
            }
        }
    }
    ctx.commit(out, [xn = x.node_ptr(), on = out.node_ptr(), c, h, w, oh, ow, ty, tx]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        S* gx = detail::grad_of(xn.get());
        for (int ci = 0; ci < c; ++ci) {
            S* gc = gx + static_cast<long long>(ci) * h * w;
            const S* oc = g + static_cast<long long>(ci) * oh * ow;
            for (int y = 0; y < oh; ++y) {
                const auto& a = ty[static_cast<size_t>(y)];
                for (int xo = 0; xo < ow; ++xo) {
                    const auto& b = tx[static_cast<size_t>(xo)];
                    const S gv = oc[y * ow + xo];
                    gc[a.i0 * w + b.i0] += gv * a.w0 * b.w0;
                    gc[a.i0 * w + b.i1] += gv * a.w0 * b.w1;
                    gc[a.i1 * w + b.i0] += gv * a.w1 * b.w0;
                    gc[a.i1 * w + b.i1] += gv * a.w1 * b.w1;
                }
            }
        }
    });
    return out;
}

// Channel layer norm: normalizes each position's axis-0 slice, then applies
// per-channel affine. gain/bias may be any shape with C elements.
template <class S>
Tensor<S> layer_norm_axis0(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                           S eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm_axis0: scalar input");
    const long long c = x.dim(0);
    const long long pos = x.numel() / c;
    if (gain.numel() != c || bias.numel() != c) {
        throw ShapeError("layer_norm_axis0: affine params " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " vs channels " + std::to_string(c));
    }
    OpCtx<S> ctx({&x, &gain, &bias});
    Tensor<S> out = Tensor<S>::uninitialized(x.shape());
    const S* px = x.data().data();
    const S* pg = gain.data().data();
    const S* pb = bias.data().data();
    S* po = out.data().data();
    for (long long j = 0; j < pos; ++j) {
        double mu = 0;
        for (long long ch = 0; ch < c; ++ch) mu += px[ch * pos + j];
        mu /= static_cast<double>(c);
        double var = 0;
        for (long long ch = 0; ch < c; ++ch) {
            const double d = px[ch * pos + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        for (long long ch = 0; ch < c; ++ch) {
            po[ch * pos + j] =
                static_cast<S>((px[ch * pos + j] - mu) * inv * pg[ch] + pb[ch]);
        }
    }
    ctx.commit(out, [xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(),
                     on = out.node_ptr(), wx = ctx.want[0], wg = ctx.want[1], wb = ctx.want[2], c,
                     pos, eps]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        const S* px = xn->values.data();
        const S* pg = gn->values.data();
        S* gx = wx ? detail::grad_of(xn.get()) : nullptr;
        S* gg = wg ? detail::grad_of(gn.get()) : nullptr;
        S* gb = wb ? detail::grad_of(bn.get()) : nullptr;
        std::vector<double> xhat(static_cast<size_t>(c));
        for (long long j = 0; j < pos; ++j) {
            double mu = 0;
            for (long long ch = 0; ch < c; ++ch) mu += px[ch * pos + j];
            mu /= static_cast<double>(c);
            double var = 0;
            for (long long ch = 0; ch < c; ++ch) {
                const double d = px[ch * pos + j] - mu;
                var += d * d;
            }
            var /= static_cast<double>(c);
            const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
            double m1 = 0, m2 = 0;
            for (long long ch = 0; ch < c; ++ch) {
                xhat[static_cast<size_t>(ch)] = (px[ch * pos + j] - mu) * inv;
                const double w = double(pg[ch]) * double(g[ch * pos + j]);
                m1 += w;
                m2 += w * xhat[static_cast<size_t>(ch)];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (long long ch = 0; ch < c; ++ch) {
                const double dy = g[ch * pos + j];
                if (gx) {
                    const double w = double(pg[ch]) * dy;
                    gx[ch * pos + j] += static_cast<S>(
                        inv * (w - m1 - xhat[static_cast<size_t>(ch)] * m2));
                }
                if (gg) gg[ch] += static_cast<S>(dy * xhat[static_cast<size_t>(ch)]);
                if (gb) gb[ch] += static_cast<S>(dy);
            }
        }
    });
    return out;
}

// Edge-replicating spatial padding for CxHxW maps.
template <class S>
Tensor<S> replicate_pad(const Tensor<S>& x, int p) {
    if (x.rank() != 3 || p < 0) {
        throw ShapeError("replicate_pad: expected CxHxW, got " + shape_str(x.shape()));
    }
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int ho = h + 2 * p, wo = w + 2 * p;
    OpCtx<S> ctx({&x});
    Tensor<S> out = Tensor<S>::uninitialized({c, ho, wo});
    const S* px = x.data().data();
    S* po = out.data().data();
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < ho; ++y) {
            const int yi = std::clamp(y - p, 0, h - 1);
            for (int xo = 0; xo < wo; ++xo) {
                const int xi = std::clamp(xo - p, 0, w - 1);
                po[(static_cast<long long>(ci) * ho + y) * wo + xo] =
                    px[(static_cast<long long>(ci) * h + yi) * w + xi];
            }
        }
    }
    ctx.commit(out, [xn = x.node_ptr(), on = out.node_ptr(), c, h, w, p, ho, wo]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        S* gx = detail::grad_of(xn.get());
        for (int ci = 0; ci < c; ++ci) {
            for (int y = 0; y < ho; ++y) {
                const int yi = std::clamp(y - p, 0, h - 1);
                for (int xo = 0; xo < wo; ++xo) {
                    const int xi = std::clamp(xo - p, 0, w - 1);
                    gx[(static_cast<long long>(ci) * h + yi) * w + xi] +=
                        g[(static_cast<long long>(ci) * ho + y) * wo + xo];
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    }
    OpCtx<S> ctx({&x});
    Tensor<S> out = Tensor<S>::from(std::move(shape), std::vector<S>(x.data().begin(), x.data().end()));
    ctx.commit(out, [xn = x.node_ptr(), on = out.node_ptr()]() {
        if (on->grad.empty()) return;
        S* gx = detail::grad_of(xn.get());
        for (size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    });
    return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& ts, int axis) {
    if (ts.empty()) throw ShapeError("concat: no inputs");
    const int r = ts[0].rank();
    if (axis < 0 || axis >= r) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
    }
    Shape os = ts[0].shape();
    int total = 0;
    for (const auto& t : ts) {
        if (t.rank() != r) {
            throw ShapeError("concat: rank mismatch " + shape_str(t.shape()) + " vs " +
                             shape_str(ts[0].shape()));
        }
        for (int d = 0; d < r; ++d) {
            if (d != axis && t.dim(d) != os[static_cast<size_t>(d)]) {
                throw ShapeError("concat: shape mismatch outside axis: " + shape_str(t.shape()) +
                                 " vs " + shape_str(ts[0].shape()));
            }
        }
        total += t.dim(axis);
    }
    os[static_cast<size_t>(axis)] = total;

    long long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= os[static_cast<size_t>(i)];

    std::vector<const Tensor<S>*> ptrs;
    for (const auto& t : ts) ptrs.push_back(&t);
    OpCtx<S> ctx(std::initializer_list<const Tensor<S>*>{});  // manual tracking below
    bool rec = false;
    std::vector<bool> want(ts.size(), false);
    if (ctx.tape) {
        for (size_t i = 0; i < ts.size(); ++i) {
            want[i] = detail::wants_grad(ts[i], ctx.tape);
            rec = rec || want[i];
        }
    }

    Tensor<S> out = Tensor<S>::uninitialized(os);
    S* po = out.data().data();
    long long off = 0;
    for (const auto& t : ts) {
        const long long len = static_cast<long long>(t.dim(axis)) * inner;
        const S* pt = t.data().data();
        for (long long o = 0; o < outer; ++o) {
            std::memcpy(po + o * total * inner + off, pt + o * len, static_cast<size_t>(len) * sizeof(S));
        }
        off += len;
    }
    if (rec) {
        out.node()->tape_epoch = ctx.tape->id();
        std::vector<std::shared_ptr<NodeT<S>>> nodes;
        std::vector<long long> lens;
        for (const auto& t : ts) {
            nodes.push_back(t.node_ptr());
            lens.push_back(static_cast<long long>(t.dim(axis)) * inner);
        }
        ctx.tape->record(out.node_ptr(), [nodes, lens, want, on = out.node_ptr(), outer, inner, total]() {
            if (on->grad.empty()) return;
            const S* g = on->grad.data();
            long long off = 0;
            for (size_t k = 0; k < nodes.size(); ++k) {
                if (want[k]) {
                    S* gt = detail::grad_of(nodes[k].get());
                    for (long long o = 0; o < outer; ++o) {
                        const S* src = g + o * total * inner + off;
                        S* dst = gt + o * lens[k];
                        for (long long i = 0; i < lens[k]; ++i) dst[i] += src[i];
                    }
                }
                off += lens[k];
            }
        });
    }
    return out;
}

// Contiguous row slice of a rank-2 tensor (used for attention head splits).
template <class S>
Tensor<S> slice_rows(const Tensor<S>& x, int r0, int r1) {
    if (x.rank() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1) {
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") for " + shape_str(x.shape()));
    }
    const long long n = x.dim(1);
    OpCtx<S> ctx({&x});
    Tensor<S> out = Tensor<S>::zeros({r1 - r0, static_cast<int>(n)});
    std::memcpy(out.data().data(), x.data().data() + r0 * n,
                static_cast<size_t>((r1 - r0) * n) * sizeof(S));
    ctx.commit(out, [xn = x.node_ptr(), on = out.node_ptr(), r0, n]() {
        if (on->grad.empty()) return;
        S* gx = detail::grad_of(xn.get());
        for (size_t i = 0; i < on->grad.size(); ++i) gx[static_cast<size_t>(r0 * n) + i] += on->grad[i];
    });
    return out;
}

// Rearranges bxb spatial blocks into channels: CxHxW -> (C*b*b) x H/b x W/b.
template <class S>
Tensor<S> space_to_depth(const Tensor<S>& x, int b) {
    if (x.rank() != 3 || x.dim(1) % b != 0 || x.dim(2) % b != 0) {
        throw ShapeError("space_to_depth: " + shape_str(x.shape()) + " not divisible by block " +
                         std::to_string(b));
    }
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int ho = h / b, wo = w / b;
    OpCtx<S> ctx({&x});
    Tensor<S> out = Tensor<S>::uninitialized({c * b * b, ho, wo});
    const S* px = x.data().data();
    S* po = out.data().data();
    for (int ci = 0; ci < c; ++ci) {
        for (int dy = 0; dy < b; ++dy) {
            for (int dx = 0; dx < b; ++dx) {
                const int co = (ci * b + dy) * b + dx;
                for (int yo = 0; yo < ho; ++yo) {
                    for (int xo = 0; xo < wo; ++xo) {
                        po[(static_cast<long long>(co) * ho + yo) * wo + xo] =
                            px[(static_cast<long long>(ci) * h + yo * b + dy) * w + xo * b + dx];
                    }
                }
            }
        }
    }
    ctx.commit(out, [xn = x.node_ptr(), on = out.node_ptr(), c, h, w, b, ho, wo]() {
        if (on->grad.empty()) return;
        const S* g = on->grad.data();
        S* gx = detail::grad_of(xn.get());
        for (int ci = 0; ci < c; ++ci) {
            for (int dy = 0; dy < b; ++dy) {
                for (int dx = 0; dx < b; ++dx) {
                    const int co = (ci * b + dy) * b + dx;
                    for (int yo = 0; yo < ho; ++yo) {
                        for (int xo = 0; xo < wo; ++xo) {
                            gx[(static_cast<long long>(ci) * h + yo * b + dy) * w + xo * b + dx] +=
                                g[(static_cast<long long>(co) * ho + yo) * wo + xo];
                        }
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// index ops (used by top-k gating)
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> gather_flat(const Tensor<S>& x, const std::vector<int>& idx) {
    for (int i : idx) {
        if (i < 0 || i >= x.numel()) {
            throw ShapeError("gather_flat: index " + std::to_string(i) + " out of range for " +
                             shape_str(x.shape()));
        }
    }
    OpCtx<S> ctx({&x});
    Tensor<S> out = Tensor<S>::uninitialized({static_cast<int>(idx.size())});
    for (size_t k = 0; k < idx.size(); ++k) out.data()[k] = x.data()[static_cast<size_t>(idx[k])];
    ctx.commit(out, [xn = x.node_ptr(), on = out.node_ptr(), idx]() {
        if (on->grad.empty()) return;
        S* gx = detail::grad_of(xn.get());
        for (size_t k = 0; k < idx.size(); ++k) gx[static_cast<size_t>(idx[k])] += on->grad[k];
    });
    return out;
}

template <class S>
Tensor<S> scatter_flat(const Tensor<S>& vals, const std::vector<int>& idx, int size) {
    if (vals.numel() != static_cast<long long>(idx.size())) {
        throw ShapeError("scatter_flat: " + std::to_string(idx.size()) + " indices vs " +
                         std::to_string(vals.numel()) + " values");
    }
    OpCtx<S> ctx({&vals});
    Tensor<S> out = Tensor<S>::zeros({size});
    for (size_t k = 0; k < idx.size(); ++k) out.data()[static_cast<size_t>(idx[k])] += vals.data()[k];
    ctx.commit(out, [vn = vals.node_ptr(), on = out.node_ptr(), idx]() {
        if (on->grad.empty()) return;
        S* gv = detail::grad_of(vn.get());
        for (size_t k = 0; k < idx.size(); ++k) gv[k] += on->grad[static_cast<size_t>(idx[k])];
    });
    return out;
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

// Max over components of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8), central
// differences with step eps. Perturbs `param` in place, so the loss closure
// can reference a live model parameter. Must be called with no tape active.
inline double finite_difference_check_param(const std::function<TensorD()>& loss_fn,
                                            TensorD param, double eps = 1e-5) {
    param.set_requires_grad(true);
    param.zero_grad();
    std::vector<double> g_ad;
    {
        Tape<double> tape;
        TensorD y = loss_fn();
        if (y.numel() != 1) {
            throw NumericError("finite_difference_check_param: loss must be scalar");
        }
        tape.backward(y);
        auto g = param.grad_data();
        g_ad.assign(g.begin(), g.end());
    }
    param.zero_grad();
    double worst = 0;
    auto vals = param.data();
    for (size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + eps;
        const double fp = loss_fn().value();
        vals[i] = orig - eps;
        const double fm = loss_fn().value();
        vals[i] = orig;
        const double g_fd = (fp - fm) / (2 * eps);
        const double denom = std::max({std::abs(g_ad[i]), std::abs(g_fd), 1e-8});
        worst = std::max(worst, std::abs(g_ad[i] - g_fd) / denom);
    }
    return worst;
}

// Same check for a function of a free input tensor.
inline double finite_difference_check(const std::function<TensorD(const TensorD&)>& f,
                                      const TensorD& x, double eps = 1e-5) {
    TensorD xw = x.detach();
    xw.set_requires_grad(true);
    std::vector<double> g_ad;
    {
        Tape<double> tape;
        TensorD y = f(xw);
        if (y.numel() != 1) {
            throw NumericError("finite_difference_check: f must be scalar-valued");
        }
        tape.backward(y);
        auto g = xw.grad_data();
        g_ad.assign(g.begin(), g.end());
    }
    double worst = 0;
    auto vals = xw.data();
    for (size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + eps;
        const double fp = f(xw).value();
        vals[i] = orig - eps;
        const double fm = f(xw).value();
        vals[i] = orig;
        const double g_fd = (fp - fm) / (2 * eps);
        const double denom = std::max({std::abs(g_ad[i]), std::abs(g_fd), 1e-8});
        worst = std::max(worst, std::abs(g_ad[i] - g_fd) / denom);
    }
    return worst;
}

}  // namespace m4
