#pragma once

#include <array>
#include <memory>
#include <numeric>

#include "m4/nn.hpp"

namespace m4 {

enum class Modality { Rgb, Depth };

inline const char* modality_name(Modality m) { return m == Modality::Rgb ? "rgb" : "depth"; }

// ---------------------------------------------------------------------------
// gate statistics
// ---------------------------------------------------------------------------

// Accumulated per expert over one optimizer step. Importance sums mixture
// weights, smooth load sums the raw gate probabilities of selected experts
// (differentiable surrogate); hard load counts selections for logging.
template <class S>
struct GateStatistics {
    Tensor<S> importance;
    Tensor<S> load_smooth;
    std::vector<long long> load_hard;
    long long events = 0;

    void reset(int experts) {
        importance = Tensor<S>::zeros({experts});
        load_smooth = Tensor<S>::zeros({experts});
        load_hard.assign(static_cast<size_t>(experts), 0);
        events = 0;
    }

    static GateStatistics from_values(std::vector<S> imp, std::vector<S> load) {
        GateStatistics st;
        int e = static_cast<int>(imp.size());
        st.importance = Tensor<S>::from({e}, std::move(imp));
        st.load_smooth = Tensor<S>::from({e}, std::move(load));
        st.load_hard.assign(static_cast<size_t>(e), 0);
        st.events = 1;
        return st;
    }
};

// lambda * (CV(importance)^2 + CV(load)^2), population statistics. CV^2 is
// computed as var/mean^2, which keeps the loss differentiable at zero spread.
template <class S>
Tensor<S> load_balance_loss(const GateStatistics<S>& stats, double lambda) {
    if (stats.events == 0) {
        throw NumericError("load_balance_loss: no gating events recorded");
    }
    auto cv2 = [](const Tensor<S>& v) {
        auto mu = mean_all(v);
        if (mu.value() <= S(0)) {
            throw NumericError("load_balance_loss: non-positive mean expert usage");
        }
        auto d = sub(v, mu);
        auto var = mean_all(mul(d, d));
        return div(var, mul(mu, mu));
    };
    return mul_scalar(add(cv2(stats.importance), cv2(stats.load_smooth)),
                      static_cast<S>(lambda));
}

// ---------------------------------------------------------------------------
// convolutional experts
// ---------------------------------------------------------------------------

// Every expert is shape preserving on the low-rank map (r x H x W). Experts
// carry no bias so a zeroed kernel is a strict zero map.
template <class S>
struct ConvExpert {
    enum class Kind { K3, K5, DepthwisePointwise };

    Kind kind;
    Conv2d<S> conv;   // K3 / K5 / depthwise part
    Conv2d<S> point;  // pointwise part, DepthwisePointwise only

    ConvExpert(Kind k, int rank, Rng& rng) : kind(k) {
        switch (k) {
            case Kind::K3:
                conv = Conv2d<S>(rank, rank, 3, {.stride = 1, .pad = 1}, rng, false);
                break;
            case Kind::K5:
                conv = Conv2d<S>(rank, rank, 5, {.stride = 1, .pad = 2}, rng, false);
                break;
            case Kind::DepthwisePointwise:
                conv = Conv2d<S>(rank, rank, 3, {.stride = 1, .pad = 1, .dilation = 1, .groups = rank},
                                 rng, false);
                point = Conv2d<S>::pointwise(rank, rank, rng, false);
                break;
        }
    }

    Tensor<S> forward(const Tensor<S>& z) const {
        auto y = conv.forward(z);
        if (kind == Kind::DepthwisePointwise) y = point.forward(y);
        return y;
    }

    void zero_kernels() {
        conv.zero_();
        if (kind == Kind::DepthwisePointwise) point.zero_();
    }

    void register_params(const std::string& prefix, ParamRegistry<S>& reg) const {
        conv.register_params(prefix + ".conv", reg, true, ParamGroup::Adapter);
        if (kind == Kind::DepthwisePointwise) {
            point.register_params(prefix + ".point", reg, true, ParamGroup::Adapter);
        }
    }
};

template <class S>
struct GateDecision {
    std::vector<int> indices;  // selected experts, best first
    Tensor<S> weights;         // renormalized, aligned with indices
    Tensor<S> probs;           // full softmax over all experts
};

// ---------------------------------------------------------------------------
// expert group
// ---------------------------------------------------------------------------

template <class S>
struct ExpertGroup {
    static constexpr int kExperts = 3;

    std::vector<ConvExpert<S>> experts;
    Linear<S> gate;  // pooled low-rank features -> per-expert logits
    GateStatistics<S> stats;
    mutable std::array<long long, kExperts> invocations{};
    long long passes = 0;  // gating events ever, never reset

    ExpertGroup(int rank, Rng& rng) {
        experts.emplace_back(ConvExpert<S>::Kind::K3, rank, rng);
        experts.emplace_back(ConvExpert<S>::Kind::K5, rank, rng);
        experts.emplace_back(ConvExpert<S>::Kind::DepthwisePointwise, rank, rng);
        gate = Linear<S>(rank, kExperts, rng);
        stats.reset(kExperts);
    }

    // Gate on the globally pooled low-rank map: one expert choice per image.
    GateDecision<S> decide(const Tensor<S>& zmap, int top_k) const {
        auto pooled = reshape(global_avg_pool(zmap), {zmap.dim(0), 1});
        auto logits = reshape(gate.forward(pooled), {kExperts});
        auto probs = softmax(logits, 0);

        std::vector<int> order(kExperts);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return probs.data()[static_cast<size_t>(a)] > probs.data()[static_cast<size_t>(b)];
        });
        order.resize(static_cast<size_t>(top_k));

        auto sel = gather_flat(probs, order);
        auto weights = div(sel, sum_all(sel));
        return {std::move(order), std::move(weights), std::move(probs)};
    }

    Tensor<S> forward(const Tensor<S>& zmap, int top_k) {
        ++passes;
        auto dec = decide(zmap, top_k);
        Tensor<S> out;
        for (size_t i = 0; i < dec.indices.size(); ++i) {
            int e = dec.indices[i];
            ++invocations[static_cast<size_t>(e)];
            auto wi = reshape(gather_flat(dec.weights, {static_cast<int>(i)}), Shape{});
            auto term = mul(experts[static_cast<size_t>(e)].forward(zmap), wi);
            out = out.defined() ? add(out, term) : term;
        }
        record_stats(dec);
        return out;
    }

    void record_stats(const GateDecision<S>& dec) {
        auto w_full = scatter_flat(dec.weights, dec.indices, kExperts);
        stats.importance = add(stats.importance, w_full);
        auto p_sel = gather_flat(dec.probs, dec.indices);
        stats.load_smooth = add(stats.load_smooth, scatter_flat(p_sel, dec.indices, kExperts));
        for (int e : dec.indices) ++stats.load_hard[static_cast<size_t>(e)];
        ++stats.events;
    }

    long long total_invocations() const {
        long long n = 0;
        for (auto v : invocations) n += v;
        return n;
    }

    void zero_all_kernels() {
        for (auto& e : experts) e.zero_kernels();
    }

    void register_params(const std::string& prefix, ParamRegistry<S>& reg) const {
        for (size_t i = 0; i < experts.size(); ++i) {
            experts[i].register_params(prefix + ".expert" + std::to_string(i), reg);
        }
        gate.register_params(prefix + ".gate", reg, true, ParamGroup::Adapter);
    }
};

// ---------------------------------------------------------------------------
// the adapter layer
// ---------------------------------------------------------------------------

// Low-rank adapter around a frozen projection, extended with convolutional
// expert groups and a modality dispatcher: RGB passes run {rgb, fusion}
// groups, depth passes run {depth, fusion}; the fusion group is one shared
// instance.
template <class S>
struct LoraMoeLayer {
    Tensor<S> w0;  // frozen, d x k
    Tensor<S> b0;  // frozen, d x 1, optional
    Tensor<S> a;   // r x k
    Tensor<S> b;   // d x r, zero at init so the adapter starts silent
    int rank = 0;
    int top_k = 2;
    bool moe_enabled = true;

    std::shared_ptr<ExpertGroup<S>> rgb_group, depth_group, fusion_group;

    mutable int hint_h = 0, hint_w = 0;

    LoraMoeLayer() = default;

    LoraMoeLayer(const Tensor<S>& frozen_w, const Tensor<S>& frozen_b, int r, int k, Rng& rng)
        : w0(frozen_w), b0(frozen_b), rank(r), top_k(k) {
        const int d = w0.dim(0), in = w0.dim(1);
        if (r * 4 > std::min(d, in)) {
            throw ShapeError("LoraMoeLayer: rank " + std::to_string(r) +
                             " too large for projection " + shape_str(w0.shape()) +
                             " (need r <= min(d,k)/4)");
        }
        double bound = 1.0 / std::sqrt(static_cast<double>(in));
        a = Tensor<S>::uniform({r, in}, -bound, bound, rng);
        a.set_requires_grad();
        b = Tensor<S>::zeros({d, r});
        b.set_requires_grad();
        rgb_group = std::make_shared<ExpertGroup<S>>(r, rng);
        depth_group = std::make_shared<ExpertGroup<S>>(r, rng);
        fusion_group = std::make_shared<ExpertGroup<S>>(r, rng);
    }

    void set_spatial_hint(int h, int w) const {
        hint_h = h;
        hint_w = w;
    }

    // h = W0 x + B A x; never touches the experts
    Tensor<S> lora_forward(const Tensor<S>& x) const {
        auto base = matmul(w0, x);
        if (b0.defined()) base = add(base, b0);
        return add(base, matmul(b, matmul(a, x)));
    }

    // h = W0 x + B A x + B D(A x)
    Tensor<S> forward(const Tensor<S>& x, Modality m) {
        auto base = matmul(w0, x);
        if (b0.defined()) base = add(base, b0);
        auto z = matmul(a, x);
        Tensor<S> combined = z;
        if (moe_enabled) {
            const long long tokens = z.dim(1);
            if (static_cast<long long>(hint_h) * hint_w != tokens) {
                throw ShapeError("moe_lora_forward: " + std::to_string(tokens) +
                                 " tokens do not factor into spatial hint " +
                                 std::to_string(hint_h) + "x" + std::to_string(hint_w));
            }
            auto zmap = to_map(z, hint_h, hint_w);
            Tensor<S> dsum;
            for (auto* group : active_groups(m)) {
                auto gout = group->forward(zmap, top_k);
                dsum = dsum.defined() ? add(dsum, gout) : gout;
            }
            combined = add(z, to_tokens(dsum));
        }
        return add(base, matmul(b, combined));
    }

    std::array<ExpertGroup<S>*, 2> active_groups(Modality m) {
        return {m == Modality::Rgb ? rgb_group.get() : depth_group.get(), fusion_group.get()};
    }

    std::array<ExpertGroup<S>*, 3> all_groups() {
        return {rgb_group.get(), depth_group.get(), fusion_group.get()};
    }

    void reset_stats() {
        for (auto* g : all_groups()) g->stats.reset(ExpertGroup<S>::kExperts);
    }

    void zero_all_expert_kernels() {
        for (auto* g : all_groups()) g->zero_all_kernels();
    }

    // Trainable adapter parameters only; the wrapped projection is registered
    // by whoever owns it.
    void register_params(const std::string& prefix, ParamRegistry<S>& reg) const {
        reg.add(prefix + ".A", a, true, ParamGroup::Adapter);
        reg.add(prefix + ".B", b, true, ParamGroup::Adapter);
        rgb_group->register_params(prefix + ".rgb", reg);
        depth_group->register_params(prefix + ".depth", reg);
        fusion_group->register_params(prefix + ".fusion", reg);
    }

    // closed-form trainable parameter count for one layer (audit oracle)
    static long long expected_param_count(int d, int in, int r) {
        long long ab = static_cast<long long>(r) * in + static_cast<long long>(d) * r;
        long long expert = static_cast<long long>(r) * r * 9    // 3x3
                           + static_cast<long long>(r) * r * 25  // 5x5
                           + static_cast<long long>(r) * 9 + static_cast<long long>(r) * r;  // dw+pw
        long long gate = 3LL * r + 3;
        return ab + 3 * (expert + gate);
    }
};

// Mean of the per-group balance losses over every group that gated at least
// one token this step.
template <class S>
Tensor<S> moe_regularizer(const std::vector<const GateStatistics<S>*>& stats, double lambda) {
    Tensor<S> acc;
    int n = 0;
    for (const auto* st : stats) {
        if (!st || st->events == 0) continue;
        auto l = load_balance_loss(*st, lambda);
        acc = acc.defined() ? add(acc, l) : l;
        ++n;
    }
    if (n == 0) return Tensor<S>::scalar(S(0));
    return mul_scalar(acc, static_cast<S>(1.0 / n));
}

}  // namespace m4
