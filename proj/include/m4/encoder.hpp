#pragma once

#include <array>
#include <memory>

#include "m4/moe_lora.hpp"

namespace m4 {

struct EncoderConfig {
    std::vector<int> widths{16, 32, 64, 128};
    std::vector<int> strides{4, 8, 16, 32};
    std::vector<int> heads{2, 2, 2, 2};
    int mlp_ratio = 2;

    void validate() const {
        if (widths.size() != 4 || strides.size() != 4 || heads.size() != 4) {
            throw DataError("EncoderConfig: expects exactly 4 stages");
        }
        for (size_t i = 1; i < 4; ++i) {
            if (widths[i] <= widths[i - 1] || strides[i] <= strides[i - 1]) {
                throw DataError("EncoderConfig: widths and strides must be strictly increasing");
            }
        }
        for (size_t i = 0; i < 4; ++i) {
            if (widths[i] % heads[i] != 0) {
                throw DataError("EncoderConfig: head count must divide stage width");
            }
        }
    }
};

enum class PyramidTag { Rgb, Depth, Fused };

template <class S>
struct FeaturePyramid {
    std::array<Tensor<S>, 4> level;  // level[0] finest (stride 4)
    PyramidTag tag = PyramidTag::Fused;

    void require_complete(const char* who) const {
        for (const auto& l : level) {
            if (!l.defined()) throw ShapeError(std::string(who) + ": pyramid incomplete");
        }
    }
};

// Frozen projection wrapper; once an adapter is injected, the projection
// routes through it (the adapter holds the same frozen weight storage).
template <class S>
struct QvProjection {
    Linear<S> base;
    std::shared_ptr<LoraMoeLayer<S>> adapter;

    Tensor<S> forward(const Tensor<S>& x, Modality m, int h, int w) {
        if (!adapter) return base.forward(x);
        adapter->set_spatial_hint(h, w);
        return adapter->forward(x, m);
    }
};

// Pre-norm global multi-head attention + MLP block on channel x token
// matrices. The trunk weights are frozen after random init.
template <class S>
struct AttentionBlock {
    int channels = 0, heads = 0;
    LayerNorm<S> ln1, ln2;
    QvProjection<S> q, v;
    Linear<S> k, o, fc1, fc2;

    AttentionBlock() = default;
    AttentionBlock(int c, int nheads, int mlp_ratio, Rng& rng)
        : channels(c),
          heads(nheads),
          ln1(c, 2),
          ln2(c, 2),
          k(c, c, rng),
          o(c, c, rng),
          fc1(c, c * mlp_ratio, rng),
          fc2(c * mlp_ratio, c, rng) {
        q.base = Linear<S>(c, c, rng);
        v.base = Linear<S>(c, c, rng);
    }

    Tensor<S> forward(const Tensor<S>& xmap, Modality m) {
        const int h = xmap.dim(1), w = xmap.dim(2);
        auto x = to_tokens(xmap);
        auto n1 = ln1.forward(x);
        auto qm = q.forward(n1, m, h, w);
        auto km = k.forward(n1);
        auto vm = v.forward(n1, m, h, w);

        const int hd = channels / heads;
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
        std::vector<Tensor<S>> outs;
        for (int i = 0; i < heads; ++i) {
            auto qh = slice_rows(qm, i * hd, (i + 1) * hd);
            auto kh = slice_rows(km, i * hd, (i + 1) * hd);
            auto vh = slice_rows(vm, i * hd, (i + 1) * hd);
            auto attn = softmax(mul_scalar(matmul(transpose2(qh), kh), scale), 1);
            outs.push_back(matmul(vh, transpose2(attn)));
        }
        auto attn_out = o.forward(concat(outs, 0));
        auto res = add(x, attn_out);
        auto mlp = fc2.forward(gelu(fc1.forward(ln2.forward(res))));
        return to_map(add(res, mlp), h, w);
    }

    void inject(int rank, int top_k, Rng& rng) {
        q.adapter = std::make_shared<LoraMoeLayer<S>>(q.base.weight, q.base.bias, rank, top_k, rng);
        v.adapter = std::make_shared<LoraMoeLayer<S>>(v.base.weight, v.base.bias, rank, top_k, rng);
    }

    void register_params(const std::string& p, ParamRegistry<S>& reg) const {
        ln1.register_params(p + ".ln1", reg, false);
        ln2.register_params(p + ".ln2", reg, false);
        q.base.register_params(p + ".q", reg, false);
        k.register_params(p + ".k", reg, false);
        v.base.register_params(p + ".v", reg, false);
        o.register_params(p + ".o", reg, false);
        fc1.register_params(p + ".fc1", reg, false);
        fc2.register_params(p + ".fc2", reg, false);
        if (q.adapter) q.adapter->register_params(p + ".q.adapter", reg);
        if (v.adapter) v.adapter->register_params(p + ".v.adapter", reg);
    }
};

template <class S>
struct EncoderStage {
    int merge = 2;
    Conv2d<S> patch_proj;  // 1x1 after space_to_depth
    AttentionBlock<S> block;

    Tensor<S> forward(const Tensor<S>& x, Modality m) {
        auto merged = space_to_depth(x, merge);
        return block.forward(patch_proj.forward(merged), m);
    }
};

// Shared 4-stage trunk: both modalities run the same weights, with the
// modality dispatched to every injected adapter.
template <class S>
struct Encoder {
    EncoderConfig cfg;
    std::array<EncoderStage<S>, 4> stages;

    Encoder() = default;
    Encoder(const EncoderConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        int prev_c = 3;
        int prev_stride = 1;
        for (int i = 0; i < 4; ++i) {
            auto& st = stages[static_cast<size_t>(i)];
            st.merge = cfg.strides[static_cast<size_t>(i)] / prev_stride;
            st.patch_proj = Conv2d<S>::pointwise(prev_c * st.merge * st.merge,
                                                 cfg.widths[static_cast<size_t>(i)], rng);
            st.block = AttentionBlock<S>(cfg.widths[static_cast<size_t>(i)],
                                         cfg.heads[static_cast<size_t>(i)], cfg.mlp_ratio, rng);
            prev_c = cfg.widths[static_cast<size_t>(i)];
            prev_stride = cfg.strides[static_cast<size_t>(i)];
        }
    }

    void inject_adapters(int rank, int top_k, Rng& rng) {
        for (auto& st : stages) st.block.inject(rank, top_k, rng);
    }

    FeaturePyramid<S> encode(const Tensor<S>& image, Modality m) {
        if (image.rank() != 3 || image.dim(0) != 3) {
            throw ShapeError("encode: expected 3xHxW image, got " + shape_str(image.shape()));
        }
        if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0) {
            throw ShapeError("encode: input size " + shape_str(image.shape()) +
                             " not divisible by 32");
        }
        FeaturePyramid<S> pyr;
        pyr.tag = m == Modality::Rgb ? PyramidTag::Rgb : PyramidTag::Depth;
        Tensor<S> x = image;
        for (int i = 0; i < 4; ++i) {
            x = stages[static_cast<size_t>(i)].forward(x, m);
            pyr.level[static_cast<size_t>(i)] = x;
        }
        return pyr;
    }

    template <class F>
    void for_each_adapter(F&& fn) {
        for (auto& st : stages) {
            if (st.block.q.adapter) fn(*st.block.q.adapter);
            if (st.block.v.adapter) fn(*st.block.v.adapter);
        }
    }

    void register_params(const std::string& p, ParamRegistry<S>& reg) const {
        for (size_t i = 0; i < 4; ++i) {
            const auto& st = stages[i];
            st.patch_proj.register_params(p + ".stage" + std::to_string(i) + ".patch", reg, false);
            st.block.register_params(p + ".stage" + std::to_string(i) + ".attn", reg);
        }
    }
};

// ---------------------------------------------------------------------------
// cross-modal fusion neck (UIM-lite + RFB-lite)
// ---------------------------------------------------------------------------

// Per level: concat both modalities, project back to the level width, scale
// by (1 + prior) where the prior is a tanh coarse map from the deepest
// concatenated level, then enhance with parallel dilated convs and a residual.
template <class S>
struct FusionNeck {
    struct RfbLite {
        Conv2d<S> d1, d3, d5, proj;
    };

    Conv2d<S> prior_conv;  // 2*C4 -> 1, 3x3
    std::array<Conv2d<S>, 4> uim;
    std::array<RfbLite, 4> rfb;

    FusionNeck() = default;
    FusionNeck(const EncoderConfig& cfg, Rng& rng) {
        prior_conv = Conv2d<S>(2 * cfg.widths[3], 1, 3, {.stride = 1, .pad = 1}, rng);
        for (int i = 0; i < 4; ++i) {
            const int c = cfg.widths[static_cast<size_t>(i)];
            const int mid = std::max(4, c / 4);  // bottlenecked branches
            uim[static_cast<size_t>(i)] = Conv2d<S>::pointwise(2 * c, c, rng);
            rfb[static_cast<size_t>(i)] = {
                Conv2d<S>(c, mid, 3, {.stride = 1, .pad = 1, .dilation = 1}, rng),
                Conv2d<S>(c, mid, 3, {.stride = 1, .pad = 3, .dilation = 3}, rng),
                Conv2d<S>(c, mid, 3, {.stride = 1, .pad = 5, .dilation = 5}, rng),
                Conv2d<S>::pointwise(3 * mid, c, rng)};
        }
    }

    FeaturePyramid<S> fuse(const FeaturePyramid<S>& rgb, const FeaturePyramid<S>& depth) {
        rgb.require_complete("fuse_modalities");
        depth.require_complete("fuse_modalities");
        for (int i = 0; i < 4; ++i) {
            if (rgb.level[static_cast<size_t>(i)].shape() != depth.level[static_cast<size_t>(i)].shape()) {
                throw ShapeError("fuse_modalities: level " + std::to_string(i + 1) +
                                 " shape mismatch " + shape_str(rgb.level[static_cast<size_t>(i)].shape()) +
                                 " vs " + shape_str(depth.level[static_cast<size_t>(i)].shape()));
            }
        }
        auto deepest = concat<S>({rgb.level[3], depth.level[3]}, 0);
        auto prior = tanh_op(prior_conv.forward(deepest));

        FeaturePyramid<S> out;
        out.tag = PyramidTag::Fused;
        for (int i = 0; i < 4; ++i) {
            auto cat = concat<S>({rgb.level[static_cast<size_t>(i)], depth.level[static_cast<size_t>(i)]}, 0);
            auto fusedc = uim[static_cast<size_t>(i)].forward(cat);
            auto prior_i = bilinear_resize(prior, fusedc.dim(1), fusedc.dim(2));
            auto moded = mul(fusedc, add_scalar(prior_i, S(1)));
            const auto& r = rfb[static_cast<size_t>(i)];
            auto branch = r.proj.forward(
                concat<S>({r.d1.forward(moded), r.d3.forward(moded), r.d5.forward(moded)}, 0));
            out.level[static_cast<size_t>(i)] = add(moded, branch);
        }
        return out;
    }

    void register_params(const std::string& p, ParamRegistry<S>& reg) const {
        prior_conv.register_params(p + ".prior", reg, true);
        for (size_t i = 0; i < 4; ++i) {
            const std::string lv = p + ".level" + std::to_string(i);
            uim[i].register_params(lv + ".uim", reg, true);
            rfb[i].d1.register_params(lv + ".rfb.d1", reg, true);
            rfb[i].d3.register_params(lv + ".rfb.d3", reg, true);
            rfb[i].d5.register_params(lv + ".rfb.d5", reg, true);
            rfb[i].proj.register_params(lv + ".rfb.proj", reg, true);
        }
    }
};

}  // namespace m4
