#pragma once

#include "m4/encoder.hpp"

namespace m4 {

// Level index 0 is the finest resolution (stride 4); coarse and edge heads
// exist for levels 0..2 only.
template <class S>
struct DecoderOutputs {
    std::array<Tensor<S>, 4> xd;
    std::array<Tensor<S>, 3> coarse_logits;
    std::array<Tensor<S>, 3> edge_logits;
};

template <class S>
struct ConvBlock {
    Conv2d<S> c1, c2;
    LayerNorm<S> n1, n2;

    ConvBlock() = default;
    ConvBlock(int in, int out, Rng& rng)
        : c1(in, out, 3, {.stride = 1, .pad = 1}, rng),
          c2(out, out, 3, {.stride = 1, .pad = 1}, rng),
          n1(out, 3),
          n2(out, 3) {}

    Tensor<S> forward(const Tensor<S>& x) const {
        auto y = relu(n1.forward(c1.forward(x)));
        return relu(n2.forward(c2.forward(y)));
    }

    void register_params(const std::string& p, ParamRegistry<S>& reg) const {
        c1.register_params(p + ".c1", reg, true);
        c2.register_params(p + ".c2", reg, true);
        n1.register_params(p + ".n1", reg, true);
        n2.register_params(p + ".n2", reg, true);
    }
};

// U-shaped decoder: start from the deepest fused level, upsample x2 and fuse
// the skip at every step, with coarse/edge 1x1 heads on the three finest
// levels.
template <class S>
struct Decoder {
    ConvBlock<S> b4;                     // C4 -> C4
    std::array<ConvBlock<S>, 3> blocks;  // index i: level i (0 finest)
    std::array<Conv2d<S>, 3> coarse_head, edge_head;

    Decoder() = default;
    Decoder(const EncoderConfig& cfg, Rng& rng) : b4(cfg.widths[3], cfg.widths[3], rng) {
        for (int i = 2; i >= 0; --i) {
            const int skip_c = cfg.widths[static_cast<size_t>(i)];
            const int up_c = cfg.widths[static_cast<size_t>(i + 1)];
            blocks[static_cast<size_t>(i)] = ConvBlock<S>(up_c + skip_c, skip_c, rng);
            coarse_head[static_cast<size_t>(i)] = Conv2d<S>::pointwise(skip_c, 1, rng);
            edge_head[static_cast<size_t>(i)] = Conv2d<S>::pointwise(skip_c, 1, rng);
        }
    }

    DecoderOutputs<S> decode(const FeaturePyramid<S>& enc) const {
        enc.require_complete("decode");
        DecoderOutputs<S> out;
        out.xd[3] = b4.forward(enc.level[3]);
        for (int i = 2; i >= 0; --i) {
            const auto& skip = enc.level[static_cast<size_t>(i)];
            auto up = bilinear_resize(out.xd[static_cast<size_t>(i + 1)], skip.dim(1), skip.dim(2));
            out.xd[static_cast<size_t>(i)] =
                blocks[static_cast<size_t>(i)].forward(concat<S>({up, skip}, 0));
            out.coarse_logits[static_cast<size_t>(i)] =
                coarse_head[static_cast<size_t>(i)].forward(out.xd[static_cast<size_t>(i)]);
            out.edge_logits[static_cast<size_t>(i)] =
                edge_head[static_cast<size_t>(i)].forward(out.xd[static_cast<size_t>(i)]);
        }
        return out;
    }

    void register_params(const std::string& p, ParamRegistry<S>& reg) const {
        b4.register_params(p + ".b4", reg);
        for (size_t i = 0; i < 3; ++i) {
            blocks[i].register_params(p + ".block" + std::to_string(i), reg);
            coarse_head[i].register_params(p + ".coarse" + std::to_string(i), reg, true);
            edge_head[i].register_params(p + ".edge" + std::to_string(i), reg, true);
        }
    }
};

}  // namespace m4
