#pragma once

#include "m4/losses.hpp"
#include "m4/temporal_memory.hpp"

namespace m4 {

enum class MemFeature { D1, D2, Both };

inline const char* mem_feature_name(MemFeature f) {
    switch (f) {
        case MemFeature::D1: return "d1";
        case MemFeature::D2: return "d2";
        default: return "both";
    }
}

struct ModelConfig {
    EncoderConfig encoder;
    int input_size = 64;
    int rank = 4;
    int top_k = 2;
    int memory_capacity = 4;
    int mlf_hidden = 32;
    int key_dim = 16;
    int val_dim = 16;
    int hidden_dim = 16;
    bool use_memory = true;
    bool use_gated_mlf = true;
    MemFeature mem_feature = MemFeature::D2;
    bool detach_memory = false;

    int decoder_feature_channels() const {
        switch (mem_feature) {
            case MemFeature::D1: return encoder.widths[0];
            case MemFeature::D2: return encoder.widths[1];
            default: return encoder.widths[0] + encoder.widths[1];
        }
    }
    int fused_channels() const { return encoder.widths[0] + decoder_feature_channels(); }

    void validate() const {
        encoder.validate();
        if (input_size % 32 != 0) throw DataError("ModelConfig: input size must divide by 32");
        if (top_k < 1 || top_k > ExpertGroup<float>::kExperts) {
            throw DataError("ModelConfig: top_k must be in 1..3");
        }
        if (memory_capacity < 1) throw DataError("ModelConfig: memory capacity must be >= 1");
    }
};

// Final mask plus the auxiliary supervision surface for one frame.
template <class S>
struct PredictionBundle {
    Tensor<S> prob;          // P at input resolution, in [0,1]
    Tensor<S> logits_full;   // same map before the sigmoid
    Tensor<S> logits_small;  // stride-4 logits that fed the memory write
    DecoderOutputs<S> dec;
};

template <class S>
struct Model {
    ModelConfig cfg;
    Encoder<S> encoder;
    FusionNeck<S> neck;
    Decoder<S> decoder;
    GatedMlf<S> mlf;
    TemporalMemory<S> memory;

    Model(const ModelConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        encoder = Encoder<S>(cfg.encoder, rng);
        encoder.inject_adapters(cfg.rank, cfg.top_k, rng);
        neck = FusionNeck<S>(cfg.encoder, rng);
        decoder = Decoder<S>(cfg.encoder, rng);
        if (cfg.use_memory) {
            if (cfg.use_gated_mlf) mlf = GatedMlf<S>(cfg.encoder, cfg.mlf_hidden, rng);
            memory = TemporalMemory<S>(cfg.fused_channels(), cfg.key_dim, cfg.val_dim,
                                       cfg.hidden_dim, rng);
        }
    }

    Tensor<S> select_decoder_feature(const DecoderOutputs<S>& dec) const {
        switch (cfg.mem_feature) {
            case MemFeature::D1: return dec.xd[0];
            case MemFeature::D2: return dec.xd[1];
            default: {
                auto up = bilinear_resize(dec.xd[1], dec.xd[0].dim(1), dec.xd[0].dim(2));
                return concat<S>({dec.xd[0], up}, 0);
            }
        }
    }

    // One frame of the pipeline. Prompt-free by construction: the only
    // frame-0 prior is the decoder's own coarse mask.
    PredictionBundle<S> forward_frame(const Tensor<S>& rgb, const Tensor<S>& depth,
                                      MemoryBank<S>& bank, MemoryDecoderState<S>& state,
                                      int frame_idx) {
        auto rgb_pyr = encoder.encode(rgb, Modality::Rgb);
        auto dep_pyr = encoder.encode(depth, Modality::Depth);
        auto fused = neck.fuse(rgb_pyr, dep_pyr);
        auto dec = decoder.decode(fused);

        PredictionBundle<S> out;
        out.dec = dec;
        if (!cfg.use_memory) {
            out.logits_small = dec.coarse_logits[0];
        } else {
            auto feat = select_decoder_feature(dec);
            Tensor<S> xf;
            if (cfg.use_gated_mlf) {
                xf = mlf.forward(fused, feat).xf;
            } else {
                auto up = bilinear_resize(feat, fused.level[0].dim(1), fused.level[0].dim(2));
                xf = concat<S>({fused.level[0], up}, 0);
            }
            auto q = memory.project_query(xf);
            if (frame_idx == 0) {
                memory.pseudo_init(bank, xf, sigmoid(dec.coarse_logits[0]), cfg.detach_memory);
            }
            auto xft = memory.read_with_query(bank, q);
            auto [logits, hidden] = memory.decode(xf, xft, state);
            out.logits_small = logits;
            memory.write(bank, q, xf, sigmoid(logits), frame_idx, cfg.detach_memory);
        }
        out.logits_full = bilinear_resize(out.logits_small, rgb.dim(1), rgb.dim(2));
        out.prob = sigmoid(out.logits_full);
        return out;
    }

    // Streams a clip: pseudo-init on frame 0, then read/decode/write per
    // frame. One bank per stream; the default capacity comes from the config.
    // Tests may pass their own (empty) bank to inspect eviction history.
    std::vector<PredictionBundle<S>> process_clip(const std::vector<Tensor<S>>& rgb,
                                                  const std::vector<Tensor<S>>& depth,
                                                  int capacity_override = 0,
                                                  MemoryBank<S>* external_bank = nullptr) {
        if (rgb.empty() || rgb.size() != depth.size()) {
            throw ShapeError("process_clip: clip needs >= 1 aligned rgb/depth frames");
        }
        MemoryBank<S> local(capacity_override > 0 ? capacity_override : cfg.memory_capacity);
        MemoryBank<S>& bank = external_bank ? *external_bank : local;
        MemoryDecoderState<S> state;
        std::vector<PredictionBundle<S>> out;
        out.reserve(rgb.size());
        for (size_t t = 0; t < rgb.size(); ++t) {
            out.push_back(forward_frame(rgb[t], depth[t], bank, state, static_cast<int>(t)));
        }
        return out;
    }

    void reset_gate_stats() {
        encoder.for_each_adapter([](LoraMoeLayer<S>& l) { l.reset_stats(); });
    }

    std::vector<const GateStatistics<S>*> gate_stats() {
        std::vector<const GateStatistics<S>*> out;
        encoder.for_each_adapter([&](LoraMoeLayer<S>& l) {
            for (auto* g : l.all_groups()) out.push_back(&g->stats);
        });
        return out;
    }

    void register_params(ParamRegistry<S>& reg) const {
        encoder.register_params("encoder", reg);
        neck.register_params("neck", reg);
        decoder.register_params("decoder", reg);
        if (cfg.use_memory) {
            if (cfg.use_gated_mlf) mlf.register_params("mlf", reg);
            memory.register_params("memory", reg);
        }
    }
};

}  // namespace m4
