#pragma once

#include <deque>

#include "m4/decoder.hpp"

namespace m4 {

// ---------------------------------------------------------------------------
// Gated multi-level feature fusion
// ---------------------------------------------------------------------------

template <class S>
struct FusionState {
    Tensor<S> xc;        // compressed multi-level context
    Tensor<S> xe;        // dual-attention enhanced feature
    Tensor<S> gate;      // G, elementwise in (0,1)
    Tensor<S> xe_fused;  // gated fusion of xe and the finest encoder level
    Tensor<S> xf;        // concat(xe_fused, decoder feature)
};

// Compresses all four encoder levels at the finest resolution, enhances them
// with spatial+channel attention, and gates against the raw finest level; the
// decoder feature is concatenated last.
template <class S>
struct GatedMlf {
    Conv2d<S> compress1, compress2;  // FFN over concatenated levels
    Conv2d<S> sp_conv;               // 1 -> 1, spatial attention
    Conv2d<S> ch_conv;               // C1 -> C1 on pooled vector
    Conv2d<S> gate_conv;             // 2*C1 -> C1
    Conv2d<S> out1, out2;            // FFN producing the fused representation

    GatedMlf() = default;
    GatedMlf(const EncoderConfig& cfg, int hidden, Rng& rng) {
        int sum_c = 0;
        for (int wdt : cfg.widths) sum_c += wdt;
        const int c1 = cfg.widths[0];
        compress1 = Conv2d<S>::pointwise(sum_c, hidden, rng);
        compress2 = Conv2d<S>::pointwise(hidden, c1, rng);
        sp_conv = Conv2d<S>(1, 1, 7, {.stride = 1, .pad = 0}, rng);
        ch_conv = Conv2d<S>::pointwise(c1, c1, rng);
        gate_conv = Conv2d<S>::pointwise(2 * c1, c1, rng);
        out1 = Conv2d<S>::pointwise(c1, hidden, rng);
        out2 = Conv2d<S>::pointwise(hidden, c1, rng);
    }

    FusionState<S> forward(const FeaturePyramid<S>& enc, const Tensor<S>& decoder_feature) const {
        enc.require_complete("gated_mlf");
        const auto& x1 = enc.level[0];
        const int h = x1.dim(1), w = x1.dim(2);

        std::vector<Tensor<S>> resized;
        for (const auto& l : enc.level) resized.push_back(bilinear_resize(l, h, w));
        FusionState<S> st;
        st.xc = compress2.forward(gelu(compress1.forward(concat(resized, 0))));

        // replicate-padded so constant context stays constant at the borders
        auto sp = sigmoid(sp_conv.forward(replicate_pad(mean_axis(st.xc, 0), 3)));
        auto ch = sigmoid(ch_conv.forward(global_avg_pool(st.xc)));
        st.xe = mul(sp, mul(ch, st.xc));

        st.gate = sigmoid(gate_conv.forward(concat<S>({x1, st.xe}, 0)));
        auto inv_gate = add_scalar(neg(st.gate), S(1));
        auto mixed = add(mul(st.gate, st.xe), mul(inv_gate, x1));
        st.xe_fused = out2.forward(gelu(out1.forward(mixed)));

        auto feat = bilinear_resize(decoder_feature, h, w);
        st.xf = concat<S>({st.xe_fused, feat}, 0);
        return st;
    }

    void register_params(const std::string& p, ParamRegistry<S>& reg) const {
        compress1.register_params(p + ".compress1", reg, true);
        compress2.register_params(p + ".compress2", reg, true);
        sp_conv.register_params(p + ".sp", reg, true);
        ch_conv.register_params(p + ".ch", reg, true);
        gate_conv.register_params(p + ".gate", reg, true);
        out1.register_params(p + ".out1", reg, true);
        out2.register_params(p + ".out2", reg, true);
    }
};

// ---------------------------------------------------------------------------
// memory bank
// ---------------------------------------------------------------------------

template <class S>
struct MemoryEntry {
    Tensor<S> key;    // key_dim x H x W
    Tensor<S> value;  // val_dim x H x W
    int tag;          // frame index; -1 marks the pseudo entry
};

// FIFO of at most `capacity` entries, eviction strictly oldest-first.
template <class S>
class MemoryBank {
public:
    explicit MemoryBank(int capacity) : capacity_(capacity) {
        if (capacity < 1) throw ShapeError("MemoryBank: capacity must be >= 1");
    }

    bool empty() const { return entries_.empty(); }
    size_t size() const { return entries_.size(); }
    int capacity() const { return capacity_; }

    void push(Tensor<S> key, Tensor<S> value, int tag) {
        if (key.rank() != 3 || value.rank() != 3 || key.dim(1) != value.dim(1) ||
            key.dim(2) != value.dim(2)) {
            throw ShapeError("MemoryBank: key " + shape_str(key.shape()) + " / value " +
                             shape_str(value.shape()) + " maps must align spatially");
        }
        entries_.push_back({std::move(key), std::move(value), tag});
        while (entries_.size() > static_cast<size_t>(capacity_)) entries_.pop_front();
    }

    MemoryEntry<S>& entry(size_t i) { return entries_.at(i); }
    const MemoryEntry<S>& entry(size_t i) const { return entries_.at(i); }

    std::vector<int> tags() const {
        std::vector<int> t;
        for (const auto& e : entries_) t.push_back(e.tag);
        return t;
    }

    void clear() { entries_.clear(); }

private:
    std::deque<MemoryEntry<S>> entries_;
    int capacity_;
};

struct MemoryReadInfo {
    std::vector<int> tags;
    std::vector<double> entry_mean_weight;  // mean attention mass per entry
    double min_row_sum = 0, max_row_sum = 0;
};

template <class S>
struct MemoryDecoderState {
    Tensor<S> hidden;  // undefined until the first step; h_{-1} = 0
    int step = 0;
};

// ---------------------------------------------------------------------------
// temporal memory: read / write / pseudo-init / recurrent decode
// ---------------------------------------------------------------------------

template <class S>
struct TemporalMemory {
    int in_channels = 0, key_dim = 0, val_dim = 0, hidden_dim = 0;
    Conv2d<S> key_proj;    // one projection serves queries and stored keys
    Conv2d<S> value_proj;  // the ValueEncoder; pseudo-init shares it
    Conv2d<S> gru_z, gru_h;
    Conv2d<S> head;

    TemporalMemory() = default;
    TemporalMemory(int in_c, int key_d, int val_d, int hidden_d, Rng& rng)
        : in_channels(in_c), key_dim(key_d), val_dim(val_d), hidden_dim(hidden_d) {
        key_proj = Conv2d<S>::pointwise(in_c, key_d, rng);
        value_proj = Conv2d<S>::pointwise(in_c, val_d, rng);
        const int gru_in = in_c + val_d + hidden_d;
        gru_z = Conv2d<S>(gru_in, hidden_d, 3, {.stride = 1, .pad = 1}, rng);
        gru_h = Conv2d<S>(gru_in, hidden_d, 3, {.stride = 1, .pad = 1}, rng);
        head = Conv2d<S>(hidden_d, 1, 3, {.stride = 1, .pad = 1}, rng);
    }

    Tensor<S> project_query(const Tensor<S>& xf) const { return key_proj.forward(xf); }

    // Scaled dot-product attention of every query token over every stored
    // token across all bank entries.
    Tensor<S> read_with_query(const MemoryBank<S>& bank, const Tensor<S>& q,
                              MemoryReadInfo* info = nullptr) const {
        if (bank.empty()) {
            throw Error("memory_read: bank is empty (pseudo-initialize first)");
        }
        const int h = q.dim(1), w = q.dim(2);
        auto qt = to_tokens(q);  // key_dim x N
        std::vector<Tensor<S>> keys, vals;
        for (size_t i = 0; i < bank.size(); ++i) {
            keys.push_back(to_tokens(bank.entry(i).key));
            vals.push_back(to_tokens(bank.entry(i).value));
        }
        auto k_all = keys.size() == 1 ? keys[0] : concat(keys, 1);
        auto v_all = vals.size() == 1 ? vals[0] : concat(vals, 1);
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(key_dim)));
        auto attn = softmax(mul_scalar(matmul(transpose2(qt), k_all), scale), 1);
        if (info) collect_info(*this, bank, attn, info);
        auto out = matmul(v_all, transpose2(attn));  // val_dim x N
        return to_map(out, h, w);
    }

    Tensor<S> read(const MemoryBank<S>& bank, const Tensor<S>& xf,
                   MemoryReadInfo* info = nullptr) const {
        return read_with_query(bank, project_query(xf), info);
    }

    // Stores the frame's query as the key; the value encodes mask-modulated
    // features.
    void write(MemoryBank<S>& bank, const Tensor<S>& q, const Tensor<S>& xf, const Tensor<S>& p,
               int tag, bool detach = false) const {
        if (p.rank() != 3 || p.dim(0) != 1 || p.dim(1) != xf.dim(1) || p.dim(2) != xf.dim(2)) {
            throw ShapeError("memory_write: mask " + shape_str(p.shape()) +
                             " does not match features " + shape_str(xf.shape()));
        }
        for (S v : p.data()) {
            if (v < S(0) || v > S(1)) {
                throw NumericError("memory_write: mask values must lie in [0,1]");
            }
        }
        auto value = value_proj.forward(mul(xf, p));
        if (detach) {
            bank.push(q.detach(), value.detach(), tag);
        } else {
            bank.push(q, value, tag);
        }
    }

    // Seeds the empty bank from the first frame's own coarse mask. The value
    // projection is the same object the value encoder uses.
    void pseudo_init(MemoryBank<S>& bank, const Tensor<S>& xf0, const Tensor<S>& coarse_prob,
                     bool detach = false) const {
        if (!bank.empty()) {
            throw Error("pseudo_init: bank must be empty");
        }
        auto p = bilinear_resize(coarse_prob, xf0.dim(1), xf0.dim(2));
        auto key = key_proj.forward(xf0);
        auto value = value_proj.forward(mul(xf0, p));
        if (detach) {
            bank.push(key.detach(), value.detach(), -1);
        } else {
            bank.push(key, value, -1);
        }
    }

    // Convolutional gated-recurrent step; returns mask logits at feature
    // resolution and the next hidden state.
    std::pair<Tensor<S>, Tensor<S>> decode(const Tensor<S>& xf, const Tensor<S>& xf_tilde,
                                           MemoryDecoderState<S>& state) const {
        Tensor<S> hidden = state.hidden;
        if (!hidden.defined()) {
            hidden = Tensor<S>::zeros({hidden_dim, xf.dim(1), xf.dim(2)});
        } else if (hidden.shape() != Shape{hidden_dim, xf.dim(1), xf.dim(2)}) {
            throw ShapeError("memory_decode: hidden state " + shape_str(hidden.shape()) +
                             " drifted from feature shape " + shape_str(xf.shape()));
        }
        auto cat = concat<S>({xf, xf_tilde, hidden}, 0);
        auto z = sigmoid(gru_z.forward(cat));
        auto cand = tanh_op(gru_h.forward(cat));
        auto keep = add_scalar(neg(z), S(1));
        auto h_next = add(mul(keep, hidden), mul(z, cand));
        auto logits = head.forward(h_next);
        state.hidden = h_next;
        ++state.step;
        return {logits, h_next};
    }

    void register_params(const std::string& p, ParamRegistry<S>& reg) const {
        key_proj.register_params(p + ".key_proj", reg, true);
        // one canonical entry: Linear_v and the value encoder are one object
        value_proj.register_params(p + ".value_encoder", reg, true);
        gru_z.register_params(p + ".gru_z", reg, true);
        gru_h.register_params(p + ".gru_h", reg, true);
        head.register_params(p + ".head", reg, true);
    }

private:
    static void collect_info(const TemporalMemory& self, const MemoryBank<S>& bank,
                             const Tensor<S>& attn, MemoryReadInfo* info) {
        (void)self;
        const int rows = attn.dim(0);
        const int cols = attn.dim(1);
        info->tags = bank.tags();
        info->entry_mean_weight.assign(bank.size(), 0.0);
        info->min_row_sum = 1e30;
        info->max_row_sum = -1e30;
        const int tokens_per_entry = cols / static_cast<int>(bank.size());
        for (int r = 0; r < rows; ++r) {
            double row = 0;
            for (int c = 0; c < cols; ++c) {
                const double a = attn.at({r, c});
                row += a;
                info->entry_mean_weight[static_cast<size_t>(c / tokens_per_entry)] += a;
            }
            info->min_row_sum = std::min(info->min_row_sum, row);
            info->max_row_sum = std::max(info->max_row_sum, row);
        }
        for (auto& v : info->entry_mean_weight) v /= static_cast<double>(rows);
    }
};

}  // namespace m4
