#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "m4/ops.hpp"

namespace m4 {

// Optimizer grouping: adapter parameters train at their own learning rate.
enum class ParamGroup { Adapter, Other };

template <class S>
struct ParamEntry {
    std::string name;
    Tensor<S> tensor;
    bool trainable = true;
    ParamGroup group = ParamGroup::Other;
};

// Flat registry of named parameters. Shared parameters (same underlying
// storage registered twice) keep the first name as canonical and are listed
// once, so checkpoints serialize them once and audits count them once.
template <class S>
class ParamRegistry {
public:
    void add(const std::string& name, const Tensor<S>& t, bool trainable,
             ParamGroup group = ParamGroup::Other) {
        auto* node = t.node();
        auto it = index_.find(node);
        if (it != index_.end()) return;  // shared parameter, canonical name wins
        index_.emplace(node, entries_.size());
        entries_.push_back({name, t, trainable, group});
    }

    const std::vector<ParamEntry<S>>& entries() const { return entries_; }

    std::vector<ParamEntry<S>> trainable() const {
        std::vector<ParamEntry<S>> v;
        for (const auto& e : entries_) {
            if (e.trainable) v.push_back(e);
        }
        return v;
    }

    long long count(bool trainable_only) const {
        long long n = 0;
        for (const auto& e : entries_) {
            if (!trainable_only || e.trainable) n += e.tensor.numel();
        }
        return n;
    }

    const ParamEntry<S>* find(const std::string& name) const {
        for (const auto& e : entries_) {
            if (e.name == name) return &e;
        }
        return nullptr;
    }

private:
    std::vector<ParamEntry<S>> entries_;
    std::unordered_map<NodeT<S>*, size_t> index_;
};

// ---------------------------------------------------------------------------
// layers
//
// Features are column-token matrices (channels x tokens) for linear layers
// and CxHxW maps for convolutional ones.
// ---------------------------------------------------------------------------

template <class S>
struct Linear {
    Tensor<S> weight;  // out x in
    Tensor<S> bias;    // out x 1, optional

    Linear() = default;
    Linear(int in, int out, Rng& rng, bool with_bias = true) {
        double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight = Tensor<S>::uniform({out, in}, -bound, bound, rng);
        weight.set_requires_grad();
        if (with_bias) {
            bias = Tensor<S>::uniform({out, 1}, -bound, bound, rng);
            bias.set_requires_grad();
        }
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        auto y = matmul(weight, x);
        return bias.defined() ? add(y, bias) : y;
    }

    void register_params(const std::string& prefix, ParamRegistry<S>& reg, bool trainable,
                         ParamGroup group = ParamGroup::Other) const {
        reg.add(prefix + ".weight", weight, trainable, group);
        if (bias.defined()) reg.add(prefix + ".bias", bias, trainable, group);
    }
};

template <class S>
struct Conv2d {
    Tensor<S> weight;  // out x in/groups x k x k
    Tensor<S> bias;    // out, optional
    ConvOpts opts;

    Conv2d() = default;
    Conv2d(int in, int out, int k, ConvOpts o, Rng& rng, bool with_bias = true) : opts(o) {
        int fan_in = (in / o.groups) * k * k;
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        weight = Tensor<S>::uniform({out, in / o.groups, k, k}, -bound, bound, rng);
        weight.set_requires_grad();
        if (with_bias) {
            bias = Tensor<S>::uniform({out}, -bound, bound, rng);
            bias.set_requires_grad();
        }
    }

    static Conv2d pointwise(int in, int out, Rng& rng, bool with_bias = true) {
        return Conv2d(in, out, 1, ConvOpts{}, rng, with_bias);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return conv2d(x, weight, bias, opts); }

    void zero_() {
        for (auto& v : weight.data()) v = S(0);
        if (bias.defined()) {
            for (auto& v : bias.data()) v = S(0);
        }
    }

    void register_params(const std::string& prefix, ParamRegistry<S>& reg, bool trainable,
                         ParamGroup group = ParamGroup::Other) const {
        reg.add(prefix + ".weight", weight, trainable, group);
        if (bias.defined()) reg.add(prefix + ".bias", bias, trainable, group);
    }
};

// Normalizes across axis 0 (channels) per position, with per-channel affine.
template <class S>
struct LayerNorm {
    Tensor<S> gain;
    Tensor<S> bias;
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(int channels, int rank) {
        Shape s(static_cast<size_t>(rank), 1);
        s[0] = channels;
        gain = Tensor<S>::ones(s);
        gain.set_requires_grad();
        bias = Tensor<S>::zeros(s);
        bias.set_requires_grad();
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        return layer_norm_axis0(x, gain, bias, static_cast<S>(eps));
    }

    void register_params(const std::string& prefix, ParamRegistry<S>& reg, bool trainable,
                         ParamGroup group = ParamGroup::Other) const {
        reg.add(prefix + ".gain", gain, trainable, group);
        reg.add(prefix + ".bias", bias, trainable, group);
    }
};

// flattens CxHxW to channels x tokens and back
template <class S>
Tensor<S> to_tokens(const Tensor<S>& map) {
    return reshape(map, {map.dim(0), map.dim(1) * map.dim(2)});
}

template <class S>
Tensor<S> to_map(const Tensor<S>& tokens, int h, int w) {
    return reshape(tokens, {tokens.dim(0), h, w});
}

}  // namespace m4
