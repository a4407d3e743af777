#pragma once

#include "m4/checkpoint.hpp"

namespace m4 {

// AdamW with decoupled weight decay, two learning-rate groups (adapter vs
// everything else) and global-norm gradient clipping.
template <class S>
class AdamW {
public:
    struct Options {
        double lr_adapter = 1e-4;
        double lr_other = 1e-3;
        double weight_decay = 5e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 5.0;
    };

    struct Slot {
        std::string name;
        Tensor<S> param;
        ParamGroup group;
        std::vector<S> m, v;
    };

    AdamW() = default;
    AdamW(const std::vector<ParamEntry<S>>& trainable, Options opt) : opt_(opt) {
        for (const auto& e : trainable) {
            Slot s;
            s.name = e.name;
            s.param = e.tensor;
            s.group = e.group;
            s.m.assign(static_cast<size_t>(e.tensor.numel()), S(0));
            s.v.assign(static_cast<size_t>(e.tensor.numel()), S(0));
            slots_.push_back(std::move(s));
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    double grad_norm() const {
        double acc = 0;
        for (const auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            for (S g : const_cast<Tensor<S>&>(s.param).grad_data()) {
                acc += static_cast<double>(g) * g;
            }
        }
        return std::sqrt(acc);
    }

    void step() {
        ++t_;
        const double norm = grad_norm();
        const double scale = norm > opt_.clip_norm && norm > 0 ? opt_.clip_norm / norm : 1.0;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (auto& s : slots_) {
            const double lr = s.group == ParamGroup::Adapter ? opt_.lr_adapter : opt_.lr_other;
            auto p = s.param.data();
            auto g = s.param.grad_data();
            for (size_t i = 0; i < p.size(); ++i) {
                const double gi = static_cast<double>(g[i]) * scale;
                s.m[i] = static_cast<S>(opt_.beta1 * s.m[i] + (1 - opt_.beta1) * gi);
                s.v[i] = static_cast<S>(opt_.beta2 * s.v[i] + (1 - opt_.beta2) * gi * gi);
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                p[i] = static_cast<S>(p[i] - lr * (mhat / (std::sqrt(vhat) + opt_.eps) +
                                                   opt_.weight_decay * p[i]));
            }
        }
    }

    long long step_count() const { return t_; }
    void set_step_count(long long t) { t_ = t; }
    const std::vector<Slot>& slots() const { return slots_; }
    const Options& options() const { return opt_; }

    void collect_state(CheckpointMap& out) const {
        for (const auto& s : slots_) {
            out.emplace("opt.m." + s.name, raw_from_values(s.param.shape(), s.m));
            out.emplace("opt.v." + s.name, raw_from_values(s.param.shape(), s.v));
        }
        out.emplace("opt.step", raw_from_i64(t_));
    }

    void apply_state(const CheckpointMap& ck) {
        for (auto& s : slots_) {
            for (auto* which : {&s.m, &s.v}) {
                const std::string name =
                    std::string(which == &s.m ? "opt.m." : "opt.v.") + s.name;
                auto it = ck.find(name);
                if (it == ck.end()) throw DataError("checkpoint: missing optimizer state " + name);
                if (it->second.numel() != static_cast<long long>(which->size())) {
                    throw DataError("checkpoint: optimizer state size mismatch for " + name);
                }
                std::memcpy(which->data(), it->second.bytes.data(), it->second.bytes.size());
            }
        }
        t_ = i64_entry(ck, "opt.step");
    }

private:
    Options opt_;
    std::vector<Slot> slots_;
    long long t_ = 0;
};

}  // namespace m4
