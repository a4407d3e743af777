#pragma once

#include <iomanip>

#include "m4/model.hpp"

namespace m4 {

struct GradCheckRow {
    std::string op;
    double max_rel_err = 0;
    bool pass = false;
};

namespace gradcheck_detail {

constexpr double kTol = 1e-4;
constexpr double kEps = 1e-5;

inline EncoderConfig tiny_encoder() {
    EncoderConfig cfg;
    cfg.widths = {8, 12, 16, 24};
    cfg.heads = {2, 2, 2, 2};
    return cfg;
}

template <class Fn>
double probe_max(Fn&& loss, std::initializer_list<TensorD*> params) {
    double worst = 0;
    for (TensorD* p : params) {
        worst = std::max(worst, finite_difference_check_param(loss, *p, kEps));
    }
    return worst;
}

inline double check_moe_lora(Rng& rng) {
    auto w0 = TensorD::uniform({16, 8}, -0.5, 0.5, rng);
    auto b0 = TensorD::uniform({16, 1}, -0.1, 0.1, rng);
    LoraMoeLayer<double> layer(w0, b0, 2, 2, rng);
    for (auto& v : layer.b.data()) v = rng.uniform(-0.3, 0.3);
    auto x = TensorD::uniform({8, 16}, -1, 1, rng);
    layer.set_spatial_hint(4, 4);
    auto loss = [&]() {
        auto y = layer.forward(x, Modality::Depth);
        return sum_all(mul(y, y));
    };
    double worst = probe_max(loss, {&layer.a, &layer.b, &layer.depth_group->experts[0].conv.weight,
                                    &layer.fusion_group->experts[2].point.weight,
                                    &layer.depth_group->gate.weight, &x});
    return worst;
}

inline double check_gated_mlf(Rng& rng) {
    auto cfg = tiny_encoder();
    GatedMlf<double> mlf(cfg, 16, rng);
    FeaturePyramid<double> pyr;
    for (int i = 0; i < 4; ++i) {
        int sz = 32 / cfg.strides[static_cast<size_t>(i)];
        pyr.level[static_cast<size_t>(i)] =
            TensorD::uniform({cfg.widths[static_cast<size_t>(i)], sz, sz}, -1, 1, rng);
    }
    auto xd2 = TensorD::uniform({12, 4, 4}, -1, 1, rng);
    auto loss = [&]() {
        auto st = mlf.forward(pyr, xd2);
        return sum_all(mul(st.xf, st.xf));
    };
    return probe_max(loss, {&pyr.level[0], &pyr.level[3], &xd2, &mlf.gate_conv.weight,
                            &mlf.sp_conv.weight, &mlf.ch_conv.weight});
}

inline double check_memory_read(Rng& rng) {
    TemporalMemory<double> mem(6, 4, 4, 4, rng);
    auto xf = TensorD::uniform({6, 4, 4}, -1, 1, rng);
    auto key0 = TensorD::uniform({4, 4, 4}, -1, 1, rng);
    auto val0 = TensorD::uniform({4, 4, 4}, -1, 1, rng);
    auto key1 = TensorD::uniform({4, 4, 4}, -1, 1, rng);
    auto val1 = TensorD::uniform({4, 4, 4}, -1, 1, rng);
    auto loss = [&]() {
        MemoryBank<double> bank(4);
        bank.push(key0, val0, 0);
        bank.push(key1, val1, 1);
        auto y = mem.read(bank, xf);
        return sum_all(mul(y, y));
    };
    return probe_max(loss, {&xf, &key0, &val1, &mem.key_proj.weight});
}

inline double check_memory_write(Rng& rng) {
    TemporalMemory<double> mem(6, 4, 4, 4, rng);
    auto xf = TensorD::uniform({6, 4, 4}, -1, 1, rng);
    auto p = TensorD::uniform({1, 4, 4}, 0.2, 0.8, rng);
    auto query = TensorD::uniform({6, 4, 4}, -1, 1, rng);
    auto loss = [&]() {
        MemoryBank<double> bank(4);
        mem.write(bank, mem.project_query(xf), xf, p, 0);
        auto y = mem.read(bank, query);
        return sum_all(mul(y, y));
    };
    return probe_max(loss, {&xf, &p, &mem.value_proj.weight, &mem.value_proj.bias});
}

inline double check_pseudo_init(Rng& rng) {
    TemporalMemory<double> mem(6, 4, 4, 4, rng);
    auto xf0 = TensorD::uniform({6, 4, 4}, -1, 1, rng);
    auto coarse = TensorD::uniform({1, 4, 4}, 0.2, 0.8, rng);
    auto query = TensorD::uniform({6, 4, 4}, -1, 1, rng);
    auto loss = [&]() {
        MemoryBank<double> bank(4);
        mem.pseudo_init(bank, xf0, coarse);
        auto y = mem.read(bank, query);
        return sum_all(mul(y, y));
    };
    return probe_max(loss, {&xf0, &coarse, &mem.key_proj.weight, &mem.value_proj.weight});
}

inline double check_memory_decode(Rng& rng) {
    TemporalMemory<double> mem(6, 4, 4, 4, rng);
    auto xf0 = TensorD::uniform({6, 4, 4}, -1, 1, rng);
    auto xt0 = TensorD::uniform({4, 4, 4}, -1, 1, rng);
    auto xf1 = TensorD::uniform({6, 4, 4}, -1, 1, rng);
    auto xt1 = TensorD::uniform({4, 4, 4}, -1, 1, rng);
    auto loss = [&]() {
        MemoryDecoderState<double> state;
        mem.decode(xf0, xt0, state);
        auto [logits, h] = mem.decode(xf1, xt1, state);
        return sum_all(mul(logits, logits));
    };
    return probe_max(loss, {&xf0, &xt1, &mem.gru_z.weight, &mem.gru_h.bias, &mem.head.weight});
}

inline double check_structure_loss(Rng& rng) {
    auto gt = TensorD::zeros({1, 8, 8});
    for (auto& v : gt.data()) v = rng.uniform(0, 1) < 0.4 ? 1.0 : 0.0;
    auto logits = TensorD::uniform({1, 8, 8}, -2, 2, rng);
    auto loss = [&]() { return structure_loss(logits, gt); };
    return probe_max(loss, {&logits});
}

inline double check_aux_loss(Rng& rng) {
    auto gt = TensorD::zeros({1, 8, 8});
    for (auto& v : gt.data()) v = rng.uniform(0, 1) < 0.4 ? 1.0 : 0.0;
    DecoderOutputs<double> dec;
    const int sizes[3] = {8, 4, 2};
    for (int i = 0; i < 3; ++i) {
        dec.coarse_logits[static_cast<size_t>(i)] =
            TensorD::uniform({1, sizes[i], sizes[i]}, -2, 2, rng);
        dec.edge_logits[static_cast<size_t>(i)] =
            TensorD::uniform({1, sizes[i], sizes[i]}, -2, 2, rng);
    }
    auto loss = [&]() { return aux_loss(dec, gt); };
    return probe_max(loss, {&dec.coarse_logits[0], &dec.edge_logits[0], &dec.coarse_logits[2],
                            &dec.edge_logits[2]});
}

inline double check_load_balance(Rng& rng) {
    auto imp = TensorD::uniform({3}, 0.5, 2.0, rng);
    auto load = TensorD::uniform({3}, 0.5, 2.0, rng);
    auto loss = [&]() {
        GateStatistics<double> st;
        st.importance = imp;
        st.load_smooth = load;
        st.load_hard = {1, 1, 1};
        st.events = 1;
        return load_balance_loss(st, 1e-2);
    };
    double worst = probe_max(loss, {&imp, &load});

    // and through a live gate forward
    auto w0 = TensorD::uniform({16, 8}, -0.5, 0.5, rng);
    LoraMoeLayer<double> layer(w0, {}, 2, 2, rng);
    auto x = TensorD::uniform({8, 16}, -1, 1, rng);
    layer.set_spatial_hint(4, 4);
    auto gate_loss = [&]() {
        layer.reset_stats();
        layer.forward(x, Modality::Rgb);
        std::vector<const GateStatistics<double>*> sts;
        for (auto* g : layer.all_groups()) sts.push_back(&g->stats);
        return moe_regularizer(sts, 1e-2);
    };
    worst = std::max(worst, probe_max(gate_loss, {&layer.rgb_group->gate.weight,
                                                  &layer.fusion_group->gate.bias}));
    return worst;
}

}  // namespace gradcheck_detail

// Runs the finite-difference suite over every registered novel operation in
// 64-bit. Shapes stay at or below 4x8x8.
inline std::vector<GradCheckRow> run_gradcheck(uint64_t seed = 7) {
    using namespace gradcheck_detail;
    std::vector<std::pair<std::string, double (*)(Rng&)>> ops = {
        {"moe_lora_forward", check_moe_lora},
        {"gated_mlf", check_gated_mlf},
        {"memory_read", check_memory_read},
        {"memory_write", check_memory_write},
        {"pseudo_init", check_pseudo_init},
        {"memory_decode", check_memory_decode},
        {"structure_loss", check_structure_loss},
        {"aux_loss", check_aux_loss},
        {"load_balance_loss", check_load_balance},
    };
    std::vector<GradCheckRow> rows;
    for (auto& [name, fn] : ops) {
        Rng rng(seed + rows.size());
        GradCheckRow row;
        row.op = name;
        row.max_rel_err = fn(rng);
        row.pass = row.max_rel_err < kTol;
        rows.push_back(row);
    }
    return rows;
}

inline std::string gradcheck_table(const std::vector<GradCheckRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(20) << "op" << std::setw(14) << "max_rel_err"
       << "status\n";
    os << std::scientific << std::setprecision(3);
    for (const auto& r : rows) {
        os << std::left << std::setw(20) << r.op << std::setw(14) << r.max_rel_err
           << (r.pass ? "pass" : "FAIL") << '\n';
    }
    return os.str();
}

inline bool gradcheck_all_pass(const std::vector<GradCheckRow>& rows) {
    for (const auto& r : rows) {
        if (!r.pass) return false;
    }
    return true;
}

}  // namespace m4
