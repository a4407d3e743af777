#pragma once

#include <filesystem>
#include <iostream>

#include "m4/config.hpp"
#include "m4/data_synth.hpp"
#include "m4/metrics.hpp"
#include "m4/optimizer.hpp"

namespace m4 {

struct StepLog {
    long long step;
    double total, pred, aux, moe;
};

struct ParamAudit {
    long long frozen = 0;
    long long adapters = 0;
    long long other_trainable = 0;

    double trainable_ratio() const {
        return frozen > 0 ? double(adapters + other_trainable) / double(frozen) : 0.0;
    }
    double adapter_ratio() const { return frozen > 0 ? double(adapters) / double(frozen) : 0.0; }
};

template <class S>
class Trainer {
public:
    explicit Trainer(const RunConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
        cfg_.validate();
        model_ = std::make_unique<Model<S>>(cfg_.model_config(), rng_);
        model_->register_params(registry_);
        typename AdamW<S>::Options opt;
        opt.lr_adapter = cfg_.lr_adapter;
        opt.lr_other = cfg_.lr_other;
        opt.weight_decay = cfg_.weight_decay;
        opt.clip_norm = cfg_.grad_clip;
        opt_ = AdamW<S>(registry_.trainable(), opt);
        for (const auto& e : registry_.entries()) {
            if (!e.trainable) {
                frozen_snapshot_.emplace(e.name,
                                         std::vector<S>(e.tensor.data().begin(), e.tensor.data().end()));
            }
        }
        if (!cfg_.resume.empty()) resume_from(cfg_.resume);
    }

    Model<S>& model() { return *model_; }
    const ParamRegistry<S>& registry() const { return registry_; }
    AdamW<S>& optimizer() { return opt_; }
    long long global_step() const { return step_; }

    ParamAudit audit() const {
        ParamAudit a;
        for (const auto& e : registry_.entries()) {
            if (!e.trainable) {
                a.frozen += e.tensor.numel();
            } else if (e.group == ParamGroup::Adapter) {
                a.adapters += e.tensor.numel();
            } else {
                a.other_trainable += e.tensor.numel();
            }
        }
        return a;
    }

    // Full training loop. Checkpoints per epoch under out_dir, appends the
    // per-step loss log, stops early at max_steps.
    std::vector<StepLog> train(std::ostream* log_stream = nullptr) {
        namespace fs = std::filesystem;
        auto seqs = read_manifest(cfg_.train_root);
        ClipSampler sampler(seqs, cfg_.clip_len, cfg_.seed);
        const long long steps_per_epoch =
            (static_cast<long long>(sampler.windows_per_epoch()) + cfg_.batch_size - 1) /
            cfg_.batch_size;

        fs::create_directories(cfg_.out_dir);
        std::ofstream loss_log(cfg_.out_dir + "/loss_log.csv", std::ios::app);

        std::vector<StepLog> logs;
        const long long start_epoch = step_ / steps_per_epoch;
        for (int epoch = static_cast<int>(start_epoch); epoch < cfg_.epochs; ++epoch) {
            auto order = sampler.epoch(epoch);
            const long long skip_batches = step_ - epoch * steps_per_epoch;
            long long batch_index = 0;
            for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg_.batch_size)) {
                if (batch_index++ < skip_batches) continue;
                std::vector<ClipWindow> batch(
                    order.begin() + static_cast<long long>(off),
                    order.begin() + std::min(order.size(), off + static_cast<size_t>(cfg_.batch_size)));
                auto log = step_once(batch);
                logs.push_back(log);
                const std::string line = std::to_string(log.step) + "," + fmt(log.total) + "," +
                                         fmt(log.pred) + "," + fmt(log.aux) + "," + fmt(log.moe);
                loss_log << line << '\n' << std::flush;
                if (log_stream) (*log_stream) << line << '\n';
                if (cfg_.max_steps > 0 && step_ >= cfg_.max_steps) {
                    verify_frozen();
                    save(checkpoint_path(epoch));
                    return logs;
                }
            }
            verify_frozen();
            save(checkpoint_path(epoch));
        }
        return logs;
    }

    StepLog step_once(const std::vector<ClipWindow>& batch) {
        model_->reset_gate_stats();
        opt_.zero_grad();
        Tape<S> tape;
        Tensor<S> pred_sum, aux_sum;
        long long frames = 0;
        for (const auto& w : batch) {
            auto clip = load_clip<S>(cfg_.train_root, w.sequence, w.start, cfg_.clip_len,
                                     cfg_.input_size);
            apply_depth_mode(clip);
            auto bundles = model_->process_clip(clip.rgb, clip.depth);
            for (size_t t = 0; t < bundles.size(); ++t) {
                auto lp = structure_loss(bundles[t].logits_full, clip.gt[t]);
                auto la = aux_loss(bundles[t].dec, clip.gt[t]);
                pred_sum = pred_sum.defined() ? add(pred_sum, lp) : lp;
                aux_sum = aux_sum.defined() ? add(aux_sum, la) : la;
                ++frames;
            }
        }
        const S inv = static_cast<S>(1.0 / static_cast<double>(frames));
        auto pred = mul_scalar(pred_sum, inv);
        auto aux = mul_scalar(aux_sum, inv);
        auto moe = moe_regularizer(model_->gate_stats(), cfg_.lambda_moe);
        auto total = add(add(pred, aux), moe);

        if (!std::isfinite(static_cast<double>(total.value()))) {
            std::ostringstream os;
            os << "training diverged: L_total is not finite (L_pred=" << pred.value()
               << " L_aux=" << aux.value() << " L_moe=" << moe.value() << " at step " << step_ + 1
               << ")";
            throw NumericError(os.str());
        }
        tape.backward(total);
        opt_.step();
        ++step_;
        return {step_, double(total.value()), double(pred.value()), double(aux.value()),
                double(moe.value())};
    }

    void apply_depth_mode(VideoClip<S>& clip) const {
        if (cfg_.depth_mode == DepthMode::Copy) {
            clip = pseudo_depth(clip, PseudoDepthMode::Copy);
        } else if (cfg_.depth_mode == DepthMode::Black) {
            clip = pseudo_depth(clip, PseudoDepthMode::Black);
        }
    }

    // Streams every sequence under root through the prompt-free pipeline.
    MetricReport evaluate(const std::string& root, int memory_size = 0) {
        auto seqs = read_manifest(root);
        MetricReport report;
        for (const auto& sq : seqs) {
            auto clip = load_clip<S>(root, sq.name, 0, sq.length, cfg_.input_size);
            apply_depth_mode(clip);
            auto bundles = model_->process_clip(clip.rgb, clip.depth,
                                                memory_size > 0 ? memory_size : cfg_.test_memory_size);
            for (size_t t = 0; t < bundles.size(); ++t) {
                report.append(sq.name, clip.frame_indices[t],
                              evaluate_saliency(bundles[t].prob, clip.gt[t]));
            }
        }
        return report;
    }

    void verify_frozen() const {
        for (const auto& e : registry_.entries()) {
            if (e.trainable) continue;
            const auto& snap = frozen_snapshot_.at(e.name);
            const auto cur = e.tensor.data();
            for (size_t i = 0; i < snap.size(); ++i) {
                if (cur[i] != snap[i]) {
                    throw NumericError("frozen trunk parameter changed: " + e.name);
                }
            }
        }
    }

    std::string checkpoint_path(int epoch) const {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "/ckpt_epoch%03d.m4ck", epoch);
        return cfg_.out_dir + buf;
    }

    void save(const std::string& path) const {
        CheckpointMap ck;
        collect_params(registry_, ck);
        opt_.collect_state(ck);
        ck.emplace("__config__", raw_from_text(cfg_.serialize()));
        ck.emplace("__step__", raw_from_i64(step_));
        save_checkpoint(path, ck);
    }

    void load_weights_only(const std::string& path) {
        auto ck = load_checkpoint(path);
        check_architecture(ck);
        apply_params(ck, registry_);
    }

    void resume_from(const std::string& path) {
        auto ck = load_checkpoint(path);
        check_architecture(ck);
        apply_params(ck, registry_);
        opt_.apply_state(ck);
        step_ = i64_entry(ck, "__step__");
    }

private:
    void check_architecture(const CheckpointMap& ck) const {
        auto saved = RunConfig::parse_text(text_entry(ck, "__config__"), "<checkpoint>");
        auto bad = cfg_.architecture_mismatches(saved);
        if (!bad.empty()) {
            std::string list;
            for (const auto& f : bad) list += (list.empty() ? "" : ", ") + f;
            throw DataError("checkpoint/config mismatch in fields: " + list);
        }
    }

    static std::string fmt(double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return buf;
    }

    RunConfig cfg_;
    Rng rng_;
    std::unique_ptr<Model<S>> model_;
    ParamRegistry<S> registry_;
    AdamW<S> opt_;
    std::map<std::string, std::vector<S>> frozen_snapshot_;
    long long step_ = 0;
};

// ---------------------------------------------------------------------------
// inference without ground truth
// ---------------------------------------------------------------------------

// Writes one 8-bit PGM mask per frame; prompt-free (consumes rgb/depth only).
template <class S>
int run_inference(Model<S>& model, const std::string& seq_dir, const std::string& out_dir,
                  int input_size, int memory_size) {
    namespace fs = std::filesystem;
    std::vector<Tensor<S>> rgbs, depths;
    for (int t = 0;; ++t) {
        const std::string rgb_path = seq_dir + "/rgb/" + synth_detail::frame_name(t, "ppm");
        const std::string depth_path = seq_dir + "/depth/" + synth_detail::frame_name(t, "pgm");
        if (!fs::exists(rgb_path)) break;
        if (!fs::exists(depth_path)) {
            throw DataError("infer: missing depth frame " + depth_path);
        }
        auto rgb = synth_detail::image_to_tensor<S>(read_pnm(rgb_path));
        auto depth = synth_detail::image_to_tensor<S>(read_pnm(depth_path));
        rgb = bilinear_resize(rgb, input_size, input_size);
        depth = bilinear_resize(depth, input_size, input_size);
        S lo = depth.data()[0], hi = depth.data()[0];
        for (S v : depth.data()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        auto d3 = Tensor<S>::zeros({3, input_size, input_size});
        const long long hw = static_cast<long long>(input_size) * input_size;
        for (long long i = 0; i < hw; ++i) {
            const S v = hi > lo ? (depth.data()[i] - lo) / (hi - lo) : S(0);
            d3.data()[i] = d3.data()[hw + i] = d3.data()[2 * hw + i] = v;
        }
        rgbs.push_back(rgb.detach());
        depths.push_back(d3);
    }
    if (rgbs.empty()) throw DataError("infer: no frames under " + seq_dir + "/rgb");

    auto bundles = model.process_clip(rgbs, depths, memory_size);
    fs::create_directories(out_dir);
    for (size_t t = 0; t < bundles.size(); ++t) {
        Image img;
        img.width = img.height = input_size;
        img.channels = 1;
        img.pixels.resize(static_cast<size_t>(input_size) * input_size);
        for (size_t i = 0; i < img.pixels.size(); ++i) {
            img.pixels[i] = static_cast<uint8_t>(
                std::lround(std::clamp(double(bundles[t].prob.data()[i]), 0.0, 1.0) * 255.0));
        }
        write_pnm(out_dir + "/" + synth_detail::frame_name(static_cast<int>(t), "pgm"), img);
    }
    return static_cast<int>(bundles.size());
}

// ---------------------------------------------------------------------------
// ablation studies
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string label;
    MetricScores val;
};

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "variant,E,S,F,MAE\n";
    os << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
        os << r.label << ',' << r.val.e << ',' << r.val.s << ',' << r.val.f_max << ','
           << r.val.mae << '\n';
    }
    return os.str();
}

// Re-runs toy training along one study axis and evaluates on the val split.
template <class S>
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::string& study,
                                      std::ostream* log = nullptr) {
    std::vector<std::pair<std::string, RunConfig>> variants;
    auto with = [&](const std::string& label, auto&& tweak) {
        RunConfig v = base;
        tweak(v);
        variants.emplace_back(label, std::move(v));
    };

    if (study == "topk") {
        for (int k : {1, 2, 3}) {
            with("top" + std::to_string(k), [&](RunConfig& v) { v.top_k = k; });
        }
    } else if (study == "cliplen") {
        for (int t : {2, 4, 6}) {
            with("T" + std::to_string(t), [&](RunConfig& v) {
                v.clip_len = t;
                v.test_memory_size = t;
            });
        }
    } else if (study == "feature-level") {
        with("xd1", [](RunConfig& v) { v.mem_feature = MemFeature::D1; });
        with("xd2", [](RunConfig& v) { v.mem_feature = MemFeature::D2; });
        with("both", [](RunConfig& v) { v.mem_feature = MemFeature::Both; });
    } else if (study == "pseudo-depth") {
        with("copy", [](RunConfig& v) { v.depth_mode = DepthMode::Copy; });
        with("black", [](RunConfig& v) { v.depth_mode = DepthMode::Black; });
        with("actual", [](RunConfig& v) { v.depth_mode = DepthMode::Actual; });
    } else if (study == "memory") {
        with("baseline", [](RunConfig& v) {
            v.use_memory = false;
            v.use_gated_mlf = false;
        });
        with("baseline+mem", [](RunConfig& v) {
            v.use_memory = true;
            v.use_gated_mlf = false;
        });
        with("baseline+mem+gmlf", [](RunConfig& v) {
            v.use_memory = true;
            v.use_gated_mlf = true;
        });
    } else {
        throw DataError("ablate: unknown study `" + study +
                        "` (want topk|cliplen|feature-level|pseudo-depth|memory)");
    }

    std::vector<AblationRow> rows;
    for (auto& [label, cfg] : variants) {
        if (log) (*log) << "== ablation variant " << label << '\n';
        RunConfig run = cfg;
        run.out_dir = base.out_dir + "/ablate_" + study + "_" + label;
        Trainer<S> trainer(run);
        trainer.train(nullptr);
        auto report = trainer.evaluate(run.val_root);
        rows.push_back({label, report.overall_mean()});
        if (log) (*log) << ablation_table({rows.back()});
    }
    return rows;
}

}  // namespace m4
