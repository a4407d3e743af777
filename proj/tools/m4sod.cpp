// m4sod: prompt-free RGB-D video salient object detection at desk scale.
//
// Subcommands: synth, train, eval, infer, gradcheck, ablate.
// Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.

#include <CLI11.hpp>
#include <iostream>

#include "m4/gradcheck.hpp"
#include "m4/train.hpp"

namespace {

using namespace m4;

int cmd_synth(const std::string& out, int train_n, int val_n, int frames, int size,
              uint64_t seed) {
    SuiteOptions train_opt{train_n, frames, size, seed};
    SuiteOptions val_opt{val_n, frames, size, seed + 1};
    generate_split(out + "/train", train_opt);
    generate_split(out + "/val", val_opt);
    std::cout << "wrote " << train_n << " train and " << val_n << " val sequences under " << out
              << "\n";
    return 0;
}

int cmd_train(const std::string& config_path) {
    auto cfg = RunConfig::parse_file(config_path);
    Trainer<float> trainer(cfg);
    auto audit = trainer.audit();
    std::cout << "parameters: frozen=" << audit.frozen << " adapters=" << audit.adapters
              << " other_trainable=" << audit.other_trainable << " trainable/frozen ratio="
              << audit.trainable_ratio() << " adapter/frozen ratio=" << audit.adapter_ratio()
              << "\n";
    std::cout << "step,L_total,L_pred,L_aux,L_moe\n";
    auto logs = trainer.train(&std::cout);
    if (!logs.empty()) {
        std::cout << "finished at step " << logs.back().step << ", final L_total "
                  << logs.back().total << "\n";
    }
    if (!cfg.val_root.empty()) {
        auto report = trainer.evaluate(cfg.val_root);
        auto m = report.overall_mean();
        std::cout << "val: E=" << m.e << " S=" << m.s << " F=" << m.f_max << " MAE=" << m.mae
                  << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_root, const std::string& out_path,
             int mem_override) {
    auto ck = load_checkpoint(ckpt);
    auto cfg = RunConfig::parse_text(text_entry(ck, "__config__"), "<checkpoint>");
    if (mem_override > 0) cfg.test_memory_size = mem_override;
    Trainer<float> trainer(cfg);
    trainer.load_weights_only(ckpt);
    auto report = trainer.evaluate(data_root);
    std::ofstream out(out_path);
    if (!out) throw DataError("eval: cannot write report to " + out_path);
    report.write_csv(out);
    auto m = report.overall_mean();
    std::cout << "E=" << m.e << " S=" << m.s << " F=" << m.f_max << " MAE=" << m.mae
              << (m.degenerate ? " (degenerate frames present)" : "") << "\n";
    std::cout << "report written to " << out_path << "\n";
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& seq_dir, const std::string& out_dir,
              int mem_override) {
    auto ck = load_checkpoint(ckpt);
    auto cfg = RunConfig::parse_text(text_entry(ck, "__config__"), "<checkpoint>");
    if (mem_override > 0) cfg.test_memory_size = mem_override;
    Trainer<float> trainer(cfg);
    trainer.load_weights_only(ckpt);
    int n = run_inference(trainer.model(), seq_dir, out_dir, cfg.input_size,
                          cfg.test_memory_size);
    std::cout << "wrote " << n << " masks to " << out_dir << "\n";
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    auto rows = run_gradcheck(seed);
    std::cout << gradcheck_table(rows);
    if (!gradcheck_all_pass(rows)) {
        std::cerr << "gradient check failed\n";
        return 3;
    }
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& study) {
    auto cfg = RunConfig::parse_file(config_path);
    auto rows = run_ablation<float>(cfg, study, &std::cout);
    std::cout << ablation_table(rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prompt-free RGB-D video salient object detection"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic RGB-D video suite");
    std::string synth_out = "data";
    int synth_train = 40, synth_val = 10, synth_frames = 8, synth_size = 64;
    uint64_t synth_seed = 7;
    synth->add_option("--out", synth_out, "output root");
    synth->add_option("--train", synth_train, "train sequences");
    synth->add_option("--val", synth_val, "val sequences");
    synth->add_option("--frames", synth_frames, "frames per sequence");
    synth->add_option("--size", synth_size, "frame size (multiple of 32)");
    synth->add_option("--seed", synth_seed, "generator seed");

    auto* train = app.add_subcommand("train", "train from a config file");
    std::string train_config;
    train->add_option("--config", train_config, "config file")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string eval_ckpt, eval_data, eval_out = "metrics.csv";
    int eval_mem = 0;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--data", eval_data, "dataset root (with manifest.txt)")->required();
    eval->add_option("--out", eval_out, "metric report path");
    eval->add_option("--mem", eval_mem, "test-time memory size override");

    auto* infer = app.add_subcommand("infer", "run prompt-free inference on one sequence");
    std::string infer_ckpt, infer_seq, infer_out;
    int infer_mem = 0;
    infer->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
    infer->add_option("--seq", infer_seq, "sequence directory (rgb/ + depth/)")->required();
    infer->add_option("--out", infer_out, "output directory for PGM masks")->required();
    infer->add_option("--mem", infer_mem, "test-time memory size override");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the novel ops");
    uint64_t gc_seed = 7;
    gradcheck->add_option("--seed", gc_seed, "probe seed");

    auto* ablate = app.add_subcommand("ablate", "re-run toy training along a study axis");
    std::string ab_config, ab_study;
    ablate->add_option("--config", ab_config, "config file")->required();
    ablate->add_option("--study", ab_study, "topk|cliplen|feature-level|pseudo-depth|memory")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) {
            return cmd_synth(synth_out, synth_train, synth_val, synth_frames, synth_size,
                             synth_seed);
        }
        if (train->parsed()) return cmd_train(train_config);
        if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_out, eval_mem);
        if (infer->parsed()) return cmd_infer(infer_ckpt, infer_seq, infer_out, infer_mem);
        if (gradcheck->parsed()) return cmd_gradcheck(gc_seed);
        if (ablate->parsed()) return cmd_ablate(ab_config, ab_study);
    } catch (const m4::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const m4::Error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
