#pragma once

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "m4/model.hpp"

namespace m4 {

enum class DepthMode { Actual, Copy, Black };

inline const char* depth_mode_name(DepthMode m) {
    switch (m) {
        case DepthMode::Actual: return "actual";
        case DepthMode::Copy: return "copy";
        default: return "black";
    }
}

// Flat `key = value` run configuration. The toy profile (64x64) is what the
// tests and the acceptance suite exercise; 352x352 is the full-scale default.
struct RunConfig {
    // data
    std::string train_root;
    std::string val_root;
    std::string out_dir = "runs";
    std::string resume;

    // model
    int input_size = 352;
    int clip_len = 4;
    int rank = 4;
    int experts_per_group = 3;
    int top_k = 2;
    std::vector<int> widths{16, 32, 64, 128};
    std::vector<int> heads{2, 2, 2, 2};
    int mlf_hidden = 32;
    int key_dim = 16;
    int val_dim = 16;
    int hidden_dim = 16;
    bool use_memory = true;
    bool use_gated_mlf = true;
    MemFeature mem_feature = MemFeature::D2;
    DepthMode depth_mode = DepthMode::Actual;

    // optimization
    double lambda_moe = 1e-2;
    double lr_adapter = 1e-4;
    double lr_other = 1e-3;
    double weight_decay = 5e-4;
    double grad_clip = 5.0;
    int epochs = 50;
    int batch_size = 4;
    long long max_steps = 0;  // 0 = run all epochs

    // misc
    uint64_t seed = 7;
    bool detach_memory = false;
    int test_memory_size = 4;
    bool flip_augment = false;

    void validate() const {
        if (input_size <= 0 || input_size % 32 != 0) {
            throw DataError("config: input_size must be a positive multiple of 32");
        }
        if (clip_len < 1 || rank < 1 || top_k < 1 || batch_size < 1 || epochs < 1) {
            throw DataError("config: sizes and counts must be positive");
        }
        if (experts_per_group != 3) {
            throw DataError("config: experts_per_group is fixed at 3");
        }
        if (top_k > experts_per_group) {
            throw DataError("config: top_k must not exceed experts_per_group");
        }
        if (lr_adapter <= 0 || lr_other <= 0 || weight_decay < 0 || lambda_moe < 0) {
            throw DataError("config: learning rates must be positive");
        }
        if (test_memory_size < 1) {
            throw DataError("config: test_memory_size must be >= 1");
        }
    }

    ModelConfig model_config() const {
        ModelConfig mc;
        mc.encoder.widths = widths;
        mc.encoder.heads = heads;
        mc.input_size = input_size;
        mc.rank = rank;
        mc.top_k = top_k;
        mc.memory_capacity = clip_len;
        mc.mlf_hidden = mlf_hidden;
        mc.key_dim = key_dim;
        mc.val_dim = val_dim;
        mc.hidden_dim = hidden_dim;
        mc.use_memory = use_memory;
        mc.use_gated_mlf = use_gated_mlf;
        mc.mem_feature = mem_feature;
        mc.detach_memory = detach_memory;
        return mc;
    }

    std::string serialize() const {
        std::ostringstream os;
        os << "train_root = " << train_root << "\nval_root = " << val_root
           << "\nout_dir = " << out_dir << "\ninput_size = " << input_size
           << "\nclip_len = " << clip_len << "\nrank = " << rank
           << "\nexperts_per_group = " << experts_per_group << "\ntop_k = " << top_k
           << "\nwidths = " << join(widths) << "\nheads = " << join(heads)
           << "\nmlf_hidden = " << mlf_hidden << "\nkey_dim = " << key_dim
           << "\nval_dim = " << val_dim << "\nhidden_dim = " << hidden_dim
           << "\nuse_memory = " << (use_memory ? "true" : "false")
           << "\nuse_gated_mlf = " << (use_gated_mlf ? "true" : "false")
           << "\nmem_feature = " << mem_feature_name(mem_feature)
           << "\ndepth_mode = " << depth_mode_name(depth_mode)
           << "\nlambda_moe = " << lambda_moe << "\nlr_adapter = " << lr_adapter
           << "\nlr_other = " << lr_other << "\nweight_decay = " << weight_decay
           << "\ngrad_clip = " << grad_clip << "\nepochs = " << epochs
           << "\nbatch_size = " << batch_size << "\nmax_steps = " << max_steps
           << "\nseed = " << seed << "\ndetach_memory = " << (detach_memory ? "true" : "false")
           << "\ntest_memory_size = " << test_memory_size
           << "\nflip_augment = " << (flip_augment ? "true" : "false") << '\n';
        return os.str();
    }

    // Architecture-relevant fields that must agree between a checkpoint and
    // the model it is loaded into.
    std::vector<std::string> architecture_mismatches(const RunConfig& other) const {
        std::vector<std::string> out;
        auto cmp = [&](bool eq, const char* name) {
            if (!eq) out.push_back(name);
        };
        cmp(input_size == other.input_size, "input_size");
        cmp(rank == other.rank, "rank");
        cmp(top_k == other.top_k, "top_k");
        cmp(widths == other.widths, "widths");
        cmp(heads == other.heads, "heads");
        cmp(mlf_hidden == other.mlf_hidden, "mlf_hidden");
        cmp(key_dim == other.key_dim, "key_dim");
        cmp(val_dim == other.val_dim, "val_dim");
        cmp(hidden_dim == other.hidden_dim, "hidden_dim");
        cmp(use_memory == other.use_memory, "use_memory");
        cmp(use_gated_mlf == other.use_gated_mlf, "use_gated_mlf");
        cmp(mem_feature == other.mem_feature, "mem_feature");
        return out;
    }

    static RunConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("config: cannot open " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        auto cfg = parse_text(buf.str(), path);
        if (const char* env = std::getenv("M4_SEED")) {
            cfg.seed = std::strtoull(env, nullptr, 10);
        }
        return cfg;
    }

    static RunConfig parse_text(const std::string& text, const std::string& origin = "<inline>") {
        RunConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                const char* ws = " \t\r";
                auto b = s.find_first_not_of(ws);
                if (b == std::string::npos) return std::string();
                auto e = s.find_last_not_of(ws);
                return s.substr(b, e - b + 1);
            };
            std::string t = trim(line);
            if (t.empty()) continue;
            auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw DataError("config: " + origin + ":" + std::to_string(lineno) +
                                ": expected `key = value`");
            }
            std::string key = trim(t.substr(0, eq));
            std::string val = trim(t.substr(eq + 1));
            try {
                cfg.apply(key, val);
            } catch (const DataError&) {
                throw;
            } catch (const std::exception& e) {
                throw DataError("config: " + origin + ":" + std::to_string(lineno) + ": bad value for `" +
                                key + "`: " + e.what());
            }
        }
        cfg.validate();
        return cfg;
    }

private:
    static std::string join(const std::vector<int>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(v[i]);
        }
        return s;
    }

    static std::vector<int> parse_ints(const std::string& v) {
        std::vector<int> out;
        std::istringstream is(v);
        std::string tok;
        while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
        return out;
    }

    static bool parse_bool(const std::string& v) {
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw DataError("config: not a boolean: " + v);
    }

    void apply(const std::string& key, const std::string& val) {
        if (key == "train_root") train_root = val;
        else if (key == "val_root") val_root = val;
        else if (key == "out_dir") out_dir = val;
        else if (key == "resume") resume = val;
        else if (key == "input_size") input_size = std::stoi(val);
        else if (key == "clip_len") clip_len = std::stoi(val);
        else if (key == "rank") rank = std::stoi(val);
        else if (key == "experts_per_group") experts_per_group = std::stoi(val);
        else if (key == "top_k") top_k = std::stoi(val);
        else if (key == "widths") widths = parse_ints(val);
        else if (key == "heads") heads = parse_ints(val);
        else if (key == "mlf_hidden") mlf_hidden = std::stoi(val);
        else if (key == "key_dim") key_dim = std::stoi(val);
        else if (key == "val_dim") val_dim = std::stoi(val);
        else if (key == "hidden_dim") hidden_dim = std::stoi(val);
        else if (key == "use_memory") use_memory = parse_bool(val);
        else if (key == "use_gated_mlf") use_gated_mlf = parse_bool(val);
        else if (key == "mem_feature") {
            if (val == "d1") mem_feature = MemFeature::D1;
            else if (val == "d2") mem_feature = MemFeature::D2;
            else if (val == "both") mem_feature = MemFeature::Both;
            else throw DataError("config: mem_feature must be d1|d2|both");
        } else if (key == "depth_mode") {
            if (val == "actual") depth_mode = DepthMode::Actual;
            else if (val == "copy") depth_mode = DepthMode::Copy;
            else if (val == "black") depth_mode = DepthMode::Black;
            else throw DataError("config: depth_mode must be actual|copy|black");
        } else if (key == "lambda_moe") lambda_moe = std::stod(val);
        else if (key == "lr_adapter") lr_adapter = std::stod(val);
        else if (key == "lr_other") lr_other = std::stod(val);
        else if (key == "weight_decay") weight_decay = std::stod(val);
        else if (key == "grad_clip") grad_clip = std::stod(val);
        else if (key == "epochs") epochs = std::stoi(val);
        else if (key == "batch_size") batch_size = std::stoi(val);
        else if (key == "max_steps") max_steps = std::stoll(val);
        else if (key == "seed") seed = std::strtoull(val.c_str(), nullptr, 10);
        else if (key == "detach_memory") detach_memory = parse_bool(val);
        else if (key == "test_memory_size") test_memory_size = std::stoi(val);
        else if (key == "flip_augment") flip_augment = parse_bool(val);
        else throw DataError("config: unknown key `" + key + "`");
    }
};

}  // namespace m4
