#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "m4/ops.hpp"
#include "m4/pnm_io.hpp"

namespace m4 {

enum class ObjectShape { Square, Disk, LShape };
enum class PseudoDepthMode { Copy, Black };

// Scene recipe for one synthetic sequence. Distractors copy the object's RGB
// appearance but sit at background depth, so depth input genuinely separates
// the target.
struct SceneSpec {
    ObjectShape shape = ObjectShape::Square;
    double vx = 2.0, vy = 0.0;      // px/frame
    double dir_jitter = 0.0;        // sd of per-frame velocity jitter, px
    int object_size = 16;
    double object_depth = 0.9;      // larger = nearer
    double bg_depth_near = 0.5;
    double bg_depth_far = 0.15;
    double min_depth_contrast = 0.3;
    double illumination = 1.0;
    int distractors = 2;
};

template <class S>
struct VideoClip {
    std::vector<Tensor<S>> rgb;    // T x (3xHxW) in [0,1]
    std::vector<Tensor<S>> depth;  // T x (3xHxW), channels identical
    std::vector<Tensor<S>> gt;     // T x (1xHxW) binary
    std::string sequence;
    std::vector<int> frame_indices;

    size_t length() const { return rgb.size(); }
};

namespace synth_detail {

inline std::string frame_name(int i, const char* ext) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d.%s", i, ext);
    return buf;
}

inline bool in_shape(ObjectShape shape, int size, double dy, double dx) {
    switch (shape) {
        case ObjectShape::Square:
            return true;  // the bounding box is the shape
        case ObjectShape::Disk: {
            const double r = size / 2.0;
            const double cy = dy - r + 0.5, cx = dx - r + 0.5;
            return cy * cy + cx * cx <= r * r;
        }
        case ObjectShape::LShape:
            return dx < size * 0.45 || dy > size * 0.55;
    }
    return false;
}

struct ObjectPalette {
    double r, g, b;
};

}  // namespace synth_detail

// Writes rgb/NNNN.ppm, depth/NNNN.pgm, gt/NNNN.pgm for one sequence.
// Byte-identical for identical (spec, length, size, seed).
inline void generate_sequence(const SceneSpec& spec, const std::string& dir, int length, int size,
                              uint64_t seed) {
    namespace fs = std::filesystem;
    if (size % 32 != 0) {
        throw DataError("generate_sequence: size must divide by 32, got " + std::to_string(size));
    }
    if (spec.object_depth - spec.bg_depth_near < spec.min_depth_contrast) {
        throw DataError("generate_sequence: object/background depth contrast below minimum");
    }
    fs::create_directories(dir + "/rgb");
    fs::create_directories(dir + "/depth");
    fs::create_directories(dir + "/gt");

    Rng rng(seed);
    const int s = spec.object_size;
    const double margin = 1.0;
    double y = rng.uniform(margin, size - s - margin);
    double x = rng.uniform(margin, size - s - margin);
    double vy = spec.vy, vx = spec.vx;

    synth_detail::ObjectPalette color{rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95),
                                      rng.uniform(0.55, 0.95)};

    // static background texture: two low-frequency waves plus pixel noise
    const double fy1 = rng.uniform(0.5, 2.0), fx1 = rng.uniform(0.5, 2.0);
    const double ph1 = rng.uniform(0, 6.28), ph2 = rng.uniform(0, 6.28);
    std::vector<double> bg_r(static_cast<size_t>(size) * size);
    std::vector<double> bg_g(bg_r.size()), bg_b(bg_r.size());
    for (int yy = 0; yy < size; ++yy) {
        for (int xx = 0; xx < size; ++xx) {
            const double u = static_cast<double>(yy) / size, v = static_cast<double>(xx) / size;
            double base = 0.28 + 0.10 * std::sin(6.28 * (fy1 * u + fx1 * v) + ph1) +
                          0.06 * std::sin(6.28 * (fx1 * u - fy1 * v) + ph2);
            const size_t i = static_cast<size_t>(yy) * size + xx;
            bg_r[i] = std::clamp((base + rng.uniform(-0.03, 0.03)) * spec.illumination, 0.0, 1.0);
            bg_g[i] = std::clamp((base + rng.uniform(-0.03, 0.03)) * spec.illumination, 0.0, 1.0);
            bg_b[i] = std::clamp((base + rng.uniform(-0.03, 0.03)) * spec.illumination, 0.0, 1.0);
        }
    }

    // static distractors: same color and shape family, background depth
    struct Distractor {
        int y, x, size;
    };
    std::vector<Distractor> distractors;
    for (int d = 0; d < spec.distractors; ++d) {
        const int ds = static_cast<int>(rng.uniform_int(s - 4, s + 4));
        distractors.push_back({static_cast<int>(rng.uniform_int(1, size - ds - 1)),
                               static_cast<int>(rng.uniform_int(1, size - ds - 1)), ds});
    }

    for (int t = 0; t < length; ++t) {
        if (t > 0) {
            if (spec.dir_jitter > 0) {
                vy += rng.normal(0, spec.dir_jitter);
                vx += rng.normal(0, spec.dir_jitter);
            }
            y = std::clamp(y + vy, margin, static_cast<double>(size - s) - margin);
            x = std::clamp(x + vx, margin, static_cast<double>(size - s) - margin);
        }
        const int oy = static_cast<int>(std::lround(y));
        const int ox = static_cast<int>(std::lround(x));

        Image rgb, depth, gt;
        rgb.width = rgb.height = size;
        rgb.channels = 3;
        rgb.pixels.resize(static_cast<size_t>(size) * size * 3);
        depth.width = depth.height = size;
        depth.channels = 1;
        depth.pixels.resize(static_cast<size_t>(size) * size);
        gt = depth;

        for (int yy = 0; yy < size; ++yy) {
            for (int xx = 0; xx < size; ++xx) {
                const size_t i = static_cast<size_t>(yy) * size + xx;
                double r = bg_r[i], g = bg_g[i], b = bg_b[i];
                double d = spec.bg_depth_far +
                           (spec.bg_depth_near - spec.bg_depth_far) * yy / (size - 1.0);
                bool is_obj = false;

                for (const auto& di : distractors) {
                    if (yy >= di.y && yy < di.y + di.size && xx >= di.x && xx < di.x + di.size &&
                        synth_detail::in_shape(spec.shape, di.size, yy - di.y, xx - di.x)) {
                        r = color.r;
                        g = color.g;
                        b = color.b;
                        d += 0.03;  // distractors stay at background depth
                    }
                }
                if (yy >= oy && yy < oy + s && xx >= ox && xx < ox + s &&
                    synth_detail::in_shape(spec.shape, s, yy - oy, xx - ox)) {
                    r = color.r;
                    g = color.g;
                    b = color.b;
                    d = spec.object_depth;
                    is_obj = true;
                }

                rgb.pixels[i * 3 + 0] = static_cast<uint8_t>(std::lround(std::clamp(r, 0.0, 1.0) * 255));
                rgb.pixels[i * 3 + 1] = static_cast<uint8_t>(std::lround(std::clamp(g, 0.0, 1.0) * 255));
                rgb.pixels[i * 3 + 2] = static_cast<uint8_t>(std::lround(std::clamp(b, 0.0, 1.0) * 255));
                depth.pixels[i] = static_cast<uint8_t>(std::lround(std::clamp(d, 0.0, 1.0) * 255));
                gt.pixels[i] = is_obj ? 255 : 0;
            }
        }
        write_pnm(dir + "/rgb/" + synth_detail::frame_name(t, "ppm"), rgb);
        write_pnm(dir + "/depth/" + synth_detail::frame_name(t, "pgm"), depth);
        write_pnm(dir + "/gt/" + synth_detail::frame_name(t, "pgm"), gt);
    }
}

struct SuiteOptions {
    int sequences = 40;
    int length = 8;
    int size = 64;
    uint64_t seed = 7;
};

// One split directory: <root>/seq_NNN/{rgb,depth,gt} plus manifest.txt with
// `sequence length seed` lines.
inline void generate_split(const std::string& root, const SuiteOptions& opt) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    std::ofstream manifest(root + "/manifest.txt");
    if (!manifest) throw DataError("generate_split: cannot write manifest under " + root);
    Rng rng(opt.seed);
    for (int i = 0; i < opt.sequences; ++i) {
        SceneSpec spec;
        const int pick = static_cast<int>(rng.uniform_int(0, 2));
        spec.shape = pick == 0 ? ObjectShape::Square
                               : (pick == 1 ? ObjectShape::Disk : ObjectShape::LShape);
        spec.vx = rng.uniform(-2.5, 2.5);
        spec.vy = rng.uniform(-2.5, 2.5);
        spec.object_size = static_cast<int>(rng.uniform_int(14, 22));
        spec.illumination = rng.uniform(0.8, 1.2);
        spec.distractors = static_cast<int>(rng.uniform_int(1, 3));
        const uint64_t seq_seed = rng.next();
        char name[16];
        std::snprintf(name, sizeof(name), "seq_%03d", i);
        generate_sequence(spec, root + "/" + name, opt.length, opt.size, seq_seed);
        manifest << name << ' ' << opt.length << ' ' << seq_seed << '\n';
    }
}

struct SequenceInfo {
    std::string name;
    int length = 0;
};

inline std::vector<SequenceInfo> read_manifest(const std::string& root) {
    std::ifstream in(root + "/manifest.txt");
    if (!in) throw DataError("read_manifest: missing " + root + "/manifest.txt");
    std::vector<SequenceInfo> seqs;
    std::string name;
    int length;
    uint64_t seed;
    while (in >> name >> length >> seed) seqs.push_back({name, length});
    if (seqs.empty()) throw DataError("read_manifest: empty manifest under " + root);
    return seqs;
}

// ---------------------------------------------------------------------------
// loading
// ---------------------------------------------------------------------------

namespace synth_detail {

template <class S>
Tensor<S> image_to_tensor(const Image& img) {
    auto t = Tensor<S>::zeros({img.channels, img.height, img.width});
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                t.data()[static_cast<size_t>((c * img.height + y) * img.width + x)] =
                    static_cast<S>(img.pixels[img.idx(y, x, c)] / 255.0);
            }
        }
    }
    return t;
}

}  // namespace synth_detail

// Loads frames start..start+count-1, resized to out_size. Depth normalizes
// per frame by (d - min)/(max - min), constant maps to zero, then replicates
// to three channels.
template <class S>
VideoClip<S> load_clip(const std::string& root, const std::string& sequence, int start, int count,
                       int out_size) {
    namespace fs = std::filesystem;
    VideoClip<S> clip;
    clip.sequence = sequence;
    const std::string base = root + "/" + sequence;
    for (int t = start; t < start + count; ++t) {
        const std::string rgb_path = base + "/rgb/" + synth_detail::frame_name(t, "ppm");
        const std::string depth_path = base + "/depth/" + synth_detail::frame_name(t, "pgm");
        const std::string gt_path = base + "/gt/" + synth_detail::frame_name(t, "pgm");
        for (const auto& p : {rgb_path, depth_path, gt_path}) {
            if (!fs::exists(p)) throw DataError("load_clip: missing frame file " + p);
        }
        auto rgb = synth_detail::image_to_tensor<S>(read_pnm(rgb_path));
        auto depth = synth_detail::image_to_tensor<S>(read_pnm(depth_path));
        auto gt = synth_detail::image_to_tensor<S>(read_pnm(gt_path));

        rgb = bilinear_resize(rgb, out_size, out_size);
        depth = bilinear_resize(depth, out_size, out_size);
        gt = bilinear_resize(gt, out_size, out_size);

        S lo = depth.data()[0], hi = depth.data()[0];
        for (S v : depth.data()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        auto depth3 = Tensor<S>::zeros({3, out_size, out_size});
        const long long hw = static_cast<long long>(out_size) * out_size;
        for (long long i = 0; i < hw; ++i) {
            const S v = hi > lo ? (depth.data()[i] - lo) / (hi - lo) : S(0);
            depth3.data()[i] = v;
            depth3.data()[hw + i] = v;
            depth3.data()[2 * hw + i] = v;
        }
        for (auto& v : gt.data()) v = v >= S(0.5) ? S(1) : S(0);

        clip.rgb.push_back(rgb.detach());
        clip.depth.push_back(depth3);
        clip.gt.push_back(gt.detach());
        clip.frame_indices.push_back(t);
    }
    return clip;
}

// Table-2-style depth replacement: grayscale copy of RGB or all zeros.
template <class S>
VideoClip<S> pseudo_depth(const VideoClip<S>& clip, PseudoDepthMode mode) {
    VideoClip<S> out = clip;
    for (size_t t = 0; t < clip.rgb.size(); ++t) {
        const auto& rgb = clip.rgb[t];
        const int h = rgb.dim(1), w = rgb.dim(2);
        auto d = Tensor<S>::zeros({3, h, w});
        if (mode == PseudoDepthMode::Copy) {
            const long long hw = static_cast<long long>(h) * w;
            for (long long i = 0; i < hw; ++i) {
                const S luma = static_cast<S>(0.299) * rgb.data()[i] +
                               static_cast<S>(0.587) * rgb.data()[hw + i] +
                               static_cast<S>(0.114) * rgb.data()[2 * hw + i];
                d.data()[i] = luma;
                d.data()[hw + i] = luma;
                d.data()[2 * hw + i] = luma;
            }
        }
        out.depth[t] = d;
    }
    return out;
}

// ---------------------------------------------------------------------------
// clip sampling
// ---------------------------------------------------------------------------

struct ClipWindow {
    std::string sequence;
    int start = 0;
};

// Every valid T-frame window of every sequence exactly once per epoch, in an
// order that is a pure function of (seed, epoch).
class ClipSampler {
public:
    ClipSampler(const std::vector<SequenceInfo>& seqs, int clip_len, uint64_t seed)
        : seed_(seed) {
        for (const auto& s : seqs) {
            for (int start = 0; start + clip_len <= s.length; ++start) {
                windows_.push_back({s.name, start});
            }
        }
        if (windows_.empty()) {
            throw DataError("ClipSampler: no sequence is long enough for the clip length");
        }
    }

    size_t windows_per_epoch() const { return windows_.size(); }

    std::vector<ClipWindow> epoch(int e) const {
        std::vector<ClipWindow> order = windows_;
        std::mt19937_64 eng(seed_ * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(e) + 1);
        for (size_t i = order.size(); i > 1; --i) {
            std::uniform_int_distribution<size_t> d(0, i - 1);
            std::swap(order[i - 1], order[d(eng)]);
        }
        return order;
    }

private:
    std::vector<ClipWindow> windows_;
    uint64_t seed_;
};

}  // namespace m4
