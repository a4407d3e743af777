#pragma once

#include <iomanip>
#include <ostream>

#include "m4/tensor.hpp"

namespace m4 {

struct MetricScores {
    double e = 0;       // alignment measure, mean over 255 thresholds
    double s = 0;       // structure measure, alpha = 0.5
    double f_max = 0;   // headline F: max over 255 thresholds, beta^2 = 0.3
    double f_mean = 0;  // mean-F over the same sweep
    double mae = 0;
    bool degenerate = false;  // all-0/all-1 gt fallback was used
};

namespace metrics_detail {

constexpr double kEps = 1e-20;
constexpr int kThresholds = 255;

inline double threshold_at(int j) { return static_cast<double>(j) / 255.0; }

struct MeanVar {
    double mean = 0, var = 0;  // population variance
    long long n = 0;
};

inline MeanVar mean_var(const std::vector<double>& v) {
    MeanVar r;
    r.n = static_cast<long long>(v.size());
    if (r.n == 0) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(r.n);
    for (double x : v) r.var += (x - r.mean) * (x - r.mean);
    r.var /= static_cast<double>(r.n);
    return r;
}

// SSIM-style block similarity with population statistics.
inline double block_similarity(const std::vector<double>& p, const std::vector<double>& g) {
    auto sp = mean_var(p), sg = mean_var(g);
    double cov = 0;
    for (size_t i = 0; i < p.size(); ++i) cov += (p[i] - sp.mean) * (g[i] - sg.mean);
    cov /= static_cast<double>(p.size());
    const double alpha = 4.0 * sp.mean * sg.mean * cov;
    const double beta = (sp.mean * sp.mean + sg.mean * sg.mean) * (sp.var + sg.var);
    if (alpha != 0.0) return alpha / (beta + kEps);
    return beta == 0.0 ? 1.0 : 0.0;
}

inline double object_term(const std::vector<double>& vals) {
    auto mv = mean_var(vals);
    const double sd = std::sqrt(mv.var);
    return 2.0 * mv.mean / (mv.mean * mv.mean + 1.0 + sd + kEps);
}

}  // namespace metrics_detail

// All four saliency metrics on one prediction/gt pair. pred must be in
// [0,1], gt strictly binary and the same shape.
inline MetricScores evaluate_saliency(const std::vector<double>& pred,
                                      const std::vector<double>& gt, int h, int w) {
    using namespace metrics_detail;
    const long long n = static_cast<long long>(h) * w;
    if (static_cast<long long>(pred.size()) != n || static_cast<long long>(gt.size()) != n) {
        throw ShapeError("evaluate_saliency: map size mismatch");
    }
    long long fg = 0;
    for (long long i = 0; i < n; ++i) {
        if (pred[static_cast<size_t>(i)] < 0.0 || pred[static_cast<size_t>(i)] > 1.0) {
            throw DataError("evaluate_saliency: prediction outside [0,1]");
        }
        if (gt[static_cast<size_t>(i)] != 0.0 && gt[static_cast<size_t>(i)] != 1.0) {
            throw DataError("evaluate_saliency: ground truth must be binary");
        }
        fg += gt[static_cast<size_t>(i)] == 1.0 ? 1 : 0;
    }

    MetricScores out;

    // --- MAE
    double mae = 0;
    for (long long i = 0; i < n; ++i) mae += std::abs(pred[static_cast<size_t>(i)] - gt[static_cast<size_t>(i)]);
    out.mae = mae / static_cast<double>(n);

    // --- threshold sweep for F and E
    const double beta2 = 0.3;
    double f_best = 0, f_acc = 0, e_acc = 0;
    for (int j = 0; j < kThresholds; ++j) {
        const double th = threshold_at(j);
        long long tp = 0, fp = 0, bin_cnt = 0;
        for (long long i = 0; i < n; ++i) {
            const bool b = pred[static_cast<size_t>(i)] > th;
            if (!b) continue;
            ++bin_cnt;
            if (gt[static_cast<size_t>(i)] == 1.0) {
                ++tp;
            } else {
                ++fp;
            }
        }
        if (fg > 0) {
            const double prec = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
            const double rec = static_cast<double>(tp) / fg;
            const double denom = beta2 * prec + rec;
            const double f = denom > 0 ? (1 + beta2) * prec * rec / denom : 0.0;
            f_best = std::max(f_best, f);
            f_acc += f;
        }

        double e_sum = 0;
        if (fg == 0) {
            e_sum = static_cast<double>(n - bin_cnt);
        } else if (fg == n) {
            e_sum = static_cast<double>(bin_cnt);
        } else {
            const double mu_g = static_cast<double>(fg) / n;
            const double mu_p = static_cast<double>(bin_cnt) / n;
            // binary maps only have four pixel classes
            const double cls_g[2] = {0.0 - mu_g, 1.0 - mu_g};
            const double cls_p[2] = {0.0 - mu_p, 1.0 - mu_p};
            long long cnt[2][2] = {{0, 0}, {0, 0}};
            for (long long i = 0; i < n; ++i) {
                const int gi = gt[static_cast<size_t>(i)] == 1.0 ? 1 : 0;
                const int pi = pred[static_cast<size_t>(i)] > th ? 1 : 0;
                ++cnt[gi][pi];
            }
            for (int gi = 0; gi < 2; ++gi) {
                for (int pi = 0; pi < 2; ++pi) {
                    if (cnt[gi][pi] == 0) continue;
                    const double a = cls_g[gi], b = cls_p[pi];
                    const double align = 2.0 * a * b / (a * a + b * b + kEps);
                    const double enh = (align + 1.0) * (align + 1.0) / 4.0;
                    e_sum += enh * static_cast<double>(cnt[gi][pi]);
                }
            }
        }
        e_acc += e_sum / static_cast<double>(n);
    }
    out.f_max = fg > 0 ? f_best : 0.0;
    out.f_mean = fg > 0 ? f_acc / kThresholds : 0.0;
    out.e = e_acc / kThresholds;
    if (fg == 0 || fg == n) out.degenerate = true;

    // --- S-measure
    double mean_pred = 0;
    for (double v : pred) mean_pred += v;
    mean_pred /= static_cast<double>(n);
    if (fg == 0) {
        out.s = 1.0 - mean_pred;
        return out;
    }
    if (fg == n) {
        out.s = mean_pred;
        return out;
    }

    const double u = static_cast<double>(fg) / n;
    std::vector<double> fg_vals, bg_vals;
    fg_vals.reserve(static_cast<size_t>(fg));
    bg_vals.reserve(static_cast<size_t>(n - fg));
    double cy = 0, cx = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            if (gt[i] == 1.0) {
                fg_vals.push_back(pred[i]);
                cy += y;
                cx += x;
            } else {
                bg_vals.push_back(1.0 - pred[i]);
            }
        }
    }
    const double s_object = u * object_term(fg_vals) + (1.0 - u) * object_term(bg_vals);

    cy /= static_cast<double>(fg);
    cx /= static_cast<double>(fg);
    const int cut_y = std::clamp(static_cast<int>(std::floor(cy + 0.5)) + 1, 1, h - 1);
    const int cut_x = std::clamp(static_cast<int>(std::floor(cx + 0.5)) + 1, 1, w - 1);

    double s_region = 0;
    const int ys[3] = {0, cut_y, h};
    const int xs[3] = {0, cut_x, w};
    for (int by = 0; by < 2; ++by) {
        for (int bx = 0; bx < 2; ++bx) {
            std::vector<double> pb, gb;
            for (int y = ys[by]; y < ys[by + 1]; ++y) {
                for (int x = xs[bx]; x < xs[bx + 1]; ++x) {
                    const size_t i = static_cast<size_t>(y) * w + x;
                    pb.push_back(pred[i]);
                    gb.push_back(gt[i]);
                }
            }
            const double weight = static_cast<double>(pb.size()) / static_cast<double>(n);
            s_region += weight * block_similarity(pb, gb);
        }
    }
    out.s = std::max(0.0, 0.5 * s_object + 0.5 * s_region);
    return out;
}

template <class S>
MetricScores evaluate_saliency(const Tensor<S>& pred, const Tensor<S>& gt) {
    if (pred.shape() != gt.shape()) {
        throw ShapeError("evaluate_saliency: pred " + shape_str(pred.shape()) + " vs gt " +
                         shape_str(gt.shape()));
    }
    int h, w;
    if (pred.rank() == 3 && pred.dim(0) == 1) {
        h = pred.dim(1);
        w = pred.dim(2);
    } else if (pred.rank() == 2) {
        h = pred.dim(0);
        w = pred.dim(1);
    } else {
        throw ShapeError("evaluate_saliency: expected 1xHxW or HxW, got " + shape_str(pred.shape()));
    }
    std::vector<double> p(pred.data().begin(), pred.data().end());
    std::vector<double> g(gt.data().begin(), gt.data().end());
    return evaluate_saliency(p, g, h, w);
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

// Per-frame rows plus one mean row per sequence; machine format
// `sequence,frame,E,S,F,MAE`.
struct MetricReport {
    struct Row {
        std::string sequence;
        int frame;
        MetricScores scores;
    };
    std::vector<Row> rows;

    void append(const std::string& sequence, int frame, const MetricScores& m) {
        rows.push_back({sequence, frame, m});
    }

    std::vector<std::string> sequences() const {
        std::vector<std::string> out;
        for (const auto& r : rows) {
            if (out.empty() || out.back() != r.sequence) {
                bool seen = false;
                for (const auto& s : out) seen = seen || s == r.sequence;
                if (!seen) out.push_back(r.sequence);
            }
        }
        return out;
    }

    MetricScores sequence_mean(const std::string& seq) const {
        MetricScores acc;
        int n = 0;
        for (const auto& r : rows) {
            if (r.sequence != seq) continue;
            acc.e += r.scores.e;
            acc.s += r.scores.s;
            acc.f_max += r.scores.f_max;
            acc.f_mean += r.scores.f_mean;
            acc.mae += r.scores.mae;
            acc.degenerate = acc.degenerate || r.scores.degenerate;
            ++n;
        }
        if (n > 0) {
            acc.e /= n;
            acc.s /= n;
            acc.f_max /= n;
            acc.f_mean /= n;
            acc.mae /= n;
        }
        return acc;
    }

    MetricScores overall_mean() const {
        MetricScores acc;
        for (const auto& r : rows) {
            acc.e += r.scores.e;
            acc.s += r.scores.s;
            acc.f_max += r.scores.f_max;
            acc.f_mean += r.scores.f_mean;
            acc.mae += r.scores.mae;
            acc.degenerate = acc.degenerate || r.scores.degenerate;
        }
        if (!rows.empty()) {
            const double n = static_cast<double>(rows.size());
            acc.e /= n;
            acc.s /= n;
            acc.f_max /= n;
            acc.f_mean /= n;
            acc.mae /= n;
        }
        return acc;
    }

    // Data lines only (comments aside): one per frame plus one mean per
    // sequence.
    void write_csv(std::ostream& os) const {
        os << "# sequence,frame,E,S,F,MAE\n";
        os << "# F column is max-F over 255 thresholds; E is mean over thresholds\n";
        os << std::fixed << std::setprecision(6);
        for (const auto& seq : sequences()) {
            for (const auto& r : rows) {
                if (r.sequence != seq) continue;
                os << r.sequence << ',' << r.frame << ',' << r.scores.e << ',' << r.scores.s << ','
                   << r.scores.f_max << ',' << r.scores.mae;
                if (r.scores.degenerate) os << ",degenerate";
                os << '\n';
            }
            auto m = sequence_mean(seq);
            os << seq << ",mean," << m.e << ',' << m.s << ',' << m.f_max << ',' << m.mae << '\n';
        }
    }
};

}  // namespace m4
