// Naive per-pixel reference implementations of the saliency metrics.
// Test-tree oracle only; deliberately independent of m4/metrics.hpp.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace refm {

constexpr double kEps = 1e-20;

inline double mae(const std::vector<double>& p, const std::vector<double>& g) {
    double acc = 0;
    for (size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - g[i]);
    return acc / p.size();
}

inline void f_measures(const std::vector<double>& p, const std::vector<double>& g, double& fmax,
                       double& fmean) {
    long long fg = 0;
    for (double v : g) fg += v == 1.0 ? 1 : 0;
    fmax = fmean = 0;
    if (fg == 0) return;
    for (int j = 0; j < 255; ++j) {
        double th = j / 255.0;
        long long tp = 0, pp = 0;
        for (size_t i = 0; i < p.size(); ++i) {
            if (p[i] > th) {
                ++pp;
                if (g[i] == 1.0) ++tp;
            }
        }
        double prec = pp > 0 ? double(tp) / pp : 0.0;
        double rec = double(tp) / fg;
        double den = 0.3 * prec + rec;
        double f = den > 0 ? 1.3 * prec * rec / den : 0.0;
        fmax = std::max(fmax, f);
        fmean += f / 255.0;
    }
}

inline double e_measure(const std::vector<double>& p, const std::vector<double>& g) {
    const long long n = static_cast<long long>(p.size());
    long long fg = 0;
    for (double v : g) fg += v == 1.0 ? 1 : 0;
    double acc = 0;
    for (int j = 0; j < 255; ++j) {
        double th = j / 255.0;
        double e = 0;
        if (fg == 0) {
            for (size_t i = 0; i < p.size(); ++i) e += p[i] > th ? 0.0 : 1.0;
        } else if (fg == n) {
            for (size_t i = 0; i < p.size(); ++i) e += p[i] > th ? 1.0 : 0.0;
        } else {
            double mu_p = 0;
            for (size_t i = 0; i < p.size(); ++i) mu_p += p[i] > th ? 1.0 : 0.0;
            mu_p /= n;
            double mu_g = double(fg) / n;
            for (size_t i = 0; i < p.size(); ++i) {
                double fp = (p[i] > th ? 1.0 : 0.0) - mu_p;
                double fgv = g[i] - mu_g;
                double align = 2.0 * fgv * fp / (fgv * fgv + fp * fp + kEps);
                e += (align + 1.0) * (align + 1.0) / 4.0;
            }
        }
        acc += e / n;
    }
    return acc / 255.0;
}

inline double ssim_block(const std::vector<double>& p, const std::vector<double>& g) {
    double n = static_cast<double>(p.size());
    double x = 0, y = 0;
    for (size_t i = 0; i < p.size(); ++i) {
        x += p[i];
        y += g[i];
    }
    x /= n;
    y /= n;
    double sx = 0, sy = 0, sxy = 0;
    for (size_t i = 0; i < p.size(); ++i) {
        sx += (p[i] - x) * (p[i] - x);
        sy += (g[i] - y) * (g[i] - y);
        sxy += (p[i] - x) * (g[i] - y);
    }
    sx /= n;
    sy /= n;
    sxy /= n;
    double alpha = 4 * x * y * sxy;
    double beta = (x * x + y * y) * (sx + sy);
    if (alpha != 0) return alpha / (beta + kEps);
    return beta == 0 ? 1.0 : 0.0;
}

inline double s_measure(const std::vector<double>& p, const std::vector<double>& g, int h, int w) {
    const long long n = static_cast<long long>(p.size());
    long long fg = 0;
    for (double v : g) fg += v == 1.0 ? 1 : 0;
    double mp = 0;
    for (double v : p) mp += v;
    mp /= n;
    if (fg == 0) return 1.0 - mp;
    if (fg == n) return mp;
    double u = double(fg) / n;

    auto obj = [](const std::vector<double>& vals) {
        double m = 0;
        for (double v : vals) m += v;
        m /= vals.size();
        double var = 0;
        for (double v : vals) var += (v - m) * (v - m);
        var /= vals.size();
        return 2.0 * m / (m * m + 1.0 + std::sqrt(var) + kEps);
    };
    std::vector<double> fgv, bgv;
    double cy = 0, cx = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y * w + x);
            if (g[i] == 1.0) {
                fgv.push_back(p[i]);
                cy += y;
                cx += x;
            } else {
                bgv.push_back(1.0 - p[i]);
            }
        }
    }
    double so = u * obj(fgv) + (1 - u) * obj(bgv);
    cy /= fg;
    cx /= fg;
    int cuty = std::clamp(int(std::floor(cy + 0.5)) + 1, 1, h - 1);
    int cutx = std::clamp(int(std::floor(cx + 0.5)) + 1, 1, w - 1);
    double sr = 0;
    int ys[3] = {0, cuty, h}, xs[3] = {0, cutx, w};
    for (int by = 0; by < 2; ++by) {
        for (int bx = 0; bx < 2; ++bx) {
            std::vector<double> pb, gb;
            for (int y = ys[by]; y < ys[by + 1]; ++y) {
                for (int x = xs[bx]; x < xs[bx + 1]; ++x) {
                    pb.push_back(p[static_cast<size_t>(y * w + x)]);
                    gb.push_back(g[static_cast<size_t>(y * w + x)]);
                }
            }
            sr += (double(pb.size()) / n) * ssim_block(pb, gb);
        }
    }
    return std::max(0.0, 0.5 * so + 0.5 * sr);
}

}  // namespace refm
