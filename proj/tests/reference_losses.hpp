// Scalar-loop reference implementations of the loss stack.
// Test-tree oracle only; deliberately independent of m4/losses.hpp.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace refl {

inline double sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline double bce(double z, double y) {
    return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

inline double local_mean15(const std::vector<double>& g, int h, int w, int y, int x) {
    double acc = 0;
    int cnt = 0;
    for (int dy = -7; dy <= 7; ++dy) {
        for (int dx = -7; dx <= 7; ++dx) {
            int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            acc += g[static_cast<size_t>(yy * w + xx)];
            ++cnt;
        }
    }
    return acc / cnt;
}

inline double structure_loss(const std::vector<double>& logits, const std::vector<double>& gt,
                             int h, int w) {
    std::vector<double> wf(gt.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y * w + x);
            wf[i] = 1.0 + 5.0 * std::abs(local_mean15(gt, h, w, y, x) - gt[i]);
        }
    }
    double wsum = 0, wbce = 0, inter = 0, uni = 0;
    for (size_t i = 0; i < gt.size(); ++i) {
        wsum += wf[i];
        wbce += wf[i] * bce(logits[i], gt[i]);
        double p = sigmoid(logits[i]);
        inter += wf[i] * p * gt[i];
        uni += wf[i] * (p + gt[i]);
    }
    return wbce / wsum + (1.0 - (inter + 1.0) / (uni - inter + 1.0));
}

inline std::vector<double> sobel(const std::vector<double>& g, int h, int w) {
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return g[static_cast<size_t>(y * w + x)];
    };
    std::vector<double> mag(g.size());
    double peak = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double gx = at(y - 1, x + 1) - at(y - 1, x - 1) + 2 * (at(y, x + 1) - at(y, x - 1)) +
                        at(y + 1, x + 1) - at(y + 1, x - 1);
            double gy = at(y + 1, x - 1) - at(y - 1, x - 1) + 2 * (at(y + 1, x) - at(y - 1, x)) +
                        at(y + 1, x + 1) - at(y - 1, x + 1);
            mag[static_cast<size_t>(y * w + x)] = std::hypot(gx, gy);
            peak = std::max(peak, mag[static_cast<size_t>(y * w + x)]);
        }
    }
    std::vector<double> out(g.size(), 0.0);
    if (peak == 0) return out;
    for (size_t i = 0; i < out.size(); ++i) out[i] = mag[i] / peak >= 0.5 ? 1.0 : 0.0;
    return out;
}

inline std::vector<double> downsample(const std::vector<double>& g, int h, int w, int oh, int ow) {
    int fy = h / oh, fx = w / ow;
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int dy = 0; dy < fy; ++dy)
                for (int dx = 0; dx < fx; ++dx)
                    acc += g[static_cast<size_t>((y * fy + dy) * w + (x * fx + dx))];
            out[static_cast<size_t>(y * ow + x)] = acc / (fy * fx) >= 0.5 ? 1.0 : 0.0;
        }
    }
    return out;
}

}  // namespace refl
