#pragma once

#include "m4/decoder.hpp"
#include "m4/moe_lora.hpp"

namespace m4 {

namespace detail {

template <class S>
void require_binary(const Tensor<S>& gt, const char* who) {
    for (S v : gt.data()) {
        if (v != S(0) && v != S(1)) {
            throw DataError(std::string(who) + ": ground truth must be strictly {0,1}");
        }
    }
}

}  // namespace detail

// Pixel weight field w = 1 + 5*|avgpool_15(gt) - gt|; boundary-heavy regions
// get up to 6x emphasis. gt is data, so this is computed outside the graph.
template <class S>
Tensor<S> structure_weight_field(const Tensor<S>& gt) {
    auto pooled = avg_pool2d(gt.detach(), 15, 1, 7);
    auto w = Tensor<S>::zeros(gt.shape());
    for (long long i = 0; i < gt.numel(); ++i) {
        w.data()[i] = S(1) + S(5) * std::abs(pooled.data()[i] - gt.data()[i]);
    }
    return w;
}

// Weighted BCE + weighted soft-IoU on logits.
template <class S>
Tensor<S> structure_loss(const Tensor<S>& pred_logits, const Tensor<S>& gt) {
    if (pred_logits.shape() != gt.shape()) {
        throw ShapeError("structure_loss: pred " + shape_str(pred_logits.shape()) + " vs gt " +
                         shape_str(gt.shape()));
    }
    detail::require_binary(gt, "structure_loss");
    auto w = structure_weight_field(gt);
    double w_sum = 0;
    for (S v : w.data()) w_sum += v;

    auto bce = bce_with_logits(pred_logits, gt);
    auto wbce = mul_scalar(sum_all(mul(w, bce)), static_cast<S>(1.0 / w_sum));

    auto p = sigmoid(pred_logits);
    auto inter = sum_all(mul(w, mul(p, gt)));
    auto uni = sum_all(mul(w, add(p, gt)));
    auto iou_frac = div(add_scalar(inter, S(1)), add_scalar(sub(uni, inter), S(1)));
    auto wiou = add_scalar(neg(iou_frac), S(1));
    return add(wbce, wiou);
}

// Sobel gradient magnitude of a binary mask, max-normalized and thresholded
// at 0.5. Borders replicate so a filled half-plane produces only its interior
// boundary band. Targets only; no gradient path.
template <class S>
Tensor<S> sobel_edges(const Tensor<S>& gt) {
    detail::require_binary(gt, "sobel_edges");
    if (gt.rank() != 3 || gt.dim(0) != 1) {
        throw ShapeError("sobel_edges: expected 1xHxW, got " + shape_str(gt.shape()));
    }
    const int h = gt.dim(1), w = gt.dim(2);
    const S* g = gt.data().data();
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return static_cast<double>(g[y * w + x]);
    };
    std::vector<double> mag(static_cast<size_t>(h) * w);
    double peak = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2 * at(y, x - 1) + 2 * at(y, x + 1) -
                        at(y + 1, x - 1) + at(y + 1, x + 1);
            double gy = -at(y - 1, x - 1) - 2 * at(y - 1, x) - at(y - 1, x + 1) + at(y + 1, x - 1) +
                        2 * at(y + 1, x) + at(y + 1, x + 1);
            mag[static_cast<size_t>(y * w + x)] = std::sqrt(gx * gx + gy * gy);
            peak = std::max(peak, mag[static_cast<size_t>(y * w + x)]);
        }
    }
    auto out = Tensor<S>::zeros(gt.shape());
    if (peak == 0) return out;
    for (size_t i = 0; i < mag.size(); ++i) {
        out.data()[i] = mag[i] / peak >= 0.5 ? S(1) : S(0);
    }
    return out;
}

// Area-average downsample followed by a 0.5 threshold; keeps masks binary
// without gray halos. Requires integer scale factors.
template <class S>
Tensor<S> downsample_binary(const Tensor<S>& gt, int oh, int ow) {
    if (gt.rank() != 3 || gt.dim(0) != 1) {
        throw ShapeError("downsample_binary: expected 1xHxW, got " + shape_str(gt.shape()));
    }
    const int h = gt.dim(1), w = gt.dim(2);
    if (h == oh && w == ow) return gt.detach();
    if (h % oh != 0 || w % ow != 0) {
        throw ShapeError("downsample_binary: " + shape_str(gt.shape()) + " -> " +
                         std::to_string(oh) + "x" + std::to_string(ow) + " is not an integer factor");
    }
    const int fy = h / oh, fx = w / ow;
    auto out = Tensor<S>::zeros({1, oh, ow});
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int dy = 0; dy < fy; ++dy) {
                for (int dx = 0; dx < fx; ++dx) {
                    acc += gt.data()[static_cast<size_t>((y * fy + dy) * w + x * fx + dx)];
                }
            }
            out.data()[static_cast<size_t>(y * ow + x)] = acc / (fy * fx) >= 0.5 ? S(1) : S(0);
        }
    }
    return out;
}

template <class S>
struct AuxLossBreakdown {
    std::array<Tensor<S>, 3> coarse;  // structure loss per level
    std::array<Tensor<S>, 3> edge;    // plain BCE vs sobel pseudo-edges
    Tensor<S> total;
};

// L_aux = sum over the three supervised levels of coarse + edge terms.
template <class S>
AuxLossBreakdown<S> aux_loss_breakdown(const DecoderOutputs<S>& dec, const Tensor<S>& gt) {
    detail::require_binary(gt, "aux_loss");
    AuxLossBreakdown<S> out;
    for (int i = 0; i < 3; ++i) {
        const auto& pc = dec.coarse_logits[static_cast<size_t>(i)];
        auto gt_i = downsample_binary(gt, pc.dim(1), pc.dim(2));
        out.coarse[static_cast<size_t>(i)] = structure_loss(pc, gt_i);
        out.edge[static_cast<size_t>(i)] =
            mean_all(bce_with_logits(dec.edge_logits[static_cast<size_t>(i)], sobel_edges(gt_i)));
        auto term = add(out.coarse[static_cast<size_t>(i)], out.edge[static_cast<size_t>(i)]);
        out.total = out.total.defined() ? add(out.total, term) : term;
    }
    return out;
}

template <class S>
Tensor<S> aux_loss(const DecoderOutputs<S>& dec, const Tensor<S>& gt) {
    return aux_loss_breakdown(dec, gt).total;
}

template <class S>
struct LossBreakdown {
    Tensor<S> pred;
    Tensor<S> aux;
    Tensor<S> moe;
    Tensor<S> total;
    AuxLossBreakdown<S> aux_terms;
};

// L_total = L_pred + L_aux + L_moe.
template <class S>
LossBreakdown<S> total_loss(const Tensor<S>& final_logits, const DecoderOutputs<S>& dec,
                            const Tensor<S>& gt,
                            const std::vector<const GateStatistics<S>*>& stats,
                            double lambda = 1e-2) {
    LossBreakdown<S> out;
    out.pred = structure_loss(final_logits, gt);
    out.aux_terms = aux_loss_breakdown(dec, gt);
    out.aux = out.aux_terms.total;
    out.moe = moe_regularizer(stats, lambda);
    out.total = add(add(out.pred, out.aux), out.moe);
    return out;
}

}  // namespace m4
