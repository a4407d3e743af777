#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "m4/losses.hpp"

using namespace m4;

#include "reference_losses.hpp"

namespace {

std::vector<double> vec(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

TensorD random_mask(int h, int w, Rng& rng, double fg_prob = 0.4) {
    auto t = TensorD::zeros({1, h, w});
    for (auto& v : t.data()) v = rng.uniform(0, 1) < fg_prob ? 1.0 : 0.0;
    return t;
}

}  // namespace

TEST_CASE("structure loss vanishes in the perfect-fit limit") {
    Rng rng(1);
    auto gt = random_mask(8, 8, rng);
    auto logits = TensorD::zeros({1, 8, 8});
    for (long long i = 0; i < gt.numel(); ++i) {
        logits.data()[i] = gt.data()[i] == 1.0 ? 25.0 : -25.0;
    }
    CHECK(structure_loss(logits, gt).value() < 1e-6);
}

TEST_CASE("uniform gt gives unit weights and plain BCE+IoU") {
    auto gt = TensorD::zeros({1, 6, 6});
    auto wf = structure_weight_field(gt);
    for (auto v : wf.data()) CHECK(v == 1.0);

    Rng rng(2);
    auto logits = TensorD::uniform({1, 6, 6}, -2, 2, rng);
    double bce = 0, inter = 0, uni = 0;
    for (long long i = 0; i < 36; ++i) {
        bce += refl::bce(logits.data()[i], 0.0);
        double p = refl::sigmoid(logits.data()[i]);
        uni += p;
    }
    double plain = bce / 36.0 + (1.0 - (inter + 1.0) / (uni - inter + 1.0));
    CHECK(structure_loss(logits, gt).value() == doctest::Approx(plain).epsilon(1e-9));
}

TEST_CASE("structure loss matches the scalar-loop reference") {
    // handcrafted 1x4x4 pair
    auto gt = TensorD::from({1, 4, 4}, {0, 0, 1, 1, 0, 1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0});
    auto lg = TensorD::from({1, 4, 4},
                            {-2.0, -0.5, 1.5, 2.0, -1.0, 0.2, 3.0, 1.0, -0.3, -2.5, 0.8, -0.7,
                             -3.0, -1.2, -0.4, -2.2});
    double ref = refl::structure_loss(vec(lg), vec(gt), 4, 4);
    CHECK(structure_loss(lg, gt).value() == doctest::Approx(ref).epsilon(1e-6));

    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        auto g = random_mask(8, 8, rng);
        auto l = TensorD::uniform({1, 8, 8}, -3, 3, rng);
        CHECK(structure_loss(l, g).value() ==
              doctest::Approx(refl::structure_loss(vec(l), vec(g), 8, 8)).epsilon(1e-6));
    }
}

TEST_CASE("structure loss validates binary gt and matching shapes") {
    auto logits = TensorD::zeros({1, 4, 4});
    auto bad = TensorD::filled({1, 4, 4}, 0.5);
    CHECK_THROWS_AS(structure_loss(logits, bad), DataError);
    CHECK_THROWS_AS(structure_loss(logits, TensorD::zeros({1, 2, 2})), ShapeError);
}

TEST_CASE("weight field stays within [1, 6]") {
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        auto gt = random_mask(10, 10, rng, rng.uniform(0.1, 0.9));
        auto wf = structure_weight_field(gt);
        for (auto v : wf.data()) {
            CHECK(v >= 1.0);
            CHECK(v <= 6.0);
        }
    }
}

TEST_CASE("structure loss gradient matches finite differences on a random 1x8x8 pair") {
    Rng rng(5);
    auto gt = random_mask(8, 8, rng);
    auto logits = TensorD::uniform({1, 8, 8}, -2, 2, rng);
    CHECK(finite_difference_check(
              [&](const TensorD& t) { return structure_loss(t, gt); }, logits) < 1e-4);
}

TEST_CASE("sobel edges: constants, half-plane, complement symmetry") {
    auto flat = TensorD::ones({1, 4, 4});
    auto e0 = sobel_edges(flat);
    for (auto v : e0.data()) CHECK(v == 0.0);

    // left half foreground: one vertical band at the two boundary columns
    auto half = TensorD::zeros({1, 4, 4});
    for (int y = 0; y < 4; ++y) {
        half.at({0, y, 0}) = 1.0;
        half.at({0, y, 1}) = 1.0;
    }
    auto e = sobel_edges(half);
    for (int y = 0; y < 4; ++y) {
        CHECK(e.at({0, y, 0}) == 0.0);
        CHECK(e.at({0, y, 1}) == 1.0);
        CHECK(e.at({0, y, 2}) == 1.0);
        CHECK(e.at({0, y, 3}) == 0.0);
    }

    Rng rng(6);
    auto gt = random_mask(8, 8, rng);
    auto comp = TensorD::zeros({1, 8, 8});
    for (long long i = 0; i < 64; ++i) comp.data()[i] = 1.0 - gt.data()[i];
    auto ea = sobel_edges(gt);
    auto eb = sobel_edges(comp);
    for (long long i = 0; i < 64; ++i) CHECK(ea.data()[i] == eb.data()[i]);
}

TEST_CASE("sobel edges live only near value changes") {
    Rng rng(7);
    auto gt = random_mask(8, 8, rng);
    auto e = sobel_edges(gt);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            if (e.at({0, y, x}) != 1.0) continue;
            // a 3x3 neighborhood of an edge pixel must contain both values
            bool has0 = false, has1 = false;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    int yy = std::clamp(y + dy, 0, 7), xx = std::clamp(x + dx, 0, 7);
                    (gt.at({0, yy, xx}) == 1.0 ? has1 : has0) = true;
                }
            }
            CHECK(has0);
            CHECK(has1);
        }
    }
}

TEST_CASE("downsample_binary thresholds area averages") {
    auto gt = TensorD::from({1, 4, 4}, {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1, 0, 0, 1, 1});
    auto d = downsample_binary(gt, 2, 2);
    CHECK(d.at({0, 0, 0}) == 1.0);  // block mean 1.0
    CHECK(d.at({0, 0, 1}) == 0.0);
    CHECK(d.at({0, 1, 0}) == 0.0);
    CHECK(d.at({0, 1, 1}) == 1.0);  // block mean 0.75
    CHECK_THROWS_AS(downsample_binary(gt, 3, 3), ShapeError);
}

namespace {

// toy decoder outputs with levels 8x8, 4x4, 2x2 for a 32x32 gt
DecoderOutputs<double> toy_outputs(Rng& rng, double scale = 1.0) {
    DecoderOutputs<double> dec;
    const int sizes[3] = {8, 4, 2};
    for (int i = 0; i < 3; ++i) {
        dec.coarse_logits[static_cast<size_t>(i)] =
            TensorD::uniform({1, sizes[i], sizes[i]}, -2 * scale, 2 * scale, rng);
        dec.edge_logits[static_cast<size_t>(i)] =
            TensorD::uniform({1, sizes[i], sizes[i]}, -2 * scale, 2 * scale, rng);
    }
    return dec;
}

}  // namespace

TEST_CASE("aux loss has exactly six components that sum to the total") {
    Rng rng(8);
    auto gt = random_mask(32, 32, rng);
    auto dec = toy_outputs(rng);
    auto bk = aux_loss_breakdown(dec, gt);
    double total = 0;
    for (int i = 0; i < 3; ++i) {
        CHECK(bk.coarse[static_cast<size_t>(i)].defined());
        CHECK(bk.edge[static_cast<size_t>(i)].defined());
        CHECK(bk.coarse[static_cast<size_t>(i)].value() >= 0.0);
        CHECK(bk.edge[static_cast<size_t>(i)].value() >= 0.0);
        total += bk.coarse[static_cast<size_t>(i)].value() + bk.edge[static_cast<size_t>(i)].value();
    }
    CHECK(bk.total.value() == doctest::Approx(total).epsilon(1e-9));
}

TEST_CASE("aux loss matches a scalar reference end to end") {
    Rng rng(9);
    auto gt = random_mask(32, 32, rng);
    auto dec = toy_outputs(rng);

    double expect = 0;
    auto gvec = vec(gt);
    const int sizes[3] = {8, 4, 2};
    for (int i = 0; i < 3; ++i) {
        auto gt_i = refl::downsample(gvec, 32, 32, sizes[i], sizes[i]);
        expect += refl::structure_loss(vec(dec.coarse_logits[static_cast<size_t>(i)]), gt_i, sizes[i],
                                     sizes[i]);
        auto edges = refl::sobel(gt_i, sizes[i], sizes[i]);
        double bce = 0;
        auto el = vec(dec.edge_logits[static_cast<size_t>(i)]);
        for (size_t k = 0; k < el.size(); ++k) bce += refl::bce(el[k], edges[k]);
        expect += bce / el.size();
    }
    CHECK(aux_loss(dec, gt).value() == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("aux loss approaches zero for near-perfect heads") {
    Rng rng(10);
    auto gt = random_mask(32, 32, rng);
    DecoderOutputs<double> dec;
    const int sizes[3] = {8, 4, 2};
    for (int i = 0; i < 3; ++i) {
        auto gt_i = downsample_binary(gt, sizes[i], sizes[i]);
        auto edges = sobel_edges(gt_i);
        auto& pc = dec.coarse_logits[static_cast<size_t>(i)];
        auto& pe = dec.edge_logits[static_cast<size_t>(i)];
        pc = TensorD::zeros({1, sizes[i], sizes[i]});
        pe = TensorD::zeros({1, sizes[i], sizes[i]});
        for (long long k = 0; k < pc.numel(); ++k) {
            pc.data()[k] = gt_i.data()[k] == 1.0 ? 25.0 : -25.0;
            pe.data()[k] = edges.data()[k] == 1.0 ? 25.0 : -25.0;
        }
    }
    CHECK(aux_loss(dec, gt).value() < 1e-6);
}

TEST_CASE("total loss breakdown is additive and non-negative") {
    Rng rng(11);
    auto gt = random_mask(32, 32, rng);
    auto dec = toy_outputs(rng);
    auto final_logits = TensorD::uniform({1, 32, 32}, -2, 2, rng);
    auto stats = GateStatistics<double>::from_values({1, 3, 2}, {2, 2, 2});
    std::vector<const GateStatistics<double>*> sv{&stats};

    auto bk = total_loss(final_logits, dec, gt, sv, 1e-2);
    CHECK(bk.pred.value() >= 0.0);
    CHECK(bk.aux.value() >= 0.0);
    CHECK(bk.moe.value() >= 0.0);
    CHECK(bk.total.value() ==
          doctest::Approx(bk.pred.value() + bk.aux.value() + bk.moe.value()).epsilon(1e-6));
}

TEST_CASE("aux loss gradient matches finite differences") {
    Rng rng(12);
    auto gt = random_mask(32, 32, rng);
    auto dec = toy_outputs(rng);
    auto loss = [&]() { return aux_loss(dec, gt); };
    CHECK(finite_difference_check_param(loss, dec.coarse_logits[0]) < 1e-4);
    CHECK(finite_difference_check_param(loss, dec.edge_logits[2]) < 1e-4);
}
