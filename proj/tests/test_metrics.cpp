#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "m4/metrics.hpp"

using namespace m4;

#include "reference_metrics.hpp"

namespace {

std::vector<double> random_pred(int n, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(0, 1);
    return v;
}

std::vector<double> random_gt(int n, Rng& rng, double fgp = 0.4) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(0, 1) < fgp ? 1.0 : 0.0;
    return v;
}

// nearest-neighbor x2 upscale
std::vector<double> up2(const std::vector<double>& v, int h, int w) {
    std::vector<double> out(static_cast<size_t>(4 * h * w));
    for (int y = 0; y < 2 * h; ++y)
        for (int x = 0; x < 2 * w; ++x)
            out[static_cast<size_t>(y * 2 * w + x)] = v[static_cast<size_t>((y / 2) * w + x / 2)];
    return out;
}

}  // namespace

TEST_CASE("metric values equal the naive references on 25 random 4x4 pairs") {
    Rng rng(1);
    int nonconstant = 0;
    for (int trial = 0; trial < 25; ++trial) {
        auto p = random_pred(16, rng);
        auto g = random_gt(16, rng, rng.uniform(0.2, 0.8));
        auto got = evaluate_saliency(p, g, 4, 4);
        CHECK(got.mae == doctest::Approx(refm::mae(p, g)).epsilon(1e-9));
        double fmax, fmean;
        refm::f_measures(p, g, fmax, fmean);
        CHECK(got.f_max == doctest::Approx(fmax).epsilon(1e-9));
        CHECK(got.f_mean == doctest::Approx(fmean).epsilon(1e-9));
        CHECK(got.e == doctest::Approx(refm::e_measure(p, g)).epsilon(1e-9));
        CHECK(got.s == doctest::Approx(refm::s_measure(p, g, 4, 4)).epsilon(1e-9));
        long long fg = 0;
        for (double v : g) fg += v == 1.0;
        if (fg > 0 && fg < 16) ++nonconstant;
    }
    CHECK(nonconstant >= 20);  // the sweep exercised the non-degenerate path
}

TEST_CASE("perfect prediction scores (E,S,F,M) = (1,1,1,0)") {
    Rng rng(2);
    auto g = random_gt(64, rng);
    // ensure nonconstant
    g[0] = 1.0;
    g[1] = 0.0;
    auto m = evaluate_saliency(g, g, 8, 8);
    CHECK(m.e == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.s == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(m.f_max == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.mae == 0.0);
    CHECK(!m.degenerate);
}

TEST_CASE("hand values: mae extremes and the 2x2 quarter case") {
    std::vector<double> ones(16, 1.0), zeros(16, 0.0);
    auto m = evaluate_saliency(ones, zeros, 4, 4);
    CHECK(m.mae == 1.0);
    CHECK(m.degenerate);

    auto q = evaluate_saliency({1, 0, 0, 0}, {1, 1, 0, 0}, 2, 2);
    CHECK(q.mae == doctest::Approx(0.25));
}

TEST_CASE("F term at precision 0.5 and recall 1 is 0.65/1.15") {
    // pred selects 4 pixels, gt has the 2 covered ones
    std::vector<double> p(16, 0.0), g(16, 0.0);
    p[0] = p[1] = p[2] = p[3] = 1.0;
    g[0] = g[1] = 1.0;
    auto m = evaluate_saliency(p, g, 4, 4);
    CHECK(m.f_max == doctest::Approx(0.65 / 1.15).epsilon(1e-9));
}

TEST_CASE("max-F is invariant to monotone rescaling with spaced values") {
    Rng rng(3);
    std::vector<double> levels{0.05, 0.35, 0.65, 0.95};
    std::vector<double> p(64), g = random_gt(64, rng);
    for (auto& v : p) v = levels[static_cast<size_t>(rng.uniform_int(0, 3))];
    std::vector<double> p2(p.size());
    for (size_t i = 0; i < p.size(); ++i) p2[i] = 0.1 + 0.8 * p[i];  // monotone, gaps > 1/255
    auto a = evaluate_saliency(p, g, 8, 8);
    auto b = evaluate_saliency(p2, g, 8, 8);
    CHECK(a.f_max == doctest::Approx(b.f_max).epsilon(1e-12));
}

TEST_CASE("anti-aligned prediction drives E to zero on the 2x2 case") {
    std::vector<double> g{1, 0, 0, 0};
    std::vector<double> p{0, 1, 1, 1};
    auto m = evaluate_saliency(p, g, 2, 2);
    CHECK(m.e == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("degenerate gt falls back to the cited formulas and is flagged") {
    Rng rng(4);
    auto p = random_pred(16, rng);
    std::vector<double> empty(16, 0.0), full(16, 1.0);
    double mp = 0;
    for (double v : p) mp += v / 16;
    auto a = evaluate_saliency(p, empty, 4, 4);
    CHECK(a.degenerate);
    CHECK(a.s == doctest::Approx(1.0 - mp).epsilon(1e-12));
    auto b = evaluate_saliency(p, full, 4, 4);
    CHECK(b.degenerate);
    CHECK(b.s == doctest::Approx(mp).epsilon(1e-12));
}

TEST_CASE("metrics are resolution covariant under nearest x2 upscaling") {
    Rng rng(5);
    int tested = 0;
    while (tested < 10) {
        auto p = random_pred(64, rng);
        auto g = random_gt(64, rng);
        long long fg = 0;
        double cy = 0, cx = 0;
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                if (g[static_cast<size_t>(y * 8 + x)] == 1.0) {
                    ++fg;
                    cy += y;
                    cx += x;
                }
            }
        }
        if (fg == 0 || fg == 64) continue;
        // stay away from the half-integer centroid rounding boundary, where
        // the block cut genuinely differs between the two resolutions
        double fy = cy / fg - std::floor(cy / fg), fx = cx / fg - std::floor(cx / fg);
        if (fy >= 0.45 || fx >= 0.45) continue;
        ++tested;

        auto pu = up2(p, 8, 8);
        auto gu = up2(g, 8, 8);
        auto a = evaluate_saliency(p, g, 8, 8);
        auto b = evaluate_saliency(pu, gu, 16, 16);
        CHECK(a.mae == doctest::Approx(b.mae).epsilon(1e-12));
        CHECK(a.f_max == doctest::Approx(b.f_max).epsilon(1e-12));
        CHECK(std::abs(a.e - b.e) < 1e-6);
        CHECK(std::abs(a.s - b.s) < 1e-6);
    }
}

TEST_CASE("corrupting a perfect prediction raises MAE and never raises F") {
    Rng rng(6);
    auto g = random_gt(64, rng);
    g[0] = 1.0;
    g[5] = 0.0;
    auto perfect = evaluate_saliency(g, g, 8, 8);
    auto p = g;
    double prev_mae = perfect.mae;
    for (int k = 0; k < 5; ++k) {
        // flip one more pixel each round
        size_t i = static_cast<size_t>(rng.uniform_int(0, 63));
        p[i] = 1.0 - g[i];
        auto m = evaluate_saliency(p, g, 8, 8);
        CHECK(m.mae >= prev_mae);
        CHECK(m.f_max <= perfect.f_max + 1e-12);
        prev_mae = m.mae;
    }
    CHECK(prev_mae > perfect.mae);
}

TEST_CASE("tensor overload checks shapes and accepts 1xHxW maps") {
    Rng rng(7);
    auto pred = TensorF::uniform({1, 4, 4}, 0, 1, rng);
    auto gt = TensorF::zeros({1, 4, 4});
    gt.at({0, 0, 0}) = 1.0f;
    CHECK_NOTHROW(evaluate_saliency(pred, gt));
    CHECK_THROWS_AS(evaluate_saliency(pred, TensorF::zeros({1, 2, 2})), ShapeError);
    auto bad = TensorF::filled({1, 4, 4}, 1.5f);
    CHECK_THROWS_AS(evaluate_saliency(bad, gt), DataError);
}

TEST_CASE("report: one line per frame plus one mean line per sequence") {
    MetricReport rep;
    MetricScores m;
    m.e = m.s = m.f_max = 0.5;
    m.mae = 0.1;
    rep.append("seq_a", 0, m);
    rep.append("seq_a", 1, m);
    rep.append("seq_b", 0, m);
    std::ostringstream os;
    rep.write_csv(os);
    int data_lines = 0;
    std::istringstream is(os.str());
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line[0] != '#') ++data_lines;
    }
    CHECK(data_lines == 3 + 2);  // 3 frames + 2 sequence means
    auto mean = rep.sequence_mean("seq_a");
    CHECK(mean.mae == doctest::Approx(0.1));
    CHECK(rep.overall_mean().e == doctest::Approx(0.5));
}
