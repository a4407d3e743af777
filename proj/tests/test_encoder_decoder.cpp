#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "m4/decoder.hpp"

using namespace m4;

namespace {

EncoderConfig tiny_cfg() {
    EncoderConfig cfg;
    cfg.widths = {8, 12, 16, 24};
    cfg.heads = {2, 2, 2, 2};
    return cfg;
}

template <class S>
FeaturePyramid<S> random_pyramid(const EncoderConfig& cfg, int input, Rng& rng, PyramidTag tag) {
    FeaturePyramid<S> p;
    p.tag = tag;
    for (int i = 0; i < 4; ++i) {
        int sz = input / cfg.strides[static_cast<size_t>(i)];
        p.level[static_cast<size_t>(i)] =
            Tensor<S>::uniform({cfg.widths[static_cast<size_t>(i)], sz, sz}, -1, 1, rng);
    }
    return p;
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (long long i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
    }
    return m;
}

}  // namespace

TEST_CASE("toy encoder produces the documented pyramid shapes") {
    Rng rng(1);
    Encoder<float> enc(EncoderConfig{}, rng);
    auto img = TensorF::uniform({3, 64, 64}, 0, 1, rng);
    auto pyr = enc.encode(img, Modality::Rgb);
    CHECK(pyr.level[0].shape() == Shape{16, 16, 16});
    CHECK(pyr.level[1].shape() == Shape{32, 8, 8});
    CHECK(pyr.level[2].shape() == Shape{64, 4, 4});
    CHECK(pyr.level[3].shape() == Shape{128, 2, 2});
}

TEST_CASE("encode rejects sizes not divisible by 32") {
    Rng rng(2);
    Encoder<float> enc(tiny_cfg(), rng);
    CHECK_THROWS_AS(enc.encode(TensorF::zeros({3, 48, 48}), Modality::Rgb), ShapeError);
    CHECK_THROWS_AS(enc.encode(TensorF::zeros({1, 32, 32}), Modality::Rgb), ShapeError);
}

TEST_CASE("constant image yields spatially constant features at every level") {
    Rng rng(3);
    Encoder<float> enc(tiny_cfg(), rng);
    auto img = TensorF::filled({3, 32, 32}, 0.5f);
    auto pyr = enc.encode(img, Modality::Rgb);
    for (int i = 0; i < 4; ++i) {
        const auto& l = pyr.level[static_cast<size_t>(i)];
        const int c = l.dim(0), hw = l.dim(1) * l.dim(2);
        for (int ch = 0; ch < c; ++ch) {
            float first = l.data()[static_cast<size_t>(ch * hw)];
            for (int k = 1; k < hw; ++k) {
                CHECK(std::abs(l.data()[static_cast<size_t>(ch * hw + k)] - first) < 1e-4f);
            }
        }
    }
}

TEST_CASE("zero-init equivalence: injected encoder matches the frozen trunk") {
    Rng rng(4);
    Encoder<float> enc(tiny_cfg(), rng);
    auto img = TensorF::uniform({3, 32, 32}, 0, 1, rng);
    auto before_rgb = enc.encode(img, Modality::Rgb);

    Rng rng2(5);
    enc.inject_adapters(2, 2, rng2);
    enc.for_each_adapter([](LoraMoeLayer<float>& l) { l.zero_all_expert_kernels(); });
    auto after_rgb = enc.encode(img, Modality::Rgb);
    auto after_dep = enc.encode(img, Modality::Depth);

    for (int i = 0; i < 4; ++i) {
        CHECK(max_abs_diff(before_rgb.level[static_cast<size_t>(i)],
                           after_rgb.level[static_cast<size_t>(i)]) <= 1e-12);
        // with silent adapters, routing has no effect either
        CHECK(max_abs_diff(after_rgb.level[static_cast<size_t>(i)],
                           after_dep.level[static_cast<size_t>(i)]) <= 1e-12);
    }
}

TEST_CASE("adapter gradient flows through the full encoder path") {
    Rng rng(6);
    Encoder<double> enc(tiny_cfg(), rng);
    enc.inject_adapters(2, 2, rng);
    // give B some mass so expert/A gradients are alive
    enc.for_each_adapter([&](LoraMoeLayer<double>& l) {
        for (auto& v : l.b.data()) v = rng.uniform(-0.2, 0.2);
    });
    auto img = TensorD::uniform({3, 32, 32}, 0, 1, rng);
    auto loss = [&]() {
        auto pyr = enc.encode(img, Modality::Depth);
        return sum_all(mul(pyr.level[3], pyr.level[3]));
    };
    auto& a0 = enc.stages[0].block.q.adapter->a;
    CHECK(finite_difference_check_param(loss, a0) < 1e-4);
}

TEST_CASE("registry: frozen trunk, trainable adapters, no duplicates") {
    Rng rng(7);
    Encoder<float> enc(tiny_cfg(), rng);
    enc.inject_adapters(2, 2, rng);

    ParamRegistry<float> reg;
    enc.register_params("encoder", reg);
    size_t once = reg.entries().size();
    enc.register_params("encoder", reg);  // re-registering must not duplicate
    CHECK(reg.entries().size() == once);

    long long frozen = 0, adapter = 0, other_trainable = 0;
    for (const auto& e : reg.entries()) {
        if (!e.trainable) {
            frozen += e.tensor.numel();
        } else if (e.group == ParamGroup::Adapter) {
            adapter += e.tensor.numel();
        } else {
            other_trainable += e.tensor.numel();
        }
    }
    CHECK(frozen > 0);
    CHECK(other_trainable == 0);  // nothing trainable in the trunk but adapters
    // 4 stages x (q + v) adapters, closed-form audit
    long long expect = 0;
    auto cfg = tiny_cfg();
    for (int i = 0; i < 4; ++i) {
        int c = cfg.widths[static_cast<size_t>(i)];
        expect += 2 * LoraMoeLayer<float>::expected_param_count(c, c, 2);
    }
    CHECK(adapter == expect);
}

TEST_CASE("shared trunk: one parameter set serves both modality passes") {
    Rng rng(8);
    Encoder<float> enc(tiny_cfg(), rng);
    enc.inject_adapters(2, 2, rng);
    ParamRegistry<float> reg;
    enc.register_params("encoder", reg);
    auto img = TensorF::uniform({3, 32, 32}, 0, 1, rng);
    enc.encode(img, Modality::Rgb);
    enc.encode(img, Modality::Depth);
    ParamRegistry<float> reg2;
    enc.register_params("encoder", reg2);
    CHECK(reg2.entries().size() == reg.entries().size());
}

TEST_CASE("fusion identity: averaging UIM with silent prior and RFB") {
    auto cfg = tiny_cfg();
    Rng rng(9);
    FusionNeck<float> neck(cfg, rng);
    // uim averages the two modality copies, prior and rfb projections silent
    for (int i = 0; i < 4; ++i) {
        auto& u = neck.uim[static_cast<size_t>(i)];
        for (auto& v : u.weight.data()) v = 0.0f;
        const int c = cfg.widths[static_cast<size_t>(i)];
        for (int co = 0; co < c; ++co) {
            u.weight.at({co, co, 0, 0}) = 0.5f;
            u.weight.at({co, co + c, 0, 0}) = 0.5f;
        }
        for (auto& v : u.bias.data()) v = 0.0f;
        neck.rfb[static_cast<size_t>(i)].proj.zero_();
    }
    neck.prior_conv.zero_();

    auto rgb = random_pyramid<float>(cfg, 32, rng, PyramidTag::Rgb);
    auto dep = rgb;  // identical modalities
    auto fused = neck.fuse(rgb, dep);
    for (int i = 0; i < 4; ++i) {
        CHECK(fused.level[static_cast<size_t>(i)].dim(0) == cfg.widths[static_cast<size_t>(i)]);
        CHECK(max_abs_diff(fused.level[static_cast<size_t>(i)],
                           rgb.level[static_cast<size_t>(i)]) <= 1e-6);
    }
}

TEST_CASE("fusion rejects mismatched pyramids and incomplete input") {
    auto cfg = tiny_cfg();
    Rng rng(10);
    FusionNeck<float> neck(cfg, rng);
    auto rgb = random_pyramid<float>(cfg, 32, rng, PyramidTag::Rgb);
    auto dep = random_pyramid<float>(cfg, 64, rng, PyramidTag::Depth);
    CHECK_THROWS_AS(neck.fuse(rgb, dep), ShapeError);
    FeaturePyramid<float> incomplete;
    CHECK_THROWS_AS(neck.fuse(rgb, incomplete), ShapeError);
}

TEST_CASE("fusion gradient reaches both modality inputs") {
    auto cfg = tiny_cfg();
    Rng rng(11);
    FusionNeck<double> neck(cfg, rng);
    auto rgb = random_pyramid<double>(cfg, 32, rng, PyramidTag::Rgb);
    auto dep = random_pyramid<double>(cfg, 32, rng, PyramidTag::Depth);
    auto loss = [&]() {
        auto f = neck.fuse(rgb, dep);
        Tensor<double> acc;
        for (auto& l : f.level) {
            auto s = sum_all(mul(l, l));
            acc = acc.defined() ? add(acc, s) : s;
        }
        return acc;
    };
    CHECK(finite_difference_check_param(loss, rgb.level[1]) < 1e-4);
    CHECK(finite_difference_check_param(loss, dep.level[1]) < 1e-4);
    CHECK(finite_difference_check_param(loss, dep.level[3]) < 1e-4);
}

TEST_CASE("decoder produces stride-correct outputs and all heads") {
    Rng rng(12);
    EncoderConfig cfg;  // default toy widths
    Decoder<float> dec(cfg, rng);
    auto pyr = random_pyramid<float>(cfg, 64, rng, PyramidTag::Fused);
    auto out = dec.decode(pyr);
    CHECK(out.xd[0].shape() == Shape{16, 16, 16});
    CHECK(out.xd[1].shape() == Shape{32, 8, 8});
    CHECK(out.xd[2].shape() == Shape{64, 4, 4});
    CHECK(out.xd[3].shape() == Shape{128, 2, 2});
    for (int i = 0; i < 3; ++i) {
        CHECK(out.coarse_logits[static_cast<size_t>(i)].shape() ==
              Shape{1, out.xd[static_cast<size_t>(i)].dim(1), out.xd[static_cast<size_t>(i)].dim(2)});
        CHECK(out.edge_logits[static_cast<size_t>(i)].shape() ==
              out.coarse_logits[static_cast<size_t>(i)].shape());
    }
}

TEST_CASE("zeroed coarse head gives logits 0, sigmoid 0.5 everywhere") {
    Rng rng(13);
    auto cfg = tiny_cfg();
    Decoder<float> dec(cfg, rng);
    dec.coarse_head[0].zero_();
    auto pyr = random_pyramid<float>(cfg, 32, rng, PyramidTag::Fused);
    auto out = dec.decode(pyr);
    for (auto v : out.coarse_logits[0].data()) CHECK(v == 0.0f);
    auto probs = sigmoid(out.coarse_logits[0]);
    for (auto v : probs.data()) CHECK(v == doctest::Approx(0.5f));
}

TEST_CASE("decoder rejects incomplete pyramids") {
    Rng rng(14);
    Decoder<float> dec(tiny_cfg(), rng);
    FeaturePyramid<float> p;
    CHECK_THROWS_AS(dec.decode(p), ShapeError);
}

TEST_CASE("gradient from the finest coarse mask reaches the deepest skip") {
    Rng rng(15);
    auto cfg = tiny_cfg();
    Decoder<double> dec(cfg, rng);
    auto pyr = random_pyramid<double>(cfg, 32, rng, PyramidTag::Fused);
    auto loss = [&]() {
        auto out = dec.decode(pyr);
        return sum_all(mul(out.coarse_logits[0], out.coarse_logits[0]));
    };
    CHECK(finite_difference_check_param(loss, pyr.level[3]) < 1e-4);
}
