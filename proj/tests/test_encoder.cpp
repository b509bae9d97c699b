#include <doctest.h>

#include "protoseg/encoder.hpp"
#include "protoseg/rng.hpp"

using namespace protoseg;

namespace {

DenseArray<float> random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    Rng rng(seed);
    DenseArray<float> img({3, h, w});
    for (float& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

std::size_t conv_out(std::size_t in, std::size_t k, int stride, int dilation, int pad) {
    return static_cast<std::size_t>(
        (static_cast<long>(in) + 2L * pad - dilation * (static_cast<long>(k) - 1) - 1) / stride + 1);
}

}  // namespace

TEST_SUITE_BEGIN("encoder");

TEST_CASE("init is deterministic per seed and differs across seeds") {
    EncoderConfig cfg;
    auto a = init_encoder<float>(cfg, 5);
    auto b = init_encoder<float>(cfg, 5);
    auto c = init_encoder<float>(cfg, 6);
    CHECK(a.same_values(b));
    CHECK_FALSE(a.same_values(c));
    for (const auto& bias : a.biases)
        for (float v : bias.data) CHECK(v == 0.0f);
}

TEST_CASE("default config maps 32x32 input to [64,16,16] features") {
    auto p = init_encoder<float>(EncoderConfig{}, 1);
    DenseArray<float> f = extract_features_value(p, random_image(32, 32, 2));
    CHECK(f.shape == std::vector<std::size_t>{64, 16, 16});
}

TEST_CASE("output spatial size follows the conv formula for random configs") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        EncoderConfig cfg;
        const std::size_t blocks = 1 + rng.below(3);
        cfg.widths.clear();
        cfg.strides.clear();
        cfg.dilations.clear();
        int last_dil = 1;
        for (std::size_t b = 0; b < blocks; ++b) {
            cfg.widths.push_back(4 + rng.below(8));
            cfg.strides.push_back(1 + static_cast<int>(rng.below(2)));
            last_dil += static_cast<int>(rng.below(2));
            cfg.dilations.push_back(last_dil);
        }
        const std::size_t hw = 16 + rng.below(17);
        auto p = init_encoder<float>(cfg, trial);
        std::size_t h = hw, w = hw;
        for (std::size_t b = 0; b < blocks; ++b) {
            const int pad = cfg.dilations[b] * (static_cast<int>(cfg.kernel_size) - 1) / 2;
            h = conv_out(h, cfg.kernel_size, cfg.strides[b], cfg.dilations[b], pad);
            w = conv_out(w, cfg.kernel_size, cfg.strides[b], cfg.dilations[b], pad);
        }
        DenseArray<float> f = extract_features_value(p, random_image(hw, hw, trial + 100));
        CHECK(f.shape == std::vector<std::size_t>{cfg.widths.back(), h, w});
    }
}

TEST_CASE("all-zero image with zero biases produces all-zero features") {
    auto p = init_encoder<float>(EncoderConfig{}, 4);
    DenseArray<float> f = extract_features_value(p, DenseArray<float>({3, 16, 16}));
    for (float v : f.data) CHECK(v == 0.0f);
}

TEST_CASE("identical images give identical features") {
    auto p = init_encoder<float>(EncoderConfig{}, 5);
    DenseArray<float> img = random_image(16, 16, 6);
    CHECK(extract_features_value(p, img).data == extract_features_value(p, img).data);
}

TEST_CASE("input validation: shape, minimum size, finiteness") {
    auto p = init_encoder<float>(EncoderConfig{}, 7);
    CHECK_THROWS_AS(extract_features_value(p, DenseArray<float>({1, 16, 16})), ShapeError);
    CHECK_THROWS_AS(extract_features_value(p, DenseArray<float>({3, 4, 16})),
                    std::invalid_argument);
    DenseArray<float> bad({3, 16, 16});
    bad.data[7] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(extract_features_value(p, bad), std::invalid_argument);
}

TEST_CASE("config validation rejects inconsistent descriptors") {
    EncoderConfig cfg;
    cfg.strides = {1};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    EncoderConfig even;
    even.kernel_size = 4;
    CHECK_THROWS_AS(even.validate(), std::invalid_argument);
    EncoderConfig dil;
    dil.dilations = {4, 2, 1};
    CHECK_THROWS_AS(dil.validate(), std::invalid_argument);
}

TEST_CASE("gradient of summed features w.r.t. parameters matches finite differences") {
    EncoderConfig cfg;
    cfg.widths = {4, 6};
    cfg.strides = {2, 1};
    cfg.dilations = {1, 2};
    auto params = init_encoder<double>(cfg, 8);
    DenseArray<double> img({3, 8, 8});
    Rng rng(9);
    for (double& v : img.data) v = rng.uniform();

    auto loss_at = [&](const EncoderParams<double>& p) {
        Graph<double> g;
        return g.sum(extract_features(g, p, img, false))->value.data[0];
    };

    Graph<double> g;
    std::vector<Node<double>*> ks, bs;
    Node<double>* f = extract_features(g, params, img, true, &ks, &bs);
    g.backward(g.sum(f));

    const double h = 1e-5;
    double max_rel = 0;
    // spot-check a handful of coordinates in the first kernel and last bias
    for (std::size_t i = 0; i < params.kernels[0].numel(); i += 13) {
        EncoderParams<double> pp = params, pm = params;
        pp.kernels[0].data[i] += h;
        pm.kernels[0].data[i] -= h;
        const double fd = (loss_at(pp) - loss_at(pm)) / (2 * h);
        const double an = ks[0]->grad.data[i];
        max_rel = std::max(max_rel,
                           std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
    }
    for (std::size_t i = 0; i < params.biases[1].numel(); ++i) {
        EncoderParams<double> pp = params, pm = params;
        pp.biases[1].data[i] += h;
        pm.biases[1].data[i] -= h;
        const double fd = (loss_at(pp) - loss_at(pm)) / (2 * h);
        const double an = bs[1]->grad.data[i];
        max_rel = std::max(max_rel,
                           std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
    }
    CHECK(max_rel < 1e-4);
}

TEST_CASE("translation by the stride shifts interior features by one pixel") {
    auto p = init_encoder<float>(EncoderConfig{}, 10);
    const std::size_t hw = 48;
    DenseArray<float> base = random_image(hw, hw, 11);
    // shift the image content left by the first-block stride (2)
    DenseArray<float> shifted({3, hw, hw});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < hw; ++y)
            for (std::size_t x = 0; x + 2 < hw; ++x)
                shifted.at(c, y, x) = base.at(c, y, x + 2);
    DenseArray<float> fb = extract_features_value(p, base);
    DenseArray<float> fs = extract_features_value(p, shifted);
    // interior excludes the receptive-field boundary: the dilation-2 and
    // dilation-4 blocks reach 6 feature pixels, plus the shifted-in edge
    const std::size_t margin = 8;
    for (std::size_t c = 0; c < fb.shape[0]; c += 7)
        for (std::size_t y = margin; y < fb.shape[1] - margin; ++y)
            for (std::size_t x = margin; x + 1 < fb.shape[2] - margin; ++x)
                CHECK(std::abs(fs.at(c, y, x) - fb.at(c, y, x + 1)) < 1e-5f);
}

TEST_CASE("horizontally symmetric kernels commute with horizontal flips") {
    EncoderConfig cfg;
    cfg.widths = {8, 8};
    cfg.strides = {1, 1};
    cfg.dilations = {1, 2};
    auto p = init_encoder<float>(cfg, 12);
    // symmetrize every kernel along its x axis
    for (auto& k : p.kernels)
        for (std::size_t o = 0; o < k.shape[0]; ++o)
            for (std::size_t i = 0; i < k.shape[1]; ++i)
                for (std::size_t y = 0; y < k.shape[2]; ++y) {
                    const float m = (k.at(o, i, y, std::size_t{0}) + k.at(o, i, y, std::size_t{2})) / 2;
                    k.at(o, i, y, std::size_t{0}) = m;
                    k.at(o, i, y, std::size_t{2}) = m;
                }
    DenseArray<float> img = random_image(12, 12, 13);
    DenseArray<float> f1 = hflip(extract_features_value(p, img));
    DenseArray<float> f2 = extract_features_value(p, hflip(img));
    REQUIRE(f1.shape == f2.shape);
    for (std::size_t i = 0; i < f1.numel(); ++i) CHECK(std::abs(f1.data[i] - f2.data[i]) < 1e-5f);
}

TEST_CASE("parameter count matches shape arithmetic") {
    auto p = init_encoder<float>(EncoderConfig{}, 14);
    // 16*3*9+16 + 32*16*9+32 + 64*32*9+64 = 448+4640+18496 = 23584
    CHECK(p.parameter_count() == 23584);
}

TEST_SUITE_END();
