#include <doctest.h>

#include <cmath>

#include "csr/degrade.hpp"
#include "csr/probe.hpp"

using namespace csr;

TEST_CASE("identity pipeline: no blur, scale 1, no noise, max quality") {
    Rng r(1);
    ImageBuffer hr = synth_toy_image(32, r);
    DegradeConfig cfg;
    cfg.blur_sigma_min = cfg.blur_sigma_max = 0.0;
    cfg.scale = 1;
    cfg.noise_sigma_min = cfg.noise_sigma_max = 0.0;
    cfg.quality_min = cfg.quality_max = 100.0;
    Rng rng(2);
    ImageBuffer out = degrade_image(hr, cfg, rng);
    for (size_t i = 0; i < hr.values.size(); ++i)
        CHECK(std::fabs(out.values[i] - hr.values[i]) <= 1.0 / 510);
}

TEST_CASE("shape and determinism") {
    Rng r(3);
    ImageBuffer hr = synth_toy_image(64, r);
    DegradeConfig cfg;
    cfg.scale = 4;
    Rng a(7), b(7), c(8);
    ImageBuffer oa = degrade_image(hr, cfg, a);
    ImageBuffer ob = degrade_image(hr, cfg, b);
    ImageBuffer oc = degrade_image(hr, cfg, c);
    CHECK(oa.height == 16);
    CHECK(oa.width == 16);
    CHECK(oa.values == ob.values);
    CHECK(oa.values != oc.values);
    for (double v : oa.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    ImageBuffer bad(60, 60);
    CHECK_THROWS_AS(degrade_image(bad, cfg, a), ValidationError);
}

TEST_CASE("values stay in [0,1] at every stage") {
    Rng r(11);
    ImageBuffer hr = synth_toy_image(32, r);
    DegradeConfig cfg;
    cfg.scale = 2;
    cfg.noise_sigma_min = cfg.noise_sigma_max = 0.3;  // strong noise forces clamping
    cfg.quality_min = cfg.quality_max = 10.0;
    Rng rng(12);
    ImageBuffer blurred = gaussian_blur(hr, 1.5);
    for (double v : blurred.values) CHECK((v >= 0.0 && v <= 1.0));
    ImageBuffer out = degrade_image(hr, cfg, rng);
    for (double v : out.values) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("bicubic downsample matches a direct convolution oracle") {
    // 16x16 ramp image
    ImageBuffer img(16, 16);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                img.at(c, y, x) = (x + 0.5 * y + 3.0 * c) / 64.0;
    ImageBuffer down = bicubic_resize(img, 4, 4);
    // oracle: direct evaluation of the separable Keys kernel (a=-0.5),
    // source coordinate (dst+0.5)*scale-0.5, clamp-to-edge
    for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 4; ++ox)
            for (int c = 0; c < 3; ++c) {
                const double fy = (oy + 0.5) * 4.0 - 0.5, fx = (ox + 0.5) * 4.0 - 0.5;
                const int iy = (int)std::floor(fy), ix = (int)std::floor(fx);
                double acc = 0.0, wsum = 0.0;
                for (int t = -1; t <= 2; ++t)
                    for (int u = -1; u <= 2; ++u) {
                        const double w = bicubic_weight(fy - (iy + t)) *
                                         bicubic_weight(fx - (ix + u));
                        const int yy = std::clamp(iy + t, 0, 15), xx = std::clamp(ix + u, 0, 15);
                        acc += w * img.at(c, yy, xx);
                        wsum += w;
                    }
                CHECK(down.at(c, oy, ox) == doctest::Approx(acc / wsum).epsilon(1e-12));
            }
}

TEST_CASE("bicubic kernel properties") {
    CHECK(bicubic_weight(0.0) == 1.0);
    CHECK(bicubic_weight(1.0) == doctest::Approx(0.0));
    CHECK(bicubic_weight(2.0) == 0.0);
    // interpolating: integer-shift samples reproduce the signal on interior
    ImageBuffer img(8, 8);
    Rng r(13);
    for (double& v : img.values) v = r.uniform();
    ImageBuffer same = bicubic_resize(img, 8, 8);
    for (size_t i = 0; i < img.values.size(); ++i)
        CHECK(same.values[i] == doctest::Approx(img.values[i]).epsilon(1e-9));
}

TEST_CASE("synth_toy_image: reproducibility, mean range, spectral content") {
    Rng a(5), b(5);
    ImageBuffer ia = synth_toy_image(32, a), ib = synth_toy_image(32, b);
    CHECK(ia.values == ib.values);

    Rng rng(6);
    int textured = 0;
    double mean_acc = 0.0;
    const int n = 100;
    for (int i = 0; i < n; ++i) {
        Rng img_rng = rng.fork(i);
        ImageBuffer img = synth_toy_image(32, img_rng);
        double m = 0.0;
        for (double v : img.values) m += v;
        m /= (double)img.values.size();
        mean_acc += m;
        if (hf_energy_fraction(img) > 1e-4) ++textured;
    }
    mean_acc /= n;
    CHECK(mean_acc > 0.2);
    CHECK(mean_acc < 0.8);
    CHECK(textured >= 95);

    CHECK_THROWS_AS(synth_toy_image(30, rng), ValidationError);
}

TEST_CASE("block DCT quantization: coarse quality damages, q=100 bypasses") {
    Rng r(17);
    ImageBuffer img = synth_toy_image(16, r);
    ImageBuffer soft = block_dct_quantize(img, 100.0);
    CHECK(soft.values == img.values);
    ImageBuffer hard = block_dct_quantize(img, 5.0);
    double diff = 0.0;
    for (size_t i = 0; i < img.values.size(); ++i)
        diff = std::max(diff, std::fabs(hard.values[i] - img.values[i]));
    CHECK(diff > 1e-3);
}
