#include <doctest.h>

#include "csr/degrade.hpp"
#include "csr/lora.hpp"
#include "csr/vae.hpp"

#include "gradcheck.hpp"

using namespace csr;
using csrtest::grad_check;
using csrtest::max_abs_diff;

namespace {

RunConfig tiny_cfg() {
    RunConfig cfg;
    cfg.vae_widths = {6, 8, 10};
    cfg.unet_width = 8;
    cfg.heads = 2;
    cfg.temb_dim = 8;
    cfg.cond_dim = 8;
    cfg.lora_rank = 2;
    cfg.image_size = 32;
    return cfg;
}

ImageBuffer rand_image(int size, uint64_t seed) {
    ImageBuffer img(size, size);
    Rng rng(seed);
    for (double& v : img.values) v = rng.uniform();
    return img;
}

}  // namespace

TEST_CASE("encode: /8 spatial contract and batch independence") {
    RunConfig cfg = tiny_cfg();
    ParamStore ps;
    Rng rng(1);
    build_vae(ps, cfg, rng);

    auto i0 = rand_image(32, 2);
    auto i1 = rand_image(32, 3);
    Tensor4 batch = images_to_tensor({i0, i1});
    Tensor4 lat = vae_encode(ps, cfg, batch, false);
    CHECK(lat.shape == Shape4{2, 4, 4, 4});

    Tensor4 single0 = vae_encode(ps, cfg, images_to_tensor({i0}), false);
    Tensor4 single1 = vae_encode(ps, cfg, images_to_tensor({i1}), false);
    const size_t item = (size_t)4 * 4 * 4;
    for (size_t i = 0; i < item; ++i) {
        CHECK(lat.v[i] == single0.v[i]);
        CHECK(lat.v[item + i] == single1.v[i]);
    }

    Tensor4 bad(1, 3, 30, 30);
    CHECK_THROWS_AS(vae_encode(ps, cfg, bad, false), ValidationError);
}

TEST_CASE("encode: zero-init lora routes identically") {
    RunConfig cfg = tiny_cfg();
    ParamStore ps;
    Rng rng(4);
    build_vae(ps, cfg, rng);
    create_vae_encoder_lora(ps, cfg, rng);
    Tensor4 x = images_to_tensor({rand_image(32, 5)});
    Tensor4 plain = vae_encode(ps, cfg, x, false);
    Tensor4 with = vae_encode(ps, cfg, x, true);
    CHECK(max_abs_diff(plain, with) == 0.0);

    // lora params exist under the mandated names
    CHECK(ps.has("vae.encoder.conv_in.lora.A"));
    CHECK(ps.has("vae.encoder.block2.conv1.lora.B"));

    // perturbed lora changes the latent
    Rng r2(6);
    fill_normal(ps.get("vae.encoder.down0.lora.B").value, r2, 0.0, 0.3);
    Tensor4 changed = vae_encode(ps, cfg, x, true);
    CHECK(max_abs_diff(plain, changed) > 0.0);
}

TEST_CASE("decode: 8x latent size and [0,1] clamp") {
    RunConfig cfg = tiny_cfg();
    ParamStore ps;
    Rng rng(7);
    build_vae(ps, cfg, rng);
    Tensor4 lat(2, 4, 4, 4);
    Rng r(8);
    fill_normal(lat, r, 0.0, 3.0);
    auto imgs = vae_decode(ps, cfg, lat);
    REQUIRE(imgs.size() == 2);
    CHECK(imgs[0].height == 32);
    CHECK(imgs[0].width == 32);
    for (const auto& img : imgs)
        for (double v : img.values) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
}

TEST_CASE("encode_lr: bicubic pre-upsample composition") {
    RunConfig cfg = tiny_cfg();
    cfg.scale = 4;
    ParamStore ps;
    Rng rng(9);
    build_vae(ps, cfg, rng);
    create_vae_encoder_lora(ps, cfg, rng);

    ImageBuffer lr = rand_image(8, 10);
    Tensor4 lat = encode_lr(ps, cfg, {lr}, 4);
    CHECK(lat.shape == Shape4{1, 4, 4, 4});

    // scale 1 with zero-init lora equals the plain encode
    ImageBuffer full = rand_image(32, 11);
    Tensor4 via_lr = encode_lr(ps, cfg, {full}, 1);
    Tensor4 direct = vae_encode(ps, cfg, images_to_tensor({full}), false);
    CHECK(max_abs_diff(via_lr, direct) == 0.0);

    // deterministic
    Tensor4 again = encode_lr(ps, cfg, {lr}, 4);
    CHECK(max_abs_diff(lat, again) == 0.0);
}

TEST_CASE("vae gradient check on every layer class") {
    RunConfig cfg;
    cfg.vae_widths = {4, 6, 8};
    cfg.lora_rank = 2;
    ParamStore ps;
    Rng rng(12);
    build_vae(ps, cfg, rng);
    create_vae_encoder_lora(ps, cfg, rng);
    ps.set_trainable_by_prefix({"vae."}, true);
    {
        Rng r2(13);
        fill_normal(ps.get("vae.encoder.conv_in.lora.B").value, r2, 0.0, 0.1);
    }

    Tensor4 x = images_to_tensor({rand_image(16, 14)});
    auto build = [&] {
        auto enc = vae_encode_graph(ps, cfg, ag::constant(x), true);
        auto recon = vae_decode_graph(ps, cfg, enc.mean);
        auto rec = ag::mse(recon, ag::constant(x));
        auto klt = ag::sub(ag::sub(ag::add_const(enc.logvar, 1.0),
                                   ag::mul(enc.mean, enc.mean)),
                           ag::exp_(enc.logvar));
        return ag::add(rec, ag::scale(ag::scale(ag::mean_all(klt), -0.5), 1e-2));
    };
    for (const char* n : {"vae.encoder.conv_in.w", "vae.encoder.down1.w",
                          "vae.encoder.block1.conv1.b", "vae.encoder.norm_out.g",
                          "vae.encoder.conv_out.w", "vae.encoder.conv_in.lora.A",
                          "vae.encoder.conv_in.lora.B", "vae.decoder.up0.w",
                          "vae.decoder.block2.conv1.w", "vae.decoder.conv_out.b"})
        CHECK_MESSAGE(grad_check(ps, n, build, 12) < 1e-4, n);
}
