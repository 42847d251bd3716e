#include "csr/vae.hpp"

#include "csr/degrade.hpp"
#include "csr/layers.hpp"
#include "csr/lora.hpp"

namespace csr {

void build_vae(ParamStore& ps, const RunConfig& cfg, Rng& rng) {
    const int w0 = cfg.vae_widths[0], w1 = cfg.vae_widths[1], w2 = cfg.vae_widths[2];
    const int lc = cfg.latent_channels;
    // encoder
    create_conv(ps, "vae.encoder.conv_in", w0, 3, 3, rng);
    create_conv(ps, "vae.encoder.down0", w1, w0, 3, rng);
    create_resblock(ps, "vae.encoder.block0", w1, w1, 0, rng);
    create_conv(ps, "vae.encoder.down1", w2, w1, 3, rng);
    create_resblock(ps, "vae.encoder.block1", w2, w2, 0, rng);
    create_conv(ps, "vae.encoder.down2", w2, w2, 3, rng);
    create_resblock(ps, "vae.encoder.block2", w2, w2, 0, rng);
    create_norm(ps, "vae.encoder.norm_out", w2);
    create_conv(ps, "vae.encoder.conv_out", 2 * lc, w2, 3, rng);
    // decoder
    create_conv(ps, "vae.decoder.conv_in", w2, lc, 3, rng);
    create_resblock(ps, "vae.decoder.block0", w2, w2, 0, rng);
    create_conv(ps, "vae.decoder.up0", w1, w2, 3, rng);
    create_resblock(ps, "vae.decoder.block1", w1, w1, 0, rng);
    create_conv(ps, "vae.decoder.up1", w0, w1, 3, rng);
    create_resblock(ps, "vae.decoder.block2", w0, w0, 0, rng);
    create_conv(ps, "vae.decoder.up2", w0, w0, 3, rng);
    create_norm(ps, "vae.decoder.norm_out", w0);
    create_conv(ps, "vae.decoder.conv_out", 3, w0, 3, rng);
}

std::vector<std::string> vae_encoder_conv_layers(const RunConfig&) {
    return {"vae.encoder.conv_in",      "vae.encoder.down0",
            "vae.encoder.block0.conv1", "vae.encoder.down1",
            "vae.encoder.block1.conv1", "vae.encoder.down2",
            "vae.encoder.block2.conv1", "vae.encoder.conv_out"};
}

void create_vae_encoder_lora(ParamStore& ps, const RunConfig& cfg, Rng& rng) {
    for (const auto& layer : vae_encoder_conv_layers(cfg))
        create_lora(ps, layer, cfg.lora_rank, rng);
}

VaeEncodeOut vae_encode_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& images,
                              bool use_lora) {
    const Shape4 s = images->val.shape;
    if (s.h % 8 != 0 || s.w % 8 != 0)
        throw ValidationError("vae encode: spatial dims " + s.str() + " not divisible by 8");
    const int lc = cfg.latent_channels;
    auto h = conv(ps, "vae.encoder.conv_in", images, ConvSpec{1, 1}, use_lora);
    h = conv(ps, "vae.encoder.down0", ag::silu(h), ConvSpec{2, 1}, use_lora);
    h = resblock(ps, "vae.encoder.block0", h, h->val.shape.c, nullptr, use_lora);
    h = conv(ps, "vae.encoder.down1", ag::silu(h), ConvSpec{2, 1}, use_lora);
    h = resblock(ps, "vae.encoder.block1", h, h->val.shape.c, nullptr, use_lora);
    h = conv(ps, "vae.encoder.down2", ag::silu(h), ConvSpec{2, 1}, use_lora);
    h = resblock(ps, "vae.encoder.block2", h, h->val.shape.c, nullptr, use_lora);
    h = ag::silu(norm_feature(ps, "vae.encoder.norm_out", h));
    h = conv(ps, "vae.encoder.conv_out", h, ConvSpec{1, 1}, use_lora);
    VaeEncodeOut out;
    out.mean = ag::slice_channels(h, 0, lc);
    out.logvar = ag::slice_channels(h, lc, 2 * lc);
    return out;
}

ag::Var vae_decode_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& latent) {
    (void)cfg;
    auto h = conv(ps, "vae.decoder.conv_in", latent, ConvSpec{1, 1});
    h = resblock(ps, "vae.decoder.block0", h, h->val.shape.c, nullptr);
    h = conv(ps, "vae.decoder.up0", ag::nearest_up2(h), ConvSpec{1, 1});
    h = resblock(ps, "vae.decoder.block1", h, h->val.shape.c, nullptr);
    h = conv(ps, "vae.decoder.up1", ag::nearest_up2(h), ConvSpec{1, 1});
    h = resblock(ps, "vae.decoder.block2", h, h->val.shape.c, nullptr);
    h = conv(ps, "vae.decoder.up2", ag::nearest_up2(h), ConvSpec{1, 1});
    h = ag::silu(norm_feature(ps, "vae.decoder.norm_out", h));
    return conv(ps, "vae.decoder.conv_out", h, ConvSpec{1, 1});
}

// The plain wrappers clear the leaf cache before building, so they must not
// be called while a training step's graph is under construction.
Tensor4 vae_encode(ParamStore& ps, const RunConfig& cfg, const Tensor4& images, bool use_lora) {
    ps.end_step();
    auto out = vae_encode_graph(ps, cfg, ag::constant(images), use_lora);
    ps.end_step();
    return out.mean->val;
}

Tensor4 vae_decode_tensor(ParamStore& ps, const RunConfig& cfg, const Tensor4& latent) {
    ps.end_step();
    auto out = vae_decode_graph(ps, cfg, ag::constant(latent));
    ps.end_step();
    return out->val;
}

std::vector<ImageBuffer> vae_decode(ParamStore& ps, const RunConfig& cfg, const Tensor4& latent) {
    return tensor_to_images(vae_decode_tensor(ps, cfg, latent));
}

Tensor4 encode_lr(ParamStore& ps, const RunConfig& cfg, const std::vector<ImageBuffer>& lr,
                  int scale) {
    std::vector<ImageBuffer> up;
    up.reserve(lr.size());
    for (const auto& img : lr)
        up.push_back(scale == 1 ? img
                                : bicubic_resize(img, img.height * scale, img.width * scale));
    return vae_encode(ps, cfg, images_to_tensor(up), true);
}

}  // namespace csr
