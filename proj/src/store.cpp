#include "csr/store.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace csr {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'R', 'K'};
constexpr const char* kMetaName = "__meta__";
constexpr const char* kConfigName = "__config__";

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    os.write((const char*)b, 4);
}

uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read((char*)b, 4))
        throw ParseError("checkpoint truncated while reading " + what);
    return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) | ((uint32_t)b[3] << 24);
}

void put_f32(std::ostream& os, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
}

float bits_to_f32(uint32_t bits) {
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

uint32_t f32_to_bits(float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    return bits;
}

void write_record(std::ostream& os, const TensorRecord& r) {
    put_u32(os, (uint32_t)r.name.size());
    os.write(r.name.data(), (std::streamsize)r.name.size());
    put_u32(os, (uint32_t)r.dims.size());
    for (uint32_t d : r.dims) put_u32(os, d);
    os.put(r.trainable ? 1 : 0);
    for (float f : r.data) put_f32(os, f);
}

TensorRecord read_record(std::istream& is) {
    TensorRecord r;
    uint32_t name_len = get_u32(is, "name length");
    r.name.resize(name_len);
    if (!is.read(r.name.data(), name_len))
        throw ParseError("checkpoint truncated while reading name");
    uint32_t ndim = get_u32(is, "ndim of '" + r.name + "'");
    r.dims.resize(ndim);
    int64_t numel = 1;
    for (uint32_t i = 0; i < ndim; ++i) {
        r.dims[i] = get_u32(is, "dims of '" + r.name + "'");
        numel *= r.dims[i];
    }
    char flag;
    if (!is.get(flag)) throw ParseError("checkpoint truncated while reading flag of '" + r.name + "'");
    r.trainable = flag != 0;
    r.data.resize((size_t)numel);
    for (int64_t i = 0; i < numel; ++i) {
        std::streampos before = is.tellg();
        unsigned char b[4];
        if (!is.read((char*)b, 4)) {
            int64_t got = 0;
            if (before >= 0) got = i * 4;
            throw ParseError("truncated data for '" + r.name + "': expected " +
                             std::to_string(numel * 4) + " bytes, got " + std::to_string(got));
        }
        r.data[(size_t)i] =
            bits_to_f32((uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) |
                        ((uint32_t)b[3] << 24));
    }
    return r;
}

}  // namespace

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Vae: return "vae";
        case Stage::Backbone: return "backbone";
        case Stage::Control: return "control";
    }
    return "?";
}

Stage stage_from_name(const std::string& s) {
    if (s == "vae") return Stage::Vae;
    if (s == "backbone") return Stage::Backbone;
    if (s == "control") return Stage::Control;
    throw ValidationError("unknown stage '" + s + "' (expected vae|backbone|control)");
}

const TensorRecord* Checkpoint::find(const std::string& name) const {
    for (const auto& r : records)
        if (r.name == name) return &r;
    return nullptr;
}

namespace {

// The embedded config: integers and flags as u32 bit patterns, reals split
// into two u32 words so they survive the f32 container exactly.
class ConfigCodec {
public:
    static TensorRecord encode(const RunConfig& c) {
        ConfigCodec enc;
        enc.put_u32(1);  // encoding version
        enc.put_u32((uint32_t)c.T);
        enc.put_u32((uint32_t)c.steps);
        enc.put_u32((uint32_t)c.unet_width);
        enc.put_u32((uint32_t)c.heads);
        enc.put_u32((uint32_t)c.window_s);
        enc.put_u32((uint32_t)c.latent_channels);
        enc.put_u32((uint32_t)c.temb_dim);
        enc.put_u32((uint32_t)c.cond_dim);
        for (int w : c.vae_widths) enc.put_u32((uint32_t)w);
        enc.put_u32((uint32_t)c.lora_rank);
        enc.put_u32((uint32_t)c.scale);
        enc.put_u32((uint32_t)c.image_size);
        uint32_t flags = 0;
        if (c.gspm_enabled) flags |= 1;
        if (c.dpm_cross_attn) flags |= 2;
        if (c.dpm_window_partition) flags |= 4;
        if (c.dpm_only) flags |= 8;
        enc.put_u32(flags);
        enc.put_f64(c.beta_start);
        enc.put_f64(c.beta_end);
        enc.put_f64(c.alpha);
        enc.put_f64(c.beta);
        enc.put_f64(c.early_frac);
        enc.put_f64(c.late_frac);
        TensorRecord r;
        r.name = kConfigName;
        r.dims = {(uint32_t)enc.slots_.size()};
        r.data = std::move(enc.slots_);
        return r;
    }

    static RunConfig decode(const TensorRecord& r) {
        ConfigCodec dec;
        dec.slots_ = r.data;
        if (dec.get_u32() != 1) throw ParseError("unknown __config__ encoding version");
        RunConfig c;
        c.T = (int)dec.get_u32();
        c.steps = (int)dec.get_u32();
        c.unet_width = (int)dec.get_u32();
        c.heads = (int)dec.get_u32();
        c.window_s = (int)dec.get_u32();
        c.latent_channels = (int)dec.get_u32();
        c.temb_dim = (int)dec.get_u32();
        c.cond_dim = (int)dec.get_u32();
        c.vae_widths = {(int)dec.get_u32(), (int)dec.get_u32(), (int)dec.get_u32()};
        c.lora_rank = (int)dec.get_u32();
        c.scale = (int)dec.get_u32();
        c.image_size = (int)dec.get_u32();
        const uint32_t flags = dec.get_u32();
        c.gspm_enabled = flags & 1;
        c.dpm_cross_attn = flags & 2;
        c.dpm_window_partition = flags & 4;
        c.dpm_only = flags & 8;
        c.beta_start = dec.get_f64();
        c.beta_end = dec.get_f64();
        c.alpha = dec.get_f64();
        c.beta = dec.get_f64();
        c.early_frac = dec.get_f64();
        c.late_frac = dec.get_f64();
        return c;
    }

private:
    std::vector<float> slots_;
    size_t pos_ = 0;

    void put_u32(uint32_t v) {
        float f;
        std::memcpy(&f, &v, 4);
        slots_.push_back(f);
    }
    void put_f64(double d) {
        uint64_t bits;
        std::memcpy(&bits, &d, 8);
        put_u32((uint32_t)(bits & 0xffffffffULL));
        put_u32((uint32_t)(bits >> 32));
    }
    uint32_t get_u32() {
        if (pos_ >= slots_.size()) throw ParseError("truncated __config__ record");
        uint32_t v;
        std::memcpy(&v, &slots_[pos_++], 4);
        return v;
    }
    double get_f64() {
        const uint64_t lo = get_u32(), hi = get_u32();
        const uint64_t bits = lo | (hi << 32);
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
};

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::set<std::string> seen;
    for (const auto& r : ckpt.records) {
        if (r.name == kMetaName || r.name == kConfigName)
            throw ValidationError("tensor name '" + r.name + "' is reserved");
        if (!seen.insert(r.name).second)
            throw ValidationError("duplicate tensor name '" + r.name + "'");
        if ((int64_t)r.data.size() != r.numel())
            throw ValidationError("record '" + r.name + "': dims/product mismatch");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kMagic, 4);
    put_u32(os, ckpt.format_version);
    const uint32_t extra = 1 + (ckpt.has_config ? 1 : 0);
    put_u32(os, (uint32_t)(ckpt.records.size() + extra));

    TensorRecord meta;
    meta.name = kMetaName;
    meta.dims = {3};
    meta.data = {bits_to_f32((uint32_t)ckpt.stage),
                 bits_to_f32((uint32_t)(ckpt.rng_seed & 0xffffffffULL)),
                 bits_to_f32((uint32_t)(ckpt.rng_seed >> 32))};
    write_record(os, meta);
    if (ckpt.has_config) write_record(os, ConfigCodec::encode(ckpt.config));

    for (const auto& r : ckpt.records) write_record(os, r);
    os.flush();
    if (!os) throw std::runtime_error("I/O failure while writing " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw ParseError("bad magic at offset 0 in " + path + " (expected \"CSRK\")");
    Checkpoint ckpt;
    ckpt.format_version = get_u32(is, "version");
    uint32_t count = get_u32(is, "record count");
    bool have_meta = false;
    std::set<std::string> seen;
    for (uint32_t i = 0; i < count; ++i) {
        TensorRecord r = read_record(is);
        if (r.name == kMetaName) {
            if (r.data.size() != 3) throw ParseError("malformed __meta__ record");
            uint32_t stage_code = f32_to_bits(r.data[0]);
            if (stage_code > 2) throw ParseError("invalid stage code in __meta__");
            ckpt.stage = (Stage)stage_code;
            ckpt.rng_seed = (uint64_t)f32_to_bits(r.data[1]) |
                            ((uint64_t)f32_to_bits(r.data[2]) << 32);
            have_meta = true;
            continue;
        }
        if (r.name == kConfigName) {
            ckpt.config = ConfigCodec::decode(r);
            ckpt.has_config = true;
            continue;
        }
        if (!seen.insert(r.name).second)
            throw ParseError("duplicate tensor name '" + r.name + "'");
        ckpt.records.push_back(std::move(r));
    }
    if (!have_meta) throw ParseError("missing __meta__ record in " + path);
    return ckpt;
}

// ---- PPM --------------------------------------------------------------

namespace {

// Skips whitespace and '#' comments, then reads one token.
std::string ppm_token(std::istream& is) {
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
        if (ch == '#') {
            while ((ch = is.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (!std::isspace(ch)) break;
    }
    if (ch == EOF) throw ParseError("unexpected end of PPM header");
    for (; ch != EOF && !std::isspace(ch); ch = is.get()) tok.push_back((char)ch);
    return tok;
}

}  // namespace

ImageBuffer read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::string magic = ppm_token(is);
    if (magic != "P6") throw ParseError(path + ": not a binary P6 PPM (got '" + magic + "')");
    int w = std::stoi(ppm_token(is));
    int h = std::stoi(ppm_token(is));
    int maxval = std::stoi(ppm_token(is));
    if (maxval != 255) throw ParseError(path + ": maxval must be 255, got " + std::to_string(maxval));
    if (w <= 0 || h <= 0) throw ParseError(path + ": invalid dimensions");
    std::vector<unsigned char> raw((size_t)3 * w * h);
    if (!is.read((char*)raw.data(), (std::streamsize)raw.size()))
        throw ParseError(path + ": truncated pixel data");
    ImageBuffer img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = raw[((size_t)y * w + x) * 3 + c] / 255.0;
    return img;
}

void write_ppm(const std::string& path, const ImageBuffer& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw((size_t)3 * img.width * img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                raw[((size_t)y * img.width + x) * 3 + c] = (unsigned char)std::lround(v * 255.0);
            }
    os.write((const char*)raw.data(), (std::streamsize)raw.size());
    if (!os) throw std::runtime_error("I/O failure while writing " + path);
}

Tensor4 images_to_tensor(const std::vector<ImageBuffer>& imgs) {
    if (imgs.empty()) throw ValidationError("images_to_tensor: empty batch");
    int h = imgs[0].height, w = imgs[0].width;
    Tensor4 t((int)imgs.size(), 3, h, w);
    for (size_t b = 0; b < imgs.size(); ++b) {
        if (imgs[b].height != h || imgs[b].width != w)
            throw ValidationError("images_to_tensor: mixed image sizes in batch");
        std::copy(imgs[b].values.begin(), imgs[b].values.end(),
                  t.v.begin() + (size_t)b * 3 * h * w);
    }
    return t;
}

std::vector<ImageBuffer> tensor_to_images(const Tensor4& t) {
    if (t.shape.c != 3) throw ValidationError("tensor_to_images: need 3 channels");
    std::vector<ImageBuffer> out;
    for (int b = 0; b < t.shape.n; ++b) {
        ImageBuffer img(t.shape.h, t.shape.w);
        for (size_t i = 0; i < img.values.size(); ++i) {
            double v = t.v[(size_t)b * 3 * t.shape.h * t.shape.w + i];
            img.values[i] = std::clamp(v, 0.0, 1.0);
        }
        out.push_back(std::move(img));
    }
    return out;
}

// ---- config -----------------------------------------------------------

namespace {

using nlohmann::json;

[[noreturn]] void cfg_fail(const std::string& key, const std::string& why) {
    throw ValidationError("config key \"" + key + "\": " + why);
}

double want_number(const json& v, const std::string& key) {
    if (!v.is_number()) cfg_fail(key, "expected a number");
    return v.get<double>();
}

int64_t want_int(const json& v, const std::string& key) {
    if (!v.is_number_integer()) cfg_fail(key, "expected an integer");
    return v.get<int64_t>();
}

bool want_bool(const json& v, const std::string& key) {
    if (!v.is_boolean()) cfg_fail(key, "expected a boolean");
    return v.get<bool>();
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!root.is_object()) throw ValidationError("config must be a JSON object");

    // Flatten one nesting level: {"degrade": {"scale": 4}} -> "degrade.scale".
    std::vector<std::pair<std::string, json>> kv;
    for (auto& [k, v] : root.items()) {
        if (v.is_object()) {
            for (auto& [k2, v2] : v.items()) {
                if (v2.is_object()) cfg_fail(k + "." + k2, "nesting deeper than two levels");
                kv.emplace_back(k + "." + k2, v2);
            }
        } else {
            kv.emplace_back(k, v);
        }
    }

    RunConfig cfg;
    for (auto& [key, v] : kv) {
        if (key == "T") cfg.T = (int)want_int(v, key);
        else if (key == "beta_start") cfg.beta_start = want_number(v, key);
        else if (key == "beta_end") cfg.beta_end = want_number(v, key);
        else if (key == "steps") cfg.steps = (int)want_int(v, key);
        else if (key == "alpha") cfg.alpha = want_number(v, key);
        else if (key == "beta") cfg.beta = want_number(v, key);
        else if (key == "early_frac") cfg.early_frac = want_number(v, key);
        else if (key == "late_frac") cfg.late_frac = want_number(v, key);
        else if (key == "vae_widths") {
            if (!v.is_array() || v.size() != 3) cfg_fail(key, "expected an array of 3 integers");
            cfg.vae_widths.clear();
            for (auto& e : v) cfg.vae_widths.push_back((int)want_int(e, key));
        }
        else if (key == "latent_channels") cfg.latent_channels = (int)want_int(v, key);
        else if (key == "unet_width") cfg.unet_width = (int)want_int(v, key);
        else if (key == "heads") cfg.heads = (int)want_int(v, key);
        else if (key == "window_s") cfg.window_s = (int)want_int(v, key);
        else if (key == "lora_rank") cfg.lora_rank = (int)want_int(v, key);
        else if (key == "temb_dim") cfg.temb_dim = (int)want_int(v, key);
        else if (key == "cond_dim") cfg.cond_dim = (int)want_int(v, key);
        else if (key == "iters") cfg.iters = want_int(v, key);
        else if (key == "batch") cfg.batch = (int)want_int(v, key);
        else if (key == "image_size") cfg.image_size = (int)want_int(v, key);
        else if (key == "scale") cfg.scale = (int)want_int(v, key);
        else if (key == "lr") cfg.lr = want_number(v, key);
        else if (key == "seed") cfg.seed = (uint64_t)want_int(v, key);
        else if (key == "ckpt_every") cfg.ckpt_every = want_int(v, key);
        else if (key == "data_images") cfg.data_images = (int)want_int(v, key);
        else if (key == "degrade.blur_min") cfg.degrade_blur_min = want_number(v, key);
        else if (key == "degrade.blur_max") cfg.degrade_blur_max = want_number(v, key);
        else if (key == "degrade.noise_min") cfg.degrade_noise_min = want_number(v, key);
        else if (key == "degrade.noise_max") cfg.degrade_noise_max = want_number(v, key);
        else if (key == "degrade.quality_min") cfg.degrade_quality_min = want_number(v, key);
        else if (key == "degrade.quality_max") cfg.degrade_quality_max = want_number(v, key);
        else if (key == "dpm_only") cfg.dpm_only = want_bool(v, key);
        else if (key == "gspm_enabled") cfg.gspm_enabled = want_bool(v, key);
        else if (key == "dpm_cross_attn") cfg.dpm_cross_attn = want_bool(v, key);
        else if (key == "dpm_window_partition") cfg.dpm_window_partition = want_bool(v, key);
        else cfg_fail(key, "unknown key");
    }

    if (cfg.dpm_only) {
        cfg.gspm_enabled = false;
        cfg.dpm_cross_attn = false;
    }
    validate_config(cfg);
    return cfg;
}

void validate_config(const RunConfig& cfg) {
    if (cfg.T < 1) cfg_fail("T", "must be >= 1");
    if (!(cfg.beta_start > 0.0 && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0))
        cfg_fail("beta_start/beta_end", "need 0 < beta_start <= beta_end < 1");
    if (cfg.steps < 1 || cfg.steps > cfg.T) cfg_fail("steps", "must be in [1, T]");
    if (cfg.alpha < 0.0) cfg_fail("alpha", "must be >= 0");
    if (cfg.beta < 0.0) cfg_fail("beta", "must be >= 0");
    if (cfg.early_frac < 0.0 || cfg.early_frac > 1.0) cfg_fail("early_frac", "must be in [0,1]");
    if (cfg.late_frac < 0.0 || cfg.late_frac > 1.0) cfg_fail("late_frac", "must be in [0,1]");
    if (cfg.early_frac > cfg.late_frac) cfg_fail("early_frac", "must be <= late_frac");
    if (cfg.vae_widths.size() != 3) cfg_fail("vae_widths", "need exactly 3 stage widths");
    for (int wd : cfg.vae_widths)
        if (wd < 1) cfg_fail("vae_widths", "widths must be positive");
    if (cfg.latent_channels < 1) cfg_fail("latent_channels", "must be positive");
    if (cfg.unet_width < 2) cfg_fail("unet_width", "must be >= 2");
    if (cfg.heads < 1) cfg_fail("heads", "must be >= 1");
    if (cfg.unet_width % cfg.heads != 0) cfg_fail("heads", "must divide unet_width");
    if (cfg.window_s < 1) cfg_fail("window_s", "must be >= 1");
    if (cfg.lora_rank < 1) cfg_fail("lora_rank", "must be >= 1");
    if (cfg.temb_dim < 2 || cfg.temb_dim % 2 != 0) cfg_fail("temb_dim", "must be a positive even number");
    if (cfg.cond_dim < 4 || cfg.cond_dim % 4 != 0) cfg_fail("cond_dim", "must be a positive multiple of 4");
    if (cfg.iters < 0) cfg_fail("iters", "must be >= 0");
    if (cfg.batch < 1) cfg_fail("batch", "must be >= 1");
    if (cfg.scale != 1 && cfg.scale != 2 && cfg.scale != 4) cfg_fail("scale", "must be 1, 2 or 4");
    if (cfg.image_size < 8 || cfg.image_size % (8 * cfg.scale) != 0)
        cfg_fail("image_size", "must be divisible by 8*scale");
    if (cfg.lr <= 0.0) cfg_fail("lr", "must be > 0");
    if (cfg.ckpt_every < 1) cfg_fail("ckpt_every", "must be >= 1");
    if (cfg.data_images < 1) cfg_fail("data_images", "must be >= 1");
    if (cfg.degrade_blur_min < 0 || cfg.degrade_blur_max < cfg.degrade_blur_min)
        cfg_fail("degrade.blur_min/max", "need 0 <= min <= max");
    if (cfg.degrade_noise_min < 0 || cfg.degrade_noise_max < cfg.degrade_noise_min)
        cfg_fail("degrade.noise_min/max", "need 0 <= min <= max");
    if (cfg.degrade_quality_min < 1 || cfg.degrade_quality_max > 100 ||
        cfg.degrade_quality_max < cfg.degrade_quality_min)
        cfg_fail("degrade.quality_min/max", "need 1 <= min <= max <= 100");
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

}  // namespace csr
