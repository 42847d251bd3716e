#ifndef CSR_STORE_HPP
#define CSR_STORE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "csr/tensor.hpp"

namespace csr {

// Flat-key run configuration. Every knob the pipeline reads lives here;
// unknown keys are rejected and all values validated on load.
struct RunConfig {
    // noise schedule
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int steps = 50;  // spaced inference steps

    // latent space adjustment
    double alpha = 0.01;
    double beta = 0.01;
    double early_frac = 0.4;
    double late_frac = 0.8;

    // model
    std::vector<int> vae_widths = {32, 64, 128};
    int latent_channels = 4;
    int unet_width = 64;
    int heads = 4;
    int window_s = 4;
    int lora_rank = 16;
    int temb_dim = 128;
    int cond_dim = 128;

    // training
    int64_t iters = 5000;
    int batch = 4;
    int image_size = 64;
    int scale = 4;
    double lr = 5e-5;
    uint64_t seed = 0;
    int64_t ckpt_every = 1000;
    int data_images = 4;

    // degradation ranges
    double degrade_blur_min = 0.2;
    double degrade_blur_max = 2.0;
    double degrade_noise_min = 0.0;
    double degrade_noise_max = 0.04;
    double degrade_quality_min = 40.0;
    double degrade_quality_max = 95.0;

    // ablation switches
    bool dpm_only = false;  // ControlNet-only baseline: implies the two below
    bool gspm_enabled = true;
    bool dpm_cross_attn = true;
    bool dpm_window_partition = true;
};

RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& json_text);  // same validation, from memory
void validate_config(const RunConfig& cfg);

// One named tensor inside a CSRK container. Data is 32-bit on disk and in
// this record; conversion to the double compute type happens at the
// parameter-store boundary.
struct TensorRecord {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<float> data;
    bool trainable = false;

    int64_t numel() const {
        int64_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }
};

enum class Stage : uint32_t { Vae = 0, Backbone = 1, Control = 2 };

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& s);

struct Checkpoint {
    uint32_t format_version = 1;
    Stage stage = Stage::Vae;
    std::vector<TensorRecord> records;
    uint64_t rng_seed = 0;
    // Model-defining config embedded as a reserved record so checkpoints are
    // self-describing at inference time.
    bool has_config = false;
    RunConfig config;

    const TensorRecord* find(const std::string& name) const;
};

// CSRK layout: magic "CSRK" | u32 version | u32 record_count | records.
// Stage, rng_seed and the embedded config ride in reserved records
// ("__meta__", "__config__") holding raw bit patterns in f32 slots, keeping
// the container layout unchanged.
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

// RGB image, values in [0, 1], planar layout [c][y][x].
struct ImageBuffer {
    int height = 0, width = 0;
    std::vector<double> values;  // 3 * height * width

    ImageBuffer() = default;
    ImageBuffer(int h, int w) : height(h), width(w), values((size_t)3 * h * w, 0.0) {}

    double& at(int c, int y, int x) { return values[((size_t)c * height + y) * width + x]; }
    double at(int c, int y, int x) const { return values[((size_t)c * height + y) * width + x]; }
};

// Binary P6, maxval 255. Read maps v/255; write rounds and clamps.
ImageBuffer read_ppm(const std::string& path);
void write_ppm(const std::string& path, const ImageBuffer& img);

Tensor4 images_to_tensor(const std::vector<ImageBuffer>& imgs);
std::vector<ImageBuffer> tensor_to_images(const Tensor4& t);  // clamps to [0,1]

}  // namespace csr

#endif
