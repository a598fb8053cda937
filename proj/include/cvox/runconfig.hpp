#pragma once

// One human-readable key=value file fully determines a run: dataset
// generation, model architecture, every training stage, the diffusion
// schedule, and evaluation. Unknown keys are rejected and a canonical echo
// (whose hash is embedded in artifacts) round-trips through the parser.

#include <string>
#include <vector>

#include "cvox/autoencoder.hpp"
#include "cvox/denoiser.hpp"
#include "cvox/training.hpp"

namespace cvox::runcfg {

// Desk-scale autoencoder: 4 mm latent cells (matching the x4 backbone
// downscale at 1 mm native) and a compact LTE MLP, sized so the full
// pipeline trains in CPU-minutes on the phantom corpus.
inline ae::AutoencoderConfig desk_autoencoder() {
    ae::AutoencoderConfig c;
    c.latent_spacing = coords::Vec3::Constant(4.0);
    c.lte.hidden = 32;
    c.lte.depth = 2;
    return c;
}

struct RunConfig {
    uint64_t seed = 7;
    std::string data_dir = "data/phantoms";
    std::string run_dir = "runs/desk";

    // phantom dataset
    int phantom_count = 20;
    int val_count = 8;  // validation subset, taken from the end of the id sort
    double phantom_fov = 32.0;
    std::vector<double> phantom_spacings{1.0, 1.5, 2.0};
    double phantom_noise = 0.01;
    uint64_t phantom_seed = 1234;

    // model + objectives
    ae::AutoencoderConfig autoencoder = desk_autoencoder();
    losses::LossWeights weights;
    training::OptimizerConfig optimizer;
    training::AugmentConfig augment;

    // shared stage shape
    int batches_per_epoch = 200;
    int effective_batch_size = 8;
    std::array<int64_t, 3> patch_shape{8, 8, 8};
    double input_buffer_cells = 1.0;

    // stage lengths and stage-specific knobs
    int pretrain_epochs = 10;
    double pretrain_spacing = 3.0;  // fixed-size pretraining grid spacing, mm
    int native_epochs = 12;
    int adversarial_start_epoch = 6;
    bool native_augment = true;
    int finetune_epochs = 2;
    int ddpm_epochs = 15;

    // diffusion
    diffusion::ScheduleKind schedule_kind = diffusion::ScheduleKind::scaled_linear;
    int timesteps = 1000;
    double beta_start = 0.0015;
    double beta_end = 0.0195;
    diffusion::UNetConfig unet;

    // generation + evaluation
    int sample_count = 16;
    std::vector<double> decode_spacings{1.0, 2.0};
    bool decode_gmm_native = true;
    int gmm_components = 4;
    int coverage_k = 5;

    void validate() const;
};

// Parses key=value lines ('#' comments, blank lines ok) over the defaults.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Applies one "key=value" override (CLI flags layer on top of the file).
void apply_override(RunConfig& config, const std::string& assignment);

// Canonical serialization: every key in fixed order. Re-parsing the echo
// reproduces the config, and the run hash is the fnv1a of this string.
std::string config_echo(const RunConfig& config);
uint64_t config_hash(const RunConfig& config);

// Stage plans and the noise schedule as driven by the config.
training::StagePlan make_stage_plan(const RunConfig& config, training::StageKind kind);
diffusion::NoiseSchedule make_noise_schedule(const RunConfig& config);

}  // namespace cvox::runcfg
