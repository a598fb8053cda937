#pragma once

// Stage orchestration: fixed-grid pretraining, native-resolution patch
// training on exscribed context grids, decoder fine-tuning, and diffusion
// training on encoded latents — plus input augmentation, checkpoint
// selection, and stage-order bookkeeping.

#include <iosfwd>

#include "cvox/autoencoder.hpp"
#include "cvox/denoiser.hpp"
#include "cvox/losses.hpp"

namespace cvox::training {

enum class StageKind { pretrain, native_patch, decoder_finetune, ddpm };

const char* stage_name(StageKind k);
StageKind stage_from_name(const std::string& name);

// Input-side augmentation: an optional trilinear resample to a random
// isotropic spacing, then Gaussian intensity noise whose sigma is drawn in
// HU and applied through the CT window slope (sigma / 3000) so the same
// range is meaningful on [0, 1]-scaled volumes.
struct AugmentConfig {
    double resample_probability = 0.2;
    double spacing_lo = 1.0;  // resample target spacing range, mm
    double spacing_hi = 2.0;
    double noise_sigma_lo = 1.0;  // sigma range, HU
    double noise_sigma_hi = 70.0;

    void validate() const;
};

using OptimizerConfig = nn::AdamW<float>::Config;

// One training stage, fully specified. `weights` carries the adversarial
// start epoch; the adversarial term only ever applies to the native stage.
struct StagePlan {
    StageKind kind = StageKind::pretrain;
    int epochs = 1;
    int batches_per_epoch = 200;
    int effective_batch_size = 8;  // realized by gradient accumulation
    std::array<int64_t, 3> patch_shape{12, 12, 12};  // native/fine-tune only
    double input_buffer_cells = 1.0;  // context margin around C_Z, input voxels
    bool augment_enabled = false;
    AugmentConfig augment;
    losses::LossWeights weights;
    OptimizerConfig optimizer;

    int adversarial_start_epoch() const { return weights.adversarial_start_epoch; }
    void validate() const;
};

// One training/validation item: an intensity volume plus its tissue mask.
struct Sample {
    Volume image;
    TissueMask mask;
    std::string id;
};

struct EpochRecord {
    int epoch = 0;            // 0-based
    double train_loss = 0.0;  // mean per-batch objective
    double val_loss = 0.0;    // validation l1 (AE stages) / hybrid loss (ddpm)
};

struct StageHistory {
    StageKind kind = StageKind::pretrain;
    double initial_val_loss = 0.0;  // measured before the first step
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    int64_t optimizer_steps = 0;
    int64_t disc_steps = 0;          // discriminator optimizer steps
    int64_t adversarial_evals = 0;   // generator-term evaluations
    int64_t nesting_checks = 0;      // passed grid-nesting assertions
    int64_t augment_calls = 0;
    int64_t augment_resamples = 0;   // augment calls that resampled

    std::vector<double> val_curve() const;
};

struct TrainOptions {
    uint64_t seed = 0;
    std::ostream* log = nullptr;  // optional JSON-lines epoch log
};

// argmin of the validation curve; ties break to the earliest epoch
std::size_t select_checkpoint(const std::vector<double>& val_losses);

// The native stage refuses to start without a pretrain checkpoint and
// fine-tuning refuses without a native-stage checkpoint, unless overridden.
void enforce_stage_order(StageKind next, bool has_pretrain, bool has_native,
                         bool allow_out_of_order);

// fnv1a over name + raw values of every parameter whose name starts with
// `prefix` ("enc." / "dec." split the autoencoder halves)
uint64_t param_subset_hash(const nn::ParamRegistry<float>& reg, const std::string& prefix);

// Returns the volume with its coordinate space widened so that latent grids
// exscribed around any interior patch (plus the cropped context around them)
// stay inside it. The space is a validation envelope only; voxel data and
// grid geometry are untouched, and the space never shrinks.
Volume widen_space(const Volume& volume, const ae::AutoencoderConfig& cfg,
                   double input_buffer_cells);

// Trilinear resample onto an isotropic-spacing grid anchored at the volume's
// low corner (used for the fixed-size pretraining set and by augment).
Volume resample_to_spacing(const Volume& volume, const coords::Vec3& spacing);

Volume augment(const Volume& volume, const AugmentConfig& config, uint64_t seed);

// Mean whole-volume reconstruction l1 over the validation set.
double validation_l1(const ae::Autoencoder<float>& model, const std::vector<Sample>& val);

// Whole-volume reconstruction training on one fixed shape/spacing.
StageHistory run_pretrain(const StagePlan& plan, ae::Autoencoder<float>& model,
                          const std::vector<Sample>& train, const std::vector<Sample>& val,
                          const TrainOptions& opts);

// Mask-centered patches at native resolution: C_X-hat from the patch, C_Z
// exscribed around it, C_X cropped from the source with context, optional
// augmentation, adversarial term after its start epoch.
StageHistory run_native_patch_stage(const StagePlan& plan, ae::Autoencoder<float>& model,
                                    const std::vector<Sample>& train,
                                    const std::vector<Sample>& val, const TrainOptions& opts);

// Same step construction, but the encoder is frozen and only decoder-side
// parameters ("dec.*") are stepped.
StageHistory run_decoder_finetune(const StagePlan& plan, ae::Autoencoder<float>& model,
                                  const std::vector<Sample>& train,
                                  const std::vector<Sample>& val, const TrainOptions& opts);

// Deterministic latent (posterior mean) per sample on the default latent grid.
std::vector<ae::LatentVolume> encode_dataset(const ae::Autoencoder<float>& model,
                                             const std::vector<Sample>& data);

// Single global standard deviation over every latent value (population form).
double latent_global_std(const std::vector<ae::LatentVolume>& latents);

struct DdpmTrainResult {
    StageHistory history;
    double latent_std = 1.0;  // divisor applied to latents before diffusion
};

// Hybrid-loss DDPM training on encoded, std-normalized latents. The
// autoencoder stays frozen; `net` is trained in place and left at the best
// validation epoch.
DdpmTrainResult run_ddpm(const StagePlan& plan, const ae::Autoencoder<float>& model,
                         diffusion::UNet<float>& net, const diffusion::NoiseSchedule& schedule,
                         const std::vector<Sample>& train, const std::vector<Sample>& val,
                         const TrainOptions& opts);

}  // namespace cvox::training
