#pragma once

// End-to-end run orchestration on top of the training stages: dataset
// generation and loading, checkpoint wiring between stages, latent encoding,
// diffusion sampling, multi-resolution decoding, and the consolidated
// evaluation report. Every step is deterministic given the run config, so a
// rerun with the same seed reproduces the report byte for byte.

#include <ostream>

#include "cvox/checkpoint.hpp"
#include "cvox/runconfig.hpp"
#include "cvox/training.hpp"

namespace cvox::pipeline {

// ---------------------------------------------------------------------------
// run directory layout
// ---------------------------------------------------------------------------

struct RunPaths {
    std::string run_dir;

    std::string config_echo() const { return run_dir + "/config.echo"; }
    std::string checkpoints_dir() const { return run_dir + "/checkpoints"; }
    std::string samples_dir() const { return run_dir + "/samples"; }
    std::string latents_dir() const { return run_dir + "/latents"; }
    std::string reports_dir() const { return run_dir + "/reports"; }
    std::string logs() const { return run_dir + "/logs.jsonl"; }
    std::string checkpoint(training::StageKind kind) const;
    std::string report() const { return reports_dir() + "/report.json"; }
};

RunPaths run_paths(const runcfg::RunConfig& config);

// Creates the run directory tree and writes the canonical config echo.
RunPaths ensure_run_dir(const runcfg::RunConfig& config);

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

// Rasterizes `phantom.count` phantoms, cycling through the configured native
// spacings, and writes volume + mask NIfTI pairs under data.dir.
void generate_phantom_dataset(const runcfg::RunConfig& config);

// True when data.dir holds the expected number of volume/mask pairs.
bool dataset_present(const runcfg::RunConfig& config);

struct Dataset {
    std::vector<training::Sample> train;
    std::vector<training::Sample> val;
};

// Loads the dataset sorted by id; the last `phantom.val_count` ids become the
// validation split. Generates the dataset first if it is not present.
Dataset load_dataset(const runcfg::RunConfig& config);

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

inline constexpr const char* kAutoencoderKind = "autoencoder";
inline constexpr const char* kDenoiserKind = "denoiser";

void save_autoencoder_checkpoint(const ae::Autoencoder<float>& model,
                                 const runcfg::RunConfig& config, training::StageKind stage,
                                 const training::StageHistory& history);

// Builds the model from the config and loads the parameters saved after
// `stage`; refuses checkpoints from a different config.
ae::Autoencoder<float> load_autoencoder(const runcfg::RunConfig& config,
                                        training::StageKind stage);

void save_denoiser_checkpoint(const diffusion::UNet<float>& net, const runcfg::RunConfig& config,
                              const training::DdpmTrainResult& result,
                              const coords::CoordGrid& latent_grid);

struct DenoiserBundle {
    diffusion::UNet<float> net;
    double latent_std = 1.0;
    coords::CoordGrid latent_grid;
};

DenoiserBundle load_denoiser(const runcfg::RunConfig& config);

// ---------------------------------------------------------------------------
// pipeline steps (each reads/writes run-dir artifacts)
// ---------------------------------------------------------------------------

// Runs one autoencoder training stage: enforces stage order from which
// checkpoints exist, seeds from the config, saves the stage checkpoint.
training::StageHistory run_autoencoder_stage(const runcfg::RunConfig& config,
                                             training::StageKind stage, bool allow_out_of_order,
                                             std::ostream* log);

// Encodes every dataset volume with the fine-tuned autoencoder and writes the
// latents as channel NIfTIs under latents/.
void encode_all(const runcfg::RunConfig& config, std::ostream* log);

// Trains the latent diffusion model and saves the denoiser checkpoint
// (including the latent normalization scalar and the canonical latent grid).
training::DdpmTrainResult run_ddpm_stage(const runcfg::RunConfig& config,
                                         bool allow_out_of_order, std::ostream* log);

// Shared latent grid of the training set (all phantoms share one FOV box, so
// their exscribed latent grids coincide); derived from geometry alone.
coords::CoordGrid canonical_latent_grid(const runcfg::RunConfig& config,
                                        const Dataset& dataset);

// Draws `sample.count` latents from the denoiser and writes them under
// samples/ as channel NIfTIs (already multiplied back to latent scale).
void sample_all(const runcfg::RunConfig& config, std::ostream* log);

// Axis-aligned decode grid over the phantom FOV box at one spacing.
coords::CoordGrid decode_grid(const runcfg::RunConfig& config, const coords::CoordGrid& latent,
                              double spacing);

// Oblique decode grid drawn from a GMM fit to the dataset's native
// transforms, shrunk so its rotated box stays inside the FOV.
coords::CoordGrid gmm_native_grid(const runcfg::RunConfig& config, const Dataset& dataset,
                                  const coords::CoordGrid& latent);

// Decodes every sampled latent at each configured spacing plus (optionally)
// the GMM-sampled native space; writes volumes and slice-panel PNGs.
void decode_all(const runcfg::RunConfig& config, std::ostream* log);

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct PipelineResult {
    std::string report_json;
    uint64_t report_hash = 0;
};

// Reconstruction metrics on the validation split, generation metrics
// (FID/coverage/density against the real volumes, with a matched pure-noise
// baseline) and MS-SSIM diversity; writes reports/report.json. The report
// carries no timestamps, so its hash is reproducible.
PipelineResult evaluate_run(const runcfg::RunConfig& config, std::ostream* log);

// The full pipeline: stages, encoding, diffusion, sampling, decoding,
// evaluation. Returns the consolidated report.
PipelineResult reproduce_pipeline(const runcfg::RunConfig& config, std::ostream* log);

}  // namespace cvox::pipeline
