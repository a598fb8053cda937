#include "cvox/pipeline.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cvox/metrics.hpp"
#include "cvox/nifti.hpp"
#include "cvox/phantom.hpp"
#include "cvox/png.hpp"
#include "cvox/transform_gmm.hpp"

namespace fs = std::filesystem;

namespace cvox::pipeline {

namespace {

std::string pad4(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", i);
    return buf;
}

std::string phantom_id(int i) { return "phantom_" + pad4(i); }
std::string sample_id(int i) { return "sample_" + pad4(i); }

std::string volume_path(const runcfg::RunConfig& c, int i) {
    return c.data_dir + "/" + phantom_id(i) + ".nii.gz";
}

std::string mask_path(const runcfg::RunConfig& c, int i) {
    return c.data_dir + "/" + phantom_id(i) + "_mask.nii.gz";
}

std::string spacing_tag(double s) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sp%g", s);
    return buf;
}

// decode grids used for generated samples, in report order
std::vector<std::string> decode_tags(const runcfg::RunConfig& c) {
    std::vector<std::string> tags;
    for (double s : c.decode_spacings) tags.push_back(spacing_tag(s));
    if (c.decode_gmm_native) tags.push_back("native");
    return tags;
}

void note(std::ostream* log, const std::string& line) {
    if (log) *log << line << std::endl;
}

std::ofstream open_log_append(const RunPaths& p) {
    std::ofstream f(p.logs(), std::ios::app);
    if (!f) throw Error::io("cannot open log file '" + p.logs() + "'");
    return f;
}

training::StageKind latest_autoencoder_stage(const RunPaths& p) {
    using training::StageKind;
    for (StageKind k :
         {StageKind::decoder_finetune, StageKind::native_patch, StageKind::pretrain}) {
        if (fs::exists(p.checkpoint(k))) return k;
    }
    throw Error::data("no autoencoder checkpoint under " + p.checkpoints_dir() +
                      " (run the training stages first)");
}

TissueMask full_mask(const coords::CoordGrid& grid) {
    TissueMask m;
    m.grid = grid;
    m.data.assign(static_cast<size_t>(grid.num_points()), 1);
    return m;
}

// the fixed-size, fixed-spacing variant of a dataset used by pretraining
std::vector<training::Sample> pretrain_view(const std::vector<training::Sample>& in,
                                            double spacing) {
    std::vector<training::Sample> out;
    out.reserve(in.size());
    for (const auto& s : in) {
        training::Sample t;
        t.image = training::resample_to_spacing(s.image, coords::Vec3::Constant(spacing));
        t.mask = full_mask(t.image.grid);
        t.id = s.id;
        out.push_back(std::move(t));
    }
    return out;
}

ae::LatentVolume to_latent(const nifti::ChannelVolume& cv) {
    ae::LatentVolume lv;
    lv.data = cv.data;
    lv.grid = cv.grid;
    lv.validate();
    return lv;
}

nifti::ChannelVolume to_channels(const ae::LatentVolume& lv) {
    nifti::ChannelVolume cv;
    cv.data = lv.data;
    cv.grid = lv.grid;
    return cv;
}

std::string latent_path(const RunPaths& p, const std::string& id) {
    return p.latents_dir() + "/" + id + "_latent.nii.gz";
}

std::string sample_latent_path(const RunPaths& p, int i) {
    return p.samples_dir() + "/" + sample_id(i) + "_latent.nii.gz";
}

std::string sample_volume_path(const RunPaths& p, int i, const std::string& tag) {
    return p.samples_dir() + "/" + sample_id(i) + "_" + tag + ".nii.gz";
}

metrics::FeatureCloud cloud_from(const losses::FeatureExtractor<float>& fx,
                                 const std::vector<Volume>& volumes) {
    if (volumes.empty()) throw Error::contract("feature cloud: no volumes");
    std::vector<double> first = fx.descriptor(volumes[0]);
    metrics::FeatureCloud cloud(static_cast<Eigen::Index>(volumes.size()),
                                static_cast<Eigen::Index>(first.size()));
    for (size_t i = 0; i < volumes.size(); ++i) {
        std::vector<double> d = i == 0 ? first : fx.descriptor(volumes[i]);
        for (size_t j = 0; j < d.size(); ++j)
            cloud(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d[j];
    }
    return cloud;
}

}  // namespace

// ---------------------------------------------------------------------------
// run directory
// ---------------------------------------------------------------------------

std::string RunPaths::checkpoint(training::StageKind kind) const {
    return checkpoints_dir() + "/" + training::stage_name(kind) + ".ckpt";
}

RunPaths run_paths(const runcfg::RunConfig& config) { return RunPaths{config.run_dir}; }

RunPaths ensure_run_dir(const runcfg::RunConfig& config) {
    RunPaths p = run_paths(config);
    fs::create_directories(p.checkpoints_dir());
    fs::create_directories(p.samples_dir());
    fs::create_directories(p.latents_dir());
    fs::create_directories(p.reports_dir());
    std::ofstream echo(p.config_echo(), std::ios::trunc);
    if (!echo) throw Error::io("cannot write config echo to '" + p.config_echo() + "'");
    echo << runcfg::config_echo(config);
    return p;
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

void generate_phantom_dataset(const runcfg::RunConfig& config) {
    config.validate();
    fs::create_directories(config.data_dir);
    const size_t n_spacings = config.phantom_spacings.size();
    for (int i = 0; i < config.phantom_count; ++i) {
        phantom::PhantomSpec spec;
        spec.fov_mm = coords::Vec3::Constant(config.phantom_fov);
        spec.spacing_mm =
            coords::Vec3::Constant(config.phantom_spacings[static_cast<size_t>(i) % n_spacings]);
        spec.structure_seed = mix_seed(config.phantom_seed, static_cast<uint64_t>(i));
        spec.noise_sigma = config.phantom_noise;
        phantom::PhantomResult r = phantom::generate_phantom(spec);
        nifti::save_volume(r.volume, volume_path(config, i));
        nifti::save_mask(r.mask, mask_path(config, i));
    }
}

bool dataset_present(const runcfg::RunConfig& config) {
    for (int i = 0; i < config.phantom_count; ++i)
        if (!fs::exists(volume_path(config, i)) || !fs::exists(mask_path(config, i))) return false;
    return true;
}

Dataset load_dataset(const runcfg::RunConfig& config) {
    if (!dataset_present(config)) generate_phantom_dataset(config);
    Dataset d;
    for (int i = 0; i < config.phantom_count; ++i) {
        training::Sample s;
        s.image = nifti::load_volume(volume_path(config, i));
        s.mask = nifti::load_mask(mask_path(config, i));
        s.id = phantom_id(i);
        const bool is_val = i >= config.phantom_count - config.val_count;
        (is_val ? d.val : d.train).push_back(std::move(s));
    }
    return d;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_autoencoder_checkpoint(const ae::Autoencoder<float>& model,
                                 const runcfg::RunConfig& config, training::StageKind stage,
                                 const training::StageHistory& history) {
    ckpt::Checkpoint c;
    c.kind = kAutoencoderKind;
    c.config_hash = runcfg::config_hash(config);
    c.config_echo = runcfg::config_echo(config);
    c.meta["stage"] = training::stage_name(stage);
    c.scalars["best_epoch"] = static_cast<double>(history.best_epoch);
    c.scalars["initial_val_loss"] = history.initial_val_loss;
    if (history.best_epoch >= 0 &&
        history.best_epoch < static_cast<int>(history.epochs.size()))
        c.scalars["best_val_loss"] =
            history.epochs[static_cast<size_t>(history.best_epoch)].val_loss;
    c.blocks = model.params.state();
    save_checkpoint(c, run_paths(config).checkpoint(stage));
}

ae::Autoencoder<float> load_autoencoder(const runcfg::RunConfig& config,
                                        training::StageKind stage) {
    const std::string path = run_paths(config).checkpoint(stage);
    if (!fs::exists(path))
        throw Error::data(std::string("missing checkpoint for stage '") +
                          training::stage_name(stage) + "' at " + path +
                          " (train that stage first)");
    ckpt::Checkpoint c = ckpt::load_checkpoint(path);
    ckpt::require(c, kAutoencoderKind, runcfg::config_hash(config));
    ae::Autoencoder<float> model(config.autoencoder);
    model.params.load_state(c.blocks);
    return model;
}

void save_denoiser_checkpoint(const diffusion::UNet<float>& net, const runcfg::RunConfig& config,
                              const training::DdpmTrainResult& result,
                              const coords::CoordGrid& latent_grid) {
    ckpt::Checkpoint c;
    c.kind = kDenoiserKind;
    c.config_hash = runcfg::config_hash(config);
    c.config_echo = runcfg::config_echo(config);
    c.meta["stage"] = training::stage_name(training::StageKind::ddpm);
    c.scalars["latent_std"] = result.latent_std;
    c.scalars["best_epoch"] = static_cast<double>(result.history.best_epoch);
    for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 3; ++col)
            c.scalars["grid.m" + std::to_string(r) + std::to_string(col)] =
                latent_grid.affine.matrix(r, col);
    for (int a = 0; a < 3; ++a) {
        const std::string i = std::to_string(a);
        c.scalars["grid.origin." + i] = latent_grid.affine.origin[a];
        c.scalars["grid.shape." + i] = static_cast<double>(latent_grid.shape[a]);
        c.scalars["grid.space.lo." + i] = latent_grid.space.lower[a];
        c.scalars["grid.space.hi." + i] = latent_grid.space.upper[a];
    }
    c.blocks = net.params.state();
    save_checkpoint(c, run_paths(config).checkpoint(training::StageKind::ddpm));
}

DenoiserBundle load_denoiser(const runcfg::RunConfig& config) {
    const std::string path = run_paths(config).checkpoint(training::StageKind::ddpm);
    if (!fs::exists(path))
        throw Error::data("missing denoiser checkpoint at " + path + " (run train-ddpm first)");
    ckpt::Checkpoint c = ckpt::load_checkpoint(path);
    ckpt::require(c, kDenoiserKind, runcfg::config_hash(config));

    diffusion::UNetConfig uc = config.unet;
    uc.latent_channels = config.autoencoder.latent_channels;
    DenoiserBundle b{diffusion::UNet<float>(uc), c.scalar_at("latent_std"), {}};
    b.net.params.load_state(c.blocks);

    coords::Affine aff;
    for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 3; ++col)
            aff.matrix(r, col) = c.scalar_at("grid.m" + std::to_string(r) + std::to_string(col));
    std::array<int64_t, 3> shape{};
    coords::Vec3 lo, hi;
    for (int a = 0; a < 3; ++a) {
        const std::string i = std::to_string(a);
        aff.origin[a] = c.scalar_at("grid.origin." + i);
        shape[static_cast<size_t>(a)] = static_cast<int64_t>(c.scalar_at("grid.shape." + i));
        lo[a] = c.scalar_at("grid.space.lo." + i);
        hi[a] = c.scalar_at("grid.space.hi." + i);
    }
    b.latent_grid = coords::make_grid(aff, shape, coords::CoordSpace(lo, hi));
    return b;
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

training::StageHistory run_autoencoder_stage(const runcfg::RunConfig& config,
                                             training::StageKind stage, bool allow_out_of_order,
                                             std::ostream* log) {
    using training::StageKind;
    config.validate();
    RunPaths p = ensure_run_dir(config);
    const bool has_pretrain = fs::exists(p.checkpoint(StageKind::pretrain));
    const bool has_native = fs::exists(p.checkpoint(StageKind::native_patch));
    training::enforce_stage_order(stage, has_pretrain, has_native, allow_out_of_order);

    // start from the most recent upstream parameters when they exist
    ae::Autoencoder<float> model(config.autoencoder);
    if (stage == StageKind::native_patch && has_pretrain)
        model = load_autoencoder(config, StageKind::pretrain);
    else if (stage == StageKind::decoder_finetune && has_native)
        model = load_autoencoder(config, StageKind::native_patch);
    else if (stage == StageKind::decoder_finetune && has_pretrain)
        model = load_autoencoder(config, StageKind::pretrain);

    Dataset data = load_dataset(config);
    training::StagePlan plan = runcfg::make_stage_plan(config, stage);
    std::ofstream jl = open_log_append(p);
    training::TrainOptions opts{config.seed, &jl};

    training::StageHistory h;
    switch (stage) {
        case StageKind::pretrain: {
            std::vector<training::Sample> tr = pretrain_view(data.train, config.pretrain_spacing);
            std::vector<training::Sample> va = pretrain_view(data.val, config.pretrain_spacing);
            h = training::run_pretrain(plan, model, tr, va, opts);
            break;
        }
        case StageKind::native_patch:
            h = training::run_native_patch_stage(plan, model, data.train, data.val, opts);
            break;
        case StageKind::decoder_finetune:
            h = training::run_decoder_finetune(plan, model, data.train, data.val, opts);
            break;
        case StageKind::ddpm:
            throw Error::contract("run_autoencoder_stage: ddpm is driven by run_ddpm_stage");
    }
    save_autoencoder_checkpoint(model, config, stage, h);
    note(log, std::string("stage ") + training::stage_name(stage) + ": best epoch " +
                  std::to_string(h.best_epoch) + ", val " +
                  (h.best_epoch >= 0
                       ? std::to_string(h.epochs[static_cast<size_t>(h.best_epoch)].val_loss)
                       : std::string("n/a")));
    return h;
}

void encode_all(const runcfg::RunConfig& config, std::ostream* log) {
    RunPaths p = ensure_run_dir(config);
    ae::Autoencoder<float> model = load_autoencoder(config, latest_autoencoder_stage(p));
    Dataset data = load_dataset(config);
    auto save_split = [&](const std::vector<training::Sample>& split) {
        std::vector<ae::LatentVolume> lts = training::encode_dataset(model, split);
        for (size_t i = 0; i < split.size(); ++i)
            nifti::save_channels(to_channels(lts[i]), latent_path(p, split[i].id));
    };
    save_split(data.train);
    save_split(data.val);
    note(log, "encoded " + std::to_string(data.train.size() + data.val.size()) + " volumes to " +
                  p.latents_dir());
}

coords::CoordGrid canonical_latent_grid(const runcfg::RunConfig& config, const Dataset& dataset) {
    if (dataset.train.empty()) throw Error::contract("canonical_latent_grid: empty train split");
    // must match encode_dataset: widen the validation envelope, then exscribe
    Volume w = training::widen_space(dataset.train.front().image, config.autoencoder, 0.0);
    return config.autoencoder.default_latent_grid(w.grid);
}

training::DdpmTrainResult run_ddpm_stage(const runcfg::RunConfig& config, bool allow_out_of_order,
                                         std::ostream* log) {
    config.validate();
    RunPaths p = ensure_run_dir(config);
    training::StageKind ae_stage = latest_autoencoder_stage(p);
    if (!allow_out_of_order && ae_stage != training::StageKind::decoder_finetune)
        throw Error::config(
            "train-ddpm expects a fine-tuned autoencoder checkpoint (override to use '" +
            std::string(training::stage_name(ae_stage)) + "')");
    ae::Autoencoder<float> model = load_autoencoder(config, ae_stage);

    diffusion::UNetConfig uc = config.unet;
    uc.latent_channels = config.autoencoder.latent_channels;
    diffusion::UNet<float> net(uc);

    Dataset data = load_dataset(config);
    training::StagePlan plan = runcfg::make_stage_plan(config, training::StageKind::ddpm);
    diffusion::NoiseSchedule schedule = runcfg::make_noise_schedule(config);
    std::ofstream jl = open_log_append(p);
    training::TrainOptions opts{config.seed, &jl};

    training::DdpmTrainResult r =
        training::run_ddpm(plan, model, net, schedule, data.train, data.val, opts);
    save_denoiser_checkpoint(net, config, r, canonical_latent_grid(config, data));
    note(log, "stage ddpm: best epoch " + std::to_string(r.history.best_epoch) +
                  ", latent std " + std::to_string(r.latent_std));
    return r;
}

// ---------------------------------------------------------------------------
// sampling + decoding
// ---------------------------------------------------------------------------

void sample_all(const runcfg::RunConfig& config, std::ostream* log) {
    config.validate();
    RunPaths p = ensure_run_dir(config);
    DenoiserBundle b = load_denoiser(config);
    diffusion::NoiseSchedule schedule = runcfg::make_noise_schedule(config);
    std::vector<ae::LatentVolume> latents = diffusion::sample_latents<float>(
        b.net.as_fn(), schedule, config.sample_count, b.latent_grid,
        config.autoencoder.latent_channels, mix_seed(config.seed, fnv1a("sample")));
    const float s = static_cast<float>(b.latent_std);
    for (int i = 0; i < config.sample_count; ++i) {
        ae::LatentVolume& lv = latents[static_cast<size_t>(i)];
        for (int64_t e = 0; e < lv.data.size(); ++e) lv.data[e] *= s;  // back to latent scale
        nifti::save_channels(to_channels(lv), sample_latent_path(p, i));
    }
    note(log, "sampled " + std::to_string(config.sample_count) + " latents on " +
                  std::to_string(b.latent_grid.shape[0]) + "x" +
                  std::to_string(b.latent_grid.shape[1]) + "x" +
                  std::to_string(b.latent_grid.shape[2]));
}

coords::CoordGrid decode_grid(const runcfg::RunConfig& config, const coords::CoordGrid& latent,
                              double spacing) {
    if (!(spacing > 0.0)) throw Error::config("decode spacing must be positive");
    const double half = config.phantom_fov / 2.0;
    std::array<int64_t, 3> shape{};
    for (auto& d : shape) d = static_cast<int64_t>(config.phantom_fov / spacing + 1e-9) + 1;
    coords::Affine aff = coords::Affine::scaling(coords::Vec3::Constant(spacing),
                                                 coords::Vec3::Constant(-half));
    return coords::make_grid(aff, shape, latent.space);
}

coords::CoordGrid gmm_native_grid(const runcfg::RunConfig& config, const Dataset& dataset,
                                  const coords::CoordGrid& latent) {
    std::vector<Eigen::VectorXd> obs;
    for (const auto& s : dataset.train) obs.push_back(coords::transform_params_of(s.image.grid.affine));
    for (const auto& s : dataset.val) obs.push_back(coords::transform_params_of(s.image.grid.affine));
    coords::GmmFitOptions fit;
    fit.seed = mix_seed(config.seed, fnv1a("gmm_fit"));
    coords::TransformGMM gmm = coords::fit_transform_gmm(obs, config.gmm_components, fit);

    // keep the sampled spacing within a sane band so decode cost is bounded
    coords::SpacingClamp clamp{0.8, 4.0};
    coords::Affine aff =
        coords::sample_native_space(gmm, mix_seed(config.seed, fnv1a("gmm_draw")), clamp);

    // shrink the box so the rotated grid's world-frame extent stays inside
    // the scene FOV (and therefore inside the latent coverage)
    const coords::Vec3 sp = aff.spacing();
    double max_row = 0.0;
    for (int r = 0; r < 3; ++r) {
        double acc = 0.0;
        for (int c = 0; c < 3; ++c) acc += std::abs(aff.directions()(r, c));
        max_row = std::max(max_row, acc);
    }
    const double half = 0.45 * config.phantom_fov / max_row;
    std::array<int64_t, 3> shape{};
    coords::Vec3 center_idx;
    for (int a = 0; a < 3; ++a) {
        shape[static_cast<size_t>(a)] = static_cast<int64_t>(2.0 * half / sp[a] + 1e-9) + 1;
        if (shape[static_cast<size_t>(a)] < 2)
            throw Error::data("gmm native grid degenerate along an axis");
        center_idx[a] = static_cast<double>(shape[static_cast<size_t>(a)] - 1) / 2.0;
    }
    aff.origin = -(aff.matrix * center_idx);  // grid centered on the scene origin
    return coords::make_grid(aff, shape, latent.space);
}

void decode_all(const runcfg::RunConfig& config, std::ostream* log) {
    config.validate();
    RunPaths p = ensure_run_dir(config);
    ae::Autoencoder<float> model = load_autoencoder(config, latest_autoencoder_stage(p));
    if (!fs::exists(sample_latent_path(p, 0)))
        throw Error::data("no sampled latents under " + p.samples_dir() + " (run sample first)");
    ae::LatentVolume first = to_latent(nifti::load_channels(sample_latent_path(p, 0)));

    std::vector<std::pair<std::string, coords::CoordGrid>> grids;
    for (double s : config.decode_spacings)
        grids.emplace_back(spacing_tag(s), decode_grid(config, first.grid, s));
    if (config.decode_gmm_native) {
        Dataset data = load_dataset(config);
        grids.emplace_back("native", gmm_native_grid(config, data, first.grid));
    }

    for (int i = 0; i < config.sample_count; ++i) {
        ae::LatentVolume lv =
            i == 0 ? first : to_latent(nifti::load_channels(sample_latent_path(p, i)));
        for (const auto& [tag, grid] : grids) {
            Volume v = model.decode(lv, grid);
            nifti::save_volume(v, sample_volume_path(p, i, tag));
            png::write_slice_panel(v, p.samples_dir() + "/" + sample_id(i) + "_" + tag + ".png");
        }
    }
    std::string desc;
    for (const auto& [tag, grid] : grids) {
        if (!desc.empty()) desc += ", ";
        desc += tag + " " + std::to_string(grid.shape[0]) + "x" + std::to_string(grid.shape[1]) +
                "x" + std::to_string(grid.shape[2]);
    }
    note(log, "decoded " + std::to_string(config.sample_count) + " samples at " + desc);
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

PipelineResult evaluate_run(const runcfg::RunConfig& config, std::ostream* log) {
    config.validate();
    RunPaths p = ensure_run_dir(config);
    ae::Autoencoder<float> model = load_autoencoder(config, latest_autoencoder_stage(p));
    Dataset data = load_dataset(config);

    // reconstruction quality on the validation split, native grids
    metrics::MetricReport recon;
    recon.model_id = std::string(kAutoencoderKind) + ":" + hex64(runcfg::config_hash(config));
    recon.dataset_id = config.data_dir;
    recon.grid_desc = "native";
    recon.metric_names = {"l1", "psnr", "ssim", "ms_ssim"};
    for (const auto& s : data.val) {
        Volume w = training::widen_space(s.image, config.autoencoder, 0.0);
        Volume r = model.reconstruct(w);
        double l1 = 0.0;
        for (int64_t e = 0; e < w.data.size(); ++e)
            l1 += std::abs(static_cast<double>(w.data[e]) - static_cast<double>(r.data[e]));
        l1 /= static_cast<double>(w.data.size());
        recon.add_row(s.id, {l1, metrics::psnr(w.data, r.data), metrics::ssim(w.data, r.data),
                             metrics::ms_ssim(w.data, r.data)});
    }
    recon.finalize();

    // generation quality: decoded samples vs the real corpus, with a matched
    // pure-noise baseline on the same grid
    const std::string tag0 = decode_tags(config).front();
    std::vector<Volume> fake;
    std::vector<ad::Tensor<float>> fake_tensors;
    for (int i = 0; i < config.sample_count; ++i) {
        const std::string path = sample_volume_path(p, i, tag0);
        if (!fs::exists(path))
            throw Error::data("missing decoded sample " + path + " (run decode first)");
        fake.push_back(nifti::load_volume(path));
        fake_tensors.push_back(fake.back().data);
    }
    std::vector<Volume> real;
    for (const auto& s : data.train) real.push_back(s.image);
    for (const auto& s : data.val) real.push_back(s.image);
    std::vector<Volume> noise;
    for (int i = 0; i < config.sample_count; ++i) {
        Rng rng(mix_seed(config.seed, fnv1a("noise_baseline"), static_cast<uint64_t>(i)));
        Volume v;
        v.grid = fake[static_cast<size_t>(i)].grid;
        v.data = ad::Tensor<float>::randn(
            {v.grid.shape[0], v.grid.shape[1], v.grid.shape[2]}, rng);
        v.modality = Modality::phantom;
        noise.push_back(std::move(v));
    }

    losses::FeatureExtractor<float> fx;
    metrics::FeatureCloud cloud_real = cloud_from(fx, real);
    metrics::FeatureCloud cloud_fake = cloud_from(fx, fake);
    metrics::FeatureCloud cloud_noise = cloud_from(fx, noise);
    const double fid_samples = metrics::fid(cloud_real, cloud_fake);
    const double fid_noise = metrics::fid(cloud_real, cloud_noise);
    metrics::CoverageDensity cd_samples =
        metrics::coverage_density(cloud_real, cloud_fake, config.coverage_k);
    metrics::CoverageDensity cd_noise =
        metrics::coverage_density(cloud_real, cloud_noise, config.coverage_k);
    const int n_pairs = std::min<int>(30, config.sample_count * (config.sample_count - 1) / 2);
    const double diversity = metrics::msssim_diversity(
        fake_tensors, n_pairs, mix_seed(config.seed, fnv1a("diversity")));

    double latent_std = 1.0;
    if (fs::exists(p.checkpoint(training::StageKind::ddpm)))
        latent_std =
            ckpt::load_checkpoint(p.checkpoint(training::StageKind::ddpm)).scalar_at("latent_std");

    nlohmann::ordered_json rep;
    rep["config_hash"] = hex64(runcfg::config_hash(config));
    rep["dataset"] = {{"train", data.train.size()}, {"val", data.val.size()}};
    rep["reconstruction"] = nlohmann::ordered_json::parse(recon.to_json());
    rep["generation"] = {
        {"sample_count", config.sample_count},
        {"grid", tag0},
        {"fid_samples", fid_samples},
        {"fid_noise", fid_noise},
        {"coverage_samples", cd_samples.coverage},
        {"coverage_noise", cd_noise.coverage},
        {"density_samples", cd_samples.density},
        {"density_noise", cd_noise.density},
        {"coverage_k", config.coverage_k},
        {"msssim_diversity", diversity},
    };
    rep["latent_std"] = latent_std;

    PipelineResult result;
    result.report_json = rep.dump(2) + "\n";
    result.report_hash = fnv1a(result.report_json);

    std::ofstream rf(p.report(), std::ios::trunc);
    if (!rf) throw Error::io("cannot write report to '" + p.report() + "'");
    rf << result.report_json;

    std::ofstream jl = open_log_append(p);
    jl << nlohmann::json{{"event", "report"}, {"hash", hex64(result.report_hash)}}.dump() << "\n";

    note(log, "report " + p.report() + " hash " + hex64(result.report_hash));
    note(log, "  fid samples " + std::to_string(fid_samples) + " vs noise " +
                  std::to_string(fid_noise));
    note(log, "  coverage samples " + std::to_string(cd_samples.coverage) + " vs noise " +
                  std::to_string(cd_noise.coverage) + " (k=" + std::to_string(config.coverage_k) +
                  ")");
    return result;
}

PipelineResult reproduce_pipeline(const runcfg::RunConfig& config, std::ostream* log) {
    config.validate();
    RunPaths p = run_paths(config);
    fs::create_directories(p.run_dir);
    {
        std::ofstream jl(p.logs(), std::ios::trunc);  // fresh deterministic log
        if (!jl) throw Error::io("cannot open log file '" + p.logs() + "'");
    }
    ensure_run_dir(config);
    if (!dataset_present(config)) {
        note(log, "generating phantom dataset in " + config.data_dir);
        generate_phantom_dataset(config);
    }
    run_autoencoder_stage(config, training::StageKind::pretrain, false, log);
    run_autoencoder_stage(config, training::StageKind::native_patch, false, log);
    run_autoencoder_stage(config, training::StageKind::decoder_finetune, false, log);
    encode_all(config, log);
    run_ddpm_stage(config, false, log);
    sample_all(config, log);
    decode_all(config, log);
    return evaluate_run(config, log);
}

}  // namespace cvox::pipeline
