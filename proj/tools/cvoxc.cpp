// cvoxc: command-line driver for the cvox toolkit. One subcommand = one
// reproducible step; every artifact lands under the configured run directory
// together with the exact config echo that produced it.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "cvox/metrics.hpp"
#include "cvox/nifti.hpp"
#include "cvox/pipeline.hpp"
#include "cvox/png.hpp"

namespace fs = std::filesystem;
using namespace cvox;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> sets;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "run configuration file (key = value lines)");
    sub->add_option("--set", c.sets, "override a config key, e.g. --set seed=11 (repeatable)");
}

runcfg::RunConfig load_cfg(const Common& c) {
    runcfg::RunConfig cfg;
    if (!c.config_path.empty()) cfg = runcfg::load_run_config(c.config_path);
    for (const auto& s : c.sets) runcfg::apply_override(cfg, s);
    cfg.validate();
    return cfg;
}

// the only device this build supports; the variable exists so scripted
// callers get a clean error instead of silent fallback
void check_device() {
    const char* dev = std::getenv("CVOX_DEVICE");
    if (dev && std::string(dev) != "cpu")
        throw Error::config(std::string("CVOX_DEVICE=") + dev + " unsupported (only cpu)");
}

training::StageKind latest_stage(const pipeline::RunPaths& p) {
    using training::StageKind;
    for (StageKind k :
         {StageKind::decoder_finetune, StageKind::native_patch, StageKind::pretrain})
        if (fs::exists(p.checkpoint(k))) return k;
    throw Error::data("no autoencoder checkpoint under " + p.checkpoints_dir() +
                      " (run the training stages first)");
}

// volumes of a directory in name order, skipping masks and latents
std::vector<Volume> load_volume_dir(const std::string& dir) {
    if (!fs::is_directory(dir)) throw Error::data("not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        const bool nii = name.size() > 4 && (name.ends_with(".nii") || name.ends_with(".nii.gz"));
        if (!nii) continue;
        if (name.find("_mask") != std::string::npos) continue;
        if (name.find("_latent") != std::string::npos) continue;
        files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error::data("no volumes found in " + dir);
    std::vector<Volume> out;
    for (const auto& f : files) out.push_back(nifti::load_volume(f));
    return out;
}

metrics::FeatureCloud cloud_of(const losses::FeatureExtractor<float>& fx,
                               const std::vector<Volume>& vols) {
    std::vector<double> first = fx.descriptor(vols.at(0));
    metrics::FeatureCloud cloud(static_cast<Eigen::Index>(vols.size()),
                                static_cast<Eigen::Index>(first.size()));
    for (size_t i = 0; i < vols.size(); ++i) {
        std::vector<double> d = i == 0 ? first : fx.descriptor(vols[i]);
        for (size_t j = 0; j < d.size(); ++j)
            cloud(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d[j];
    }
    return cloud;
}

// grid covering the template's bounds at the requested spacing, in the
// template's direction frame
coords::CoordGrid grid_like(const coords::CoordGrid& tmpl, double spacing) {
    if (!(spacing > 0.0)) throw Error::usage("decode spacing must be positive");
    const coords::Mat3 dirs = tmpl.affine.directions();
    coords::Vec3 lo, hi;
    tmpl.bounds_in_frame(dirs.inverse(), lo, hi);
    std::array<int64_t, 3> shape{};
    for (int a = 0; a < 3; ++a)
        shape[static_cast<size_t>(a)] = static_cast<int64_t>((hi[a] - lo[a]) / spacing + 1e-9) + 1;
    coords::Affine aff;
    aff.matrix = dirs * spacing;
    aff.origin = dirs * lo;
    const coords::Vec3 huge = coords::Vec3::Constant(1e9);
    return coords::make_grid(aff, shape, coords::CoordSpace(-huge, huge));
}

// grid over the config's FOV box, axis aligned
coords::CoordGrid grid_fov_box(const runcfg::RunConfig& cfg, double spacing) {
    if (!(spacing > 0.0)) throw Error::usage("decode spacing must be positive");
    std::array<int64_t, 3> shape{};
    for (auto& d : shape) d = static_cast<int64_t>(cfg.phantom_fov / spacing + 1e-9) + 1;
    coords::Affine aff = coords::Affine::scaling(coords::Vec3::Constant(spacing),
                                                 coords::Vec3::Constant(-cfg.phantom_fov / 2.0));
    const coords::Vec3 huge = coords::Vec3::Constant(1e9);
    return coords::make_grid(aff, shape, coords::CoordSpace(-huge, huge));
}

int run(int argc, char** argv) {
    CLI::App app{"cvox: resolution-agnostic 3D autoencoding and latent diffusion"};
    app.require_subcommand(1);
    check_device();

    // ---- phantom ----------------------------------------------------------
    Common c_ph;
    int ph_n = -1;
    double ph_fov = -1.0, ph_noise = -1.0;
    std::string ph_spacings;
    uint64_t ph_seed = 0;
    auto* ph = app.add_subcommand("phantom", "generate the synthetic phantom dataset");
    add_common(ph, c_ph);
    ph->add_option("--n", ph_n, "number of phantoms");
    ph->add_option("--spacings", ph_spacings, "native spacings in mm, comma separated");
    ph->add_option("--fov", ph_fov, "field of view in mm");
    ph->add_option("--noise", ph_noise, "additive noise sigma");
    ph->add_option("--seed", ph_seed, "structure seed");
    ph->callback([&] {
        runcfg::RunConfig cfg = load_cfg(c_ph);
        if (ph_n >= 0) runcfg::apply_override(cfg, "phantom.count=" + std::to_string(ph_n));
        if (!ph_spacings.empty()) runcfg::apply_override(cfg, "phantom.spacings=" + ph_spacings);
        if (ph_fov > 0) runcfg::apply_override(cfg, "phantom.fov_mm=" + std::to_string(ph_fov));
        if (ph_noise >= 0)
            runcfg::apply_override(cfg, "phantom.noise_sigma=" + std::to_string(ph_noise));
        if (ph->count("--seed"))
            runcfg::apply_override(cfg, "phantom.seed=" + std::to_string(ph_seed));
        cfg.validate();
        pipeline::generate_phantom_dataset(cfg);
        std::cout << "wrote " << cfg.phantom_count << " phantom volume+mask pairs to "
                  << cfg.data_dir << std::endl;
    });

    // ---- preprocess -------------------------------------------------------
    std::string pp_in, pp_out, pp_mask;
    auto* pp = app.add_subcommand("preprocess", "intensity-normalize a volume and emit its mask");
    pp->add_option("--input", pp_in, "input NIfTI volume")->required();
    pp->add_option("--output", pp_out, "normalized output volume")->required();
    pp->add_option("--mask-out", pp_mask, "tissue mask output");
    pp->callback([&] {
        Volume v = nifti::load_volume(pp_in);
        Volume n = v.modality == Modality::ct ? hu_scale(v)
                   : v.modality == Modality::mri ? normalize_percentile(v)
                                                 : v;
        nifti::save_volume(n, pp_out);
        if (!pp_mask.empty()) {
            TissueMask m =
                v.modality == Modality::ct ? ct_tissue_mask(v) : positive_tissue_mask(n);
            nifti::save_mask(m, pp_mask);
        }
        std::cout << "preprocessed " << pp_in << " (" << modality_name(v.modality) << ") -> "
                  << pp_out << std::endl;
    });

    // ---- training stages --------------------------------------------------
    struct StageCmd {
        const char* name;
        const char* help;
        training::StageKind kind;
    };
    const StageCmd stage_cmds[] = {
        {"pretrain", "fixed-grid autoencoder pretraining", training::StageKind::pretrain},
        {"train", "native-resolution patch training", training::StageKind::native_patch},
        {"finetune", "decoder-only fine-tuning", training::StageKind::decoder_finetune},
    };
    static Common c_stage[3];
    static bool stage_force[3] = {false, false, false};
    for (size_t i = 0; i < 3; ++i) {
        auto* sub = app.add_subcommand(stage_cmds[i].name, stage_cmds[i].help);
        add_common(sub, c_stage[i]);
        sub->add_flag("--force", stage_force[i], "run even without the upstream checkpoint");
        const training::StageKind kind = stage_cmds[i].kind;
        const size_t idx = i;
        sub->callback([&, kind, idx] {
            runcfg::RunConfig cfg = load_cfg(c_stage[idx]);
            pipeline::run_autoencoder_stage(cfg, kind, stage_force[idx], &std::cout);
        });
    }

    Common c_ddpm;
    bool ddpm_force = false;
    auto* dd = app.add_subcommand("train-ddpm", "train the latent diffusion denoiser");
    add_common(dd, c_ddpm);
    dd->add_flag("--force", ddpm_force, "accept a non-fine-tuned autoencoder checkpoint");
    dd->callback([&] {
        runcfg::RunConfig cfg = load_cfg(c_ddpm);
        pipeline::run_ddpm_stage(cfg, ddpm_force, &std::cout);
    });

    // ---- encode -----------------------------------------------------------
    Common c_enc;
    std::string enc_in, enc_out;
    auto* enc = app.add_subcommand(
        "encode", "encode the dataset (default) or one volume (--input/--output)");
    add_common(enc, c_enc);
    enc->add_option("--input", enc_in, "single volume to encode");
    enc->add_option("--output", enc_out, "latent output path for --input");
    enc->callback([&] {
        runcfg::RunConfig cfg = load_cfg(c_enc);
        if (enc_in.empty()) {
            pipeline::encode_all(cfg, &std::cout);
            return;
        }
        if (enc_out.empty()) throw Error::usage("encode --input requires --output");
        ae::Autoencoder<float> model =
            pipeline::load_autoencoder(cfg, latest_stage(pipeline::run_paths(cfg)));
        Volume w = training::widen_space(nifti::load_volume(enc_in), cfg.autoencoder, 0.0);
        ae::LatentVolume z = model.encode(w);
        nifti::ChannelVolume cv;
        cv.data = z.data;
        cv.grid = z.grid;
        nifti::save_channels(cv, enc_out);
        std::cout << "encoded " << enc_in << " -> " << enc_out << " (" << z.channels() << "x"
                  << z.grid.shape[0] << "x" << z.grid.shape[1] << "x" << z.grid.shape[2] << ")"
                  << std::endl;
    });

    // ---- decode -----------------------------------------------------------
    Common c_dec;
    std::string dec_latent, dec_out, dec_fov;
    double dec_spacing = 0.0;
    auto* dec = app.add_subcommand(
        "decode", "decode sampled latents (default) or one latent (--latent/--output)");
    add_common(dec, c_dec);
    dec->add_option("--latent", dec_latent, "latent channel NIfTI to decode");
    dec->add_option("--output", dec_out, "volume output path for --latent");
    dec->add_option("--spacing", dec_spacing, "output spacing in mm (single-latent mode)");
    dec->add_option("--fov", dec_fov, "output extent: like:TEMPLATE.nii (default: config FOV box)");
    dec->callback([&] {
        runcfg::RunConfig cfg = load_cfg(c_dec);
        if (dec_latent.empty()) {
            pipeline::decode_all(cfg, &std::cout);
            return;
        }
        if (dec_out.empty() || !(dec_spacing > 0.0))
            throw Error::usage("decode --latent requires --output and --spacing");
        ae::Autoencoder<float> model =
            pipeline::load_autoencoder(cfg, latest_stage(pipeline::run_paths(cfg)));
        nifti::ChannelVolume cv = nifti::load_channels(dec_latent);
        ae::LatentVolume z;
        z.data = cv.data;
        z.grid = cv.grid;
        coords::CoordGrid out_grid;
        if (dec_fov.empty()) {
            out_grid = grid_fov_box(cfg, dec_spacing);
        } else if (dec_fov.rfind("like:", 0) == 0) {
            Volume tmpl = nifti::load_volume(dec_fov.substr(5));
            out_grid = grid_like(tmpl.grid, dec_spacing);
        } else {
            throw Error::usage("--fov must be like:TEMPLATE.nii");
        }
        Volume v = model.decode(z, out_grid);
        nifti::save_volume(v, dec_out);
        std::cout << "decoded " << dec_latent << " -> " << dec_out << " (" << v.grid.shape[0]
                  << "x" << v.grid.shape[1] << "x" << v.grid.shape[2] << " at " << dec_spacing
                  << " mm)" << std::endl;
    });

    // ---- reconstruct ------------------------------------------------------
    Common c_rec;
    std::string rec_in, rec_out;
    bool rec_figs = false;
    auto* rec = app.add_subcommand("reconstruct", "round-trip one volume through the autoencoder");
    add_common(rec, c_rec);
    rec->add_option("--input", rec_in, "input NIfTI volume")->required();
    rec->add_option("--output", rec_out, "reconstruction output path")->required();
    rec->add_flag("--figures", rec_figs, "also write an orthogonal slice panel PNG");
    rec->callback([&] {
        runcfg::RunConfig cfg = load_cfg(c_rec);
        ae::Autoencoder<float> model =
            pipeline::load_autoencoder(cfg, latest_stage(pipeline::run_paths(cfg)));
        Volume w = training::widen_space(nifti::load_volume(rec_in), cfg.autoencoder, 0.0);
        Volume r = model.reconstruct(w);
        nifti::save_volume(r, rec_out);
        if (rec_figs) png::write_slice_panel(r, rec_out + ".png");
        std::cout << "reconstructed " << rec_in << " -> " << rec_out
                  << "  psnr " << metrics::psnr(w.data, r.data) << "  ssim "
                  << metrics::ssim(w.data, r.data) << std::endl;
    });

    // ---- sample -----------------------------------------------------------
    Common c_smp;
    auto* smp = app.add_subcommand("sample", "draw latent samples from the trained denoiser");
    add_common(smp, c_smp);
    smp->callback([&] {
        runcfg::RunConfig cfg = load_cfg(c_smp);
        pipeline::sample_all(cfg, &std::cout);
    });

    // ---- evaluate ---------------------------------------------------------
    Common c_ev;
    std::string ev_real, ev_fake;
    bool ev_figs = false;
    auto* ev = app.add_subcommand(
        "evaluate", "evaluate the run (default) or compare two volume directories");
    add_common(ev, c_ev);
    ev->add_option("--real", ev_real, "directory of reference volumes");
    ev->add_option("--fake", ev_fake, "directory of generated volumes");
    ev->add_flag("--figures", ev_figs, "write validation reconstruction slice panels");
    ev->callback([&] {
        runcfg::RunConfig cfg = load_cfg(c_ev);
        if (ev_real.empty() != ev_fake.empty())
            throw Error::usage("evaluate needs both --real and --fake (or neither)");
        if (!ev_real.empty()) {
            std::vector<Volume> real = load_volume_dir(ev_real);
            std::vector<Volume> fake = load_volume_dir(ev_fake);
            losses::FeatureExtractor<float> fx;
            metrics::FeatureCloud cr = cloud_of(fx, real);
            metrics::FeatureCloud cf = cloud_of(fx, fake);
            metrics::CoverageDensity cd = metrics::coverage_density(cr, cf, cfg.coverage_k);
            nlohmann::ordered_json j;
            j["real"] = {{"dir", ev_real}, {"count", real.size()}};
            j["fake"] = {{"dir", ev_fake}, {"count", fake.size()}};
            j["fid"] = metrics::fid(cr, cf);
            j["coverage"] = cd.coverage;
            j["density"] = cd.density;
            j["coverage_k"] = cfg.coverage_k;
            std::cout << j.dump(2) << std::endl;
            return;
        }
        pipeline::PipelineResult res = pipeline::evaluate_run(cfg, &std::cout);
        if (ev_figs) {
            ae::Autoencoder<float> model =
                pipeline::load_autoencoder(cfg, latest_stage(pipeline::run_paths(cfg)));
            pipeline::Dataset data = pipeline::load_dataset(cfg);
            for (const auto& s : data.val) {
                Volume w = training::widen_space(s.image, cfg.autoencoder, 0.0);
                png::write_slice_panel(model.reconstruct(w), pipeline::run_paths(cfg).reports_dir() +
                                                                 "/recon_" + s.id + ".png");
            }
        }
    });

    // ---- reproduce --------------------------------------------------------
    Common c_rep;
    auto* rep = app.add_subcommand(
        "reproduce", "full pipeline: stages, diffusion, sampling, decoding, evaluation");
    add_common(rep, c_rep);
    rep->callback([&] {
        runcfg::RunConfig cfg = load_cfg(c_rep);
        pipeline::PipelineResult res = pipeline::reproduce_pipeline(cfg, &std::cout);
        std::cout << "report hash " << hex64(res.report_hash) << std::endl;
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the parse error
        return code == 0 ? 0 : 1;      // flag/argument problems are usage errors
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error [" << err_cat_name(e.category()) << "]: " << e.what() << std::endl;
        return e.category() == ErrCat::usage || e.category() == ErrCat::config ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error [internal]: " << e.what() << std::endl;
        return 2;
    }
}
