#include "cvox/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "cvox/inr.hpp"

namespace cvox::training {

namespace {

// per-purpose seed tags so every random draw in a step is independent
constexpr uint64_t kPickTag = 0x7069636bULL;   // "pick": sample selection
constexpr uint64_t kPatchTag = 0x70617463ULL;  // "patc": patch placement
constexpr uint64_t kZTag = 0x7a647277ULL;      // "zdrw": latent reparam noise
constexpr uint64_t kAugTag = 0x6175676dULL;    // "augm": augmentation
constexpr uint64_t kNoiseTag = 0x64696666ULL;  // "diff": diffusion loss draws
constexpr uint64_t kValTag = 0x76616cULL;      // "val": fixed validation draws

uint64_t stage_seed_of(uint64_t seed, StageKind kind) {
    return mix_seed(seed, fnv1a(std::string(stage_name(kind))));
}

void require_data(const std::vector<Sample>& train, const std::vector<Sample>& val,
                  const char* who) {
    if (train.empty()) throw Error::contract(std::string(who) + ": empty training set");
    if (val.empty()) throw Error::contract(std::string(who) + ": empty validation set");
}

std::vector<Sample> widen_all(const std::vector<Sample>& data, const ae::AutoencoderConfig& cfg,
                              double input_buffer_cells) {
    std::vector<Sample> out;
    out.reserve(data.size());
    for (const auto& s : data) {
        Sample w = s;
        w.image = widen_space(s.image, cfg, input_buffer_cells);
        w.mask.grid = w.image.grid;
        out.push_back(std::move(w));
    }
    return out;
}

std::vector<nn::Param<float>*> param_ptrs(nn::ParamRegistry<float>& reg,
                                          const std::string& prefix) {
    std::vector<nn::Param<float>*> out;
    for (auto& p : reg.all())
        if (prefix.empty() || p.name.rfind(prefix, 0) == 0) out.push_back(&p);
    if (out.empty()) throw Error::contract("no parameters match prefix '" + prefix + "'");
    return out;
}

// keeps the parameter snapshot of the best validation epoch (earliest on ties)
struct BestTracker {
    double best = 0.0;
    int epoch = -1;
    std::map<std::string, ad::Tensor<double>> state;

    void offer(int e, double val, const nn::ParamRegistry<float>& reg) {
        if (epoch < 0 || val < best) {
            best = val;
            epoch = e;
            state = reg.state();
        }
    }
};

void log_epoch(std::ostream* os, StageKind kind, const EpochRecord& r) {
    if (!os) return;
    nlohmann::json j{{"stage", stage_name(kind)},
                     {"epoch", r.epoch},
                     {"train_loss", r.train_loss},
                     {"val_loss", r.val_loss}};
    (*os) << j.dump() << "\n" << std::flush;
}

void log_summary(std::ostream* os, const StageHistory& h) {
    if (!os) return;
    nlohmann::json j{{"stage", stage_name(h.kind)},      {"event", "stage_complete"},
                     {"best_epoch", h.best_epoch},       {"optimizer_steps", h.optimizer_steps},
                     {"disc_steps", h.disc_steps},       {"adversarial_evals", h.adversarial_evals},
                     {"nesting_checks", h.nesting_checks}};
    (*os) << j.dump() << "\n" << std::flush;
}

// weighted reconstruction objective; `dist` may be null to skip the KL term
// (the KL only touches encoder parameters, so a frozen encoder makes it a
// constant)
ad::Var<float> recon_objective(const ad::Var<float>& xr, const ad::Var<float>& target,
                               const ae::EncodeDist<float>* dist,
                               const losses::FeatureExtractor<float>& fx,
                               const losses::LossWeights& w) {
    ad::Var<float> loss = ad::scale(losses::l1_loss(xr, target), static_cast<float>(w.w_l1));
    if (w.w_perceptual > 0.0)
        loss = ad::add(loss, ad::scale(losses::perceptual_loss(xr, target, fx),
                                       static_cast<float>(w.w_perceptual)));
    if (dist != nullptr && w.w_kl > 0.0)
        loss = ad::add(loss, ad::scale(losses::kl_regularization(dist->mu, dist->logvar),
                                       static_cast<float>(w.w_kl)));
    return loss;
}

// bounds containment in a shared direction frame, with a strict interpretation
// softened by a metric tolerance
void assert_grid_nesting(const coords::CoordGrid& cxh, const coords::CoordGrid& cz,
                         const coords::CoordGrid& cx, const coords::Mat3& frame_inv) {
    coords::Vec3 alo, ahi, zlo, zhi, xlo, xhi;
    cxh.bounds_in_frame(frame_inv, alo, ahi);
    cz.bounds_in_frame(frame_inv, zlo, zhi);
    cx.bounds_in_frame(frame_inv, xlo, xhi);
    const double tol = 1e-9;
    for (int a = 0; a < 3; ++a) {
        const bool inner_ok = zlo[a] <= alo[a] + tol && ahi[a] <= zhi[a] + tol;
        const bool outer_ok = xlo[a] <= zlo[a] + tol && zhi[a] <= xhi[a] + tol;
        if (!inner_ok || !outer_ok)
            throw Error::contract("grid nesting violated on axis " + std::to_string(a) +
                                  ": requires bounds(patch) within bounds(latent) within "
                                  "bounds(context)");
    }
}

// one native-stage draw: target patch (C_X-hat), its latent grid (C_Z), and
// the augmented context crop (C_X) fed to the encoder
struct NativeDraw {
    Volume input;
    Volume patch;
    coords::CoordGrid cz;
};

NativeDraw native_draw(const StagePlan& plan, const ae::Autoencoder<float>& model,
                       const Sample& s, uint64_t micro_seed, StageHistory& hist) {
    Volume patch =
        sample_patch(s.image, s.mask, plan.patch_shape, mix_seed(micro_seed, kPatchTag));
    coords::CoordGrid cz = model.cfg.default_latent_grid(patch.grid);

    const coords::Mat3 dirs_inv = s.image.grid.affine.directions().inverse();
    coords::Vec3 zlo, zhi;
    cz.bounds_in_frame(dirs_inv, zlo, zhi);
    const coords::Vec3 buf = s.image.grid.spacing() * plan.input_buffer_cells;
    Volume cx = crop_pad_fov(s.image, zlo - buf, zhi + buf, 0.0f);

    assert_grid_nesting(patch.grid, cz, cx.grid, dirs_inv);
    ++hist.nesting_checks;

    Volume input = cx;
    if (plan.augment_enabled) {
        input = augment(cx, plan.augment, mix_seed(micro_seed, kAugTag));
        ++hist.augment_calls;
        if (!input.grid.same_geometry(cx.grid)) ++hist.augment_resamples;
    }
    return {std::move(input), std::move(patch), cz};
}

using AE = ae::Autoencoder<float>;

// full-graph micro-step (encoder + decoder); returns the unscaled objective
double native_micro(const AE& model, const NativeDraw& d,
                    const losses::FeatureExtractor<float>& fx, const losses::LossWeights& w,
                    const losses::Discriminator<float>* disc, float inv_batch, uint64_t z_seed,
                    std::vector<ad::Var<float>>& disc_terms) {
    ad::Var<float> x(AE::field_of(d.input));
    ae::EncodeDist<float> dist = model.encode_var(x, d.input.grid, d.cz);
    ad::Var<float> z = AE::sample_latent(dist, z_seed);
    ad::Var<float> xr = model.decode_var(z, d.cz, d.patch.grid);
    ad::Var<float> target(AE::field_of(d.patch));

    ad::Var<float> loss = recon_objective(xr, target, &dist, fx, w);
    if (disc != nullptr) {
        losses::AdversarialTerms<float> terms = losses::adversarial_losses(*disc, target, xr);
        loss = ad::add(loss, ad::scale(terms.generator, static_cast<float>(w.w_adversarial)));
        disc_terms.push_back(terms.discriminator);
    }
    ad::backward(ad::scale(loss, inv_batch));
    return static_cast<double>(loss.value()[0]);
}

// decoder-only micro-step: the encoder runs without a graph and the latent
// enters as a constant, so gradients exist only for decoder parameters
double finetune_micro(const AE& model, const NativeDraw& d,
                      const losses::FeatureExtractor<float>& fx, const losses::LossWeights& w,
                      float inv_batch, uint64_t z_seed) {
    ad::Tensor<float> z_val;
    {
        ad::NoGrad ng;
        ad::Var<float> x(AE::field_of(d.input));
        ae::EncodeDist<float> dist = model.encode_var(x, d.input.grid, d.cz);
        z_val = AE::sample_latent(dist, z_seed).value();
    }
    ad::Var<float> xr = model.decode_var(ad::Var<float>(std::move(z_val)), d.cz, d.patch.grid);
    ad::Var<float> target(AE::field_of(d.patch));
    ad::Var<float> loss = recon_objective(xr, target, nullptr, fx, w);
    ad::backward(ad::scale(loss, inv_batch));
    return static_cast<double>(loss.value()[0]);
}

}  // namespace

const char* stage_name(StageKind k) {
    switch (k) {
        case StageKind::pretrain: return "pretrain";
        case StageKind::native_patch: return "native_patch";
        case StageKind::decoder_finetune: return "decoder_finetune";
        case StageKind::ddpm: return "ddpm";
    }
    throw Error::contract("stage_name: bad enum value");
}

StageKind stage_from_name(const std::string& name) {
    if (name == "pretrain") return StageKind::pretrain;
    if (name == "native_patch") return StageKind::native_patch;
    if (name == "decoder_finetune") return StageKind::decoder_finetune;
    if (name == "ddpm") return StageKind::ddpm;
    throw Error::config("unknown stage '" + name + "'");
}

void AugmentConfig::validate() const {
    if (!(resample_probability >= 0.0 && resample_probability <= 1.0))
        throw Error::config("augment: resample probability must be in [0, 1]");
    if (!(spacing_lo > 0.0) || spacing_hi < spacing_lo)
        throw Error::config("augment: spacing range must be positive and ordered");
    if (noise_sigma_lo < 0.0 || noise_sigma_hi < noise_sigma_lo)
        throw Error::config("augment: sigma range must be non-negative and ordered");
}

void StagePlan::validate() const {
    if (epochs < 1) throw Error::config("stage plan: epochs must be >= 1");
    if (batches_per_epoch < 1) throw Error::config("stage plan: batches per epoch must be >= 1");
    if (effective_batch_size < 1) throw Error::config("stage plan: batch size must be >= 1");
    for (int64_t d : patch_shape)
        if (d < 1) throw Error::config("stage plan: patch shape must be >= 1 per axis");
    if (input_buffer_cells < 0.0) throw Error::config("stage plan: input buffer must be >= 0");
    if (weights.adversarial_start_epoch < 0)
        throw Error::config("stage plan: adversarial start epoch must be >= 0");
    if (!(optimizer.lr > 0.0)) throw Error::config("stage plan: learning rate must be positive");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
        !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
        throw Error::config("stage plan: Adam betas must be in [0, 1)");
    if (optimizer.weight_decay < 0.0) throw Error::config("stage plan: weight decay must be >= 0");
    weights.validate();
    augment.validate();
}

std::vector<double> StageHistory::val_curve() const {
    std::vector<double> v;
    v.reserve(epochs.size());
    for (const auto& e : epochs) v.push_back(e.val_loss);
    return v;
}

std::size_t select_checkpoint(const std::vector<double>& val_losses) {
    if (val_losses.empty()) throw Error::contract("select_checkpoint: empty validation history");
    // min_element returns the first minimum, which is the earliest-epoch tie rule
    return static_cast<std::size_t>(
        std::min_element(val_losses.begin(), val_losses.end()) - val_losses.begin());
}

void enforce_stage_order(StageKind next, bool has_pretrain, bool has_native,
                         bool allow_out_of_order) {
    if (allow_out_of_order) return;
    if (next == StageKind::native_patch && !has_pretrain)
        throw Error::config(
            "native-resolution stage requires a pretrain checkpoint (override to skip)");
    if (next == StageKind::decoder_finetune && !has_native)
        throw Error::config(
            "decoder fine-tune requires a native-stage checkpoint (override to skip)");
}

uint64_t param_subset_hash(const nn::ParamRegistry<float>& reg, const std::string& prefix) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : reg.all()) {
        if (!prefix.empty() && p.name.rfind(prefix, 0) != 0) continue;
        h = fnv1a(p.name, h);
        h = fnv1a(p.v.value().data(), p.v.value().size() * sizeof(float), h);
    }
    return h;
}

Volume widen_space(const Volume& volume, const ae::AutoencoderConfig& cfg,
                   double input_buffer_cells) {
    volume.validate();
    const coords::Vec3 sp = volume.grid.spacing();
    double margin = 0.0;
    for (int a = 0; a < 3; ++a) {
        // exscribe can push one latent cell past the buffer (ceil rounding),
        // and the context crop adds whole input voxels beyond that
        const double m = cfg.latent_spacing[a] * (cfg.buffer_cells + 2.0) +
                         sp[a] * (input_buffer_cells + 2.0);
        margin = std::max(margin, m);
    }
    coords::Vec3 lo, hi;
    volume.grid.bounds(lo, hi);
    const coords::Vec3 mv = coords::Vec3::Constant(margin);
    coords::CoordSpace wide((lo - mv).cwiseMin(volume.grid.space.lower),
                            (hi + mv).cwiseMax(volume.grid.space.upper));
    Volume out = volume;
    out.grid.space = wide;
    return out;
}

Volume resample_to_spacing(const Volume& volume, const coords::Vec3& spacing) {
    volume.validate();
    for (int a = 0; a < 3; ++a)
        if (!(spacing[a] > 0.0)) throw Error::config("resample: spacing must be positive");

    const coords::Vec3 sp = volume.grid.spacing();
    std::array<int64_t, 3> shape{};
    for (int a = 0; a < 3; ++a) {
        const double extent = static_cast<double>(volume.grid.shape[a] - 1) * sp[a];
        shape[a] = static_cast<int64_t>(std::floor(extent / spacing[a] + 1e-9)) + 1;
    }
    coords::Affine aff;
    aff.matrix = volume.grid.affine.directions() * spacing.asDiagonal();
    aff.origin = volume.grid.affine.origin;
    coords::CoordGrid target = coords::make_grid(aff, shape, volume.grid.space);
    return inr::trilinear_resample(volume, target);
}

Volume augment(const Volume& volume, const AugmentConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(mix_seed(seed, kAugTag));

    Volume out = volume;
    if (rng.uniform() < config.resample_probability) {
        const double s = rng.uniform(config.spacing_lo, config.spacing_hi);
        out = resample_to_spacing(out, coords::Vec3::Constant(s));
    }
    const double sigma_hu = rng.uniform(config.noise_sigma_lo, config.noise_sigma_hi);
    const double sigma = sigma_hu / 3000.0;  // the hu_scale window slope
    if (sigma > 0.0)
        for (int64_t i = 0; i < out.data.size(); ++i)
            out.data[i] = static_cast<float>(out.data[i] + rng.normal(0.0, sigma));
    return out;
}

double validation_l1(const ae::Autoencoder<float>& model, const std::vector<Sample>& val) {
    if (val.empty()) throw Error::contract("validation_l1: empty validation set");
    double acc = 0.0;
    for (const auto& s : val) {
        Volume v = widen_space(s.image, model.cfg, 0.0);
        Volume r = model.reconstruct(v);
        double e = 0.0;
        for (int64_t i = 0; i < v.data.size(); ++i)
            e += std::abs(static_cast<double>(r.data[i]) - static_cast<double>(v.data[i]));
        acc += e / static_cast<double>(v.data.size());
    }
    return acc / static_cast<double>(val.size());
}

StageHistory run_pretrain(const StagePlan& plan, ae::Autoencoder<float>& model,
                          const std::vector<Sample>& train, const std::vector<Sample>& val,
                          const TrainOptions& opts) {
    plan.validate();
    if (plan.kind != StageKind::pretrain)
        throw Error::contract("run_pretrain: plan kind is not 'pretrain'");
    require_data(train, val, "pretrain");

    const std::vector<Sample> tr = widen_all(train, model.cfg, plan.input_buffer_cells);
    const std::vector<Sample> vl = widen_all(val, model.cfg, plan.input_buffer_cells);

    // the fixed-size contract: one shape, one spacing across train and val
    const coords::CoordGrid& ref = tr.front().image.grid;
    auto check_fixed = [&](const Sample& s) {
        const bool same_shape = s.image.grid.shape == ref.shape;
        const bool same_spacing =
            (s.image.grid.spacing() - ref.spacing()).cwiseAbs().maxCoeff() <= 1e-9;
        if (!same_shape || !same_spacing)
            throw Error::contract("pretrain requires one fixed volume shape and spacing; '" +
                                  s.id + "' differs");
    };
    for (const auto& s : tr) check_fixed(s);
    for (const auto& s : vl) check_fixed(s);

    losses::FeatureExtractor<float> fx;
    nn::AdamW<float> opt(param_ptrs(model.params, ""), plan.optimizer);
    model.params.zero_grad();

    StageHistory hist;
    hist.kind = plan.kind;
    hist.initial_val_loss = validation_l1(model, vl);
    BestTracker best;

    const uint64_t stage_seed = stage_seed_of(opts.seed, plan.kind);
    const float inv_b = 1.0f / static_cast<float>(plan.effective_batch_size);

    for (int epoch = 0; epoch < plan.epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int batch = 0; batch < plan.batches_per_epoch; ++batch) {
            const uint64_t step_id =
                static_cast<uint64_t>(epoch) * plan.batches_per_epoch + batch;
            double batch_loss = 0.0;
            for (int m = 0; m < plan.effective_batch_size; ++m) {
                const uint64_t ms = mix_seed(stage_seed, step_id, static_cast<uint64_t>(m));
                const Sample& s = tr[Rng(mix_seed(ms, kPickTag)).index(tr.size())];
                ad::Var<float> x(AE::field_of(s.image));
                const coords::CoordGrid cz = model.cfg.default_latent_grid(s.image.grid);
                ae::EncodeDist<float> dist = model.encode_var(x, s.image.grid, cz);
                ad::Var<float> z = AE::sample_latent(dist, mix_seed(ms, kZTag));
                ad::Var<float> xr = model.decode_var(z, cz, s.image.grid);
                ad::Var<float> target(AE::field_of(s.image));
                ad::Var<float> loss = recon_objective(xr, target, &dist, fx, plan.weights);
                ad::backward(ad::scale(loss, inv_b));
                batch_loss += static_cast<double>(loss.value()[0]);
            }
            opt.step();
            model.params.zero_grad();
            ++hist.optimizer_steps;
            loss_sum += batch_loss / plan.effective_batch_size;
        }
        const double v = validation_l1(model, vl);
        hist.epochs.push_back({epoch, loss_sum / plan.batches_per_epoch, v});
        best.offer(epoch, v, model.params);
        log_epoch(opts.log, hist.kind, hist.epochs.back());
    }

    model.params.load_state(best.state);
    hist.best_epoch = best.epoch;
    log_summary(opts.log, hist);
    return hist;
}

StageHistory run_native_patch_stage(const StagePlan& plan, ae::Autoencoder<float>& model,
                                    const std::vector<Sample>& train,
                                    const std::vector<Sample>& val, const TrainOptions& opts) {
    plan.validate();
    if (plan.kind != StageKind::native_patch)
        throw Error::contract("run_native_patch_stage: plan kind is not 'native_patch'");
    require_data(train, val, "native stage");

    const std::vector<Sample> tr = widen_all(train, model.cfg, plan.input_buffer_cells);
    const std::vector<Sample> vl = widen_all(val, model.cfg, plan.input_buffer_cells);

    losses::FeatureExtractor<float> fx;
    losses::Discriminator<float> disc;
    nn::AdamW<float> gopt(param_ptrs(model.params, ""), plan.optimizer);
    nn::AdamW<float> dopt(param_ptrs(disc.params, ""), plan.optimizer);
    model.params.zero_grad();

    StageHistory hist;
    hist.kind = plan.kind;
    hist.initial_val_loss = validation_l1(model, vl);
    BestTracker best;

    const uint64_t stage_seed = stage_seed_of(opts.seed, plan.kind);
    const float inv_b = 1.0f / static_cast<float>(plan.effective_batch_size);
    const bool adv_enabled = plan.weights.w_adversarial > 0.0;

    for (int epoch = 0; epoch < plan.epochs; ++epoch) {
        const bool adv_active = adv_enabled && epoch >= plan.adversarial_start_epoch();
        double loss_sum = 0.0;
        for (int batch = 0; batch < plan.batches_per_epoch; ++batch) {
            const uint64_t step_id =
                static_cast<uint64_t>(epoch) * plan.batches_per_epoch + batch;
            std::vector<ad::Var<float>> disc_terms;
            double batch_loss = 0.0;
            for (int m = 0; m < plan.effective_batch_size; ++m) {
                const uint64_t ms = mix_seed(stage_seed, step_id, static_cast<uint64_t>(m));
                const Sample& s = tr[Rng(mix_seed(ms, kPickTag)).index(tr.size())];
                NativeDraw d = native_draw(plan, model, s, ms, hist);
                batch_loss += native_micro(model, d, fx, plan.weights,
                                           adv_active ? &disc : nullptr, inv_b,
                                           mix_seed(ms, kZTag), disc_terms);
                if (adv_active) ++hist.adversarial_evals;
            }
            gopt.step();
            model.params.zero_grad();
            ++hist.optimizer_steps;
            if (adv_active) {
                // the generator pass spilled gradients into the discriminator;
                // clear them before training the discriminator on this batch
                disc.params.zero_grad();
                for (const auto& t : disc_terms) ad::backward(ad::scale(t, inv_b));
                dopt.step();
                disc.params.zero_grad();
                ++hist.disc_steps;
            }
            loss_sum += batch_loss / plan.effective_batch_size;
        }
        const double v = validation_l1(model, vl);
        hist.epochs.push_back({epoch, loss_sum / plan.batches_per_epoch, v});
        best.offer(epoch, v, model.params);
        log_epoch(opts.log, hist.kind, hist.epochs.back());
    }

    model.params.load_state(best.state);
    hist.best_epoch = best.epoch;
    log_summary(opts.log, hist);
    return hist;
}

StageHistory run_decoder_finetune(const StagePlan& plan, ae::Autoencoder<float>& model,
                                  const std::vector<Sample>& train,
                                  const std::vector<Sample>& val, const TrainOptions& opts) {
    plan.validate();
    if (plan.kind != StageKind::decoder_finetune)
        throw Error::contract("run_decoder_finetune: plan kind is not 'decoder_finetune'");
    require_data(train, val, "decoder fine-tune");

    const std::vector<Sample> tr = widen_all(train, model.cfg, plan.input_buffer_cells);
    const std::vector<Sample> vl = widen_all(val, model.cfg, plan.input_buffer_cells);

    const uint64_t encoder_before = param_subset_hash(model.params, "enc.");

    losses::FeatureExtractor<float> fx;
    nn::AdamW<float> opt(param_ptrs(model.params, "dec."), plan.optimizer);
    model.params.zero_grad();

    StageHistory hist;
    hist.kind = plan.kind;
    hist.initial_val_loss = validation_l1(model, vl);
    BestTracker best;

    const uint64_t stage_seed = stage_seed_of(opts.seed, plan.kind);
    const float inv_b = 1.0f / static_cast<float>(plan.effective_batch_size);

    for (int epoch = 0; epoch < plan.epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int batch = 0; batch < plan.batches_per_epoch; ++batch) {
            const uint64_t step_id =
                static_cast<uint64_t>(epoch) * plan.batches_per_epoch + batch;
            double batch_loss = 0.0;
            for (int m = 0; m < plan.effective_batch_size; ++m) {
                const uint64_t ms = mix_seed(stage_seed, step_id, static_cast<uint64_t>(m));
                const Sample& s = tr[Rng(mix_seed(ms, kPickTag)).index(tr.size())];
                NativeDraw d = native_draw(plan, model, s, ms, hist);
                batch_loss +=
                    finetune_micro(model, d, fx, plan.weights, inv_b, mix_seed(ms, kZTag));
            }
            opt.step();
            model.params.zero_grad();
            ++hist.optimizer_steps;
            loss_sum += batch_loss / plan.effective_batch_size;
        }
        const double v = validation_l1(model, vl);
        hist.epochs.push_back({epoch, loss_sum / plan.batches_per_epoch, v});
        best.offer(epoch, v, model.params);
        log_epoch(opts.log, hist.kind, hist.epochs.back());
    }

    model.params.load_state(best.state);
    hist.best_epoch = best.epoch;

    if (param_subset_hash(model.params, "enc.") != encoder_before)
        throw Error::contract("decoder fine-tune mutated encoder parameters");

    log_summary(opts.log, hist);
    return hist;
}

std::vector<ae::LatentVolume> encode_dataset(const ae::Autoencoder<float>& model,
                                             const std::vector<Sample>& data) {
    if (data.empty()) throw Error::contract("encode_dataset: empty dataset");
    std::vector<ae::LatentVolume> out;
    out.reserve(data.size());
    for (const auto& s : data) out.push_back(model.encode(widen_space(s.image, model.cfg, 0.0)));
    return out;
}

double latent_global_std(const std::vector<ae::LatentVolume>& latents) {
    if (latents.empty()) throw Error::contract("latent_global_std: no latents");
    double sum = 0.0;
    int64_t n = 0;
    for (const auto& l : latents) {
        for (int64_t i = 0; i < l.data.size(); ++i) sum += static_cast<double>(l.data[i]);
        n += l.data.size();
    }
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& l : latents)
        for (int64_t i = 0; i < l.data.size(); ++i) {
            const double d = static_cast<double>(l.data[i]) - mean;
            ss += d * d;
        }
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (!(sd > 1e-9)) throw Error::numeric("latent distribution is degenerate (std ~ 0)");
    return sd;
}

DdpmTrainResult run_ddpm(const StagePlan& plan, const ae::Autoencoder<float>& model,
                         diffusion::UNet<float>& net, const diffusion::NoiseSchedule& schedule,
                         const std::vector<Sample>& train, const std::vector<Sample>& val,
                         const TrainOptions& opts) {
    plan.validate();
    if (plan.kind != StageKind::ddpm) throw Error::contract("run_ddpm: plan kind is not 'ddpm'");
    require_data(train, val, "ddpm");
    if (net.cfg.latent_channels != model.cfg.latent_channels)
        throw Error::config("ddpm: denoiser channel count does not match the autoencoder");

    const std::vector<ae::LatentVolume> lt = encode_dataset(model, train);
    const std::vector<ae::LatentVolume> lv = encode_dataset(model, val);
    const double latent_std = latent_global_std(lt);
    const float inv_std = static_cast<float>(1.0 / latent_std);

    auto scaled = [&](const std::vector<ae::LatentVolume>& ls) {
        std::vector<ad::Tensor<float>> xs;
        xs.reserve(ls.size());
        for (const auto& l : ls) {
            ad::Tensor<float> t = l.data;
            for (int64_t i = 0; i < t.size(); ++i) t[i] *= inv_std;
            xs.push_back(std::move(t));
        }
        return xs;
    };
    const std::vector<ad::Tensor<float>> xt = scaled(lt);
    const std::vector<ad::Tensor<float>> xv = scaled(lv);

    const diffusion::HybridLossConfig hcfg;
    nn::AdamW<float> opt(param_ptrs(net.params, ""), plan.optimizer);
    net.params.zero_grad();

    StageHistory hist;
    hist.kind = plan.kind;
    const uint64_t stage_seed = stage_seed_of(opts.seed, plan.kind);
    const uint64_t val_seed = mix_seed(stage_seed, kValTag);

    // validation uses one fixed draw of timesteps/noise so epochs compare
    auto val_loss = [&]() {
        ad::NoGrad ng;
        return static_cast<double>(
            diffusion::hybrid_loss(net, xv, schedule, hcfg, val_seed).value()[0]);
    };
    hist.initial_val_loss = val_loss();
    BestTracker best;

    for (int epoch = 0; epoch < plan.epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int batch = 0; batch < plan.batches_per_epoch; ++batch) {
            const uint64_t step_id =
                static_cast<uint64_t>(epoch) * plan.batches_per_epoch + batch;
            const uint64_t ms = mix_seed(stage_seed, step_id, 0);
            Rng pick(mix_seed(ms, kPickTag));
            std::vector<ad::Tensor<float>> x0;
            x0.reserve(plan.effective_batch_size);
            for (int m = 0; m < plan.effective_batch_size; ++m)
                x0.push_back(xt[pick.index(xt.size())]);
            ad::Var<float> loss =
                diffusion::hybrid_loss(net, x0, schedule, hcfg, mix_seed(ms, kNoiseTag));
            ad::backward(loss);
            opt.step();
            net.params.zero_grad();
            ++hist.optimizer_steps;
            loss_sum += static_cast<double>(loss.value()[0]);
        }
        const double v = val_loss();
        hist.epochs.push_back({epoch, loss_sum / plan.batches_per_epoch, v});
        best.offer(epoch, v, net.params);
        log_epoch(opts.log, hist.kind, hist.epochs.back());
    }

    net.params.load_state(best.state);
    hist.best_epoch = best.epoch;
    log_summary(opts.log, hist);
    return {hist, latent_std};
}

}  // namespace cvox::training
