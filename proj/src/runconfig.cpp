#include "cvox/runconfig.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace cvox::runcfg {

namespace {

// ---------------------------------------------------------------------------
// value formatting/parsing: every value round-trips exactly through its
// string form so the echo re-parses to the identical config
// ---------------------------------------------------------------------------

std::string fmt_f64(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_u64(uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%" PRIu64, v);
    return buf;
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw Error::config("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw Error::config("config key '" + key + "': expected an integer, got '" + v + "'");
    }
}

int parse_int(const std::string& key, const std::string& v) {
    return static_cast<int>(parse_i64(key, v));
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw Error::config("config key '" + key + "': expected an unsigned integer, got '" + v +
                            "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw Error::config("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream is(v);
    while (std::getline(is, cur, ',')) parts.push_back(trim(cur));
    if (!v.empty() && v.back() == ',') parts.push_back("");
    return parts;
}

std::vector<double> parse_dlist(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const auto& p : split_commas(v)) out.push_back(parse_f64(key, p));
    if (out.empty()) throw Error::config("config key '" + key + "': empty list");
    return out;
}

std::vector<int64_t> parse_ilist(const std::string& key, const std::string& v) {
    std::vector<int64_t> out;
    for (const auto& p : split_commas(v)) out.push_back(parse_i64(key, p));
    if (out.empty()) throw Error::config("config key '" + key + "': empty list");
    return out;
}

std::array<int64_t, 3> parse_i3(const std::string& key, const std::string& v) {
    auto l = parse_ilist(key, v);
    if (l.size() != 3)
        throw Error::config("config key '" + key + "': expected three comma-separated integers");
    return {l[0], l[1], l[2]};
}

coords::Vec3 parse_vec3(const std::string& key, const std::string& v) {
    auto l = parse_dlist(key, v);
    if (l.size() == 1) return coords::Vec3::Constant(l[0]);
    if (l.size() != 3)
        throw Error::config("config key '" + key + "': expected one or three numbers");
    return {l[0], l[1], l[2]};
}

template <class T>
std::string fmt_list(const std::vector<T>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        if constexpr (std::is_same_v<T, double>)
            s += fmt_f64(v[i]);
        else
            s += std::to_string(v[i]);
    }
    return s;
}

std::string fmt_i3(const std::array<int64_t, 3>& a) {
    return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]);
}

std::string fmt_vec3(const coords::Vec3& v) {
    return fmt_f64(v[0]) + "," + fmt_f64(v[1]) + "," + fmt_f64(v[2]);
}

// ---------------------------------------------------------------------------
// the key table: declaration order is the echo order
// ---------------------------------------------------------------------------

struct KeyDef {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<KeyDef>& key_table() {
    auto K = [](const char* key, auto get, auto set) {
        return KeyDef{key, get, set};
    };
    static const std::vector<KeyDef> table = {
        K("seed", [](const RunConfig& c) { return fmt_u64(c.seed); },
          [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }),
        K("data.dir", [](const RunConfig& c) { return c.data_dir; },
          [](RunConfig& c, const std::string& v) { c.data_dir = v; }),
        K("run.dir", [](const RunConfig& c) { return c.run_dir; },
          [](RunConfig& c, const std::string& v) { c.run_dir = v; }),

        K("phantom.count", [](const RunConfig& c) { return std::to_string(c.phantom_count); },
          [](RunConfig& c, const std::string& v) { c.phantom_count = parse_int("phantom.count", v); }),
        K("phantom.val_count", [](const RunConfig& c) { return std::to_string(c.val_count); },
          [](RunConfig& c, const std::string& v) { c.val_count = parse_int("phantom.val_count", v); }),
        K("phantom.fov_mm", [](const RunConfig& c) { return fmt_f64(c.phantom_fov); },
          [](RunConfig& c, const std::string& v) { c.phantom_fov = parse_f64("phantom.fov_mm", v); }),
        K("phantom.spacings", [](const RunConfig& c) { return fmt_list(c.phantom_spacings); },
          [](RunConfig& c, const std::string& v) {
              c.phantom_spacings = parse_dlist("phantom.spacings", v);
          }),
        K("phantom.noise_sigma", [](const RunConfig& c) { return fmt_f64(c.phantom_noise); },
          [](RunConfig& c, const std::string& v) {
              c.phantom_noise = parse_f64("phantom.noise_sigma", v);
          }),
        K("phantom.seed", [](const RunConfig& c) { return fmt_u64(c.phantom_seed); },
          [](RunConfig& c, const std::string& v) { c.phantom_seed = parse_u64("phantom.seed", v); }),

        K("ae.channels",
          [](const RunConfig& c) { return fmt_list(c.autoencoder.backbone.channels); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.backbone.channels = parse_ilist("ae.channels", v);
          }),
        K("ae.downscale",
          [](const RunConfig& c) { return fmt_list(c.autoencoder.backbone.downscale); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.backbone.downscale = parse_ilist("ae.downscale", v);
          }),
        K("ae.kernel",
          [](const RunConfig& c) { return std::to_string(c.autoencoder.backbone.kernel); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.backbone.kernel = parse_i64("ae.kernel", v);
          }),
        K("ae.subunits",
          [](const RunConfig& c) { return std::to_string(c.autoencoder.backbone.subunits); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.backbone.subunits = parse_i64("ae.subunits", v);
          }),
        K("ae.latent_channels",
          [](const RunConfig& c) { return std::to_string(c.autoencoder.latent_channels); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.latent_channels = parse_i64("ae.latent_channels", v);
          }),
        K("ae.latent_spacing",
          [](const RunConfig& c) { return fmt_vec3(c.autoencoder.latent_spacing); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.latent_spacing = parse_vec3("ae.latent_spacing", v);
          }),
        K("ae.buffer_cells", [](const RunConfig& c) { return fmt_f64(c.autoencoder.buffer_cells); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.buffer_cells = parse_f64("ae.buffer_cells", v);
          }),
        K("ae.resampler",
          [](const RunConfig& c) { return std::string(ae::resampler_name(c.autoencoder.resampler)); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.resampler = ae::resampler_from_name(v);
          }),
        K("ae.lte_frequencies",
          [](const RunConfig& c) { return std::to_string(c.autoencoder.lte.n_frequencies); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.lte.n_frequencies = parse_i64("ae.lte_frequencies", v);
          }),
        K("ae.lte_hidden",
          [](const RunConfig& c) { return std::to_string(c.autoencoder.lte.hidden); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.lte.hidden = parse_i64("ae.lte_hidden", v);
          }),
        K("ae.lte_depth", [](const RunConfig& c) { return std::to_string(c.autoencoder.lte.depth); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.lte.depth = parse_i64("ae.lte_depth", v);
          }),
        K("ae.init_seed", [](const RunConfig& c) { return fmt_u64(c.autoencoder.init_seed); },
          [](RunConfig& c, const std::string& v) {
              c.autoencoder.init_seed = parse_u64("ae.init_seed", v);
          }),

        K("loss.l1", [](const RunConfig& c) { return fmt_f64(c.weights.w_l1); },
          [](RunConfig& c, const std::string& v) { c.weights.w_l1 = parse_f64("loss.l1", v); }),
        K("loss.perceptual", [](const RunConfig& c) { return fmt_f64(c.weights.w_perceptual); },
          [](RunConfig& c, const std::string& v) {
              c.weights.w_perceptual = parse_f64("loss.perceptual", v);
          }),
        K("loss.adversarial", [](const RunConfig& c) { return fmt_f64(c.weights.w_adversarial); },
          [](RunConfig& c, const std::string& v) {
              c.weights.w_adversarial = parse_f64("loss.adversarial", v);
          }),
        K("loss.kl", [](const RunConfig& c) { return fmt_f64(c.weights.w_kl); },
          [](RunConfig& c, const std::string& v) { c.weights.w_kl = parse_f64("loss.kl", v); }),

        K("opt.lr", [](const RunConfig& c) { return fmt_f64(c.optimizer.lr); },
          [](RunConfig& c, const std::string& v) { c.optimizer.lr = parse_f64("opt.lr", v); }),
        K("opt.beta1", [](const RunConfig& c) { return fmt_f64(c.optimizer.beta1); },
          [](RunConfig& c, const std::string& v) { c.optimizer.beta1 = parse_f64("opt.beta1", v); }),
        K("opt.beta2", [](const RunConfig& c) { return fmt_f64(c.optimizer.beta2); },
          [](RunConfig& c, const std::string& v) { c.optimizer.beta2 = parse_f64("opt.beta2", v); }),
        K("opt.weight_decay", [](const RunConfig& c) { return fmt_f64(c.optimizer.weight_decay); },
          [](RunConfig& c, const std::string& v) {
              c.optimizer.weight_decay = parse_f64("opt.weight_decay", v);
          }),

        K("train.batches_per_epoch",
          [](const RunConfig& c) { return std::to_string(c.batches_per_epoch); },
          [](RunConfig& c, const std::string& v) {
              c.batches_per_epoch = parse_int("train.batches_per_epoch", v);
          }),
        K("train.batch_size",
          [](const RunConfig& c) { return std::to_string(c.effective_batch_size); },
          [](RunConfig& c, const std::string& v) {
              c.effective_batch_size = parse_int("train.batch_size", v);
          }),
        K("train.patch_shape", [](const RunConfig& c) { return fmt_i3(c.patch_shape); },
          [](RunConfig& c, const std::string& v) {
              c.patch_shape = parse_i3("train.patch_shape", v);
          }),
        K("train.input_buffer_cells",
          [](const RunConfig& c) { return fmt_f64(c.input_buffer_cells); },
          [](RunConfig& c, const std::string& v) {
              c.input_buffer_cells = parse_f64("train.input_buffer_cells", v);
          }),

        K("pretrain.epochs", [](const RunConfig& c) { return std::to_string(c.pretrain_epochs); },
          [](RunConfig& c, const std::string& v) {
              c.pretrain_epochs = parse_int("pretrain.epochs", v);
          }),
        K("pretrain.spacing", [](const RunConfig& c) { return fmt_f64(c.pretrain_spacing); },
          [](RunConfig& c, const std::string& v) {
              c.pretrain_spacing = parse_f64("pretrain.spacing", v);
          }),
        K("native.epochs", [](const RunConfig& c) { return std::to_string(c.native_epochs); },
          [](RunConfig& c, const std::string& v) { c.native_epochs = parse_int("native.epochs", v); }),
        K("native.adversarial_start_epoch",
          [](const RunConfig& c) { return std::to_string(c.adversarial_start_epoch); },
          [](RunConfig& c, const std::string& v) {
              c.adversarial_start_epoch = parse_int("native.adversarial_start_epoch", v);
          }),
        K("native.augment", [](const RunConfig& c) { return std::string(c.native_augment ? "true" : "false"); },
          [](RunConfig& c, const std::string& v) {
              c.native_augment = parse_bool("native.augment", v);
          }),
        K("augment.resample_probability",
          [](const RunConfig& c) { return fmt_f64(c.augment.resample_probability); },
          [](RunConfig& c, const std::string& v) {
              c.augment.resample_probability = parse_f64("augment.resample_probability", v);
          }),
        K("augment.spacing_lo", [](const RunConfig& c) { return fmt_f64(c.augment.spacing_lo); },
          [](RunConfig& c, const std::string& v) {
              c.augment.spacing_lo = parse_f64("augment.spacing_lo", v);
          }),
        K("augment.spacing_hi", [](const RunConfig& c) { return fmt_f64(c.augment.spacing_hi); },
          [](RunConfig& c, const std::string& v) {
              c.augment.spacing_hi = parse_f64("augment.spacing_hi", v);
          }),
        K("augment.sigma_lo", [](const RunConfig& c) { return fmt_f64(c.augment.noise_sigma_lo); },
          [](RunConfig& c, const std::string& v) {
              c.augment.noise_sigma_lo = parse_f64("augment.sigma_lo", v);
          }),
        K("augment.sigma_hi", [](const RunConfig& c) { return fmt_f64(c.augment.noise_sigma_hi); },
          [](RunConfig& c, const std::string& v) {
              c.augment.noise_sigma_hi = parse_f64("augment.sigma_hi", v);
          }),
        K("finetune.epochs", [](const RunConfig& c) { return std::to_string(c.finetune_epochs); },
          [](RunConfig& c, const std::string& v) {
              c.finetune_epochs = parse_int("finetune.epochs", v);
          }),
        K("ddpm.epochs", [](const RunConfig& c) { return std::to_string(c.ddpm_epochs); },
          [](RunConfig& c, const std::string& v) { c.ddpm_epochs = parse_int("ddpm.epochs", v); }),

        K("schedule.kind",
          [](const RunConfig& c) { return std::string(diffusion::schedule_name(c.schedule_kind)); },
          [](RunConfig& c, const std::string& v) { c.schedule_kind = diffusion::schedule_from_name(v); }),
        K("schedule.timesteps", [](const RunConfig& c) { return std::to_string(c.timesteps); },
          [](RunConfig& c, const std::string& v) {
              c.timesteps = parse_int("schedule.timesteps", v);
          }),
        K("schedule.beta_start", [](const RunConfig& c) { return fmt_f64(c.beta_start); },
          [](RunConfig& c, const std::string& v) {
              c.beta_start = parse_f64("schedule.beta_start", v);
          }),
        K("schedule.beta_end", [](const RunConfig& c) { return fmt_f64(c.beta_end); },
          [](RunConfig& c, const std::string& v) { c.beta_end = parse_f64("schedule.beta_end", v); }),

        K("unet.ch0", [](const RunConfig& c) { return std::to_string(c.unet.ch0); },
          [](RunConfig& c, const std::string& v) { c.unet.ch0 = parse_i64("unet.ch0", v); }),
        K("unet.ch1", [](const RunConfig& c) { return std::to_string(c.unet.ch1); },
          [](RunConfig& c, const std::string& v) { c.unet.ch1 = parse_i64("unet.ch1", v); }),
        K("unet.time_dim", [](const RunConfig& c) { return std::to_string(c.unet.time_dim); },
          [](RunConfig& c, const std::string& v) { c.unet.time_dim = parse_i64("unet.time_dim", v); }),
        K("unet.learned_variance",
          [](const RunConfig& c) { return std::string(c.unet.learned_variance ? "true" : "false"); },
          [](RunConfig& c, const std::string& v) {
              c.unet.learned_variance = parse_bool("unet.learned_variance", v);
          }),
        K("unet.init_seed", [](const RunConfig& c) { return fmt_u64(c.unet.init_seed); },
          [](RunConfig& c, const std::string& v) { c.unet.init_seed = parse_u64("unet.init_seed", v); }),

        K("sample.count", [](const RunConfig& c) { return std::to_string(c.sample_count); },
          [](RunConfig& c, const std::string& v) { c.sample_count = parse_int("sample.count", v); }),
        K("decode.spacings", [](const RunConfig& c) { return fmt_list(c.decode_spacings); },
          [](RunConfig& c, const std::string& v) {
              c.decode_spacings = parse_dlist("decode.spacings", v);
          }),
        K("decode.gmm_native",
          [](const RunConfig& c) { return std::string(c.decode_gmm_native ? "true" : "false"); },
          [](RunConfig& c, const std::string& v) {
              c.decode_gmm_native = parse_bool("decode.gmm_native", v);
          }),
        K("gmm.components", [](const RunConfig& c) { return std::to_string(c.gmm_components); },
          [](RunConfig& c, const std::string& v) { c.gmm_components = parse_int("gmm.components", v); }),
        K("eval.coverage_k", [](const RunConfig& c) { return std::to_string(c.coverage_k); },
          [](RunConfig& c, const std::string& v) { c.coverage_k = parse_int("eval.coverage_k", v); }),
    };
    return table;
}

void apply_assignment(RunConfig& c, const std::string& key, const std::string& value) {
    for (const auto& def : key_table()) {
        if (key == def.key) {
            def.set(c, value);
            return;
        }
    }
    throw Error::config("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
    if (phantom_count < 2) throw Error::config("config: phantom.count must be >= 2");
    if (val_count < 1 || val_count >= phantom_count)
        throw Error::config("config: phantom.val_count must be in [1, phantom.count)");
    if (!(phantom_fov > 0.0)) throw Error::config("config: phantom.fov_mm must be positive");
    for (double s : phantom_spacings)
        if (!(s > 0.0)) throw Error::config("config: phantom.spacings must be positive");
    if (phantom_noise < 0.0) throw Error::config("config: phantom.noise_sigma must be >= 0");
    autoencoder.validate();
    weights.validate();
    augment.validate();
    if (batches_per_epoch < 1) throw Error::config("config: train.batches_per_epoch must be >= 1");
    if (effective_batch_size < 1) throw Error::config("config: train.batch_size must be >= 1");
    for (int64_t d : patch_shape)
        if (d < 1) throw Error::config("config: train.patch_shape must be >= 1 per axis");
    if (input_buffer_cells < 0.0)
        throw Error::config("config: train.input_buffer_cells must be >= 0");
    if (pretrain_epochs < 1 || native_epochs < 1 || finetune_epochs < 1 || ddpm_epochs < 1)
        throw Error::config("config: stage epochs must be >= 1");
    if (!(pretrain_spacing > 0.0)) throw Error::config("config: pretrain.spacing must be positive");
    if (adversarial_start_epoch < 0)
        throw Error::config("config: native.adversarial_start_epoch must be >= 0");
    if (timesteps < 1) throw Error::config("config: schedule.timesteps must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end >= beta_start) || !(beta_end < 1.0))
        throw Error::config("config: schedule betas must satisfy 0 < start <= end < 1");
    if (sample_count < 2) throw Error::config("config: sample.count must be >= 2");
    if (decode_spacings.empty()) throw Error::config("config: decode.spacings must be non-empty");
    for (double s : decode_spacings)
        if (!(s > 0.0)) throw Error::config("config: decode.spacings must be positive");
    if (gmm_components < 1) throw Error::config("config: gmm.components must be >= 1");
    if (coverage_k < 1) throw Error::config("config: eval.coverage_k must be >= 1");
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw Error::config("config line " + std::to_string(lineno) +
                                ": expected key = value, got '" + line + "'");
        apply_assignment(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error::io("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return parse_run_config(ss.str());
    } catch (const Error& e) {
        throw Error(e.category(), std::string(path) + ": " + e.what());
    }
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw Error::usage("override must be key=value, got '" + assignment + "'");
    apply_assignment(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string config_echo(const RunConfig& config) {
    std::string s = "# cvox run configuration\n";
    for (const auto& def : key_table()) s += std::string(def.key) + " = " + def.get(config) + "\n";
    return s;
}

uint64_t config_hash(const RunConfig& config) { return fnv1a(config_echo(config)); }

training::StagePlan make_stage_plan(const RunConfig& config, training::StageKind kind) {
    training::StagePlan p;
    p.kind = kind;
    p.batches_per_epoch = config.batches_per_epoch;
    p.effective_batch_size = config.effective_batch_size;
    p.patch_shape = config.patch_shape;
    p.input_buffer_cells = config.input_buffer_cells;
    p.augment = config.augment;
    p.weights = config.weights;
    p.weights.adversarial_start_epoch = config.adversarial_start_epoch;
    p.optimizer = config.optimizer;
    switch (kind) {
        case training::StageKind::pretrain:
            p.epochs = config.pretrain_epochs;
            p.augment_enabled = false;
            break;
        case training::StageKind::native_patch:
            p.epochs = config.native_epochs;
            p.augment_enabled = config.native_augment;
            break;
        case training::StageKind::decoder_finetune:
            p.epochs = config.finetune_epochs;
            p.augment_enabled = config.native_augment;
            break;
        case training::StageKind::ddpm:
            p.epochs = config.ddpm_epochs;
            p.augment_enabled = false;
            break;
    }
    p.validate();
    return p;
}

diffusion::NoiseSchedule make_noise_schedule(const RunConfig& config) {
    return diffusion::make_schedule(config.timesteps, config.beta_start, config.beta_end,
                                    config.schedule_kind);
}

}  // namespace cvox::runcfg
