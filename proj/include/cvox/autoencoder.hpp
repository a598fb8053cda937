#pragma once

// The resolution-agnostic autoencoder: a convolutional backbone compresses
// the input by fixed integer factors, a learned continuous resampler maps
// features onto the fixed-spacing latent grid, and the decoder mirrors the
// path back out to an arbitrary output grid. A trilinear-resampler variant
// serves as the interpolation-only ablation.

#include "cvox/inr.hpp"
#include "cvox/ops3d.hpp"

namespace cvox::ae {

// Mean/log-variance latent field on the fixed-spacing grid C_Z.
struct LatentVolume {
    ad::Tensor<float> data;  // (C, shape[0], shape[1], shape[2])
    coords::CoordGrid grid;

    void validate() const {
        if (data.rank() != 4) throw Error::contract("latent data must be rank 4 (C,D,H,W)");
        for (int a = 0; a < 3; ++a)
            if (data.dim(a + 1) != grid.shape[a])
                throw Error::contract("latent spatial shape does not match grid");
        if (!data.all_finite()) throw Error::data("latent contains non-finite values");
    }
    int64_t channels() const { return data.dim(0); }
};

struct BackboneConfig {
    std::vector<int64_t> channels{8, 16, 24};  // per residual block
    std::vector<int64_t> downscale{2, 2};      // between consecutive blocks
    int64_t kernel = 3;
    int64_t subunits = 2;  // norm-act-conv pairs inside each residual block

    int64_t total_downscale() const {
        int64_t f = 1;
        for (int64_t d : downscale) f *= d;
        return f;
    }
    void validate() const {
        if (channels.empty()) throw Error::config("backbone: need at least one block");
        if (downscale.size() + 1 != channels.size())
            throw Error::config("backbone: downscale list must have one entry less than channels");
        for (int64_t c : channels)
            if (c < 1) throw Error::config("backbone: channels must be positive");
        for (int64_t d : downscale)
            if (d < 1) throw Error::config("backbone: downscale factors must be >= 1");
        if (kernel < 1 || kernel % 2 == 0)
            throw Error::config("backbone: kernel must be odd and positive");
        if (subunits < 1) throw Error::config("backbone: subunits must be >= 1");
    }
};

struct LteConfig {
    int64_t n_frequencies = 32;
    int64_t hidden = 64;
    int64_t depth = 3;
};

enum class ResamplerKind { lte, trilinear };

inline ResamplerKind resampler_from_name(const std::string& name) {
    if (name == "lte") return ResamplerKind::lte;
    if (name == "trilinear") return ResamplerKind::trilinear;
    throw Error::config("unknown resampler '" + name + "' (expected lte|trilinear)");
}

inline const char* resampler_name(ResamplerKind k) {
    return k == ResamplerKind::lte ? "lte" : "trilinear";
}

struct AutoencoderConfig {
    BackboneConfig backbone;  // encoder; the decoder mirrors it
    LteConfig lte;
    int64_t latent_channels = 3;
    coords::Vec3 latent_spacing{8.0, 8.0, 8.0};
    double buffer_cells = 1.0;  // exscribe buffer, in latent-cell units
    ResamplerKind resampler = ResamplerKind::lte;
    uint64_t init_seed = 1;

    void validate() const {
        backbone.validate();
        if (latent_channels < 1) throw Error::config("autoencoder: latent channels must be >= 1");
        for (int a = 0; a < 3; ++a)
            if (!(latent_spacing[a] > 0.0))
                throw Error::config("autoencoder: latent spacing must be positive");
        if (buffer_cells < 0.0) throw Error::config("autoencoder: buffer must be >= 0");
    }

    uint64_t hash() const {
        std::string s = "bb:";
        for (auto c : backbone.channels) s += std::to_string(c) + ",";
        s += "|ds:";
        for (auto d : backbone.downscale) s += std::to_string(d) + ",";
        s += "|k" + std::to_string(backbone.kernel) + "|su" + std::to_string(backbone.subunits);
        s += "|lte" + std::to_string(lte.n_frequencies) + "," + std::to_string(lte.hidden) + "," +
             std::to_string(lte.depth);
        s += "|lc" + std::to_string(latent_channels);
        for (int a = 0; a < 3; ++a) s += "|sp" + std::to_string(latent_spacing[a]);
        s += "|buf" + std::to_string(buffer_cells);
        s += "|rs" + std::string(resampler_name(resampler));
        return fnv1a(s);
    }

    // default latent grid for a given input grid: exscribed with the
    // configured buffer (in latent cells)
    coords::CoordGrid default_latent_grid(const coords::CoordGrid& gx) const {
        return coords::exscribe(gx, latent_spacing, latent_spacing * buffer_cells);
    }
};

// Feature map tracked together with the physical grid its nodes sit on.
template <class T>
struct GriddedFeatures {
    ad::Var<T> feat;  // (C, D, H, W)
    coords::Affine affine;
    std::array<int64_t, 3> shape;
};

template <class T>
struct EncodeDist {
    ad::Var<T> mu, logvar;  // each (C, zD, zH, zW)
    coords::CoordGrid grid;
};

template <class T>
class Autoencoder {
  public:
    AutoencoderConfig cfg;
    nn::ParamRegistry<T> params;

    explicit Autoencoder(const AutoencoderConfig& config) : cfg(config) {
        cfg.validate();
        Rng rng(mix_seed(cfg.init_seed, 0x6165696e6974ULL));  // "aeinit"
        const auto& bb = cfg.backbone;
        const int64_t n = static_cast<int64_t>(bb.channels.size());
        const int64_t cf = bb.channels.back();

        enc_stem_ = nn::Conv3dLayer<T>(params, "enc.stem", 1, bb.channels[0], bb.kernel, 1, rng);
        for (int64_t b = 0; b < n; ++b) {
            enc_blocks_.emplace_back(params, "enc.block" + std::to_string(b), bb.channels[b],
                                     bb.kernel, bb.subunits, rng);
            if (b + 1 < n)
                enc_down_.emplace_back(params, "enc.down" + std::to_string(b), bb.channels[b],
                                       bb.channels[b + 1], bb.kernel, bb.downscale[b], rng);
        }
        enc_norm_ = nn::InstanceNormLayer<T>(params, "enc.norm", cf);
        if (cfg.resampler == ResamplerKind::lte) {
            enc_lte_ = inr::LteResampler<T>(params, "enc.lte", cf, 2 * cfg.latent_channels,
                                            cfg.lte.n_frequencies, cfg.lte.hidden, cfg.lte.depth,
                                            rng);
            dec_lte_ = inr::LteResampler<T>(params, "dec.lte", cfg.latent_channels, cf,
                                            cfg.lte.n_frequencies, cfg.lte.hidden, cfg.lte.depth,
                                            rng);
        } else {
            enc_proj_ = nn::Conv3dLayer<T>(params, "enc.proj", cf, 2 * cfg.latent_channels, 1, 1,
                                           rng);
            dec_proj_ = nn::Conv3dLayer<T>(params, "dec.proj", cfg.latent_channels, cf, 1, 1, rng);
        }
        for (int64_t b = n - 1; b >= 0; --b) {
            dec_blocks_.emplace_back(params, "dec.block" + std::to_string(b), bb.channels[b],
                                     bb.kernel, bb.subunits, rng);
            if (b > 0)
                dec_up_.emplace_back(params, "dec.up" + std::to_string(b), bb.channels[b],
                                     bb.channels[b - 1], bb.kernel, 1, rng);
        }
        dec_norm_ = nn::InstanceNormLayer<T>(params, "dec.norm", bb.channels[0]);
        dec_head_ = nn::Conv3dLayer<T>(params, "dec.head", bb.channels[0], 1, bb.kernel, 1, rng);
    }

    // Backbone features for an input field (1, D, H, W) living on `gx`.
    // Reflect-pads (high side, so the origin is untouched) to a multiple of
    // the total downscale factor; the returned affine tracks the striding.
    GriddedFeatures<T> encoder_features(const ad::Var<T>& x, const coords::CoordGrid& gx) const {
        if (x.shape().size() != 4 || x.shape()[0] != 1)
            throw Error::contract("encoder expects (1, D, H, W) input");
        for (int a = 0; a < 3; ++a)
            if (x.shape()[a + 1] != gx.shape[a])
                throw Error::contract("encoder input shape does not match its grid");
        const int64_t f_total = cfg.backbone.total_downscale();
        auto pad_to = [&](int64_t d) { return (f_total - d % f_total) % f_total; };
        const int64_t pd = pad_to(gx.shape[0]), ph = pad_to(gx.shape[1]), pw = pad_to(gx.shape[2]);
        ad::Var<T> h = (pd || ph || pw) ? ad::pad_reflect_hi(x, pd, ph, pw) : x;

        coords::Affine aff = gx.affine;
        h = enc_stem_(h);
        const int64_t n = static_cast<int64_t>(enc_blocks_.size());
        for (int64_t b = 0; b < n; ++b) {
            h = enc_blocks_[b](h);
            if (b + 1 < n) {
                h = enc_down_[b](h);
                aff.matrix *= static_cast<double>(cfg.backbone.downscale[b]);
            }
        }
        h = ad::silu(enc_norm_(h));
        return {h, aff, {h.shape()[1], h.shape()[2], h.shape()[3]}};
    }

    // Full differentiable encode: input field -> latent mean/logvar on cz.
    EncodeDist<T> encode_var(const ad::Var<T>& x, const coords::CoordGrid& gx,
                             const coords::CoordGrid& cz) const {
        check_latent_grid(cz);
        GriddedFeatures<T> gf = encoder_features(x, gx);
        coords::CoordGrid fg;  // feature grid (bypasses space containment: internal)
        fg.affine = gf.affine;
        fg.shape = gf.shape;
        fg.space = coords::CoordSpace(coords::Vec3(-1e9, -1e9, -1e9), coords::Vec3(1e9, 1e9, 1e9));

        ad::Var<T> rows;  // (Q, 2*latent_channels)
        if (cfg.resampler == ResamplerKind::lte) {
            auto table = inr::build_resample_table<T>(fg, cz);
            rows = inr::ensemble_resample(gf.feat, table, enc_lte_);
        } else {
            ad::Var<T> proj = enc_proj_(gf.feat);
            auto table = inr::build_resample_table<T>(fg, cz);
            rows = inr::ensemble_resample(proj, table, inr::PassthroughInr<T>{});
        }
        const int64_t C = cfg.latent_channels;
        ad::Var<T> mu = ad::rows_to_channels(ad::slice_cols(rows, 0, C),
                                             ad::Shape{cz.shape[0], cz.shape[1], cz.shape[2]});
        ad::Var<T> logvar = ad::rows_to_channels(
            ad::slice_cols(rows, C, C), ad::Shape{cz.shape[0], cz.shape[1], cz.shape[2]});
        return {mu, logvar, cz};
    }

    // Differentiable decode: latent (C, zshape) on cz -> field (1, cout.shape).
    ad::Var<T> decode_var(const ad::Var<T>& z, const coords::CoordGrid& cz,
                          const coords::CoordGrid& cout) const {
        if (z.shape().size() != 4 || z.shape()[0] != cfg.latent_channels)
            throw Error::contract("decoder expects (latent_channels, D, H, W) input");
        const auto& bb = cfg.backbone;
        const int64_t F = bb.total_downscale();

        // intermediate grid: the decoder's nearest-neighbor x F upsampling
        // must land exactly on cout, so mid nodes sit at the centroids of
        // F-blocks of output nodes
        coords::CoordGrid mid;
        mid.affine.matrix = cout.affine.matrix * static_cast<double>(F);
        mid.affine.origin =
            cout.affine.origin +
            cout.affine.matrix * coords::Vec3::Constant((static_cast<double>(F) - 1.0) / 2.0);
        for (int a = 0; a < 3; ++a) mid.shape[a] = (cout.shape[a] + F - 1) / F;
        mid.space = coords::CoordSpace(coords::Vec3(-1e9, -1e9, -1e9), coords::Vec3(1e9, 1e9, 1e9));

        ad::Var<T> h;
        if (cfg.resampler == ResamplerKind::lte) {
            auto table = inr::build_resample_table<T>(cz, mid);
            ad::Var<T> rows = inr::ensemble_resample(z, table, dec_lte_);
            h = ad::rows_to_channels(rows, ad::Shape{mid.shape[0], mid.shape[1], mid.shape[2]});
        } else {
            auto table = inr::build_resample_table<T>(cz, mid);
            ad::Var<T> rows = inr::ensemble_resample(z, table, inr::PassthroughInr<T>{});
            h = ad::rows_to_channels(rows, ad::Shape{mid.shape[0], mid.shape[1], mid.shape[2]});
            h = dec_proj_(h);
        }

        const int64_t n = static_cast<int64_t>(dec_blocks_.size());
        for (int64_t b = 0; b < n; ++b) {
            h = dec_blocks_[b](h);
            if (b + 1 < n) {
                // mirror of encoder block n-1-b's downscale
                const int64_t f = bb.downscale[bb.downscale.size() - 1 - b];
                if (f > 1) h = ad::upsample_nearest(h, f);
                h = dec_up_[b](h);
            }
        }
        h = dec_head_(ad::silu(dec_norm_(h)));
        if (h.shape()[1] != cout.shape[0] || h.shape()[2] != cout.shape[1] ||
            h.shape()[3] != cout.shape[2])
            h = ad::crop_spatial(h, cout.shape[0], cout.shape[1], cout.shape[2]);
        return h;
    }

    // inference wrappers ---------------------------------------------------

    LatentVolume encode(const Volume& x, const coords::CoordGrid& cz) const {
        x.validate();
        ad::NoGrad ng;
        ad::Var<T> xv(field_of(x));
        EncodeDist<T> d = encode_var(xv, x.grid, cz);
        LatentVolume out;
        out.grid = cz;
        out.data = d.mu.value().template cast<float>();
        out.validate();
        return out;
    }

    LatentVolume encode(const Volume& x) const {
        return encode(x, cfg.default_latent_grid(x.grid));
    }

    Volume decode(const LatentVolume& z, const coords::CoordGrid& cout) const {
        z.validate();
        if (z.channels() != cfg.latent_channels)
            throw Error::config("latent has " + std::to_string(z.channels()) +
                                " channels but model expects " +
                                std::to_string(cfg.latent_channels));
        ad::NoGrad ng;
        ad::Var<T> zv(z.data.template cast<T>());
        ad::Var<T> y = decode_var(zv, z.grid, cout);
        Volume out;
        out.modality = Modality::phantom;
        out.grid = cout;
        out.data = y.value().template cast<float>().reshaped(
            {cout.shape[0], cout.shape[1], cout.shape[2]});
        return out;
    }

    Volume reconstruct(const Volume& x) const {
        LatentVolume z = encode(x);
        Volume out = decode(z, x.grid);
        out.modality = x.modality;
        return out;
    }

    // KL reparameterization draw, z = mu + exp(logvar/2) * eps
    static ad::Var<T> sample_latent(const EncodeDist<T>& d, uint64_t seed) {
        Rng rng(mix_seed(seed, 0x6b6c7aULL));  // "klz"
        ad::Tensor<T> eps = ad::Tensor<T>::randn(d.mu.shape(), rng);
        return ad::add(d.mu, ad::mul(ad::exp_op(ad::scale(d.logvar, T(0.5))), ad::Var<T>(eps)));
    }

    static ad::Tensor<T> field_of(const Volume& x) {
        ad::Tensor<T> t = x.data.template cast<T>();
        return t.reshaped({1, x.grid.shape[0], x.grid.shape[1], x.grid.shape[2]});
    }

  private:
    void check_latent_grid(const coords::CoordGrid& cz) const {
        const coords::Vec3 sp = cz.spacing();
        for (int a = 0; a < 3; ++a)
            if (std::abs(sp[a] - cfg.latent_spacing[a]) > 1e-6)
                throw Error::config("latent grid spacing does not match model latent spacing");
    }

    nn::Conv3dLayer<T> enc_stem_;
    std::vector<nn::ResUnit<T>> enc_blocks_;
    std::vector<nn::Conv3dLayer<T>> enc_down_;
    nn::InstanceNormLayer<T> enc_norm_;
    inr::LteResampler<T> enc_lte_, dec_lte_;
    nn::Conv3dLayer<T> enc_proj_, dec_proj_;  // trilinear-ablation projections
    std::vector<nn::ResUnit<T>> dec_blocks_;
    std::vector<nn::Conv3dLayer<T>> dec_up_;
    nn::InstanceNormLayer<T> dec_norm_;
    nn::Conv3dLayer<T> dec_head_;
};

}  // namespace cvox::ae
