#pragma once

// The latent-space UNet denoiser (two levels, time conditioning, attention at
// the coarse level, learned per-element variance interpolation) and the
// hybrid simple+variational training objective.

#include "cvox/diffusion.hpp"

namespace cvox::diffusion {

// sinusoidal embedding of the integer step, laid out [sin... | cos...]
template <class T>
ad::Tensor<T> time_embedding(int t, int64_t dim) {
    if (dim < 2 || dim % 2 != 0) throw Error::config("time embedding dim must be even and >= 2");
    ad::Tensor<T> e({1, dim});
    const int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                               static_cast<double>(half));
        e[i] = static_cast<T>(std::sin(t * freq));
        e[half + i] = static_cast<T>(std::cos(t * freq));
    }
    return e;
}

// adds a (1,C) bias to every spatial site of a (C,D,H,W) map
template <class T>
ad::Var<T> add_channel_bias(const ad::Var<T>& x, const ad::Var<T>& bias) {
    ad::Shape spatial(x.shape().begin() + 1, x.shape().end());
    ad::Var<T> rows = ad::channels_to_rows(x);
    rows = ad::add_rowvec(rows, bias);
    return ad::rows_to_channels(rows, spatial);
}

// residual block with the time embedding injected between the two convs
template <class T>
struct TimeResBlock {
    nn::InstanceNormLayer<T> n1, n2;
    nn::Conv3dLayer<T> c1, c2;
    nn::LinearLayer<T> temb;

    TimeResBlock() = default;
    TimeResBlock(nn::ParamRegistry<T>& reg, const std::string& name, int64_t c, int64_t time_dim,
                 Rng& rng)
        : n1(reg, name + ".n1", c),
          n2(reg, name + ".n2", c),
          c1(reg, name + ".c1", c, c, 3, 1, rng),
          c2(reg, name + ".c2", c, c, 3, 1, rng),
          temb(reg, name + ".temb", time_dim, c, rng) {}

    ad::Var<T> operator()(const ad::Var<T>& x, const ad::Var<T>& t) const {
        ad::Var<T> h = c1(ad::silu(n1(x)));
        h = add_channel_bias(h, temb(t));
        h = c2(ad::silu(n2(h)));
        return ad::add(x, h);
    }
};

// single-head self-attention over all spatial sites of a (C,D,H,W) map
template <class T>
struct SelfAttention {
    nn::LinearLayer<T> q, k, v, proj;
    int64_t c = 0;

    SelfAttention() = default;
    SelfAttention(nn::ParamRegistry<T>& reg, const std::string& name, int64_t c_, Rng& rng)
        : q(reg, name + ".q", c_, c_, rng),
          k(reg, name + ".k", c_, c_, rng),
          v(reg, name + ".v", c_, c_, rng),
          proj(reg, name + ".proj", c_, c_, rng),
          c(c_) {}

    ad::Var<T> operator()(const ad::Var<T>& x) const {
        ad::Shape spatial(x.shape().begin() + 1, x.shape().end());
        ad::Var<T> rows = ad::channels_to_rows(x);  // (S, C)
        ad::Var<T> qs = q(rows), ks = k(rows), vs = v(rows);
        // scores (S, S) — only used at the coarse level where S is small
        ad::Var<T> att = ad::matmul(qs, ad::transpose(ks));
        att = ad::softmax_rows(ad::scale(att, static_cast<T>(1.0 / std::sqrt(double(c)))));
        ad::Var<T> out = proj(ad::matmul(att, vs));
        return ad::add(x, ad::rows_to_channels(out, spatial));
    }
};

struct UNetConfig {
    int64_t latent_channels = 3;
    int64_t ch0 = 16, ch1 = 32;
    int64_t time_dim = 32;
    bool learned_variance = true;
    uint64_t init_seed = 2;
};

template <class T>
class UNet {
  public:
    UNetConfig cfg;
    nn::ParamRegistry<T> params;

    explicit UNet(const UNetConfig& config) : cfg(config) {
        if (cfg.latent_channels < 1) throw Error::config("unet: latent channels must be >= 1");
        Rng rng(mix_seed(cfg.init_seed, 0x756e6574ULL));  // "unet"
        t1_ = nn::LinearLayer<T>(params, "u.t1", cfg.time_dim, cfg.time_dim, rng);
        t2_ = nn::LinearLayer<T>(params, "u.t2", cfg.time_dim, cfg.time_dim, rng);
        stem_ = nn::Conv3dLayer<T>(params, "u.stem", cfg.latent_channels, cfg.ch0, 3, 1, rng);
        enc0_ = TimeResBlock<T>(params, "u.enc0", cfg.ch0, cfg.time_dim, rng);
        down_ = nn::Conv3dLayer<T>(params, "u.down", cfg.ch0, cfg.ch1, 3, 2, rng);
        mid0_ = TimeResBlock<T>(params, "u.mid0", cfg.ch1, cfg.time_dim, rng);
        attn_ = SelfAttention<T>(params, "u.attn", cfg.ch1, rng);
        mid1_ = TimeResBlock<T>(params, "u.mid1", cfg.ch1, cfg.time_dim, rng);
        up_ = nn::Conv3dLayer<T>(params, "u.up", cfg.ch1, cfg.ch0, 3, 1, rng);
        fuse_ = nn::Conv3dLayer<T>(params, "u.fuse", 2 * cfg.ch0, cfg.ch0, 3, 1, rng);
        dec0_ = TimeResBlock<T>(params, "u.dec0", cfg.ch0, cfg.time_dim, rng);
        out_norm_ = nn::InstanceNormLayer<T>(params, "u.on", cfg.ch0);
        const int64_t out_ch = cfg.learned_variance ? 2 * cfg.latent_channels
                                                    : cfg.latent_channels;
        head_ = nn::Conv3dLayer<T>(params, "u.head", cfg.ch0, out_ch, 3, 1, rng);
    }

    // x is (C, D, H, W); returns (C or 2C, D, H, W): eps then raw v logits
    ad::Var<T> forward(const ad::Var<T>& x, int t) const {
        if (x.shape().size() != 4 || x.shape()[0] != cfg.latent_channels)
            throw Error::contract("unet: input channels do not match latent channels");
        ad::Var<T> temb(time_embedding<T>(t, cfg.time_dim));
        temb = t2_(ad::silu(t1_(temb)));

        ad::Var<T> h0 = enc0_(stem_(x), temb);
        ad::Var<T> h1 = down_(h0);
        h1 = mid1_(attn_(mid0_(h1, temb)), temb);
        ad::Var<T> u = ad::upsample_nearest(h1, 2);
        if (u.shape()[1] != h0.shape()[1] || u.shape()[2] != h0.shape()[2] ||
            u.shape()[3] != h0.shape()[3])
            u = ad::crop_spatial(u, h0.shape()[1], h0.shape()[2], h0.shape()[3]);
        u = up_(u);
        ad::Var<T> h = fuse_(ad::concat_channels(u, h0));
        h = dec0_(h, temb);
        return head_(ad::silu(out_norm_(h)));
    }

    // plain-tensor denoiser for the samplers; v is squashed to [0,1]
    DenoiserOut<T> infer(const ad::Tensor<T>& x_t, int t) const {
        ad::NoGrad ng;
        ad::Var<T> y = forward(ad::Var<T>(x_t), t);
        const int64_t C = cfg.latent_channels;
        DenoiserOut<T> out;
        if (cfg.learned_variance) {
            ad::Var<T> eps = ad::slice_channels(y, 0, C);
            ad::Var<T> v = ad::sigmoid(ad::slice_channels(y, C, C));
            out.eps = eps.value();
            out.v = v.value();
        } else {
            out.eps = y.value();
        }
        return out;
    }

    DenoiserFn<T> as_fn() const {
        return [this](const ad::Tensor<T>& x, int t) { return infer(x, t); };
    }

  private:
    nn::LinearLayer<T> t1_, t2_;
    nn::Conv3dLayer<T> stem_, down_, up_, fuse_, head_;
    TimeResBlock<T> enc0_, mid0_, mid1_, dec0_;
    SelfAttention<T> attn_;
    nn::InstanceNormLayer<T> out_norm_;
};

struct HybridLossConfig {
    double lambda_vlb = 0.001;

    void validate() const {
        if (lambda_vlb < 0.0) throw Error::config("hybrid loss: lambda must be >= 0");
    }
};

template <class T>
ad::Var<T> vlb_term(const UNet<T>& net, const ad::Var<T>& y, const ad::Tensor<T>& x0,
                    const ad::Tensor<T>& x_t, int t, const NoiseSchedule& s);

// L_simple (squared noise-prediction error summed over elements, averaged
// over the batch) plus lambda times the variational term. The variational
// term sees the posterior mean through a stop-gradient so only the variance
// head trains on it; at t=1 it is the Gaussian NLL of x0.
template <class T>
ad::Var<T> hybrid_loss(const UNet<T>& net, const std::vector<ad::Tensor<T>>& x0_batch,
                       const NoiseSchedule& s, const HybridLossConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (x0_batch.empty()) throw Error::contract("hybrid_loss: empty batch");
    const int64_t C = net.cfg.latent_channels;
    ad::Var<T> total;
    for (size_t b = 0; b < x0_batch.size(); ++b) {
        const ad::Tensor<T>& x0 = x0_batch[b];
        if (x0.rank() != 4 || x0.dim(0) != C)
            throw Error::contract("hybrid_loss: batch items must be (C, D, H, W) latents");
        Rng rng(mix_seed(seed, 0x686c6f7373ULL, static_cast<uint64_t>(b)));  // "hloss"
        const int t = static_cast<int>(rng.index(static_cast<uint64_t>(s.T))) + 1;
        ad::Tensor<T> eps = ad::Tensor<T>::randn(x0.shape(), rng);
        ad::Tensor<T> x_t = q_sample(x0, t, eps, s);

        ad::Var<T> y = net.forward(ad::Var<T>(x_t), t);
        ad::Var<T> eps_pred =
            net.cfg.learned_variance ? ad::slice_channels(y, 0, C) : y;
        ad::Var<T> simple = ad::sum(ad::square(ad::sub(eps_pred, ad::Var<T>(eps))));

        ad::Var<T> item = simple;
        if (cfg.lambda_vlb > 0.0) {
            ad::Var<T> vlb = vlb_term(net, y, x0, x_t, t, s);
            item = ad::add(item, ad::scale(vlb, static_cast<T>(cfg.lambda_vlb)));
        }
        total = total.defined() ? ad::add(total, item) : item;
    }
    return ad::scale(total, static_cast<T>(1.0 / static_cast<double>(x0_batch.size())));
}

// per-element KL(q(x_{t-1}|x_t,x0) || p_theta) for t >= 2, Gaussian NLL of x0
// at t = 1; mean over elements
template <class T>
ad::Var<T> vlb_term(const UNet<T>& net, const ad::Var<T>& y, const ad::Tensor<T>& x0,
                    const ad::Tensor<T>& x_t, int t, const NoiseSchedule& s) {
    const int64_t C = net.cfg.latent_channels;
    const double beta = s.beta_at(t);
    const double ab = s.alpha_bar_at(t);
    const double ab_prev = s.alpha_bar_at(t - 1);
    const double log_b = std::log(beta);
    const double log_bt = s.posterior_logvar_clip[t - 1];

    // model mean from the (detached) noise prediction
    ad::Var<T> eps_pred = net.cfg.learned_variance ? ad::slice_channels(y, 0, C) : y;
    eps_pred = eps_pred.detach();
    const T inv_sqrt_a = static_cast<T>(1.0 / std::sqrt(1.0 - beta));
    const T k = static_cast<T>(beta / std::sqrt(1.0 - ab));
    ad::Var<T> mu_p = ad::scale(ad::sub(ad::Var<T>(x_t), ad::scale(eps_pred, k)), inv_sqrt_a);

    // model log-variance: interpolated if learned, else the clipped posterior
    ad::Var<T> logvar_p;
    if (net.cfg.learned_variance) {
        ad::Var<T> v = ad::sigmoid(ad::slice_channels(y, C, C));
        logvar_p = ad::shift(ad::scale(v, static_cast<T>(log_b - log_bt)), static_cast<T>(log_bt));
    } else {
        logvar_p = ad::Var<T>(ad::Tensor<T>::full(x0.shape(), static_cast<T>(log_bt)));
    }

    if (t == 1) {
        // -log N(x0; mu_p, sigma_p^2), mean over elements
        ad::Var<T> diff2 = ad::square(ad::sub(ad::Var<T>(x0), mu_p));
        ad::Var<T> nll = ad::mul(diff2, ad::exp_op(ad::scale(logvar_p, T(-1))));
        nll = ad::add(nll, ad::shift(logvar_p, static_cast<T>(std::log(2.0 * inr::kPi))));
        return ad::scale(ad::mean(nll), T(0.5));
    }

    // true posterior q(x_{t-1} | x_t, x0)
    const double denom = 1.0 - ab;
    const double c0 = std::sqrt(ab_prev) * beta / denom;
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / denom;
    const double var_q = s.posterior_var[t - 1];
    ad::Tensor<T> mu_q(x0.shape());
    for (int64_t i = 0; i < mu_q.size(); ++i)
        mu_q[i] = static_cast<T>(c0 * static_cast<double>(x0[i]) +
                                 ct * static_cast<double>(x_t[i]));

    // KL(N(mu_q, var_q) || N(mu_p, var_p)) per element
    ad::Var<T> diff2 = ad::square(ad::sub(ad::Var<T>(mu_q), mu_p));
    ad::Var<T> inv_var_p = ad::exp_op(ad::scale(logvar_p, T(-1)));
    ad::Var<T> kl = ad::mul(ad::shift(diff2, static_cast<T>(var_q)), inv_var_p);
    kl = ad::add(kl, ad::shift(logvar_p, static_cast<T>(-std::log(var_q) - 1.0)));
    return ad::scale(ad::mean(kl), T(0.5));
}

}  // namespace cvox::diffusion
