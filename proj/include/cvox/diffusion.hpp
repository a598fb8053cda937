#pragma once

// Latent-space denoising diffusion: beta/alpha-bar schedules, the closed-form
// forward marginal, the learned-variance reverse step, the hybrid
// simple+variational objective, and the ancestral sampler.

#include <functional>
#include <optional>

#include "cvox/autoencoder.hpp"
#include "cvox/ops3d.hpp"

namespace cvox::diffusion {

enum class ScheduleKind { linear, scaled_linear, cosine };

inline ScheduleKind schedule_from_name(const std::string& name) {
    if (name == "linear") return ScheduleKind::linear;
    if (name == "scaled_linear") return ScheduleKind::scaled_linear;
    if (name == "cosine") return ScheduleKind::cosine;
    throw Error::config("unknown schedule '" + name + "' (expected linear|scaled_linear|cosine)");
}

inline const char* schedule_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::linear: return "linear";
        case ScheduleKind::scaled_linear: return "scaled_linear";
        case ScheduleKind::cosine: return "cosine";
    }
    throw Error::contract("schedule_name: bad enum value");
}

// All sequences are stored for t = 1..T at index t-1; alpha_bar uses exact
// running products in double precision.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
    std::vector<double> posterior_var;          // beta_tilde, 0 at t=1
    std::vector<double> posterior_logvar_clip;  // log beta_tilde with t=1 -> t=2 value

    double beta_at(int t) const { return beta[check(t) - 1]; }
    double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar[check(t) - 1]; }

    int check(int t) const {
        if (t < 1 || t > T)
            throw Error::contract("schedule step t=" + std::to_string(t) + " outside [1, " +
                                  std::to_string(T) + "]");
        return t;
    }
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
    if (T < 1) throw Error::config("schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw Error::config("schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    if (kind == ScheduleKind::cosine) {
        // alpha_bar follows a squared cosine; betas are backed out of it
        const double off = 0.008;
        auto f = [&](double t) {
            double x = (t / T + off) / (1.0 + off) * (inr::kPi / 2.0);
            return std::cos(x) * std::cos(x);
        };
        double prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            double ab = f(static_cast<double>(t)) / f(0.0);
            double b = 1.0 - ab / prev;
            s.beta[t - 1] = std::clamp(b, 1e-8, 0.999);
            prev = ab;
        }
    } else {
        for (int t = 1; t <= T; ++t) {
            double u = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
            if (kind == ScheduleKind::linear) {
                s.beta[t - 1] = beta_start + (beta_end - beta_start) * u;
            } else {  // scaled_linear: linear in sqrt(beta)
                double r = std::sqrt(beta_start) + (std::sqrt(beta_end) - std::sqrt(beta_start)) * u;
                s.beta[t - 1] = r * r;
            }
        }
    }
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        if (!(s.beta[t - 1] > 0.0 && s.beta[t - 1] < 1.0))
            throw Error::numeric("schedule: beta outside (0,1)");
        prod *= 1.0 - s.beta[t - 1];
        s.alpha_bar[t - 1] = prod;
    }
    s.posterior_var.resize(T);
    s.posterior_logvar_clip.resize(T);
    for (int t = 1; t <= T; ++t) {
        double ab_prev = t == 1 ? 1.0 : s.alpha_bar[t - 2];
        s.posterior_var[t - 1] = (1.0 - ab_prev) / (1.0 - s.alpha_bar[t - 1]) * s.beta[t - 1];
    }
    for (int t = 1; t <= T; ++t) {
        double v = t == 1 && T > 1 ? s.posterior_var[1] : s.posterior_var[t - 1];
        if (v <= 0.0) v = s.beta[t - 1];  // T == 1 fallback
        s.posterior_logvar_clip[t - 1] = std::log(v);
    }
    return s;
}

// closed-form forward marginal sqrt(ab_t) x0 + sqrt(1-ab_t) eps; t=0 is x0
template <class T>
ad::Tensor<T> q_sample(const ad::Tensor<T>& x0, int t, const ad::Tensor<T>& eps,
                       const NoiseSchedule& s) {
    if (t == 0) return x0;
    if (eps.shape() != x0.shape()) throw Error::contract("q_sample: eps shape mismatch");
    const double ab = s.alpha_bar_at(t);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    ad::Tensor<T> out(x0.shape());
    for (int64_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

template <class T>
struct DenoiserOut {
    ad::Tensor<T> eps;                  // predicted noise
    std::optional<ad::Tensor<T>> v;    // variance interpolation in [0,1]
};

template <class T>
using DenoiserFn = std::function<DenoiserOut<T>(const ad::Tensor<T>& x_t, int t)>;

// One reverse step: posterior mean from the predicted noise, variance either
// fixed to beta_tilde or interpolated between beta and beta_tilde in log
// space by v. No noise is injected at t = 1.
template <class T>
ad::Tensor<T> p_step(const ad::Tensor<T>& x_t, int t, const DenoiserFn<T>& denoiser,
                     const NoiseSchedule& s, const ad::Tensor<T>& noise) {
    s.check(t);
    if (noise.shape() != x_t.shape()) throw Error::contract("p_step: noise shape mismatch");
    DenoiserOut<T> out = denoiser(x_t, t);
    if (out.eps.shape() != x_t.shape()) throw Error::contract("p_step: denoiser shape mismatch");
    const double beta = s.beta_at(t);
    const double ab = s.alpha_bar_at(t);
    const double inv_sqrt_a = 1.0 / std::sqrt(1.0 - beta);
    const double k = beta / std::sqrt(1.0 - ab);
    const double log_bt = s.posterior_logvar_clip[t - 1];
    const double log_b = std::log(beta);

    ad::Tensor<T> x(x_t.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        double mu = inv_sqrt_a * (static_cast<double>(x_t[i]) - k * static_cast<double>(out.eps[i]));
        double sigma = 0.0;
        if (t > 1) {
            double logvar = out.v ? static_cast<double>((*out.v)[i]) * log_b +
                                        (1.0 - static_cast<double>((*out.v)[i])) * log_bt
                                  : log_bt;
            sigma = std::exp(0.5 * logvar);
        }
        x[i] = static_cast<T>(mu + sigma * static_cast<double>(noise[i]));
    }
    if (!x.all_finite()) throw Error::numeric("p_step: non-finite reverse step");
    return x;
}

// Ancestral sampling from pure noise down to t=0 on the latent grid.
template <class T>
std::vector<ae::LatentVolume> sample_latents(const DenoiserFn<T>& denoiser,
                                             const NoiseSchedule& s, int n,
                                             const coords::CoordGrid& c_z, int64_t channels,
                                             uint64_t seed) {
    if (n < 1) throw Error::config("sample_latents: need n >= 1");
    std::vector<ae::LatentVolume> out;
    const ad::Shape shape{channels, c_z.shape[0], c_z.shape[1], c_z.shape[2]};
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, 0x6464706dULL, static_cast<uint64_t>(i)));  // "ddpm"
        ad::Tensor<T> x = ad::Tensor<T>::randn(shape, rng);
        for (int t = s.T; t >= 1; --t) {
            ad::Tensor<T> z = t > 1 ? ad::Tensor<T>::randn(shape, rng)
                                    : ad::Tensor<T>::zeros(shape);
            x = p_step(x, t, denoiser, s, z);
        }
        ae::LatentVolume lv;
        lv.grid = c_z;
        lv.data = x.template cast<float>();
        out.push_back(std::move(lv));
    }
    return out;
}

}  // namespace cvox::diffusion
