#pragma once

// Layer zoo used by the autoencoder, discriminator, feature extractor, and
// the denoiser: conv / norm / linear layers with parameter registration, plus
// AdamW.

#include <map>

#include "cvox/ops3d.hpp"

namespace cvox::nn {

using ad::Shape;
using ad::Tensor;
using ad::Var;

template <class T>
struct Param {
    std::string name;
    Var<T> v;
};

template <class T>
class ParamRegistry {
  public:
    Var<T> add(const std::string& name, Tensor<T> init) {
        params_.push_back({name, Var<T>(std::move(init), /*requires_grad=*/true)});
        // parameters must stay leaves even when created under NoGrad
        params_.back().v.node().requires_grad = true;
        return params_.back().v;
    }

    std::vector<Param<T>>& all() { return params_; }
    const std::vector<Param<T>>& all() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.v.zero_grad();
    }

    uint64_t value_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : params_) {
            h = fnv1a(p.name, h);
            h = fnv1a(p.v.value().data(), p.v.value().size() * sizeof(T), h);
        }
        return h;
    }

    int64_t count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.v.value().size();
        return n;
    }

    std::map<std::string, Tensor<double>> state() const {
        std::map<std::string, Tensor<double>> s;
        for (const auto& p : params_) s[p.name] = p.v.value().template cast<double>();
        return s;
    }

    void load_state(const std::map<std::string, Tensor<double>>& s) {
        for (auto& p : params_) {
            auto it = s.find(p.name);
            if (it == s.end()) throw Error::data("checkpoint missing parameter " + p.name);
            if (!ad::same_shape(it->second.shape(), p.v.shape()))
                throw Error::data("checkpoint shape mismatch for " + p.name);
            p.v.value_mut() = it->second.template cast<T>();
        }
    }

  private:
    std::vector<Param<T>> params_;
};

template <class T>
Tensor<T> kaiming_init(Shape shape, int64_t fan_in, Rng& rng) {
    const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    return Tensor<T>::randn(std::move(shape), rng, stddev);
}

template <class T>
struct Conv3dLayer {
    Var<T> w, b;
    int64_t stride = 1, pad = 1;

    Conv3dLayer() = default;
    Conv3dLayer(ParamRegistry<T>& reg, const std::string& name, int64_t cin, int64_t cout,
                int64_t k, int64_t stride_, Rng& rng)
        : stride(stride_), pad(k / 2) {
        w = reg.add(name + ".w", kaiming_init<T>({cout, cin, k, k, k}, cin * k * k * k, rng));
        b = reg.add(name + ".b", Tensor<T>::zeros({cout}));
    }

    Var<T> operator()(const Var<T>& x) const { return ad::conv3d(x, w, b, stride, pad); }
};

template <class T>
struct InstanceNormLayer {
    Var<T> gamma, beta;

    InstanceNormLayer() = default;
    InstanceNormLayer(ParamRegistry<T>& reg, const std::string& name, int64_t c) {
        gamma = reg.add(name + ".g", Tensor<T>::full({c}, T(1)));
        beta = reg.add(name + ".b", Tensor<T>::zeros({c}));
    }

    Var<T> operator()(const Var<T>& x) const { return ad::instance_norm(x, gamma, beta); }
};

template <class T>
struct LinearLayer {
    Var<T> w, b;  // w is (in x out) so rows of x multiply directly

    LinearLayer() = default;
    LinearLayer(ParamRegistry<T>& reg, const std::string& name, int64_t in, int64_t out, Rng& rng) {
        w = reg.add(name + ".w", kaiming_init<T>({in, out}, in, rng));
        b = reg.add(name + ".b", Tensor<T>::zeros({out}));
    }

    Var<T> operator()(const Var<T>& x) const { return ad::add_rowvec(ad::matmul(x, w), b); }
};

// norm -> silu -> conv, the subunit of every residual block
template <class T>
struct NormActConv {
    InstanceNormLayer<T> norm;
    Conv3dLayer<T> conv;

    NormActConv() = default;
    NormActConv(ParamRegistry<T>& reg, const std::string& name, int64_t cin, int64_t cout,
                int64_t k, Rng& rng)
        : norm(reg, name + ".norm", cin), conv(reg, name + ".conv", cin, cout, k, 1, rng) {}

    Var<T> operator()(const Var<T>& x) const { return conv(ad::silu(norm(x))); }
};

// x + f(x) with `subunits` chained norm-act-conv stages
template <class T>
struct ResUnit {
    std::vector<NormActConv<T>> subs;

    ResUnit() = default;
    ResUnit(ParamRegistry<T>& reg, const std::string& name, int64_t c, int64_t k, int64_t subunits,
            Rng& rng) {
        for (int64_t i = 0; i < subunits; ++i)
            subs.emplace_back(reg, name + ".sub" + std::to_string(i), c, c, k, rng);
    }

    Var<T> operator()(const Var<T>& x) const {
        Var<T> h = x;
        for (const auto& s : subs) h = s(h);
        return ad::add(x, h);
    }
};

// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
// order, so construct it once per stage over a stable parameter list.
template <class T>
class AdamW {
  public:
    struct Config {
        double lr = 0.005;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };

    explicit AdamW(std::vector<Param<T>*> params, Config cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.push_back(Tensor<T>::zeros(p->v.shape()));
            v_.push_back(Tensor<T>::zeros(p->v.shape()));
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i]->v;
            if (p.grad().empty()) continue;
            Tensor<T>& val = p.value_mut();
            const Tensor<T>& g = p.grad();
            Tensor<T>& m = m_[i];
            Tensor<T>& v = v_[i];
            for (int64_t j = 0; j < val.size(); ++j) {
                const double gj = g[j];
                m[j] = static_cast<T>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj);
                v[j] = static_cast<T>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj);
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                val[j] = static_cast<T>(val[j] - cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                                            cfg_.weight_decay * val[j]));
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->v.zero_grad();
    }

    int64_t steps_taken() const { return t_; }

  private:
    std::vector<Param<T>*> params_;
    Config cfg_;
    std::vector<Tensor<T>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace cvox::nn
