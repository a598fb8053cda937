#pragma once

// Autoencoder training objectives: l1 reconstruction, KL-to-standard-normal
// regularization, perceptual distance through a pluggable feature extractor,
// and least-squares adversarial terms with a small 3D conv discriminator.

#include "cvox/nn.hpp"
#include "cvox/ops3d.hpp"
#include "cvox/volume.hpp"

namespace cvox::losses {

struct LossWeights {
    double w_l1 = 1.0;
    double w_perceptual = 0.5;
    double w_adversarial = 0.05;
    double w_kl = 1e-6;
    int adversarial_start_epoch = 0;

    void validate() const {
        if (w_l1 < 0 || w_perceptual < 0 || w_adversarial < 0 || w_kl < 0)
            throw Error::config("loss weights must be non-negative");
    }
};

template <class T>
ad::Var<T> l1_loss(const ad::Var<T>& a, const ad::Var<T>& b) {
    if (a.shape() != b.shape()) throw Error::contract("l1_loss: shape mismatch");
    return ad::mean(ad::abs_op(ad::sub(a, b)));
}

// mean over elements of 0.5 * (mu^2 + e^logvar - 1 - logvar)
template <class T>
ad::Var<T> kl_regularization(const ad::Var<T>& mu, const ad::Var<T>& logvar) {
    if (mu.shape() != logvar.shape()) throw Error::contract("kl_regularization: shape mismatch");
    if (!logvar.value().all_finite()) throw Error::numeric("kl_regularization: non-finite logvar");
    ad::Var<T> term = ad::add(ad::square(mu), ad::exp_op(logvar));
    term = ad::sub(term, ad::shift(logvar, T(1)));
    return ad::scale(ad::mean(term), T(0.5));
}

// Frozen random 3-layer 3D conv net standing in for an external pretrained
// perceptual backbone at desk scale; also provides the pooled descriptor
// used by distribution metrics.
template <class T>
class FeatureExtractor {
  public:
    static constexpr int64_t kDescriptorDim = 64;

    explicit FeatureExtractor(uint64_t seed = 7) {
        Rng rng(mix_seed(seed, 0x70657263ULL));  // "perc"
        conv1_ = nn::Conv3dLayer<T>(params_, "fx.c1", 1, 16, 3, 2, rng);
        conv2_ = nn::Conv3dLayer<T>(params_, "fx.c2", 16, 32, 3, 2, rng);
        conv3_ = nn::Conv3dLayer<T>(params_, "fx.c3", 32, kDescriptorDim, 3, 2, rng);
        params_.zero_grad();
    }

    // three feature maps, coarse to fine frozen responses
    std::array<ad::Var<T>, 3> features(const ad::Var<T>& x) const {
        if (x.shape().size() != 4 || x.shape()[0] != 1)
            throw Error::contract("feature extractor expects (1, D, H, W) input");
        for (size_t a = 1; a < 4; ++a)
            if (x.shape()[a] < 3)
                throw Error::data("feature extractor: input smaller than receptive field");
        ad::Var<T> h1 = ad::silu(conv1_(x));
        ad::Var<T> h2 = ad::silu(conv2_(h1));
        ad::Var<T> h3 = ad::silu(conv3_(h2));
        return {h1, h2, h3};
    }

    // channelwise global-average pooled deepest features: a fixed-length
    // descriptor for FID-style statistics
    std::vector<double> descriptor(const Volume& v) const {
        ad::NoGrad ng;
        ad::Tensor<T> t = v.data.template cast<T>();
        t = t.reshaped({1, v.grid.shape[0], v.grid.shape[1], v.grid.shape[2]});
        ad::Var<T> h3 = features(ad::Var<T>(std::move(t)))[2];
        const int64_t C = h3.shape()[0];
        const int64_t S = h3.value().size() / C;
        std::vector<double> d(C);
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int64_t s = 0; s < S; ++s) acc += static_cast<double>(h3.value()[c * S + s]);
            d[c] = acc / static_cast<double>(S);
        }
        return d;
    }

  private:
    nn::ParamRegistry<T> params_;
    nn::Conv3dLayer<T> conv1_, conv2_, conv3_;
};

// mean squared distance between feature maps, averaged across layers
template <class T>
ad::Var<T> perceptual_loss(const ad::Var<T>& a, const ad::Var<T>& b,
                           const FeatureExtractor<T>& fx) {
    if (a.shape() != b.shape()) throw Error::contract("perceptual_loss: shape mismatch");
    auto fa = fx.features(a);
    auto fb = fx.features(b);
    ad::Var<T> total;
    for (size_t l = 0; l < fa.size(); ++l) {
        ad::Var<T> d = ad::mean(ad::square(ad::sub(fa[l], fb[l])));
        total = total.defined() ? ad::add(total, d) : d;
    }
    return ad::scale(total, T(1) / T(3));
}

// Patch-level real/fake classifier: three strided convs to a score map.
template <class T>
class Discriminator {
  public:
    nn::ParamRegistry<T> params;

    explicit Discriminator(uint64_t seed = 11) {
        Rng rng(mix_seed(seed, 0x64697363ULL));  // "disc"
        conv1_ = nn::Conv3dLayer<T>(params, "d.c1", 1, 12, 3, 2, rng);
        conv2_ = nn::Conv3dLayer<T>(params, "d.c2", 12, 24, 3, 2, rng);
        norm_ = nn::InstanceNormLayer<T>(params, "d.n", 24);
        head_ = nn::Conv3dLayer<T>(params, "d.head", 24, 1, 3, 1, rng);
    }

    ad::Var<T> operator()(const ad::Var<T>& x) const {
        if (x.shape().size() != 4 || x.shape()[0] != 1)
            throw Error::contract("discriminator expects (1, D, H, W) input");
        ad::Var<T> h = ad::silu(conv1_(x));
        h = ad::silu(norm_(conv2_(h)));
        return head_(h);  // patch score map
    }

  private:
    nn::Conv3dLayer<T> conv1_, conv2_, head_;
    nn::InstanceNormLayer<T> norm_;
};

template <class T>
struct AdversarialTerms {
    ad::Var<T> generator;      // 0.5 E[(D(fake) - 1)^2]
    ad::Var<T> discriminator;  // 0.5 E[(D(real) - 1)^2] + 0.5 E[D(fake)^2]
};

// Least-squares GAN objectives. The generator term sees gradients through
// `fake`; the discriminator term sees the fake through a detached copy so
// one graph cannot update both players.
template <class T>
AdversarialTerms<T> adversarial_losses(const Discriminator<T>& d, const ad::Var<T>& real,
                                       const ad::Var<T>& fake) {
    if (real.shape() != fake.shape()) throw Error::contract("adversarial_losses: shape mismatch");
    ad::Var<T> d_fake = d(fake);
    ad::Var<T> gen = ad::scale(ad::mean(ad::square(ad::shift(d_fake, T(-1)))), T(0.5));

    ad::Var<T> d_real = d(real);
    ad::Var<T> d_fake_det = d(fake.detach());
    ad::Var<T> disc = ad::add(ad::scale(ad::mean(ad::square(ad::shift(d_real, T(-1)))), T(0.5)),
                              ad::scale(ad::mean(ad::square(d_fake_det)), T(0.5)));
    return {gen, disc};
}

}  // namespace cvox::losses
