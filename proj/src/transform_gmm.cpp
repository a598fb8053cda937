#include "cvox/transform_gmm.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>

#include "cvox/core.hpp"

namespace cvox::coords {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

// log N(x | mu, cov) via Cholesky; cov must be positive definite.
double log_gaussian(const Eigen::VectorXd& x, const Eigen::VectorXd& mu,
                    const Eigen::LLT<Eigen::MatrixXd>& llt) {
    const Eigen::MatrixXd& L = llt.matrixL();
    Eigen::VectorXd y = llt.matrixL().solve(x - mu);
    double log_det = 0.0;
    for (int i = 0; i < L.rows(); ++i) log_det += std::log(L(i, i));
    return -0.5 * (x.size() * kLog2Pi + y.squaredNorm()) - log_det;
}

double logsumexp(const Eigen::VectorXd& v) {
    double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (int i = 0; i < v.size(); ++i) s += std::exp(v[i] - m);
    return m + std::log(s);
}

}  // namespace

void TransformGMM::validate() const {
    if (n_components <= 0) throw Error::config("TransformGMM: n_components must be positive");
    if (weights.size() != n_components || (int)means.size() != n_components ||
        (int)covariances.size() != n_components)
        throw Error::config("TransformGMM: component count mismatch");
    double wsum = weights.sum();
    if (std::abs(wsum - 1.0) > 1e-6)
        throw Error::config("TransformGMM: weights must sum to 1, got " + std::to_string(wsum));
    for (int k = 0; k < n_components; ++k) {
        if (means[k].size() != kTransformDim)
            throw Error::config("TransformGMM: mean dimension must be 6");
        if (covariances[k].rows() != kTransformDim || covariances[k].cols() != kTransformDim)
            throw Error::config("TransformGMM: covariance must be 6x6");
    }
}

TransformGMM fit_transform_gmm(const std::vector<Eigen::VectorXd>& observations, int n_components,
                               const GmmFitOptions& opts) {
    const int n = (int)observations.size();
    if (n_components <= 0) throw Error::config("fit_transform_gmm: n_components must be positive");
    if (n < n_components)
        throw Error::data("fit_transform_gmm: need at least as many observations (" +
                          std::to_string(n) + ") as components (" + std::to_string(n_components) +
                          ")");
    for (const auto& x : observations)
        if (x.size() != kTransformDim)
            throw Error::data("fit_transform_gmm: observations must be 6-dimensional");

    const int d = kTransformDim;
    TransformGMM gmm;
    gmm.n_components = n_components;
    gmm.weights = Eigen::VectorXd::Constant(n_components, 1.0 / n_components);
    gmm.means.resize(n_components);
    gmm.covariances.resize(n_components);

    // Shared diagonal covariance from the data scatter for initialization.
    Eigen::VectorXd data_mean = Eigen::VectorXd::Zero(d);
    for (const auto& x : observations) data_mean += x;
    data_mean /= n;
    Eigen::VectorXd data_var = Eigen::VectorXd::Zero(d);
    for (const auto& x : observations) data_var += (x - data_mean).cwiseAbs2();
    data_var /= std::max(1, n - 1);
    Eigen::MatrixXd init_cov = data_var.asDiagonal();
    init_cov.diagonal().array() += opts.cov_reg;

    // Greedy farthest-point seeding (deterministic given the seed for the
    // first pick), then one Lloyd-style assignment is implied by EM itself.
    Rng rng(mix_seed(opts.seed, 0x676d6d666974ULL));  // "gmmfit"
    std::vector<int> seeds;
    seeds.push_back((int)rng.index((uint64_t)n));
    while ((int)seeds.size() < n_components) {
        int best = -1;
        double best_dist = -1.0;
        for (int i = 0; i < n; ++i) {
            double dmin = std::numeric_limits<double>::infinity();
            for (int s : seeds) dmin = std::min(dmin, (observations[i] - observations[s]).norm());
            if (dmin > best_dist) {
                best_dist = dmin;
                best = i;
            }
        }
        seeds.push_back(best);
    }
    for (int k = 0; k < n_components; ++k) {
        gmm.means[k] = observations[seeds[k]];
        gmm.covariances[k] = init_cov;
    }

    Eigen::MatrixXd resp(n, n_components);  // posterior responsibilities
    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < opts.max_iters; ++iter) {
        // E step
        std::vector<Eigen::LLT<Eigen::MatrixXd>> llts(n_components);
        for (int k = 0; k < n_components; ++k) {
            llts[k].compute(gmm.covariances[k]);
            if (llts[k].info() != Eigen::Success)
                throw Error::numeric("fit_transform_gmm: covariance not positive definite");
        }
        double ll = 0.0;
        for (int i = 0; i < n; ++i) {
            Eigen::VectorXd logp(n_components);
            for (int k = 0; k < n_components; ++k)
                logp[k] = std::log(gmm.weights[k]) +
                          log_gaussian(observations[i], gmm.means[k], llts[k]);
            double lse = logsumexp(logp);
            ll += lse;
            for (int k = 0; k < n_components; ++k) resp(i, k) = std::exp(logp[k] - lse);
        }
        gmm.loglik_history.push_back(ll);

        // M step
        for (int k = 0; k < n_components; ++k) {
            double nk = resp.col(k).sum();
            if (nk < 1e-12) {
                // Dead component: re-seed at the point worst explained by the model.
                int worst = 0;
                double worst_r = std::numeric_limits<double>::infinity();
                for (int i = 0; i < n; ++i) {
                    double rmax = resp.row(i).maxCoeff();
                    if (rmax < worst_r) {
                        worst_r = rmax;
                        worst = i;
                    }
                }
                gmm.means[k] = observations[worst];
                gmm.covariances[k] = init_cov;
                gmm.weights[k] = 1.0 / n;
                continue;
            }
            Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
            for (int i = 0; i < n; ++i) mu += resp(i, k) * observations[i];
            mu /= nk;
            Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
            for (int i = 0; i < n; ++i) {
                Eigen::VectorXd c = observations[i] - mu;
                cov += resp(i, k) * (c * c.transpose());
            }
            cov /= nk;
            cov.diagonal().array() += opts.cov_reg;
            gmm.weights[k] = nk / n;
            gmm.means[k] = mu;
            gmm.covariances[k] = cov;
        }
        gmm.weights /= gmm.weights.sum();

        if (iter > 0 && ll - prev_ll < opts.tol * std::abs(prev_ll)) break;
        prev_ll = ll;
    }
    gmm.validate();
    return gmm;
}

Eigen::VectorXd sample_transform_params(const TransformGMM& gmm, uint64_t seed) {
    gmm.validate();
    Rng rng(mix_seed(seed, 0x736d706cULL));
    // component pick by inverse-CDF over weights
    double u = rng.uniform();
    int comp = gmm.n_components - 1;
    double acc = 0.0;
    for (int k = 0; k < gmm.n_components; ++k) {
        acc += gmm.weights[k];
        if (u < acc) {
            comp = k;
            break;
        }
    }
    Eigen::LLT<Eigen::MatrixXd> llt(gmm.covariances[comp]);
    if (llt.info() != Eigen::Success)
        throw Error::numeric("sample_transform_params: covariance not positive definite");
    Eigen::VectorXd z(kTransformDim);
    for (int i = 0; i < kTransformDim; ++i) z[i] = rng.normal();
    return gmm.means[comp] + llt.matrixL() * z;
}

Affine sample_native_space(const TransformGMM& gmm, uint64_t seed, const SpacingClamp& clamp) {
    if (!(clamp.lo > 0.0) || !(clamp.hi > clamp.lo))
        throw Error::config("sample_native_space: invalid spacing clamp range");
    Eigen::VectorXd p = sample_transform_params(gmm, seed);
    for (int a = 0; a < 3; ++a) p[a] = std::clamp(p[a], clamp.lo, clamp.hi);
    return affine_from_transform_params(p);
}

Eigen::VectorXd transform_params_of(const Affine& affine) {
    affine.validate();
    Eigen::VectorXd p(kTransformDim);
    Vec3 sp = affine.spacing();
    Mat3 R = affine.directions();
    Vec3 euler = rotation_to_euler(R);
    for (int a = 0; a < 3; ++a) p[a] = sp[a];
    for (int a = 0; a < 3; ++a) p[3 + a] = euler[a];
    return p;
}

Affine affine_from_transform_params(const Eigen::VectorXd& params, const Vec3& origin) {
    if (params.size() != kTransformDim)
        throw Error::config("affine_from_transform_params: expected 6 parameters");
    for (int a = 0; a < 3; ++a)
        if (!(params[a] > 0.0))
            throw Error::config("affine_from_transform_params: spacings must be positive");
    Mat3 R = euler_to_rotation(params[3], params[4], params[5]);
    Affine out;
    out.matrix = R * Vec3(params[0], params[1], params[2]).asDiagonal();
    out.origin = origin;
    out.validate();
    return out;
}

}  // namespace cvox::coords
