#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cvox/core.hpp"
#include "cvox/transform_gmm.hpp"

using namespace cvox;
using coords::Affine;
using coords::kTransformDim;
using coords::TransformGMM;
using coords::Vec3;

namespace {

Eigen::VectorXd params6(double sx, double sy, double sz, double ax, double by, double cz) {
    Eigen::VectorXd p(kTransformDim);
    p << sx, sy, sz, ax, by, cz;
    return p;
}

// two tight, well-separated blobs in parameter space
std::vector<Eigen::VectorXd> two_cluster_data(int n0, int n1, uint64_t seed) {
    Rng rng(seed);
    const Eigen::VectorXd c0 = params6(1.0, 1.0, 3.0, 0.05, -0.03, 0.1);
    const Eigen::VectorXd c1 = params6(0.8, 0.8, 0.8, -0.2, 0.15, -0.1);
    std::vector<Eigen::VectorXd> obs;
    for (int i = 0; i < n0 + n1; ++i) {
        Eigen::VectorXd x = (i < n0) ? c0 : c1;
        for (int d = 0; d < kTransformDim; ++d) x[d] += 0.01 * rng.normal();
        obs.push_back(x);
    }
    return obs;
}

TransformGMM point_mass(const Eigen::VectorXd& mean, double var = 1e-12) {
    TransformGMM g;
    g.n_components = 1;
    g.weights = Eigen::VectorXd::Ones(1);
    g.means = {mean};
    g.covariances = {Eigen::MatrixXd::Identity(kTransformDim, kTransformDim) * var};
    return g;
}

}  // namespace

TEST_CASE("transform params round trip through the affine") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::VectorXd p =
            params6(rng.uniform(0.3, 4.0), rng.uniform(0.3, 4.0), rng.uniform(0.3, 4.0),
                    rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2));
        const Affine a = coords::affine_from_transform_params(p, Vec3(1, 2, 3));
        CHECK((a.origin - Vec3(1, 2, 3)).norm() == 0.0);
        const Eigen::VectorXd q = coords::transform_params_of(a);
        // spacings always recover; angles recover as an equivalent rotation
        for (int d = 0; d < 3; ++d) CHECK(q[d] == doctest::Approx(p[d]).epsilon(1e-9));
        const Affine b = coords::affine_from_transform_params(q);
        CHECK((b.matrix - a.matrix).norm() < 1e-9);
    }
    CHECK_THROWS_AS(coords::affine_from_transform_params(params6(0.0, 1, 1, 0, 0, 0)), Error);
    CHECK_THROWS_AS(coords::affine_from_transform_params(Eigen::VectorXd::Ones(5)), Error);
}

TEST_CASE("EM recovers well-separated clusters with matching weights") {
    const auto obs = two_cluster_data(30, 10, 21);
    coords::GmmFitOptions opts;
    opts.seed = 3;
    const TransformGMM gmm = coords::fit_transform_gmm(obs, 2, opts);
    gmm.validate();

    // identify components by their spacing_z coordinate (3.0 vs 0.8)
    const int k_hi = gmm.means[0][2] > gmm.means[1][2] ? 0 : 1;
    const int k_lo = 1 - k_hi;
    CHECK(gmm.means[k_hi][2] == doctest::Approx(3.0).epsilon(0.02));
    CHECK(gmm.means[k_lo][2] == doctest::Approx(0.8).epsilon(0.02));
    CHECK(gmm.weights[k_hi] == doctest::Approx(0.75).epsilon(0.02));
    CHECK(gmm.weights[k_lo] == doctest::Approx(0.25).epsilon(0.02));

    // EM log-likelihood never decreases
    REQUIRE(gmm.loglik_history.size() >= 2);
    for (size_t i = 1; i < gmm.loglik_history.size(); ++i)
        CHECK(gmm.loglik_history[i] >= gmm.loglik_history[i - 1] - 1e-7);
}

TEST_CASE("fitting is deterministic and rejects bad inputs") {
    const auto obs = two_cluster_data(12, 12, 5);
    coords::GmmFitOptions opts;
    opts.seed = 9;
    const TransformGMM a = coords::fit_transform_gmm(obs, 3, opts);
    const TransformGMM b = coords::fit_transform_gmm(obs, 3, opts);
    for (int k = 0; k < 3; ++k) {
        CHECK((a.means[k] - b.means[k]).norm() == 0.0);
        CHECK((a.covariances[k] - b.covariances[k]).norm() == 0.0);
    }
    CHECK_THROWS_AS(coords::fit_transform_gmm(obs, 0, opts), Error);
    CHECK_THROWS_AS(coords::fit_transform_gmm({obs[0], obs[1]}, 3, opts), Error);
    CHECK_THROWS_AS(coords::fit_transform_gmm({Eigen::VectorXd::Ones(4)}, 1, opts), Error);
}

TEST_CASE("sampling is seed-deterministic and tracks the component mean") {
    const auto obs = two_cluster_data(20, 20, 31);
    const TransformGMM gmm = coords::fit_transform_gmm(obs, 2, {});
    const Eigen::VectorXd s1 = coords::sample_transform_params(gmm, 42);
    const Eigen::VectorXd s2 = coords::sample_transform_params(gmm, 42);
    CHECK((s1 - s2).norm() == 0.0);
    CHECK((s1 - coords::sample_transform_params(gmm, 43)).norm() > 0.0);

    // near-point-mass component: every draw reproduces the mean
    const Eigen::VectorXd mu = params6(1.5, 2.0, 2.5, 0.2, -0.1, 0.3);
    const TransformGMM pm = point_mass(mu);
    for (uint64_t seed = 0; seed < 20; ++seed)
        CHECK((coords::sample_transform_params(pm, seed) - mu).norm() < 1e-5);

    // empirical mean over many draws approaches the mixture mean
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(kTransformDim);
    const int n = 4000;
    for (int i = 0; i < n; ++i) acc += coords::sample_transform_params(gmm, 1000 + i);
    acc /= n;
    Eigen::VectorXd want = gmm.weights[0] * gmm.means[0] + gmm.weights[1] * gmm.means[1];
    CHECK((acc - want).norm() < 0.05);
}

TEST_CASE("sample_native_space assembles R(euler)*diag(spacing) and clamps spacing") {
    const Eigen::VectorXd mu = params6(1.2, 0.9, 2.4, 0.3, -0.2, 0.15);
    const Affine a = coords::sample_native_space(point_mass(mu), 7);
    const coords::Mat3 want =
        coords::euler_to_rotation(0.3, -0.2, 0.15) * Vec3(1.2, 0.9, 2.4).asDiagonal();
    CHECK((a.matrix - want).norm() < 1e-5);
    CHECK(a.origin.norm() == 0.0);

    // spacings outside the clamp window are pinned to the rails
    const Affine lo = coords::sample_native_space(point_mass(params6(0.01, 1, 1, 0, 0, 0)), 7);
    CHECK(lo.spacing()[0] == doctest::Approx(0.25).epsilon(1e-6));
    const Affine hi = coords::sample_native_space(point_mass(params6(1, 30.0, 1, 0, 0, 0)), 7);
    CHECK(hi.spacing()[1] == doctest::Approx(8.0).epsilon(1e-6));

    coords::SpacingClamp narrow{0.5, 2.0};
    const Affine c = coords::sample_native_space(point_mass(params6(3.0, 1, 1, 0, 0, 0)), 7, narrow);
    CHECK(c.spacing()[0] == doctest::Approx(2.0).epsilon(1e-6));

    coords::SpacingClamp bad{2.0, 1.0};
    CHECK_THROWS_AS(coords::sample_native_space(point_mass(mu), 7, bad), Error);
}

TEST_CASE("validate flags malformed mixtures") {
    TransformGMM g = point_mass(params6(1, 1, 1, 0, 0, 0));
    g.weights[0] = 0.5;  // no longer sums to 1
    CHECK_THROWS_AS(g.validate(), Error);
    TransformGMM h = point_mass(params6(1, 1, 1, 0, 0, 0));
    h.means[0] = Eigen::VectorXd::Ones(4);
    CHECK_THROWS_AS(h.validate(), Error);
    TransformGMM j = point_mass(params6(1, 1, 1, 0, 0, 0));
    j.n_components = 2;
    CHECK_THROWS_AS(j.validate(), Error);
}
