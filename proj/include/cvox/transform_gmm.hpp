#pragma once

// Gaussian mixture over volume-to-space transform parameters (per-axis
// spacing in mm plus intrinsic Euler angles), fit by EM on the transforms
// observed in a dataset and sampled to emulate native acquisition spaces.

#include "cvox/coords.hpp"

namespace cvox::coords {

// parameter vector layout: [spacing_x, spacing_y, spacing_z, euler_ax, euler_by, euler_cz]
inline constexpr int kTransformDim = 6;

struct TransformGMM {
    int n_components = 4;
    Eigen::VectorXd weights;
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covariances;
    std::vector<double> loglik_history;  // one entry per EM iteration

    void validate() const;
};

struct GmmFitOptions {
    int max_iters = 200;
    double tol = 1e-8;
    double cov_reg = 1e-6;  // added to covariance diagonals
    uint64_t seed = 0;
};

TransformGMM fit_transform_gmm(const std::vector<Eigen::VectorXd>& observations, int n_components,
                               const GmmFitOptions& opts = {});

struct SpacingClamp {
    double lo = 0.25;
    double hi = 8.0;
};

Eigen::VectorXd sample_transform_params(const TransformGMM& gmm, uint64_t seed);

// Draws transform parameters and assembles the affine matrix
// R(euler) * diag(spacing); spacing components are clamped to the range.
Affine sample_native_space(const TransformGMM& gmm, uint64_t seed, const SpacingClamp& clamp = {});

Eigen::VectorXd transform_params_of(const Affine& affine);
Affine affine_from_transform_params(const Eigen::VectorXd& params,
                                    const Vec3& origin = Vec3::Zero());

}  // namespace cvox::coords
