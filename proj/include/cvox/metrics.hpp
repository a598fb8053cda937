#pragma once

// Reconstruction metrics (PSNR, 3D SSIM / MS-SSIM) and distribution metrics
// over feature clouds (FID, coverage, density) plus pairwise MS-SSIM
// diversity.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "cvox/tensor.hpp"

namespace cvox::metrics {

// 10 log10(peak^2 / MSE); identical inputs return +infinity
double psnr(const ad::Tensor<float>& a, const ad::Tensor<float>& b, double peak = 1.0);

struct SsimOptions {
    double k1 = 0.01, k2 = 0.03;
    double peak = 1.0;
    int window = 11;      // Gaussian window size (odd)
    double sigma = 1.5;
    bool uniform = false;  // small-volume fallback: uniform 7^3 box
    int uniform_size = 7;
};

// windowed 3D SSIM over the valid (fully-covered) region
double ssim(const ad::Tensor<float>& a, const ad::Tensor<float>& b, const SsimOptions& opt = {});

// weighted product over dyadic scales (canonical 5-scale weights truncated
// and renormalized to the requested scale count)
double ms_ssim(const ad::Tensor<float>& a, const ad::Tensor<float>& b, int scales = 3,
               const SsimOptions& opt = {});

// n x d matrix of embeddings, one row per sample
using FeatureCloud = Eigen::MatrixXd;

// Frechet distance between Gaussians fit to the clouds, with symmetrized
// matrix square root and diagonal jitter against near-singular covariances
double fid(const FeatureCloud& real, const FeatureCloud& fake, double eps = 1e-6);

struct CoverageDensity {
    double coverage = 0.0;  // in [0,1]
    double density = 0.0;   // >= 0
};

// k-NN radius per real point (k-th neighbor excluding self, inclusive <=)
CoverageDensity coverage_density(const FeatureCloud& real, const FeatureCloud& fake, int k);

// mean MS-SSIM over randomly drawn distinct sample pairs; lower = more diverse
double msssim_diversity(const std::vector<ad::Tensor<float>>& samples, int n_pairs, uint64_t seed,
                        int scales = 3);

// Per-volume metric table with arithmetic-mean / stddev aggregates.
struct MetricReport {
    std::string model_id, dataset_id, grid_desc;
    std::vector<std::string> metric_names;
    std::vector<std::string> volume_ids;
    std::vector<std::vector<double>> rows;  // rows[i][m], one row per volume
    std::vector<double> aggregate_mean, aggregate_std;

    void add_row(const std::string& volume_id, const std::vector<double>& values);
    void finalize();  // fills aggregates
    std::string to_json() const;
    std::string to_csv() const;
};

}  // namespace cvox::metrics
