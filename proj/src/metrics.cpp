#include "cvox/metrics.hpp"

#include <json.hpp>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>

#include "cvox/core.hpp"

namespace cvox::metrics {

namespace {

void check_same_shape(const ad::Tensor<float>& a, const ad::Tensor<float>& b, const char* who) {
    if (a.shape() != b.shape())
        throw Error::contract(std::string(who) + ": shape mismatch " + ad::shape_str(a.shape()) +
                              " vs " + ad::shape_str(b.shape()));
    if (a.rank() != 3) throw Error::contract(std::string(who) + ": rank-3 volumes expected");
}

// separable valid-region convolution of a (D,H,W) double field with a 1D
// window applied along every axis
std::vector<double> conv_valid(const std::vector<double>& src, std::array<int64_t, 3> dims,
                               const std::vector<double>& win) {
    const int64_t w = static_cast<int64_t>(win.size());
    std::vector<double> cur = src;
    std::array<int64_t, 3> d = dims;
    for (int axis = 0; axis < 3; ++axis) {
        std::array<int64_t, 3> nd = d;
        nd[axis] = d[axis] - w + 1;
        std::vector<double> next(nd[0] * nd[1] * nd[2]);
        for (int64_t i = 0; i < nd[0]; ++i)
            for (int64_t j = 0; j < nd[1]; ++j)
                for (int64_t k = 0; k < nd[2]; ++k) {
                    double acc = 0.0;
                    for (int64_t q = 0; q < w; ++q) {
                        int64_t ii = i + (axis == 0 ? q : 0);
                        int64_t jj = j + (axis == 1 ? q : 0);
                        int64_t kk = k + (axis == 2 ? q : 0);
                        acc += win[q] * cur[(ii * d[1] + jj) * d[2] + kk];
                    }
                    next[(i * nd[1] + j) * nd[2] + k] = acc;
                }
        cur = std::move(next);
        d = nd;
    }
    return cur;
}

std::vector<double> make_window(const SsimOptions& opt, int64_t min_dim, int* out_size) {
    int size = opt.uniform ? opt.uniform_size : opt.window;
    if (min_dim < size) {
        // fall back to the uniform small-volume window, shrunk (odd) if needed
        size = std::min<int64_t>(opt.uniform_size, min_dim);
        if (size % 2 == 0) --size;
        if (size < 1) throw Error::data("ssim: volume too small for any window");
        std::vector<double> w(size, 1.0 / size);
        *out_size = size;
        return w;
    }
    *out_size = size;
    if (opt.uniform) return std::vector<double>(size, 1.0 / size);
    std::vector<double> w(size);
    const double c = (size - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        w[i] = std::exp(-0.5 * (i - c) * (i - c) / (opt.sigma * opt.sigma));
        sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
}

struct SsimParts {
    double mean_ssim;
    double mean_cs;  // contrast-structure component only
};

SsimParts ssim_parts(const ad::Tensor<float>& a, const ad::Tensor<float>& b,
                     const SsimOptions& opt) {
    check_same_shape(a, b, "ssim");
    std::array<int64_t, 3> dims = {a.dim(0), a.dim(1), a.dim(2)};
    const int64_t min_dim = std::min({dims[0], dims[1], dims[2]});
    int wsize = 0;
    std::vector<double> win = make_window(opt, min_dim, &wsize);

    const int64_t n = a.size();
    std::vector<double> xa(n), xb(n), xaa(n), xbb(n), xab(n);
    for (int64_t i = 0; i < n; ++i) {
        const double va = a[i], vb = b[i];
        xa[i] = va;
        xb[i] = vb;
        xaa[i] = va * va;
        xbb[i] = vb * vb;
        xab[i] = va * vb;
    }
    auto mu_a = conv_valid(xa, dims, win);
    auto mu_b = conv_valid(xb, dims, win);
    auto m_aa = conv_valid(xaa, dims, win);
    auto m_bb = conv_valid(xbb, dims, win);
    auto m_ab = conv_valid(xab, dims, win);

    const double c1 = opt.k1 * opt.peak * opt.k1 * opt.peak;
    const double c2 = opt.k2 * opt.peak * opt.k2 * opt.peak;
    double sum_ssim = 0.0, sum_cs = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = m_aa[i] - ma * ma;
        const double vb = m_bb[i] - mb * mb;
        const double cov = m_ab[i] - ma * mb;
        const double cs = (2.0 * cov + c2) / (va + vb + c2);
        const double lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        sum_cs += cs;
        sum_ssim += lum * cs;
    }
    const double m = static_cast<double>(mu_a.size());
    return {sum_ssim / m, sum_cs / m};
}

ad::Tensor<float> downsample2(const ad::Tensor<float>& x) {
    std::array<int64_t, 3> d = {x.dim(0), x.dim(1), x.dim(2)};
    std::array<int64_t, 3> nd = {d[0] / 2, d[1] / 2, d[2] / 2};
    ad::Tensor<float> out({nd[0], nd[1], nd[2]});
    for (int64_t i = 0; i < nd[0]; ++i)
        for (int64_t j = 0; j < nd[1]; ++j)
            for (int64_t k = 0; k < nd[2]; ++k) {
                double acc = 0.0;
                for (int64_t di = 0; di < 2; ++di)
                    for (int64_t dj = 0; dj < 2; ++dj)
                        for (int64_t dk = 0; dk < 2; ++dk)
                            acc += x[((2 * i + di) * d[1] + 2 * j + dj) * d[2] + 2 * k + dk];
                out[(i * nd[1] + j) * nd[2] + k] = static_cast<float>(acc / 8.0);
            }
    return out;
}

}  // namespace

double psnr(const ad::Tensor<float>& a, const ad::Tensor<float>& b, double peak) {
    if (a.shape() != b.shape()) throw Error::contract("psnr: shape mismatch");
    if (a.empty()) throw Error::contract("psnr: empty input");
    double mse = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const ad::Tensor<float>& a, const ad::Tensor<float>& b, const SsimOptions& opt) {
    return ssim_parts(a, b, opt).mean_ssim;
}

double ms_ssim(const ad::Tensor<float>& a, const ad::Tensor<float>& b, int scales,
               const SsimOptions& opt) {
    check_same_shape(a, b, "ms_ssim");
    if (scales < 1) throw Error::config("ms_ssim: scales must be >= 1");
    static const double canonical[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    if (scales > 5) throw Error::config("ms_ssim: at most 5 scales supported");
    std::vector<double> w(canonical, canonical + scales);
    double wsum = 0.0;
    for (double v : w) wsum += v;
    for (auto& v : w) v /= wsum;

    ad::Tensor<float> xa = a, xb = b;
    double log_acc = 0.0;
    for (int s = 0; s < scales; ++s) {
        const int64_t min_dim = std::min({xa.dim(0), xa.dim(1), xa.dim(2)});
        const int needed = opt.uniform ? opt.uniform_size : opt.window;
        if (s > 0 && min_dim < std::min<int64_t>(needed, 3))
            throw Error::data("ms_ssim: volume too small for " + std::to_string(scales) +
                              " scales");
        SsimParts parts = ssim_parts(xa, xb, opt);
        // final scale contributes full SSIM; earlier scales contrast-structure
        double term = (s + 1 == scales) ? parts.mean_ssim : parts.mean_cs;
        term = std::max(term, 1e-12);  // relu convention: negative cs clipped
        log_acc += w[s] * std::log(term);
        if (s + 1 < scales) {
            xa = downsample2(xa);
            xb = downsample2(xb);
        }
    }
    return std::exp(log_acc);
}

double fid(const FeatureCloud& real, const FeatureCloud& fake, double eps) {
    if (real.cols() != fake.cols())
        throw Error::contract("fid: feature dimension mismatch (" + std::to_string(real.cols()) +
                              " vs " + std::to_string(fake.cols()) + ")");
    if (real.rows() < 2 || fake.rows() < 2) throw Error::data("fid: need at least 2 samples");
    if (!real.allFinite() || !fake.allFinite()) throw Error::data("fid: non-finite features");

    const int64_t d = real.cols();
    auto stats = [&](const FeatureCloud& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        mu = x.colwise().mean();
        Eigen::MatrixXd c = x.rowwise() - mu.transpose();
        cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
        cov.diagonal().array() += eps;
    };
    Eigen::VectorXd mu_r, mu_f;
    Eigen::MatrixXd cov_r, cov_f;
    stats(real, mu_r, cov_r);
    stats(fake, mu_f, cov_f);

    // tr((Sr Sf)^(1/2)) via the symmetric form tr((Sr^1/2 Sf Sr^1/2)^(1/2))
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_r(cov_r);
    if (es_r.info() != Eigen::Success) throw Error::numeric("fid: eigendecomposition failed");
    Eigen::VectorXd ev = es_r.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd sqrt_r = es_r.eigenvectors() * ev.asDiagonal() * es_r.eigenvectors().transpose();
    Eigen::MatrixXd m = sqrt_r * cov_f * sqrt_r;
    m = 0.5 * (m + m.transpose());  // symmetrize against roundoff
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(m);
    if (es_m.info() != Eigen::Success) throw Error::numeric("fid: eigendecomposition failed");
    const double tr_sqrt = es_m.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    const double mean_term = (mu_r - mu_f).squaredNorm();
    double val = mean_term + cov_r.trace() + cov_f.trace() - 2.0 * tr_sqrt;
    (void)d;
    return std::max(val, 0.0);
}

CoverageDensity coverage_density(const FeatureCloud& real, const FeatureCloud& fake, int k) {
    if (real.cols() != fake.cols()) throw Error::contract("coverage_density: dimension mismatch");
    const int64_t n = real.rows(), m = fake.rows();
    if (k < 1) throw Error::config("coverage_density: k must be >= 1");
    if (k >= n)
        throw Error::data("coverage_density: k=" + std::to_string(k) +
                          " must be smaller than the real sample count " + std::to_string(n));
    if (m < 1) throw Error::data("coverage_density: empty fake cloud");

    // k-NN radius per real point, self excluded
    std::vector<double> radius(n);
    for (int64_t i = 0; i < n; ++i) {
        std::vector<double> d2;
        d2.reserve(n - 1);
        for (int64_t j = 0; j < n; ++j)
            if (j != i) d2.push_back((real.row(i) - real.row(j)).squaredNorm());
        std::nth_element(d2.begin(), d2.begin() + (k - 1), d2.end());
        radius[i] = std::sqrt(d2[k - 1]);
    }

    int64_t covered = 0;
    int64_t inside = 0;
    for (int64_t i = 0; i < n; ++i) {
        bool hit = false;
        for (int64_t j = 0; j < m; ++j) {
            const double d = (real.row(i) - fake.row(j)).norm();
            if (d <= radius[i]) {
                hit = true;
                ++inside;
            }
        }
        covered += hit;
    }
    CoverageDensity out;
    out.coverage = static_cast<double>(covered) / static_cast<double>(n);
    out.density = static_cast<double>(inside) / (static_cast<double>(k) * static_cast<double>(m));
    return out;
}

double msssim_diversity(const std::vector<ad::Tensor<float>>& samples, int n_pairs, uint64_t seed,
                        int scales) {
    if (samples.size() < 2) throw Error::data("msssim_diversity: need at least 2 samples");
    if (n_pairs < 1) throw Error::config("msssim_diversity: need at least 1 pair");
    Rng rng(mix_seed(seed, 0x646976ULL));  // "div"
    double acc = 0.0;
    for (int p = 0; p < n_pairs; ++p) {
        const uint64_t i = rng.index(samples.size());
        uint64_t j = rng.index(samples.size() - 1);
        if (j >= i) ++j;  // distinct pair
        acc += ms_ssim(samples[i], samples[j], scales);
    }
    return acc / static_cast<double>(n_pairs);
}

void MetricReport::add_row(const std::string& volume_id, const std::vector<double>& values) {
    if (values.size() != metric_names.size())
        throw Error::contract("metric report: row width does not match metric names");
    volume_ids.push_back(volume_id);
    rows.push_back(values);
}

void MetricReport::finalize() {
    const size_t m = metric_names.size();
    aggregate_mean.assign(m, 0.0);
    aggregate_std.assign(m, 0.0);
    if (rows.empty()) return;
    for (const auto& r : rows)
        for (size_t c = 0; c < m; ++c) aggregate_mean[c] += r[c];
    for (size_t c = 0; c < m; ++c) aggregate_mean[c] /= static_cast<double>(rows.size());
    if (rows.size() > 1) {
        for (const auto& r : rows)
            for (size_t c = 0; c < m; ++c) {
                const double d = r[c] - aggregate_mean[c];
                aggregate_std[c] += d * d;
            }
        for (size_t c = 0; c < m; ++c)
            aggregate_std[c] = std::sqrt(aggregate_std[c] / static_cast<double>(rows.size() - 1));
    }
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["model_id"] = model_id;
    j["dataset_id"] = dataset_id;
    j["grid"] = grid_desc;
    j["metrics"] = metric_names;
    j["volumes"] = nlohmann::json::array();
    for (size_t i = 0; i < rows.size(); ++i) {
        nlohmann::json row;
        row["id"] = volume_ids[i];
        for (size_t c = 0; c < metric_names.size(); ++c) row["values"][metric_names[c]] = rows[i][c];
        j["volumes"].push_back(row);
    }
    for (size_t c = 0; c < metric_names.size(); ++c) {
        j["aggregate"]["mean"][metric_names[c]] = aggregate_mean.size() > c ? aggregate_mean[c] : 0;
        j["aggregate"]["std"][metric_names[c]] = aggregate_std.size() > c ? aggregate_std[c] : 0;
    }
    return j.dump(2);
}

std::string MetricReport::to_csv() const {
    std::string out = "volume";
    for (const auto& n : metric_names) out += "," + n;
    out += "\n";
    for (size_t i = 0; i < rows.size(); ++i) {
        out += volume_ids[i];
        for (double v : rows[i]) out += "," + std::to_string(v);
        out += "\n";
    }
    if (!aggregate_mean.empty()) {
        out += "mean";
        for (double v : aggregate_mean) out += "," + std::to_string(v);
        out += "\nstd";
        for (double v : aggregate_std) out += "," + std::to_string(v);
        out += "\n";
    }
    return out;
}

}  // namespace cvox::metrics
