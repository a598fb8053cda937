#pragma once

// Continuous resampling between coordinate grids: the 8-corner local
// ensemble, learned sinusoidal positional encodings (amplitude / frequency /
// phase heads), and plain trilinear interpolation used by the ablation model
// and as a reference path.

#include <cmath>

#include "cvox/coords.hpp"
#include "cvox/nn.hpp"
#include "cvox/volume.hpp"

namespace cvox::inr {

inline constexpr double kPi = 3.14159265358979323846;

// Two equivalent-on-rectilinear-grids weight conventions: direct trilinear
// products vs diagonal-cell volumes normalized by their sum.
enum class WeightKind { trilinear, liif_area };

inline WeightKind weight_kind_from_name(const std::string& name) {
    if (name == "trilinear") return WeightKind::trilinear;
    if (name == "liif_area") return WeightKind::liif_area;
    throw Error::config("unknown ensemble weight kind '" + name +
                        "' (expected trilinear|liif_area)");
}

// The 8 grid nodes of the cell containing a query point plus interpolation
// weights. Out-of-bounds queries clamp to the boundary cell.
struct LocalEnsemble {
    std::array<std::array<int64_t, 3>, 8> neighbor_indices;
    std::array<coords::Vec3, 8> neighbor_coords;
    std::array<double, 8> weights;
    std::array<coords::Vec3, 8> deltas;  // query - node, in source-cell units
};

inline LocalEnsemble local_ensemble(const coords::CoordGrid& grid, const coords::Vec3& query,
                                    WeightKind kind = WeightKind::trilinear) {
    const coords::Vec3 u_raw = coords::physical_to_voxel(grid.affine, query);
    coords::Vec3 u;
    std::array<int64_t, 3> base{};
    coords::Vec3 t;
    for (int a = 0; a < 3; ++a) {
        u[a] = std::clamp(u_raw[a], 0.0, static_cast<double>(grid.shape[a] - 1));
        base[a] = std::min<int64_t>(static_cast<int64_t>(std::floor(u[a])),
                                    std::max<int64_t>(grid.shape[a] - 2, 0));
        t[a] = std::clamp(u[a] - static_cast<double>(base[a]), 0.0, 1.0);
    }

    LocalEnsemble e{};
    double wsum = 0.0;
    for (int c = 0; c < 8; ++c) {
        const int ci = (c >> 2) & 1, cj = (c >> 1) & 1, ck = c & 1;
        std::array<int64_t, 3> idx = {std::min<int64_t>(base[0] + ci, grid.shape[0] - 1),
                                      std::min<int64_t>(base[1] + cj, grid.shape[1] - 1),
                                      std::min<int64_t>(base[2] + ck, grid.shape[2] - 1)};
        e.neighbor_indices[c] = idx;
        e.neighbor_coords[c] = grid.coord(idx[0], idx[1], idx[2]);
        const double fx = ci ? t[0] : 1.0 - t[0];
        const double fy = cj ? t[1] : 1.0 - t[1];
        const double fz = ck ? t[2] : 1.0 - t[2];
        // diagonal-cell volume: per-axis distance from the query to the
        // opposite corner — algebraically the same product on a unit cell
        e.weights[c] = fx * fy * fz;
        wsum += e.weights[c];
        for (int a = 0; a < 3; ++a) {
            const int ca = a == 0 ? ci : (a == 1 ? cj : ck);
            e.deltas[c][a] = u[a] - static_cast<double>(base[a] + ca);
        }
    }
    if (kind == WeightKind::liif_area) {
        // normalize by the summed diagonal volumes rather than assuming a
        // unit cell; on rectilinear grids wsum == 1 already
        if (wsum <= 0.0) throw Error::numeric("local_ensemble: degenerate weights");
        for (auto& w : e.weights) w /= wsum;
    }
    return e;
}

// --------------------------------------------------------------------------
// differentiable ensemble resampling
// --------------------------------------------------------------------------

// Precomputed geometry for resampling from a source grid onto a query grid:
// flat node indices, weights, relative coordinates, and query cell sizes.
template <class T>
struct ResampleTable {
    int64_t n = 0;                            // number of queries
    std::array<std::vector<int64_t>, 8> idx;  // flat source-node index per corner
    std::array<std::vector<T>, 8> weights;
    std::array<ad::Tensor<T>, 8> delta;  // (Q,3), source-cell units
    ad::Tensor<T> cell;                  // (Q,3), query spacing in mm
};

template <class T>
ResampleTable<T> build_resample_table(const coords::CoordGrid& src,
                                      const coords::CoordGrid& queries,
                                      WeightKind kind = WeightKind::trilinear) {
    ResampleTable<T> tab;
    tab.n = queries.num_points();
    for (int c = 0; c < 8; ++c) {
        tab.idx[c].resize(tab.n);
        tab.weights[c].resize(tab.n);
        tab.delta[c] = ad::Tensor<T>({tab.n, 3});
    }
    tab.cell = ad::Tensor<T>({tab.n, 3});
    const coords::Vec3 qsp = queries.spacing();
    int64_t q = 0;
    for (int64_t i = 0; i < queries.shape[0]; ++i)
        for (int64_t j = 0; j < queries.shape[1]; ++j)
            for (int64_t k = 0; k < queries.shape[2]; ++k, ++q) {
                LocalEnsemble e = local_ensemble(src, queries.coord(i, j, k), kind);
                for (int c = 0; c < 8; ++c) {
                    const auto& n = e.neighbor_indices[c];
                    tab.idx[c][q] = (n[0] * src.shape[1] + n[1]) * src.shape[2] + n[2];
                    tab.weights[c][q] = static_cast<T>(e.weights[c]);
                    for (int a = 0; a < 3; ++a)
                        tab.delta[c][q * 3 + a] = static_cast<T>(e.deltas[c][a]);
                }
                for (int a = 0; a < 3; ++a) tab.cell[q * 3 + a] = static_cast<T>(qsp[a]);
            }
    return tab;
}

// Eight INR forward passes, one per cell corner, linearly combined with the
// ensemble weights. `fn(rows, delta, cell)` maps gathered features (Q,Cin)
// to outputs (Q,Cout); features come in channel-major (C, spatial...).
template <class T, class InrFn>
ad::Var<T> ensemble_resample(const ad::Var<T>& features, const ResampleTable<T>& table,
                             InrFn&& fn) {
    ad::Var<T> rows = ad::channels_to_rows(features);
    ad::Var<T> acc;
    for (int c = 0; c < 8; ++c) {
        ad::Var<T> g = ad::gather_rows(rows, table.idx[c]);
        ad::Var<T> o = fn(g, table.delta[c], table.cell);
        o = ad::scale_rows(o, table.weights[c]);
        acc = acc.defined() ? ad::add(acc, o) : o;
    }
    return acc;  // (Q, Cout)
}

// f(v, ., .) = v — collapses the ensemble to plain trilinear interpolation
template <class T>
struct PassthroughInr {
    ad::Var<T> operator()(const ad::Var<T>& rows, const ad::Tensor<T>&,
                          const ad::Tensor<T>&) const {
        return rows;
    }
};

// Learned positional encoding + coordinate decoder. The amplitude /
// frequency / phase heads read the local feature vector; the encoding is
// A * sin(pi * (F . delta + P)) followed by a small MLP conditioned on the
// query cell size.
template <class T>
struct LteResampler {
    int64_t c_in = 0, c_out = 0, k = 0;
    nn::LinearLayer<T> amp, freq, phase;
    std::vector<nn::LinearLayer<T>> mlp;

    LteResampler() = default;
    LteResampler(nn::ParamRegistry<T>& reg, const std::string& name, int64_t c_in_, int64_t c_out_,
                 int64_t k_, int64_t hidden, int64_t depth, Rng& rng)
        : c_in(c_in_), c_out(c_out_), k(k_) {
        if (k <= 0 || k % 2 != 0)
            throw Error::config("lte: n_frequencies must be positive and even, got " +
                                std::to_string(k));
        if (depth < 1) throw Error::config("lte: decoder depth must be >= 1");
        amp = nn::LinearLayer<T>(reg, name + ".amp", c_in, k, rng);
        freq = nn::LinearLayer<T>(reg, name + ".freq", c_in, 3 * k, rng);
        phase = nn::LinearLayer<T>(reg, name + ".phase", c_in, k, rng);
        int64_t in = k + 3;
        for (int64_t d = 0; d < depth; ++d) {
            int64_t out = d + 1 == depth ? c_out : hidden;
            mlp.emplace_back(reg, name + ".mlp" + std::to_string(d), in, out, rng);
            in = out;
        }
    }

    // encoding alone: A * sin(pi (F.delta + P)); delta is (Q,3) constant
    ad::Var<T> encode(const ad::Var<T>& feat_rows, const ad::Tensor<T>& delta) const {
        const int64_t q = feat_rows.shape()[0];
        if (feat_rows.shape()[1] != c_in)
            throw Error::config("lte: feature channels " + std::to_string(feat_rows.shape()[1]) +
                                " do not match configured input channels " + std::to_string(c_in));
        ad::Var<T> A = amp(feat_rows);
        ad::Var<T> Fq = freq(feat_rows);  // (Q, 3k) laid out [Fx | Fy | Fz]
        ad::Var<T> P = phase(feat_rows);
        std::array<std::vector<T>, 3> d;
        for (int a = 0; a < 3; ++a) {
            d[a].resize(q);
            for (int64_t r = 0; r < q; ++r) d[a][r] = delta[r * 3 + a];
        }
        ad::Var<T> arg = ad::scale_rows(ad::slice_cols(Fq, 0, k), d[0]);
        arg = ad::add(arg, ad::scale_rows(ad::slice_cols(Fq, k, k), d[1]));
        arg = ad::add(arg, ad::scale_rows(ad::slice_cols(Fq, 2 * k, k), d[2]));
        arg = ad::add(arg, P);
        return ad::mul(A, ad::sin_op(ad::scale(arg, static_cast<T>(kPi))));
    }

    ad::Var<T> operator()(const ad::Var<T>& feat_rows, const ad::Tensor<T>& delta,
                          const ad::Tensor<T>& cell) const {
        ad::Var<T> x = ad::concat_cols(encode(feat_rows, delta), ad::Var<T>(cell));
        for (size_t i = 0; i < mlp.size(); ++i) {
            x = mlp[i](x);
            if (i + 1 < mlp.size()) x = ad::silu(x);
        }
        return x;
    }
};

// Spec'd entry point: resample channel-major features from src_grid onto
// `queries` with an arbitrary INR. Returns (Cout, queries.shape).
template <class T, class InrFn>
ad::Tensor<T> liif_resample(const ad::Tensor<T>& features, const coords::CoordGrid& src_grid,
                            const coords::CoordGrid& queries, InrFn&& fn,
                            WeightKind kind = WeightKind::trilinear) {
    if (features.rank() < 2 || features.size() / features.dim(0) != src_grid.num_points())
        throw Error::contract("liif_resample: features do not match source grid");
    ad::NoGrad ng;
    auto table = build_resample_table<T>(src_grid, queries, kind);
    ad::Var<T> out = ensemble_resample(ad::Var<T>(features), table, fn);
    return ad::rows_to_channels(out, ad::Shape{queries.shape[0], queries.shape[1],
                                               queries.shape[2]})
        .value();
}

// --------------------------------------------------------------------------
// plain trilinear interpolation (reference path / ablation)
// --------------------------------------------------------------------------

inline ad::Tensor<float> trilinear_resample_channels(const ad::Tensor<float>& features,
                                                     const coords::CoordGrid& src_grid,
                                                     const coords::CoordGrid& queries) {
    if (features.rank() < 2 || features.size() / features.dim(0) != src_grid.num_points())
        throw Error::contract("trilinear_resample: features do not match source grid");
    const int64_t C = features.dim(0);
    const int64_t S = src_grid.num_points();
    const int64_t Q = queries.num_points();
    ad::Tensor<float> out({C, queries.shape[0], queries.shape[1], queries.shape[2]});
    int64_t q = 0;
    for (int64_t i = 0; i < queries.shape[0]; ++i)
        for (int64_t j = 0; j < queries.shape[1]; ++j)
            for (int64_t k = 0; k < queries.shape[2]; ++k, ++q) {
                LocalEnsemble e = local_ensemble(src_grid, queries.coord(i, j, k));
                for (int64_t c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int n = 0; n < 8; ++n) {
                        const auto& ni = e.neighbor_indices[n];
                        int64_t f =
                            (ni[0] * src_grid.shape[1] + ni[1]) * src_grid.shape[2] + ni[2];
                        acc += e.weights[n] * static_cast<double>(features[c * S + f]);
                    }
                    out[c * Q + q] = static_cast<float>(acc);
                }
            }
    return out;
}

inline Volume trilinear_resample(const Volume& src, const coords::CoordGrid& queries) {
    src.validate();
    Volume out;
    out.modality = src.modality;
    out.grid = queries;
    ad::Tensor<float> ch = src.data;
    ch = ch.reshaped({1, src.grid.shape[0], src.grid.shape[1], src.grid.shape[2]});
    ad::Tensor<float> res = trilinear_resample_channels(ch, src.grid, queries);
    out.data = res.reshaped({queries.shape[0], queries.shape[1], queries.shape[2]});
    return out;
}

}  // namespace cvox::inr
