#include "cvox/volume.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace cvox {

const char* modality_name(Modality m) {
    switch (m) {
        case Modality::mri: return "mri";
        case Modality::ct: return "ct";
        case Modality::phantom: return "phantom";
    }
    return "unknown";
}

Modality modality_from_name(const std::string& name) {
    if (name == "mri") return Modality::mri;
    if (name == "ct") return Modality::ct;
    if (name == "phantom") return Modality::phantom;
    throw Error::config("unknown modality '" + name + "' (expected mri|ct|phantom)");
}

void Volume::validate() const {
    if (data.rank() != 3) throw Error::contract("volume data must be rank 3");
    for (int a = 0; a < 3; ++a)
        if (data.dim(a) != grid.shape[a])
            throw Error::contract("volume data shape " + ad::shape_str(data.shape()) +
                                  " does not match grid shape");
    if (!data.all_finite()) throw Error::data("volume contains non-finite values");
}

void TissueMask::validate() const {
    if (static_cast<int64_t>(data.size()) != grid.num_points())
        throw Error::contract("mask size does not match grid");
}

int64_t TissueMask::count_true() const {
    int64_t n = 0;
    for (uint8_t v : data) n += (v != 0);
    return n;
}

double percentile(const std::vector<float>& values, double p) {
    if (values.empty()) throw Error::contract("percentile of empty set");
    if (p < 0.0 || p > 100.0) throw Error::contract("percentile rank outside [0, 100]");
    std::vector<float> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(rank));
    const double frac = rank - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

Volume normalize_percentile(const Volume& volume) {
    volume.validate();
    const double p99 = percentile(volume.data.vec(), 99.0);
    Volume out = volume;
    if (p99 == 0.0) return out;  // all-zero (or zero-percentile) guard
    const float inv = static_cast<float>(1.0 / p99);
    for (auto& v : out.data.vec()) v *= inv;
    return out;
}

Volume hu_scale(const Volume& volume) {
    volume.validate();
    if (volume.modality != Modality::ct)
        throw Error::contract("hu_scale expects a CT volume (values in HU)");
    Volume out = volume;
    for (auto& v : out.data.vec()) {
        float u = (v + 1000.0f) / 3000.0f;
        v = std::clamp(u, 0.0f, 1.0f);
    }
    return out;
}

namespace {

// Marks every voxel of `open` reachable from the array boundary through
// zero-mask voxels, 6-connectivity. Used to identify enclosed holes.
void flood_from_boundary(const std::vector<uint8_t>& mask, const std::array<int64_t, 3>& shape,
                         std::vector<uint8_t>& open) {
    const int64_t D = shape[0], H = shape[1], W = shape[2];
    auto flat = [&](int64_t i, int64_t j, int64_t k) { return (i * H + j) * W + k; };
    std::deque<std::array<int64_t, 3>> queue;
    auto push = [&](int64_t i, int64_t j, int64_t k) {
        int64_t f = flat(i, j, k);
        if (!mask[f] && !open[f]) {
            open[f] = 1;
            queue.push_back({i, j, k});
        }
    };
    for (int64_t i = 0; i < D; ++i)
        for (int64_t j = 0; j < H; ++j)
            for (int64_t k = 0; k < W; ++k)
                if (i == 0 || j == 0 || k == 0 || i == D - 1 || j == H - 1 || k == W - 1)
                    push(i, j, k);
    while (!queue.empty()) {
        auto [i, j, k] = queue.front();
        queue.pop_front();
        if (i > 0) push(i - 1, j, k);
        if (i < D - 1) push(i + 1, j, k);
        if (j > 0) push(i, j - 1, k);
        if (j < H - 1) push(i, j + 1, k);
        if (k > 0) push(i, j, k - 1);
        if (k < W - 1) push(i, j, k + 1);
    }
}

}  // namespace

TissueMask ct_tissue_mask(const Volume& volume) {
    volume.validate();
    TissueMask mask;
    mask.grid = volume.grid;
    mask.data.resize(volume.num_voxels());
    for (int64_t f = 0; f < volume.num_voxels(); ++f) mask.data[f] = volume.data[f] >= -200.0f;
    // hole fill: anything not reachable from the boundary is enclosed
    std::vector<uint8_t> open(mask.data.size(), 0);
    flood_from_boundary(mask.data, volume.grid.shape, open);
    for (size_t f = 0; f < mask.data.size(); ++f)
        if (!open[f]) mask.data[f] = 1;
    if (mask.count_true() == 0) throw Error::data("ct_tissue_mask: mask is empty after fill");
    return mask;
}

TissueMask positive_tissue_mask(const Volume& volume) {
    volume.validate();
    TissueMask mask;
    mask.grid = volume.grid;
    mask.data.resize(volume.num_voxels());
    for (int64_t f = 0; f < volume.num_voxels(); ++f) mask.data[f] = volume.data[f] > 0.0f;
    return mask;
}

Volume sample_patch(const Volume& volume, const TissueMask& mask,
                    const std::array<int64_t, 3>& patch_shape, uint64_t seed) {
    volume.validate();
    mask.validate();
    if (!mask.grid.same_geometry(volume.grid))
        throw Error::contract("sample_patch: mask grid does not match volume grid");
    for (int a = 0; a < 3; ++a)
        if (patch_shape[a] < 1 || patch_shape[a] > volume.grid.shape[a])
            throw Error::contract("sample_patch: patch shape exceeds volume shape on axis " +
                                  std::to_string(a));
    std::vector<int64_t> candidates;
    for (int64_t f = 0; f < static_cast<int64_t>(mask.data.size()); ++f)
        if (mask.data[f]) candidates.push_back(f);
    if (candidates.empty()) throw Error::data("sample_patch: tissue mask is empty");

    Rng rng(mix_seed(seed, 0x7061746368ULL));  // "patch"
    const int64_t f = candidates[rng.index(candidates.size())];
    const auto& vs = volume.grid.shape;
    std::array<int64_t, 3> center = {f / (vs[1] * vs[2]), (f / vs[2]) % vs[1], f % vs[2]};
    std::array<int64_t, 3> start{};
    for (int a = 0; a < 3; ++a) {
        start[a] = center[a] - patch_shape[a] / 2;
        start[a] = std::clamp<int64_t>(start[a], 0, vs[a] - patch_shape[a]);
    }

    Volume patch;
    patch.modality = volume.modality;
    coords::Affine aff = volume.grid.affine;
    aff.origin = volume.grid.coord(start[0], start[1], start[2]);
    patch.grid = coords::make_grid(aff, patch_shape, volume.grid.space);
    patch.data = ad::Tensor<float>({patch_shape[0], patch_shape[1], patch_shape[2]});
    for (int64_t i = 0; i < patch_shape[0]; ++i)
        for (int64_t j = 0; j < patch_shape[1]; ++j)
            for (int64_t k = 0; k < patch_shape[2]; ++k)
                patch.at(i, j, k) = volume.at(start[0] + i, start[1] + j, start[2] + k);
    return patch;
}

Volume crop_pad_fov(const Volume& volume, const coords::Vec3& target_lo,
                    const coords::Vec3& target_hi, float fill) {
    volume.validate();
    for (int a = 0; a < 3; ++a)
        if (!(target_lo[a] <= target_hi[a]))
            throw Error::contract("crop_pad_fov: target bounds must satisfy lo <= hi");

    const coords::Mat3 frame = volume.grid.affine.directions();
    const coords::Mat3 frame_inv = frame.inverse();
    coords::Vec3 vol_lo, vol_hi;
    volume.grid.bounds_in_frame(frame_inv, vol_lo, vol_hi);
    const coords::Vec3 tlo = frame_inv * target_lo;
    const coords::Vec3 thi = frame_inv * target_hi;
    const coords::Vec3 sp = volume.grid.spacing();

    // phase-locked to the source grid so every output node coincides with a
    // (possibly virtual) source node — copy or fill, never interpolate
    std::array<int64_t, 3> off{}, shape{};
    for (int a = 0; a < 3; ++a) {
        off[a] = static_cast<int64_t>(std::floor((tlo[a] - vol_lo[a]) / sp[a] + 1e-9));
        int64_t hi_idx = static_cast<int64_t>(std::ceil((thi[a] - vol_lo[a]) / sp[a] - 1e-9));
        shape[a] = std::max<int64_t>(hi_idx - off[a] + 1, 1);
    }

    coords::Affine aff = volume.grid.affine;
    aff.origin = volume.grid.coord(off[0], off[1], off[2]);
    coords::CoordSpace space = volume.grid.space;
    {
        // widen the space if grid-phase overshoot pokes past it
        coords::CoordGrid probe;
        probe.affine = aff;
        probe.shape = shape;
        coords::Vec3 lo, hi;
        probe.bounds(lo, hi);
        space = coords::CoordSpace(lo.cwiseMin(space.lower), hi.cwiseMax(space.upper));
    }

    Volume out;
    out.modality = volume.modality;
    out.grid = coords::make_grid(aff, shape, space);
    out.data = ad::Tensor<float>({shape[0], shape[1], shape[2]}, fill);
    const auto& vs = volume.grid.shape;
    for (int64_t i = 0; i < shape[0]; ++i) {
        int64_t si = i + off[0];
        if (si < 0 || si >= vs[0]) continue;
        for (int64_t j = 0; j < shape[1]; ++j) {
            int64_t sj = j + off[1];
            if (sj < 0 || sj >= vs[1]) continue;
            for (int64_t k = 0; k < shape[2]; ++k) {
                int64_t sk = k + off[2];
                if (sk < 0 || sk >= vs[2]) continue;
                out.at(i, j, k) = volume.at(si, sj, sk);
            }
        }
    }
    return out;
}

}  // namespace cvox
