#pragma once

// Volumes on physical coordinate grids, intensity preprocessing (percentile
// normalization, HU windowing), tissue masks, and mask-driven patch sampling.

#include <cstdint>
#include <vector>

#include "cvox/coords.hpp"
#include "cvox/tensor.hpp"

namespace cvox {

enum class Modality { mri, ct, phantom };

const char* modality_name(Modality m);
Modality modality_from_name(const std::string& name);

// 3D scalar field sampled on a physical grid. data shape is
// (shape[0], shape[1], shape[2]) row-major (last index fastest), matching
// grid.shape; voxel (i,j,k) sits at grid.coord(i,j,k).
struct Volume {
    ad::Tensor<float> data;
    coords::CoordGrid grid;
    Modality modality = Modality::phantom;

    void validate() const;
    int64_t num_voxels() const { return data.size(); }
    float& at(int64_t i, int64_t j, int64_t k) {
        return data[(i * grid.shape[1] + j) * grid.shape[2] + k];
    }
    float at(int64_t i, int64_t j, int64_t k) const {
        return data[(i * grid.shape[1] + j) * grid.shape[2] + k];
    }
};

// Boolean field marking trainable (tissue) voxels of a companion volume.
struct TissueMask {
    std::vector<uint8_t> data;  // 0/1 per voxel, same layout as Volume::data
    coords::CoordGrid grid;

    void validate() const;
    int64_t count_true() const;
    bool at(int64_t i, int64_t j, int64_t k) const {
        return data[(i * grid.shape[1] + j) * grid.shape[2] + k] != 0;
    }
};

// Linear-interpolated order statistic, p in [0,100].
double percentile(const std::vector<float>& values, double p);

// Divides by the 99th percentile so that value lands at 1.0. All-zero
// volumes pass through unchanged.
Volume normalize_percentile(const Volume& volume);

// Maps the CT window [-1000, 2000] HU linearly onto [0, 1], clamping
// everything outside.
Volume hu_scale(const Volume& volume);

// HU >= -200 threshold followed by a morphological hole fill: background
// components not connected to the array boundary (6-connectivity) are
// folded into the mask so enclosed air pockets count as tissue.
TissueMask ct_tissue_mask(const Volume& volume);

// Mask for skull-stripped MRI-style data: strictly positive intensities.
TissueMask positive_tissue_mask(const Volume& volume);

// Deterministic patch draw: picks a mask voxel as the nominal center and
// shifts the patch inward where it would exit the volume.
Volume sample_patch(const Volume& volume, const TissueMask& mask,
                    const std::array<int64_t, 3>& patch_shape, uint64_t seed);

// Crops/pads to a grid covering [target_lo, target_hi] (expressed in the
// grid's own direction frame) at native spacing. Pure voxel copy, no
// interpolation; uncovered voxels get `fill`.
Volume crop_pad_fov(const Volume& volume, const coords::Vec3& target_lo,
                    const coords::Vec3& target_hi, float fill);

}  // namespace cvox
