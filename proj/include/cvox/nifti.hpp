#pragma once

// NIfTI-1 single-file I/O (.nii and .nii.gz). Volumes are float32 with the
// grid affine stored in the sform; masks are uint8; multi-channel latents
// use dim[0]=5 with the channel count in dim[5].

#include <string>

#include "cvox/volume.hpp"

namespace cvox::nifti {

Volume load_volume(const std::string& path);
void save_volume(const Volume& volume, const std::string& path);

TissueMask load_mask(const std::string& path);
void save_mask(const TissueMask& mask, const std::string& path);

// channels-first field (C, D, H, W) on a grid, e.g. an encoded latent
struct ChannelVolume {
    ad::Tensor<float> data;  // (C, shape[0], shape[1], shape[2])
    coords::CoordGrid grid;

    void validate() const;
    int64_t channels() const { return data.dim(0); }
};

ChannelVolume load_channels(const std::string& path);
void save_channels(const ChannelVolume& cv, const std::string& path);

}  // namespace cvox::nifti
