#pragma once

// Minimal 8-bit grayscale PNG writer (zlib-backed) plus a helper that renders
// the three orthogonal mid-slices of a volume side by side for quick visual
// inspection of reconstructions and samples.

#include <cstdint>
#include <string>
#include <vector>

#include "cvox/volume.hpp"

namespace cvox::png {

struct GrayImage {
    int64_t width = 0;
    int64_t height = 0;
    std::vector<uint8_t> pixels;  // row-major, width*height entries

    void validate() const;
};

// Encodes and writes an 8-bit grayscale PNG.
void write_gray_png(const GrayImage& image, const std::string& path);

// Renders the axial/coronal/sagittal mid-slices of `v` into one row of three
// tiles separated by a 2px gutter, intensity-normalized over the whole volume.
GrayImage slice_panel(const Volume& v);

void write_slice_panel(const Volume& v, const std::string& path);

}  // namespace cvox::png
