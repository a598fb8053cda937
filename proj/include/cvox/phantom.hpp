#pragma once

// Synthetic multi-resolution phantoms: an analytic 3D scene (ellipsoids,
// spherical shells, sinusoidal texture blobs) that can be rasterized at any
// spacing. Soft edges have a fixed physical width so rasterizations at
// different spacings agree after resampling onto a common grid.

#include "cvox/volume.hpp"

namespace cvox::phantom {

struct PhantomSpec {
    coords::Vec3 fov_mm{32.0, 32.0, 32.0};   // scene box is [-fov/2, fov/2]
    coords::Vec3 spacing_mm{1.0, 1.0, 1.0};  // rasterization spacing
    uint64_t structure_seed = 0;
    int n_ellipsoids = 3;
    int n_shells = 2;
    int n_textures = 2;
    double edge_mm = 2.0;      // soft-edge width shared by all structures
    double noise_sigma = 0.0;  // additive Gaussian noise after rasterization

    void validate() const;
};

// Continuous scene sampled at arbitrary physical points. Built once per
// structure seed; rasterization at any spacing just evaluates it.
class Scene {
public:
    Scene(const PhantomSpec& spec);

    // intensity in [0,1]; foreground = blended coverage >= 0.5
    float value(const coords::Vec3& p) const;
    bool foreground(const coords::Vec3& p) const;

    // max structure coverage alpha at p; `intensity` gets the blended value
    double coverage(const coords::Vec3& p, double& intensity) const;

private:
    struct Ellipsoid {
        coords::Vec3 center;
        coords::Vec3 semiaxes;
        double intensity;
    };
    struct Shell {
        coords::Vec3 center;
        double radius, thickness, intensity;
    };
    struct TextureBlob {
        coords::Vec3 center;
        double radius;
        coords::Vec3 freq;  // cycles per mm
        double phase, lo, hi;
    };

    double edge_mm_;
    std::vector<Ellipsoid> ellipsoids_;
    std::vector<Shell> shells_;
    std::vector<TextureBlob> textures_;
};

struct PhantomResult {
    Volume volume;
    TissueMask mask;
};

PhantomResult generate_phantom(const PhantomSpec& spec);

}  // namespace cvox::phantom
