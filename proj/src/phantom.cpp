#include "cvox/phantom.hpp"

#include <cmath>

namespace cvox::phantom {

namespace {

constexpr double kPi = 3.14159265358979323846;

// cubic smoothstep on [0,1]
double smoothstep(double x) {
    x = std::clamp(x, 0.0, 1.0);
    return x * x * (3.0 - 2.0 * x);
}

// 0..1 ramp over the soft edge: s is a signed mm distance (positive inside)
double edge_alpha(double s, double edge_mm) { return smoothstep(s / edge_mm + 0.5); }

}  // namespace

void PhantomSpec::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (!(fov_mm[a] > 0.0)) throw Error::config("phantom: field of view must be positive");
        if (!(spacing_mm[a] > 0.0)) throw Error::config("phantom: spacing must be positive");
    }
    if (n_ellipsoids < 0 || n_shells < 0 || n_textures < 0)
        throw Error::config("phantom: structure counts must be non-negative");
    if (!(edge_mm > 0.0)) throw Error::config("phantom: edge width must be positive");
    if (noise_sigma < 0.0) throw Error::config("phantom: noise sigma must be non-negative");
}

Scene::Scene(const PhantomSpec& spec) : edge_mm_(spec.edge_mm) {
    spec.validate();
    // Structure parameters depend only on the structure seed and the FoV —
    // never on the rasterization spacing.
    Rng rng(mix_seed(spec.structure_seed, 0x7363656e65ULL));  // "scene"
    const coords::Vec3 half = spec.fov_mm * 0.5;
    const double fmin = spec.fov_mm.minCoeff();
    auto draw_center = [&](double margin_frac) {
        coords::Vec3 c;
        for (int a = 0; a < 3; ++a) c[a] = rng.uniform(-half[a], half[a]) * margin_frac;
        return c;
    };
    for (int s = 0; s < spec.n_ellipsoids; ++s) {
        Ellipsoid e;
        e.center = draw_center(0.45);
        for (int a = 0; a < 3; ++a) e.semiaxes[a] = rng.uniform(0.14, 0.26) * spec.fov_mm[a];
        e.intensity = rng.uniform(0.55, 0.9);
        ellipsoids_.push_back(e);
    }
    for (int s = 0; s < spec.n_shells; ++s) {
        Shell sh;
        sh.center = draw_center(0.35);
        sh.radius = rng.uniform(0.22, 0.34) * fmin;
        sh.thickness = rng.uniform(2.5, 4.5);
        sh.intensity = rng.uniform(0.6, 1.0);
        shells_.push_back(sh);
    }
    for (int s = 0; s < spec.n_textures; ++s) {
        TextureBlob t;
        t.center = draw_center(0.4);
        t.radius = rng.uniform(0.18, 0.3) * fmin;
        for (int a = 0; a < 3; ++a) t.freq[a] = rng.uniform(0.03, 0.06);
        t.phase = rng.uniform(0.0, 2.0 * kPi);
        t.lo = rng.uniform(0.25, 0.4);
        t.hi = t.lo + rng.uniform(0.2, 0.35);
        textures_.push_back(t);
    }
}

double Scene::coverage(const coords::Vec3& p, double& intensity) const {
    // max-combine: intensity is the max of alpha-weighted structure values,
    // coverage is the max alpha
    double out_alpha = 0.0;
    double out_value = 0.0;
    auto blend = [&](double alpha, double value) {
        if (alpha * value > out_value) out_value = alpha * value;
        out_alpha = std::max(out_alpha, alpha);
    };
    for (const auto& e : ellipsoids_) {
        coords::Vec3 d = p - e.center;
        double q = std::sqrt(d[0] * d[0] / (e.semiaxes[0] * e.semiaxes[0]) +
                             d[1] * d[1] / (e.semiaxes[1] * e.semiaxes[1]) +
                             d[2] * d[2] / (e.semiaxes[2] * e.semiaxes[2]));
        // approximate signed mm distance to the ellipsoid surface
        double s = (1.0 - q) * e.semiaxes.minCoeff();
        blend(edge_alpha(s, edge_mm_), e.intensity);
    }
    for (const auto& sh : shells_) {
        double r = (p - sh.center).norm();
        double s = sh.thickness * 0.5 - std::abs(r - sh.radius);
        blend(edge_alpha(s, edge_mm_), sh.intensity);
    }
    for (const auto& t : textures_) {
        double r = (p - t.center).norm();
        double s = t.radius - r;
        double a = edge_alpha(s, edge_mm_);
        if (a <= 0.0) continue;
        double osc = std::sin(2.0 * kPi * t.freq.dot(p) + t.phase);
        double v = t.lo + (t.hi - t.lo) * 0.5 * (1.0 + osc);
        blend(a, v);
    }
    intensity = out_value;
    return out_alpha;
}

float Scene::value(const coords::Vec3& p) const {
    double intensity = 0.0;
    coverage(p, intensity);
    return static_cast<float>(std::clamp(intensity, 0.0, 1.0));
}

bool Scene::foreground(const coords::Vec3& p) const {
    double intensity = 0.0;
    return coverage(p, intensity) >= 0.5;
}

PhantomResult generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Scene scene(spec);

    const coords::Vec3 half = spec.fov_mm * 0.5;
    std::array<int64_t, 3> shape{};
    for (int a = 0; a < 3; ++a)
        shape[a] = static_cast<int64_t>(std::floor(spec.fov_mm[a] / spec.spacing_mm[a] + 1e-9)) + 1;
    coords::Affine aff = coords::Affine::scaling(spec.spacing_mm, -half);
    coords::CoordSpace space(-half, half);

    PhantomResult out;
    out.volume.modality = Modality::phantom;
    out.volume.grid = coords::make_grid(aff, shape, space.expanded(0.1));
    out.volume.data = ad::Tensor<float>({shape[0], shape[1], shape[2]});
    out.mask.grid = out.volume.grid;
    out.mask.data.resize(out.volume.num_voxels());

    int64_t f = 0;
    for (int64_t i = 0; i < shape[0]; ++i)
        for (int64_t j = 0; j < shape[1]; ++j)
            for (int64_t k = 0; k < shape[2]; ++k, ++f) {
                coords::Vec3 p = out.volume.grid.coord(i, j, k);
                double intensity = 0.0;
                double alpha = scene.coverage(p, intensity);
                out.volume.data[f] = static_cast<float>(std::clamp(intensity, 0.0, 1.0));
                out.mask.data[f] = alpha >= 0.5;
            }

    if (spec.noise_sigma > 0.0) {
        // noise stream keyed on the spacing too: each rasterization is an
        // independent "acquisition"
        uint64_t sp_hash = fnv1a(spec.spacing_mm.data(), 3 * sizeof(double));
        Rng noise(mix_seed(spec.structure_seed, 0x6e6f697365ULL, sp_hash));
        for (auto& v : out.volume.data.vec())
            v = std::clamp(v + static_cast<float>(noise.normal(0.0, spec.noise_sigma)), 0.0f, 1.0f);
    }
    return out;
}

}  // namespace cvox::phantom
