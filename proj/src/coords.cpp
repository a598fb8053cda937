#include "cvox/coords.hpp"

#include <sstream>

namespace cvox::coords {

Vec3 voxel_to_physical(const Affine& affine, const Vec3& index) {
    affine.validate();
    return affine.matrix * index + affine.origin;
}

Vec3 physical_to_voxel(const Affine& affine, const Vec3& point) {
    affine.validate();
    return affine.matrix.inverse() * (point - affine.origin);
}

namespace {

std::string vec_str(const Vec3& v) {
    std::ostringstream os;
    os << "(" << v[0] << ", " << v[1] << ", " << v[2] << ")";
    return os.str();
}

}  // namespace

CoordGrid make_grid(const Affine& affine, const std::array<int64_t, 3>& shape,
                    const CoordSpace& space) {
    affine.validate();
    for (int a = 0; a < 3; ++a)
        if (shape[a] < 1) throw Error::contract("make_grid: shape must be >= 1 per axis");

    CoordGrid g;
    g.affine = affine;
    g.shape = shape;
    g.space = space;

    // grid points are convex combinations of the corner images, so corner
    // containment implies grid containment
    int n = 0;
    for (int64_t i : {int64_t(0), shape[0] - 1})
        for (int64_t j : {int64_t(0), shape[1] - 1})
            for (int64_t k : {int64_t(0), shape[2] - 1}) {
                Vec3 c = g.coord(i, j, k);
                if (!space.contains(c)) {
                    std::ostringstream os;
                    os << "make_grid: corner index (" << i << "," << j << "," << k << ") at "
                       << vec_str(c) << " lies outside the coordinate space ["
                       << vec_str(space.lower) << ", " << vec_str(space.upper) << "]";
                    throw Error::data(os.str());
                }
                ++n;
            }
    (void)n;
    return g;
}

CoordGrid exscribe(const CoordGrid& inner, const Vec3& spacing, const Vec3& buffer) {
    for (int a = 0; a < 3; ++a) {
        if (!(spacing[a] > 0.0)) throw Error::contract("exscribe: spacing must be positive");
        if (buffer[a] < 0.0) throw Error::contract("exscribe: buffer must be >= 0");
    }

    const Mat3 frame = inner.affine.directions();
    const Mat3 frame_inv = frame.inverse();

    Vec3 lo_f, hi_f;
    inner.bounds_in_frame(frame_inv, lo_f, hi_f);

    const Vec3 anchor_f = lo_f - buffer;
    const Vec3 top_f = hi_f + buffer;

    std::array<int64_t, 3> shape{};
    for (int a = 0; a < 3; ++a) {
        const double extent = top_f[a] - anchor_f[a];
        shape[a] = static_cast<int64_t>(std::ceil(extent / spacing[a] - 1e-9)) + 1;
    }

    Affine out;
    out.matrix = frame * spacing.asDiagonal();
    out.origin = frame * anchor_f;

    try {
        return make_grid(out, shape, inner.space);
    } catch (const Error& e) {
        throw Error::data(std::string("exscribe: outer grid exceeds the coordinate space: ") +
                          e.what());
    }
}

Mat3 euler_to_rotation(double ax, double by, double cz) {
    Mat3 rx = Eigen::AngleAxisd(ax, Vec3::UnitX()).toRotationMatrix();
    Mat3 ry = Eigen::AngleAxisd(by, Vec3::UnitY()).toRotationMatrix();
    Mat3 rz = Eigen::AngleAxisd(cz, Vec3::UnitZ()).toRotationMatrix();
    return rz * ry * rx;
}

Vec3 rotation_to_euler(const Mat3& r) {
    // inverse of euler_to_rotation; gimbal-safe enough for the small
    // orientation perturbations this toolkit deals in
    const double by = std::asin(-std::clamp(r(2, 0), -1.0, 1.0));
    double ax, cz;
    if (std::abs(std::cos(by)) > 1e-9) {
        ax = std::atan2(r(2, 1), r(2, 2));
        cz = std::atan2(r(1, 0), r(0, 0));
    } else {
        ax = std::atan2(-r(1, 2), r(1, 1));
        cz = 0.0;
    }
    return {ax, by, cz};
}

}  // namespace cvox::coords
