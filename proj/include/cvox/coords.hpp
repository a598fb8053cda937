#pragma once

// Physical coordinate geometry: the bounded space, voxel<->mm affine maps,
// rectilinear grids, and the exscribe construction that nests grids with
// buffer space.

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <vector>

#include "cvox/core.hpp"

namespace cvox::coords {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// Bounded axis-aligned region of physical space that must contain every
// coordinate grid in play.
struct CoordSpace {
    Vec3 lower{-100.0, -100.0, -100.0};
    Vec3 upper{100.0, 100.0, 100.0};

    CoordSpace() = default;
    CoordSpace(const Vec3& lo, const Vec3& hi) : lower(lo), upper(hi) {
        for (int a = 0; a < 3; ++a)
            if (!(lower[a] < upper[a]))
                throw Error::contract("coord space: lower must be < upper per axis");
    }

    bool contains(const Vec3& p, double tol = 1e-9) const {
        for (int a = 0; a < 3; ++a)
            if (p[a] < lower[a] - tol || p[a] > upper[a] + tol) return false;
        return true;
    }

    CoordSpace expanded(double frac) const {
        const Vec3 margin = (upper - lower) * frac * 0.5;
        return CoordSpace(lower - margin, upper + margin);
    }
};

// physical = matrix * index + origin; columns of `matrix` are the mm step
// vectors per grid axis
struct Affine {
    Mat3 matrix = Mat3::Identity();
    Vec3 origin = Vec3::Zero();

    Affine() = default;
    Affine(const Mat3& m, const Vec3& o) : matrix(m), origin(o) {}

    static Affine scaling(const Vec3& spacing, const Vec3& origin = Vec3::Zero()) {
        Affine a;
        a.matrix = spacing.asDiagonal();
        a.origin = origin;
        return a;
    }

    void validate() const {
        if (std::abs(matrix.determinant()) <= 1e-12)
            throw Error::data("invalid affine: |det| <= 1e-12");
        for (int a = 0; a < 3; ++a)
            if (!(matrix.col(a).norm() > 0.0)) throw Error::data("invalid affine: zero spacing");
        if (!matrix.allFinite() || !origin.allFinite())
            throw Error::data("invalid affine: non-finite entries");
    }

    Vec3 spacing() const {
        return {matrix.col(0).norm(), matrix.col(1).norm(), matrix.col(2).norm()};
    }

    // normalized step directions (columns)
    Mat3 directions() const {
        Mat3 d;
        for (int a = 0; a < 3; ++a) d.col(a) = matrix.col(a) / matrix.col(a).norm();
        return d;
    }

    Mat4 homogeneous() const {
        Mat4 h = Mat4::Identity();
        h.block<3, 3>(0, 0) = matrix;
        h.block<3, 1>(0, 3) = origin;
        return h;
    }

    static Affine from_homogeneous(const Mat4& h) {
        return Affine(h.block<3, 3>(0, 0), h.block<3, 1>(0, 3));
    }
};

Vec3 voxel_to_physical(const Affine& affine, const Vec3& index);
Vec3 physical_to_voxel(const Affine& affine, const Vec3& point);

// Rectilinear grid of shape[0] x shape[1] x shape[2] physical coordinates,
// guaranteed to lie inside `space`. Construct through make_grid.
struct CoordGrid {
    Affine affine;
    std::array<int64_t, 3> shape{1, 1, 1};
    CoordSpace space;

    Vec3 coord(int64_t i, int64_t j, int64_t k) const {
        return affine.matrix * Vec3(double(i), double(j), double(k)) + affine.origin;
    }

    int64_t num_points() const { return shape[0] * shape[1] * shape[2]; }
    Vec3 spacing() const { return affine.spacing(); }

    std::array<Vec3, 8> corners() const {
        std::array<Vec3, 8> out;
        int n = 0;
        for (int64_t i : {int64_t(0), shape[0] - 1})
            for (int64_t j : {int64_t(0), shape[1] - 1})
                for (int64_t k : {int64_t(0), shape[2] - 1}) out[n++] = coord(i, j, k);
        return out;
    }

    // node-wise axis-aligned bounding box in physical space
    void bounds(Vec3& lo, Vec3& hi) const {
        auto cs = corners();
        lo = cs[0];
        hi = cs[0];
        for (const auto& c : cs) {
            lo = lo.cwiseMin(c);
            hi = hi.cwiseMax(c);
        }
    }

    // bounding box expressed in an arbitrary (invertible) direction frame
    void bounds_in_frame(const Mat3& frame_inv, Vec3& lo, Vec3& hi) const {
        auto cs = corners();
        lo = frame_inv * cs[0];
        hi = lo;
        for (const auto& c : cs) {
            Vec3 f = frame_inv * c;
            lo = lo.cwiseMin(f);
            hi = hi.cwiseMax(f);
        }
    }

    bool same_geometry(const CoordGrid& other, double tol = 1e-9) const {
        return shape == other.shape && (affine.matrix - other.affine.matrix).norm() < tol &&
               (affine.origin - other.affine.origin).norm() < tol;
    }
};

CoordGrid make_grid(const Affine& affine, const std::array<int64_t, 3>& shape,
                    const CoordSpace& space);

// Smallest grid with the given spacing, axis-aligned with `inner`'s
// orientation, whose bounding box covers inner's box dilated by `buffer` on
// every face. One outer node lands exactly on the dilated lower corner.
CoordGrid exscribe(const CoordGrid& inner, const Vec3& spacing, const Vec3& buffer);

// intrinsic rotations, R = Rz(c) * Ry(b) * Rx(a), angles in radians
Mat3 euler_to_rotation(double ax, double by, double cz);
Vec3 rotation_to_euler(const Mat3& r);

}  // namespace cvox::coords
