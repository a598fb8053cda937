#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cvox/coords.hpp"
#include "cvox/core.hpp"

using namespace cvox;
using coords::Affine;
using coords::CoordGrid;
using coords::CoordSpace;
using coords::Mat3;
using coords::Vec3;

TEST_CASE("voxel/physical round trips are exact for oblique affines") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        Affine a;
        a.matrix = coords::euler_to_rotation(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                                             rng.uniform(-0.6, 0.6)) *
                   Vec3(rng.uniform(0.4, 3.0), rng.uniform(0.4, 3.0), rng.uniform(0.4, 3.0))
                       .asDiagonal();
        a.origin = Vec3(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50));
        const Vec3 idx(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-20, 20));
        const Vec3 p = coords::voxel_to_physical(a, idx);
        CHECK((coords::physical_to_voxel(a, p) - idx).norm() < 1e-9);
        const Vec3 q(rng.uniform(-80, 80), rng.uniform(-80, 80), rng.uniform(-80, 80));
        CHECK((coords::voxel_to_physical(a, coords::physical_to_voxel(a, q)) - q).norm() < 1e-9);
    }
}

TEST_CASE("affine accessors expose spacing and unit directions") {
    const Mat3 r = coords::euler_to_rotation(0.3, -0.2, 0.5);
    Affine a(r * Vec3(1.5, 2.0, 0.5).asDiagonal(), Vec3(1, 2, 3));
    a.validate();
    CHECK((a.spacing() - Vec3(1.5, 2.0, 0.5)).norm() < 1e-12);
    CHECK((a.directions() - r).norm() < 1e-12);
    CHECK((Affine::from_homogeneous(a.homogeneous()).matrix - a.matrix).norm() < 1e-15);

    Affine degenerate;
    degenerate.matrix.col(1).setZero();
    CHECK_THROWS_AS(degenerate.validate(), Error);
}

TEST_CASE("euler angles round trip through the rotation matrix") {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        // keep |pitch| away from the pi/2 gimbal singularity
        const double ax = rng.uniform(-3.0, 3.0), by = rng.uniform(-1.4, 1.4),
                     cz = rng.uniform(-3.0, 3.0);
        const Mat3 r = coords::euler_to_rotation(ax, by, cz);
        CHECK(std::abs(r.determinant() - 1.0) < 1e-12);
        CHECK((r * r.transpose() - Mat3::Identity()).norm() < 1e-12);
        const Vec3 e = coords::rotation_to_euler(r);
        CHECK((coords::euler_to_rotation(e[0], e[1], e[2]) - r).norm() < 1e-9);
    }
    // composition order: R = Rz * Ry * Rx
    const Mat3 got = coords::euler_to_rotation(0.2, 0.3, 0.4);
    const Mat3 want = coords::euler_to_rotation(0, 0, 0.4) * coords::euler_to_rotation(0, 0.3, 0) *
                      coords::euler_to_rotation(0.2, 0, 0);
    CHECK((got - want).norm() < 1e-12);
}

TEST_CASE("make_grid enforces containment in the coordinate space") {
    const CoordSpace space(Vec3(-10, -10, -10), Vec3(10, 10, 10));
    const Affine ok = Affine::scaling(Vec3(1, 1, 1), Vec3(-5, -5, -5));
    CoordGrid g = coords::make_grid(ok, {11, 11, 11}, space);
    CHECK((g.coord(0, 0, 0) - Vec3(-5, -5, -5)).norm() < 1e-12);
    CHECK((g.coord(10, 10, 10) - Vec3(5, 5, 5)).norm() < 1e-12);
    CHECK(g.num_points() == 11 * 11 * 11);

    // last node at -5 + 16 = 11 falls outside the space
    CHECK_THROWS_AS(coords::make_grid(ok, {17, 11, 11}, space), Error);
    CHECK_THROWS_AS(coords::make_grid(ok, {0, 4, 4}, space), Error);
}

TEST_CASE("grid bounds cover all corners in an arbitrary frame") {
    const CoordSpace space(Vec3(-100, -100, -100), Vec3(100, 100, 100));
    const Mat3 r = coords::euler_to_rotation(0.4, 0.2, -0.3);
    CoordGrid g = coords::make_grid(Affine(r * Vec3(1.0, 1.5, 2.0).asDiagonal(), Vec3(3, -2, 1)),
                                    {5, 6, 4}, space);
    Vec3 lo, hi, flo, fhi;
    g.bounds(lo, hi);
    g.bounds_in_frame(r.inverse(), flo, fhi);
    for (const auto& c : g.corners()) {
        for (int a = 0; a < 3; ++a) {
            CHECK(c[a] >= lo[a] - 1e-12);
            CHECK(c[a] <= hi[a] + 1e-12);
        }
        const Vec3 f = r.inverse() * c;
        for (int a = 0; a < 3; ++a) {
            CHECK(f[a] >= flo[a] - 1e-12);
            CHECK(f[a] <= fhi[a] + 1e-12);
        }
    }
    // in the grid's own frame the box extent is exactly (shape-1) * spacing
    CHECK((fhi - flo - Vec3(4 * 1.0, 5 * 1.5, 3 * 2.0)).norm() < 1e-12);
}

TEST_CASE("same_geometry distinguishes shape, spacing and origin") {
    const CoordSpace space;
    CoordGrid a = coords::make_grid(Affine::scaling(Vec3(1, 1, 1)), {4, 4, 4}, space);
    CoordGrid b = a;
    CHECK(a.same_geometry(b));
    b.affine.origin[0] += 1e-3;
    CHECK(!a.same_geometry(b));
    CoordGrid c = coords::make_grid(Affine::scaling(Vec3(2, 1, 1)), {4, 4, 4}, space);
    CHECK(!a.same_geometry(c));
    CoordGrid d = coords::make_grid(Affine::scaling(Vec3(1, 1, 1)), {4, 4, 5}, space);
    CHECK(!a.same_geometry(d));
}

TEST_CASE("exscribe matches the hand construction on axis-aligned grids") {
    const CoordSpace space(Vec3(-100, -100, -100), Vec3(100, 100, 100));
    // inner: 9 nodes at spacing 2 per axis starting at -3 => box [-3, 13]
    CoordGrid inner =
        coords::make_grid(Affine::scaling(Vec3(2, 2, 2), Vec3(-3, -3, -3)), {9, 9, 9}, space);
    const Vec3 spacing(3, 3, 3), buffer(2, 2, 2);
    CoordGrid outer = coords::exscribe(inner, spacing, buffer);

    // dilated box is [-5, 15], extent 20; ceil(20/3 - eps) + 1 = 8 nodes,
    // first node pinned to the dilated lower corner
    CHECK(outer.shape == std::array<int64_t, 3>{8, 8, 8});
    CHECK((outer.coord(0, 0, 0) - Vec3(-5, -5, -5)).norm() < 1e-12);
    CHECK((outer.spacing() - spacing).norm() < 1e-12);
    CHECK((outer.coord(7, 7, 7) - Vec3(16, 16, 16)).norm() < 1e-12);

    // exact-fit extent: spacing 4, buffer 0 over extent 16 needs exactly 5 nodes
    CoordGrid snug = coords::exscribe(inner, Vec3(4, 4, 4), Vec3(0, 0, 0));
    CHECK(snug.shape == std::array<int64_t, 3>{5, 5, 5});
    CHECK((snug.coord(4, 4, 4) - Vec3(13, 13, 13)).norm() < 1e-12);
}

TEST_CASE("exscribe covers and stays minimal for rotated inner grids") {
    const CoordSpace space(Vec3(-500, -500, -500), Vec3(500, 500, 500));
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        const Mat3 r = coords::euler_to_rotation(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                                                 rng.uniform(-0.6, 0.6));
        const Vec3 sp(rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5));
        const Vec3 org(rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-30, 30));
        const std::array<int64_t, 3> shape{2 + int64_t(rng.index(8)), 2 + int64_t(rng.index(8)),
                                           2 + int64_t(rng.index(8))};
        CoordGrid inner = coords::make_grid(Affine(r * sp.asDiagonal(), org), shape, space);
        const Vec3 osp(rng.uniform(1.0, 4.0), rng.uniform(1.0, 4.0), rng.uniform(1.0, 4.0));
        const Vec3 buf(rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0));
        CoordGrid outer = coords::exscribe(inner, osp, buf);

        // outer axes follow the inner orientation with the requested spacing
        CHECK((outer.affine.directions() - inner.affine.directions()).norm() < 1e-9);
        CHECK((outer.spacing() - osp).norm() < 1e-9);

        // coverage: the dilated inner box fits inside the outer box, frame-wise
        const Mat3 finv = inner.affine.directions().inverse();
        Vec3 ilo, ihi, olo, ohi;
        inner.bounds_in_frame(finv, ilo, ihi);
        outer.bounds_in_frame(finv, olo, ohi);
        for (int a = 0; a < 3; ++a) {
            CHECK(olo[a] <= ilo[a] - buf[a] + 1e-9);
            CHECK(ohi[a] >= ihi[a] + buf[a] - 1e-9);
            // minimality: one fewer node per axis would no longer cover
            const double covered = (outer.shape[a] - 1) * osp[a];
            CHECK(covered - osp[a] < ihi[a] + buf[a] - (ilo[a] - buf[a]) + 1e-9);
            // anchor lands exactly on the dilated lower corner
            CHECK(std::abs(olo[a] - (ilo[a] - buf[a])) < 1e-9);
        }
    }
}

TEST_CASE("exscribe refuses grids that overflow the coordinate space") {
    const CoordSpace tight(Vec3(-6, -6, -6), Vec3(6, 6, 6));
    CoordGrid inner =
        coords::make_grid(Affine::scaling(Vec3(1, 1, 1), Vec3(-5, -5, -5)), {11, 11, 11}, tight);
    CHECK_THROWS_AS(coords::exscribe(inner, Vec3(1, 1, 1), Vec3(4, 4, 4)), Error);
}

TEST_CASE("coord space containment and expansion") {
    const CoordSpace s(Vec3(0, 0, 0), Vec3(10, 20, 30));
    CHECK(s.contains(Vec3(5, 5, 5)));
    CHECK(s.contains(Vec3(0, 0, 0)));
    CHECK(!s.contains(Vec3(-1, 5, 5)));
    CHECK(!s.contains(Vec3(5, 20.1, 5)));
    CHECK(s.contains(Vec3(10.0 + 1e-10, 5, 5)));  // inside default tolerance

    const CoordSpace e = s.expanded(0.5);
    CHECK((e.lower - Vec3(-2.5, -5, -7.5)).norm() < 1e-12);
    CHECK((e.upper - Vec3(12.5, 25, 37.5)).norm() < 1e-12);
    CHECK_THROWS_AS(CoordSpace(Vec3(0, 0, 0), Vec3(1, -1, 1)), Error);
}
