#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cvox/core.hpp"
#include "cvox/volume.hpp"

using namespace cvox;
using coords::Affine;
using coords::CoordSpace;
using coords::Vec3;

namespace {

Volume make_volume(const std::array<int64_t, 3>& shape, const Vec3& spacing, const Vec3& origin,
                   Modality mod = Modality::phantom) {
    Volume v;
    v.grid = coords::make_grid(Affine::scaling(spacing, origin), shape,
                               CoordSpace(Vec3(-500, -500, -500), Vec3(500, 500, 500)));
    v.data = ad::Tensor<float>({shape[0], shape[1], shape[2]});
    v.modality = mod;
    return v;
}

// sort-based order statistic with linear interpolation, mirroring numpy
double percentile_oracle(std::vector<float> vals, double p) {
    std::sort(vals.begin(), vals.end());
    const double pos = p / 100.0 * (vals.size() - 1);
    const size_t i = static_cast<size_t>(pos);
    if (i + 1 >= vals.size()) return vals.back();
    const double frac = pos - i;
    return vals[i] * (1.0 - frac) + vals[i + 1] * frac;
}

}  // namespace

TEST_CASE("percentile matches the sort oracle") {
    Rng rng(101);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<float> vals(1 + rng.index(200));
        for (auto& v : vals) v = float(rng.uniform(-5.0, 5.0));
        for (double p : {0.0, 10.0, 50.0, 73.5, 99.0, 100.0})
            CHECK(percentile(vals, p) == doctest::Approx(percentile_oracle(vals, p)).epsilon(1e-9));
    }
    CHECK(percentile({3.0f}, 40.0) == doctest::Approx(3.0));
    CHECK_THROWS_AS(percentile({}, 50.0), Error);
    CHECK_THROWS_AS(percentile({1.0f}, 101.0), Error);
}

TEST_CASE("normalize_percentile lands the 99th percentile at 1") {
    Volume v = make_volume({8, 8, 8}, Vec3(1, 1, 1), Vec3(0, 0, 0));
    Rng rng(55);
    std::vector<float> raw(v.data.size());
    for (int64_t i = 0; i < v.data.size(); ++i) {
        v.data[i] = float(rng.uniform(0.0, 40.0));
        raw[i] = v.data[i];
    }
    const double p99 = percentile_oracle(raw, 99.0);
    Volume n = normalize_percentile(v);
    for (int64_t i = 0; i < n.data.size(); ++i)
        CHECK(n.data[i] == doctest::Approx(raw[i] / p99).epsilon(1e-6));
    std::vector<float> scaled(n.data.data(), n.data.data() + n.data.size());
    CHECK(percentile(scaled, 99.0) == doctest::Approx(1.0).epsilon(1e-6));

    // all-zero volumes pass through unchanged rather than dividing by zero
    Volume z = make_volume({4, 4, 4}, Vec3(1, 1, 1), Vec3(0, 0, 0));
    Volume zn = normalize_percentile(z);
    for (int64_t i = 0; i < zn.data.size(); ++i) CHECK(zn.data[i] == 0.0f);
}

TEST_CASE("hu_scale maps the CT window onto the unit interval") {
    Volume v = make_volume({2, 2, 2}, Vec3(1, 1, 1), Vec3(0, 0, 0), Modality::ct);
    const float hu[8] = {-2000.0f, -1000.0f, -250.0f, 0.0f, 500.0f, 2000.0f, 3000.0f, 1000.0f};
    for (int i = 0; i < 8; ++i) v.data[i] = hu[i];
    Volume s = hu_scale(v);
    const float want[8] = {0.0f,          0.0f,         750.0f / 3000, 1000.0f / 3000,
                           1500.0f / 3000, 1.0f,         1.0f,          2000.0f / 3000};
    for (int i = 0; i < 8; ++i) CHECK(s.data[i] == doctest::Approx(want[i]).epsilon(1e-6));
}

TEST_CASE("ct_tissue_mask thresholds and fills enclosed air pockets") {
    // tissue shell with an internal air cavity and open air outside
    Volume v = make_volume({7, 7, 7}, Vec3(1, 1, 1), Vec3(0, 0, 0), Modality::ct);
    for (int64_t i = 0; i < v.data.size(); ++i) v.data[i] = -1000.0f;  // open air
    for (int64_t i = 1; i <= 5; ++i)
        for (int64_t j = 1; j <= 5; ++j)
            for (int64_t k = 1; k <= 5; ++k) v.at(i, j, k) = 100.0f;  // tissue block
    v.at(3, 3, 3) = -1000.0f;  // enclosed cavity

    TissueMask m = ct_tissue_mask(v);
    CHECK(m.at(2, 2, 2));    // plain tissue
    CHECK(m.at(3, 3, 3));    // cavity is folded into the mask by the hole fill
    CHECK(!m.at(0, 0, 0));   // boundary-connected air stays out
    CHECK(!m.at(6, 3, 3));
    CHECK(m.count_true() == 5 * 5 * 5);

    // air channel drilled to the boundary keeps the cavity connected to outside
    Volume open_v = v;
    for (int64_t k = 0; k <= 3; ++k) open_v.at(3, 3, k) = -1000.0f;
    TissueMask mo = ct_tissue_mask(open_v);
    CHECK(!mo.at(3, 3, 3));
    CHECK(!mo.at(3, 3, 2));
}

TEST_CASE("positive_tissue_mask keeps strictly positive voxels") {
    Volume v = make_volume({3, 3, 3}, Vec3(1, 1, 1), Vec3(0, 0, 0), Modality::mri);
    for (int64_t i = 0; i < v.data.size(); ++i) v.data[i] = 0.0f;
    v.at(1, 1, 1) = 0.7f;
    v.at(2, 0, 1) = 1e-6f;
    v.at(0, 2, 2) = -0.3f;
    TissueMask m = positive_tissue_mask(v);
    CHECK(m.count_true() == 2);
    CHECK(m.at(1, 1, 1));
    CHECK(m.at(2, 0, 1));
    CHECK(!m.at(0, 2, 2));
    CHECK(!m.at(0, 0, 0));
}

TEST_CASE("sample_patch stays in bounds, centers on tissue, and is deterministic") {
    Volume v = make_volume({12, 10, 14}, Vec3(1.0, 1.5, 2.0), Vec3(-6, -7, -14));
    Rng rng(66);
    for (int64_t i = 0; i < v.data.size(); ++i) v.data[i] = float(rng.uniform(0.0, 1.0));
    TissueMask m;
    m.grid = v.grid;
    m.data.assign(v.data.size(), 0);
    // tissue confined to a corner so inward shifting must engage
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j)
            for (int64_t k = 0; k < 3; ++k) m.data[(i * 10 + j) * 14 + k] = 1;

    const std::array<int64_t, 3> ps{6, 6, 6};
    for (uint64_t seed = 0; seed < 30; ++seed) {
        Volume p = sample_patch(v, m, ps, seed);
        CHECK(p.grid.shape == ps);
        CHECK((p.grid.affine.matrix - v.grid.affine.matrix).norm() < 1e-12);
        // locate the patch origin on the source lattice and verify the copy
        const Vec3 idx = coords::physical_to_voxel(v.grid.affine, p.grid.affine.origin);
        const auto si = int64_t(std::llround(idx[0])), sj = int64_t(std::llround(idx[1])),
                   sk = int64_t(std::llround(idx[2]));
        CHECK((idx - Vec3(double(si), double(sj), double(sk))).norm() < 1e-9);
        CHECK(si >= 0);
        CHECK(si + ps[0] <= 12);
        CHECK(sj >= 0);
        CHECK(sj + ps[1] <= 10);
        CHECK(sk >= 0);
        CHECK(sk + ps[2] <= 14);
        // mask is corner-bound, so the shifted patch must hug the low corner
        CHECK(si <= 2);
        CHECK(sj <= 2);
        CHECK(sk <= 2);
        for (int64_t i = 0; i < ps[0]; ++i)
            for (int64_t j = 0; j < ps[1]; ++j)
                for (int64_t k = 0; k < ps[2]; ++k)
                    CHECK(p.at(i, j, k) == v.at(si + i, sj + j, sk + k));

        Volume p2 = sample_patch(v, m, ps, seed);
        CHECK(p2.grid.same_geometry(p.grid));
        for (int64_t i = 0; i < p.data.size(); ++i) CHECK(p2.data[i] == p.data[i]);
    }

    TissueMask empty;
    empty.grid = v.grid;
    empty.data.assign(v.data.size(), 0);
    CHECK_THROWS_AS(sample_patch(v, empty, ps, 0), Error);
    CHECK_THROWS_AS(sample_patch(v, m, {13, 4, 4}, 0), Error);
}

TEST_CASE("crop_pad_fov crops, pads with fill, and keeps grid phase") {
    Volume v = make_volume({6, 6, 6}, Vec3(2, 2, 2), Vec3(0, 0, 0));
    for (int64_t i = 0; i < v.data.size(); ++i) v.data[i] = float(i);

    // pure crop: [2, 8] covers source nodes 1..4
    Volume c = crop_pad_fov(v, Vec3(2, 2, 2), Vec3(8, 8, 8), -1.0f);
    CHECK(c.grid.shape == std::array<int64_t, 3>{4, 4, 4});
    CHECK((c.grid.coord(0, 0, 0) - Vec3(2, 2, 2)).norm() < 1e-12);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j)
            for (int64_t k = 0; k < 4; ++k) CHECK(c.at(i, j, k) == v.at(i + 1, j + 1, k + 1));

    // expansion: [-4, 12] pads two nodes below and one above per axis
    Volume e = crop_pad_fov(v, Vec3(-4, -4, -4), Vec3(12, 12, 12), -1.0f);
    CHECK(e.grid.shape == std::array<int64_t, 3>{9, 9, 9});
    CHECK((e.grid.coord(0, 0, 0) - Vec3(-4, -4, -4)).norm() < 1e-12);
    CHECK(e.at(0, 0, 0) == -1.0f);
    CHECK(e.at(8, 8, 8) == -1.0f);
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 6; ++j)
            for (int64_t k = 0; k < 6; ++k) CHECK(e.at(i + 2, j + 2, k + 2) == v.at(i, j, k));

    // off-phase target corners snap outward to source lattice positions
    Volume o = crop_pad_fov(v, Vec3(1.5, 1.5, 1.5), Vec3(6.5, 6.5, 6.5), 0.0f);
    CHECK((o.grid.coord(0, 0, 0) - Vec3(0, 0, 0)).norm() < 1e-12);  // floor to node 0
    CHECK(o.grid.shape == std::array<int64_t, 3>{5, 5, 5});         // ceil to node 4 = 8mm

    CHECK_THROWS_AS(crop_pad_fov(v, Vec3(4, 4, 4), Vec3(2, 6, 6), 0.0f), Error);
}

TEST_CASE("crop_pad_fov works in a rotated grid frame") {
    const coords::Mat3 r = coords::euler_to_rotation(0.3, -0.1, 0.2);
    Volume v;
    v.grid = coords::make_grid(Affine(r * Vec3(1, 1, 1).asDiagonal(), Vec3(5, -3, 2)), {5, 5, 5},
                               CoordSpace(Vec3(-500, -500, -500), Vec3(500, 500, 500)));
    v.data = ad::Tensor<float>({5, 5, 5});
    for (int64_t i = 0; i < v.data.size(); ++i) v.data[i] = float(i);

    // target box given in physical coords; matching the volume's own box
    // reproduces the volume exactly
    coords::Vec3 lo, hi;
    const coords::Mat3 finv = r.inverse();
    v.grid.bounds_in_frame(finv, lo, hi);
    Volume same = crop_pad_fov(v, r * lo, r * hi, 0.0f);
    CHECK(same.grid.same_geometry(v.grid, 1e-6));
    for (int64_t i = 0; i < v.data.size(); ++i) CHECK(same.data[i] == v.data[i]);
}

TEST_CASE("volume and mask validation reject inconsistent payloads") {
    Volume v = make_volume({3, 3, 3}, Vec3(1, 1, 1), Vec3(0, 0, 0));
    v.validate();
    v.data = ad::Tensor<float>({3, 3, 2});
    CHECK_THROWS_AS(v.validate(), Error);
    Volume w = make_volume({2, 2, 2}, Vec3(1, 1, 1), Vec3(0, 0, 0));
    w.data[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(w.validate(), Error);

    TissueMask m;
    m.grid = make_volume({2, 2, 2}, Vec3(1, 1, 1), Vec3(0, 0, 0)).grid;
    m.data.assign(8, 1);
    m.validate();
    m.data.assign(7, 1);
    CHECK_THROWS_AS(m.validate(), Error);
}

TEST_CASE("modality names round trip") {
    for (Modality m : {Modality::mri, Modality::ct, Modality::phantom})
        CHECK(modality_from_name(modality_name(m)) == m);
    CHECK_THROWS_AS(modality_from_name("xray"), Error);
}
