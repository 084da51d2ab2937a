#include <gtest/gtest.h>

#include <cmath>

#include "ldm/metrics.hpp"
#include "ldm/random.hpp"
#include "support/oracles.hpp"

using namespace ldm;

namespace {

VolumeGrid random_mask(const Dims& dims, double p, Rng& rng)
{
    std::bernoulli_distribution bit(p);
    std::vector<std::uint8_t> m(voxel_count(dims));
    for (auto& b : m)
        b = bit(rng);
    if (std::none_of(m.begin(), m.end(), [](auto b) { return b; }))
        m[0] = 1;
    return VolumeGrid::from_mask(dims, m);
}

} // namespace

TEST(Dice, Examples)
{
    const auto a = VolumeGrid::from_mask({4}, {1, 1, 0, 0});
    const auto b = VolumeGrid::from_mask({4}, {0, 1, 1, 0});
    EXPECT_DOUBLE_EQ(dice(a, a), 1.0);
    EXPECT_DOUBLE_EQ(dice(a, b), 0.5);
    EXPECT_DOUBLE_EQ(dice(a, VolumeGrid::from_mask({4}, {0, 0, 1, 1})), 0.0);
    const auto empty = VolumeGrid::zeros({4}, DType::binary);
    EXPECT_DOUBLE_EQ(dice(empty, empty), 1.0);
    EXPECT_DOUBLE_EQ(dice(a, empty), 0.0);
    EXPECT_THROW(dice(a, VolumeGrid::zeros({5}, DType::binary)), ShapeError);
}

TEST(Surface, SolidSquareHasRingSurface)
{
    std::vector<std::uint8_t> m(25, 0);
    for (int i = 1; i <= 3; ++i)
        for (int j = 1; j <= 3; ++j)
            m[i * 5 + j] = 1;
    const auto s = surface_voxels(VolumeGrid::from_mask({5, 5}, m));
    EXPECT_EQ(s.size(), 8u);
    EXPECT_EQ(std::count(s.begin(), s.end(), 12u), 0);
    // The grid border counts as outside.
    EXPECT_EQ(surface_voxels(VolumeGrid::from_mask({3, 3}, std::vector<std::uint8_t>(9, 1))).size(), 8u);
}

TEST(DistanceTransform, MatchesBruteForce)
{
    Rng rng(1);
    for (const Dims& dims : {Dims{17}, Dims{9, 13}, Dims{5, 6, 7}}) {
        std::bernoulli_distribution bit(0.08);
        std::vector<std::uint8_t> sites(voxel_count(dims));
        for (auto& s : sites)
            s = bit(rng);
        sites[3] = 1;
        const auto d = squared_distance_transform(dims, sites);
        for (std::size_t i = 0; i < sites.size(); ++i) {
            const auto c = unravel(dims, i);
            double best = 1e300;
            for (std::size_t j = 0; j < sites.size(); ++j) {
                if (!sites[j])
                    continue;
                const auto e = unravel(dims, j);
                double s = 0;
                for (int a = 0; a < 3; ++a)
                    s += std::pow(double(c[a]) - double(e[a]), 2);
                best = std::min(best, s);
            }
            EXPECT_DOUBLE_EQ(d[i], best);
        }
    }
}

TEST(SurfaceDistances, IdenticalMasksAreZero)
{
    Rng rng(2);
    const auto m = random_mask({8, 8}, 0.3, rng);
    const auto sd = surface_distances(m, m);
    EXPECT_EQ(sd.hausdorff, 0.0);
    EXPECT_EQ(sd.asd, 0.0);
}

TEST(SurfaceDistances, OracleEquivalenceUpTo12)
{
    Rng rng(3);
    for (std::size_t n = 2; n <= 12; ++n)
        for (int rep = 0; rep < 5; ++rep) {
            const Dims dims{n, 12 - n + 2};
            const auto a = random_mask(dims, 0.3, rng), b = random_mask(dims, 0.2, rng);
            const auto got = surface_distances(a, b);
            const auto ref = oracle::surface_distances(a, b);
            EXPECT_NEAR(got.hausdorff, ref.hausdorff, 1e-12);
            EXPECT_NEAR(got.asd, ref.asd, 1e-12);
        }
    for (int rep = 0; rep < 5; ++rep) {
        const auto a = random_mask({5, 6, 4}, 0.3, rng), b = random_mask({5, 6, 4}, 0.3, rng);
        EXPECT_NEAR(surface_distances(a, b).asd, oracle::surface_distances(a, b).asd, 1e-12);
    }
}

TEST(SurfaceDistances, KnownShift)
{
    // Two single voxels 3 apart along the last axis.
    std::vector<std::uint8_t> a(20, 0), b(20, 0);
    a[3 * 5 + 0] = 1;
    b[3 * 5 + 3] = 1;
    const auto sd = surface_distances(VolumeGrid::from_mask({4, 5}, a), VolumeGrid::from_mask({4, 5}, b));
    EXPECT_DOUBLE_EQ(sd.hausdorff, 3.0);
    EXPECT_DOUBLE_EQ(sd.asd, 3.0);
    EXPECT_THROW(surface_distances(VolumeGrid::from_mask({4, 5}, a), VolumeGrid::zeros({4, 5}, DType::binary)),
                 InfeasibleError);
}

TEST(Centroid, DisplacementFromTarget)
{
    const auto m = VolumeGrid::from_mask({3, 3}, {1, 0, 1, 0, 0, 0, 1, 0, 1});
    EXPECT_EQ(centroid(m), (std::array<double, 3>{1, 1, 0}));
    const auto d = centroid_displacement(m, {0, 1, 0});
    EXPECT_EQ(d, (std::array<double, 3>{1, 0, 0}));
    EXPECT_DOUBLE_EQ(norm({3, 4, 0}), 5.0);
    EXPECT_THROW(centroid_displacement(VolumeGrid::zeros({3, 3}, DType::binary), {0, 0, 0}), InfeasibleError);
}

TEST(Evaluate, IdenticalAndEmptyPredictions)
{
    Rng rng(4);
    const auto truth = random_mask({10, 10}, 0.2, rng);
    const auto same = evaluate(truth, truth);
    EXPECT_EQ(same.dice, 1.0);
    EXPECT_EQ(*same.hausdorff, 0.0);
    EXPECT_EQ(*same.displacement_magnitude, 0.0);
    const auto none = evaluate(VolumeGrid::zeros({10, 10}, DType::binary), truth);
    EXPECT_EQ(none.dice, 0.0);
    EXPECT_FALSE(none.hausdorff.has_value());
    EXPECT_FALSE(none.displacement.has_value());
    const auto scaled = evaluate(truth, truth, std::array<double, 3>{0, 0, 0}, 2.0);
    EXPECT_NEAR(*scaled.displacement_magnitude, 2 * norm(centroid(truth)), 1e-12);
}
