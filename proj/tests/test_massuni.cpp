#include <gtest/gtest.h>

#include <cmath>

#include "ldm/massuni.hpp"
#include "support/oracles.hpp"

using namespace ldm;

namespace {

// n samples on a 1D grid of `voxels`; lesion i covers voxel v when bit (i + v) % k == 0.
Dataset toy_dataset(std::size_t n, std::size_t voxels, LabelKind kind, std::uint64_t seed)
{
    Dataset ds;
    ds.dims = {voxels};
    ds.label_kind = kind;
    Rng rng(seed);
    std::bernoulli_distribution hit(0.3);
    std::uniform_real_distribution<double> u;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::uint8_t> m(voxels);
        for (auto& b : m)
            b = hit(rng);
        ds.lesions.push_back(VolumeGrid::from_mask(ds.dims, m));
        ds.labels.push_back(kind == LabelKind::binary ? static_cast<double>(hit(rng)) : u(rng));
        ds.source_tag.push_back(0);
    }
    return ds;
}

} // namespace

TEST(Fisher, KnownTables)
{
    // Tea-tasting table.
    EXPECT_NEAR(fisher_exact_two_sided({3, 1, 1, 3}), 34.0 / 70.0, 1e-12);
    EXPECT_NEAR(fisher_exact_two_sided({0, 5, 5, 0}), 2.0 / 252.0, 1e-12);
    EXPECT_DOUBLE_EQ(fisher_exact_two_sided({0, 0, 0, 0}), 1.0);
    EXPECT_NEAR(fisher_exact_two_sided({2, 2, 2, 2}), 1.0, 1e-12);
    EXPECT_NEAR(fisher_exact_two_sided({10, 0, 0, 10}), 2.0 / 184756.0, 1e-15);
    EXPECT_DOUBLE_EQ(fisher_exact_two_sided({0, 7, 0, 9}), 1.0);
}

TEST(Fisher, SwappingDeficitGroupsKeepsP)
{
    Rng rng(11);
    std::uniform_int_distribution<std::uint64_t> cell(0, 12);
    for (int i = 0; i < 100; ++i) {
        const ContingencyTable t{cell(rng), cell(rng), cell(rng), cell(rng)};
        EXPECT_NEAR(fisher_exact_two_sided(t), fisher_exact_two_sided({t.b, t.a, t.d, t.c}), 1e-12);
    }
}

TEST(Fisher, MatchesEnumeration)
{
    Rng rng(1);
    std::uniform_int_distribution<unsigned> cell(0, 10);
    for (int i = 0; i < 500; ++i) {
        ContingencyTable t{cell(rng), cell(rng), cell(rng), cell(rng)};
        if (t.total() > 30)
            continue;
        EXPECT_NEAR(fisher_exact_two_sided(t), oracle::fisher_two_sided(t.a, t.b, t.c, t.d), 1e-10)
            << t.a << " " << t.b << " " << t.c << " " << t.d;
    }
}

TEST(Fisher, TableCacheAgreesWithDirect)
{
    FisherTable table(40, 13);
    for (std::size_t hits = 0; hits <= 40; ++hits)
        for (std::size_t k = 0; k <= std::min<std::size_t>(hits, 13); ++k) {
            if (hits - k > 27)
                continue;
            const ContingencyTable t{k, hits - k, 13 - k, 27 - (hits - k)};
            EXPECT_NEAR(table.p_value(hits, k), fisher_exact_two_sided(t), 1e-13);
        }
    EXPECT_THROW(FisherTable(5, 6), ShapeError);
}

TEST(BrunnerMunzel, DocumentedExample)
{
    const std::vector<double> x{1, 2, 1, 1, 1, 1, 1, 1, 1, 1, 2, 4, 1, 1};
    const std::vector<double> y{3, 3, 4, 3, 1, 2, 3, 1, 1, 5, 4};
    const auto r = brunner_munzel(x, y);
    ASSERT_TRUE(r.testable);
    EXPECT_NEAR(r.statistic, 3.1374674823029505, 1e-12);
    EXPECT_NEAR(r.p, 0.0057862086661515377, 1e-10);
}

TEST(BrunnerMunzel, MatchesMidrankOracle)
{
    Rng rng(2);
    std::uniform_int_distribution<int> size(5, 20), value(0, 6);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> x(static_cast<std::size_t>(size(rng))), y(static_cast<std::size_t>(size(rng)));
        for (auto& v : x)
            v = value(rng);
        for (auto& v : y)
            v = value(rng) + 0.5 * (i % 3);
        const auto r = brunner_munzel(x, y);
        const auto ref = oracle::brunner_munzel(x, y);
        if (!std::isfinite(ref.statistic)) {
            EXPECT_FALSE(r.testable);
            continue;
        }
        ASSERT_TRUE(r.testable);
        EXPECT_NEAR(r.statistic, ref.statistic, 1e-10);
        EXPECT_NEAR(r.df, ref.df, 1e-8 * ref.df);
        EXPECT_NEAR(r.relative_effect, ref.relative_effect, 1e-12);
        EXPECT_GE(r.p, 0.0);
        EXPECT_LE(r.p, 1.0);
    }
}

TEST(BrunnerMunzel, IdenticalGroupsGiveOne)
{
    const std::vector<double> x{0.1, 0.5, 0.3, 0.9, 0.2};
    const auto r = brunner_munzel(x, x);
    EXPECT_NEAR(r.p, 1.0, 1e-9);
    EXPECT_NEAR(r.statistic, 0.0, 1e-12);
}

TEST(BrunnerMunzel, DegenerateCasesAreNotTestable)
{
    EXPECT_FALSE(brunner_munzel({1.0}, {2.0, 3.0}).testable);
    const auto sep = brunner_munzel({1, 2, 3, 4}, {5, 6, 7, 8});
    EXPECT_FALSE(sep.testable);
    EXPECT_EQ(sep.p, 1.0);
    EXPECT_EQ(sep.relative_effect, 1.0);
}

TEST(Voxelwise, ConstantLabelsGiveZeroMap)
{
    auto ds = toy_dataset(60, 12, LabelKind::binary, 3);
    std::fill(ds.labels.begin(), ds.labels.end(), 1.0);
    const auto map = voxelwise_map(ds, {});
    EXPECT_EQ(map.count_nonzero(), 0u);
    auto real = toy_dataset(60, 12, LabelKind::real, 4);
    std::fill(real.labels.begin(), real.labels.end(), 0.3);
    EXPECT_EQ(voxelwise_map(real, {VoxelTest::bm, 4, Direction::two_sided, {}}).count_nonzero(), 0u);
}

TEST(Voxelwise, SingleVoxelSubstrateIsTheMaximum)
{
    for (std::uint64_t seed = 5; seed < 10; ++seed) {
        auto ds = toy_dataset(80, 16, LabelKind::binary, seed);
        for (std::size_t i = 0; i < ds.size(); ++i)
            ds.labels[i] = ds.lesions[i][7] > 0 ? 1.0 : 0.0;
        for (auto dir : {Direction::two_sided, Direction::positive}) {
            const auto map = voxelwise_map(ds, {VoxelTest::fisher, 4, dir, {}});
            const auto vals = map.values();
            EXPECT_EQ(std::max_element(vals.begin(), vals.end()) - vals.begin(), 7);
        }
    }
}

TEST(Voxelwise, RealLabelsDrivenByOneVoxel)
{
    // Overlapping label distributions: complete separation would be non-testable.
    auto ds = toy_dataset(120, 16, LabelKind::real, 12);
    Rng rng(13);
    std::uniform_real_distribution<double> u;
    for (std::size_t i = 0; i < ds.size(); ++i)
        ds.labels[i] = ds.lesions[i][7] > 0 ? 0.3 + 0.7 * u(rng) : 0.7 * u(rng);
    const auto map = voxelwise_map(ds, {VoxelTest::bm, 4, Direction::two_sided, {}});
    const auto vals = map.values();
    EXPECT_EQ(std::max_element(vals.begin(), vals.end()) - vals.begin(), 7);
}

TEST(Voxelwise, MinHitsAndDirection)
{
    auto ds = toy_dataset(50, 8, LabelKind::binary, 6);
    // Voxel 0 hit only twice; voxel 1 is anti-associated with the label.
    for (std::size_t i = 0; i < ds.size(); ++i) {
        auto m = ds.lesions[i].mask();
        m[0] = i < 2;
        m[1] = i % 2;
        ds.lesions[i] = VolumeGrid::from_mask(ds.dims, m);
        ds.labels[i] = (i % 2) ? 0.0 : 1.0;
    }
    const auto two = voxelwise_map(ds, {VoxelTest::fisher, 4, Direction::two_sided, {}});
    const auto pos = voxelwise_map(ds, {VoxelTest::fisher, 4, Direction::positive, {}});
    EXPECT_EQ(two[0], 0.0f);
    EXPECT_GT(two[1], 10.0f);
    EXPECT_EQ(pos[1], 0.0f);
}

TEST(Voxelwise, TestMustMatchLabelKind)
{
    const auto bin = toy_dataset(20, 4, LabelKind::binary, 7);
    const auto real = toy_dataset(20, 4, LabelKind::real, 8);
    EXPECT_THROW(voxelwise_map(real, {VoxelTest::fisher, 4, Direction::positive, {}}), ShapeError);
    EXPECT_THROW(voxelwise_map(bin, {VoxelTest::bm, 4, Direction::positive, {}}), ShapeError);
}

TEST(Permutation, ConstantLabelsGiveZeroThreshold)
{
    auto ds = toy_dataset(40, 10, LabelKind::binary, 9);
    std::fill(ds.labels.begin(), ds.labels.end(), 0.0);
    const auto r = fwer_threshold_permutation(ds, {}, 200, 95, 1);
    EXPECT_EQ(r.threshold, 0.0);
    EXPECT_EQ(r.max_statistics.size(), 200u);
}

TEST(Permutation, ThreadCountDoesNotChangeResult)
{
    const auto ds = toy_dataset(60, 20, LabelKind::binary, 10);
    const auto a = fwer_threshold_permutation(ds, {}, 300, 95, 42, 1);
    const auto b = fwer_threshold_permutation(ds, {}, 300, 95, 42, 3);
    EXPECT_EQ(a.max_statistics, b.max_statistics);
    EXPECT_EQ(a.threshold, b.threshold);
    EXPECT_TRUE(std::is_sorted(a.max_statistics.begin(), a.max_statistics.end()));
    EXPECT_THROW(fwer_threshold_permutation(ds, {}, 50, 95, 1), InfeasibleError);
}

TEST(Permutation, ThresholdNonDecreasingInPercentile)
{
    const auto ds = toy_dataset(50, 12, LabelKind::binary, 14);
    double last = -1;
    for (double pct : {50.0, 80.0, 95.0, 99.0, 100.0}) {
        const auto t = fwer_threshold_permutation(ds, {}, 200, pct, 3).threshold;
        EXPECT_GE(t, last);
        last = t;
    }
}

TEST(Permutation, NearestRankPercentile)
{
    const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    EXPECT_EQ(percentile_of_sorted(v, 95), 10);
    EXPECT_EQ(percentile_of_sorted(v, 50), 5);
    EXPECT_EQ(percentile_of_sorted(v, 0), 1);
    EXPECT_EQ(percentile_of_sorted(v, 100), 10);
}

TEST(Bonferroni, Levels)
{
    EXPECT_NEAR(bonferroni_threshold(0.05, 1764), 2.834467e-5, 1e-10);
    EXPECT_NEAR(bonferroni_neglog_threshold(0.05, 1764), -std::log(0.05 / 1764), 1e-12);
    EXPECT_THROW(bonferroni_threshold(0.05, 0), InfeasibleError);
}

TEST(StatMapTest, StrictThreshold)
{
    const auto m = StatMap::make(VolumeGrid::from_real({4}, std::vector<double>{0.0, 1.0, 2.0, 3.0}), 1.0);
    EXPECT_EQ(m.significant.mask(), (std::vector<std::uint8_t>{0, 0, 1, 1}));
}
