#pragma once

#include <cstdint>
#include <vector>

#include "ldm/grids.hpp"
#include "ldm/simulate.hpp"

namespace ldm {

/// Counts: a = lesioned & deficit, b = lesioned & no deficit,
/// c = intact & deficit, d = intact & no deficit.
struct ContingencyTable {
    std::uint64_t a = 0, b = 0, c = 0, d = 0;

    std::uint64_t total() const { return a + b + c + d; }
};

/// Two-sided Fisher exact test: sum of the point probabilities of every table
/// with the observed margins whose probability does not exceed the observed one.
double fisher_exact_two_sided(const ContingencyTable& t);

/// Fisher p-values for a fixed sample size and deficit count, cached per
/// lesion-hit count. Not thread-safe; give each worker its own instance.
class FisherTable {
public:
    FisherTable(std::size_t n, std::size_t deficits);

    /// p for `hits` lesioned samples of which `hit_deficits` carry a deficit.
    double p_value(std::size_t hits, std::size_t hit_deficits);
    std::size_t n() const { return n_; }
    std::size_t deficits() const { return deficits_; }

private:
    std::size_t n_, deficits_;
    std::vector<double> log_fact_;
    std::vector<std::vector<double>> cache_;
};

struct BrunnerMunzelResult {
    double statistic = 0.0;       // positive when group1 tends to be larger
    double p = 1.0;               // two-sided, t distribution
    double df = 0.0;
    double relative_effect = 0.5; // P(X0 < X1) + P(X0 = X1) / 2
    bool testable = false;
};

/// Midranks for ties; Satterthwaite degrees of freedom. Groups with fewer than
/// two samples or zero placement variance are reported non-testable (p = 1).
BrunnerMunzelResult brunner_munzel(const std::vector<double>& group0, const std::vector<double>& group1);

enum class VoxelTest { fisher, bm };

enum class Direction {
    two_sided, // every association counts
    positive,  // only voxels where damage raises the deficit rate (odds ratio > 1)
};

struct VoxelwiseOptions {
    VoxelTest test = VoxelTest::fisher;
    std::size_t min_hits = 4;
    Direction direction = Direction::positive;
    /// Sample subset; empty means every sample.
    std::vector<std::size_t> samples;
};

/// Per-voxel -log p (fisher) or |BM statistic| (bm). Voxels hit fewer than
/// min_hits times score 0.
VolumeGrid voxelwise_map(const Dataset& dataset, const VoxelwiseOptions& options);

struct PermutationResult {
    double threshold = 0.0;
    std::vector<double> max_statistics; // sorted ascending
};

/// Max-statistic permutation distribution; `percentile` in [0, 100] picks the
/// nearest-rank order statistic. Permutation k draws from derive_seed(seed, k),
/// so the result does not depend on `threads`.
PermutationResult fwer_threshold_permutation(const Dataset& dataset, const VoxelwiseOptions& options,
                                             std::size_t n_perm, double percentile, std::uint64_t seed,
                                             unsigned threads = 1);

/// Nearest-rank percentile of an ascending sample.
double percentile_of_sorted(const std::vector<double>& sorted, double percentile);

double bonferroni_threshold(double alpha, std::size_t n_tests);

/// The Bonferroni level expressed on the -log p scale.
double bonferroni_neglog_threshold(double alpha, std::size_t n_tests);

struct StatMap {
    VolumeGrid statistic;
    double threshold = 0.0;
    VolumeGrid significant; // statistic > threshold

    static StatMap make(VolumeGrid statistic, double threshold);
};

} // namespace ldm
