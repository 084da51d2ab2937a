#include "ldm/massuni.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

namespace ldm {

FisherTable::FisherTable(std::size_t n, std::size_t deficits) : n_(n), deficits_(deficits), cache_(n + 1)
{
    if (deficits > n)
        throw ShapeError("more deficits than samples");
    log_fact_.resize(n + 1);
    log_fact_[0] = 0.0;
    for (std::size_t i = 1; i <= n; ++i)
        log_fact_[i] = log_fact_[i - 1] + std::log(static_cast<double>(i));
}

double FisherTable::p_value(std::size_t hits, std::size_t hit_deficits)
{
    auto& row = cache_.at(hits);
    if (row.empty()) {
        const auto n = n_, r1 = hits, c1 = deficits_;
        const auto lo = r1 + c1 > n ? r1 + c1 - n : 0;
        const auto hi = std::min(r1, c1);
        const auto& lf = log_fact_;
        const double log_norm = lf[n] - lf[c1] - lf[n - c1];
        std::vector<double> prob(hi - lo + 1);
        for (auto k = lo; k <= hi; ++k)
            prob[k - lo] = std::exp(lf[r1] - lf[k] - lf[r1 - k] + lf[n - r1] - lf[c1 - k] - lf[n - r1 - c1 + k]
                                    - log_norm);
        row.assign(hi + 1, 1.0);
        // Relative slack so that tables tied in exact arithmetic stay tied.
        constexpr double kRelTol = 1.0 + 1e-7;
        for (auto a = lo; a <= hi; ++a) {
            const double cut = prob[a - lo] * kRelTol;
            double p = 0.0;
            for (double q : prob)
                if (q <= cut)
                    p += q;
            row[a] = std::min(1.0, p);
        }
    }
    return hit_deficits < row.size() ? row[hit_deficits] : 1.0;
}

double fisher_exact_two_sided(const ContingencyTable& t)
{
    const auto n = t.total();
    if (n == 0)
        return 1.0;
    FisherTable table(n, t.a + t.c);
    return table.p_value(t.a + t.b, t.a);
}

namespace {

// Brunner-Munzel from placement sums. Placement of a group-0 value among group 1
// counts strictly smaller group-1 values plus half the ties, and vice versa.
BrunnerMunzelResult bm_from_placements(double n0, double n1, double s0, double ss0, double s1, double ss1)
{
    BrunnerMunzelResult r;
    if (n0 < 2 || n1 < 2)
        return r;
    r.relative_effect = s1 / (n1 * n0);
    const double v0 = std::max(0.0, (ss0 - s0 * s0 / n0) / (n0 - 1));
    const double v1 = std::max(0.0, (ss1 - s1 * s1 / n1) / (n1 - 1));
    const double pooled = n0 * v0 + n1 * v1;
    if (!(pooled > 0.0))
        return r;
    const double mean_rank_diff = (s1 / n1 + (n1 + 1) / 2) - (s0 / n0 + (n0 + 1) / 2);
    r.statistic = n0 * n1 * mean_rank_diff / ((n0 + n1) * std::sqrt(pooled));
    r.df = pooled * pooled / ((n0 * v0) * (n0 * v0) / (n0 - 1) + (n1 * v1) * (n1 * v1) / (n1 - 1));
    r.testable = true;
    const boost::math::students_t_distribution<double> dist(r.df);
    r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.statistic))));
    return r;
}

// Walks samples in ascending label order (tie blocks share a label) and
// accumulates placement sums for the members of `group1`.
template <class InGroup1>
BrunnerMunzelResult bm_walk(const std::vector<std::size_t>& order, const std::vector<std::size_t>& block_end,
                            std::size_t n1, InGroup1&& in_group1)
{
    const double n = static_cast<double>(order.size());
    double seen0 = 0, seen1 = 0, s0 = 0, ss0 = 0, s1 = 0, ss1 = 0;
    std::size_t start = 0;
    for (auto end : block_end) {
        double c1 = 0;
        for (auto i = start; i < end; ++i)
            c1 += in_group1(order[i]) ? 1.0 : 0.0;
        const double c0 = static_cast<double>(end - start) - c1;
        const double p1 = seen0 + 0.5 * c0; // each group-1 member of the block
        const double p0 = seen1 + 0.5 * c1;
        s1 += c1 * p1;
        ss1 += c1 * p1 * p1;
        s0 += c0 * p0;
        ss0 += c0 * p0 * p0;
        seen0 += c0;
        seen1 += c1;
        start = end;
    }
    return bm_from_placements(n - static_cast<double>(n1), static_cast<double>(n1), s0, ss0, s1, ss1);
}

void sort_with_blocks(const std::vector<double>& values, std::vector<std::size_t>& order,
                      std::vector<std::size_t>& block_end)
{
    order.resize(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
    block_end.clear();
    for (std::size_t i = 1; i <= order.size(); ++i)
        if (i == order.size() || values[order[i]] != values[order[i - 1]])
            block_end.push_back(i);
}

} // namespace

BrunnerMunzelResult brunner_munzel(const std::vector<double>& group0, const std::vector<double>& group1)
{
    std::vector<double> all(group0);
    all.insert(all.end(), group1.begin(), group1.end());
    std::vector<std::size_t> order, blocks;
    sort_with_blocks(all, order, blocks);
    const auto n0 = group0.size();
    return bm_walk(order, blocks, group1.size(), [n0](std::size_t i) { return i >= n0; });
}

namespace {

// Lesion membership restricted to testable voxels.
struct HitIndex {
    std::size_t n = 0;
    std::vector<std::size_t> voxels;
    std::vector<std::vector<std::uint32_t>> hitters;
    std::vector<std::vector<std::uint8_t>> member; // bm only
};

HitIndex build_hit_index(const Dataset& ds, const VoxelwiseOptions& opt, const std::vector<std::size_t>& samples)
{
    HitIndex idx;
    idx.n = samples.size();
    const auto V = voxel_count(ds.dims);
    std::vector<std::vector<std::uint32_t>> hitters(V);
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const auto vals = ds.lesions[samples[s]].values();
        for (std::size_t v = 0; v < V; ++v)
            if (vals[v] != 0.0f)
                hitters[v].push_back(static_cast<std::uint32_t>(s));
    }
    for (std::size_t v = 0; v < V; ++v) {
        if (hitters[v].size() < std::max<std::size_t>(opt.min_hits, 1))
            continue;
        idx.voxels.push_back(v);
        if (opt.test == VoxelTest::bm) {
            std::vector<std::uint8_t> m(idx.n, 0);
            for (auto s : hitters[v])
                m[s] = 1;
            idx.member.push_back(std::move(m));
        }
        idx.hitters.push_back(std::move(hitters[v]));
    }
    return idx;
}

// Statistic per indexed voxel for one label assignment.
class VoxelScorer {
public:
    VoxelScorer(const HitIndex& idx, const VoxelwiseOptions& opt, std::size_t deficits)
        : idx_(idx), opt_(opt), fisher_(opt.test == VoxelTest::fisher ? idx.n : 0,
                                        opt.test == VoxelTest::fisher ? deficits : 0)
    {
    }

    void score(const std::vector<double>& labels, std::vector<double>& out)
    {
        out.assign(idx_.voxels.size(), 0.0);
        if (opt_.test == VoxelTest::fisher) {
            const double deficits = static_cast<double>(fisher_.deficits());
            const double n = static_cast<double>(idx_.n);
            for (std::size_t k = 0; k < idx_.voxels.size(); ++k) {
                const auto& h = idx_.hitters[k];
                std::size_t a = 0;
                for (auto s : h)
                    a += labels[s] > 0.5;
                if (opt_.direction == Direction::positive) {
                    // a*d > b*c  <=>  a*n > hits*deficits
                    if (!(static_cast<double>(a) * n > static_cast<double>(h.size()) * deficits))
                        continue;
                }
                out[k] = -std::log(fisher_.p_value(h.size(), a));
            }
        } else {
            sort_with_blocks(labels, order_, blocks_);
            for (std::size_t k = 0; k < idx_.voxels.size(); ++k) {
                const auto& m = idx_.member[k];
                const auto r = bm_walk(order_, blocks_, idx_.hitters[k].size(),
                                       [&m](std::size_t i) { return m[i] != 0; });
                if (!r.testable)
                    continue;
                if (opt_.direction == Direction::positive && r.statistic <= 0.0)
                    continue;
                out[k] = std::abs(r.statistic);
            }
        }
    }

private:
    const HitIndex& idx_;
    const VoxelwiseOptions& opt_;
    FisherTable fisher_;
    std::vector<std::size_t> order_, blocks_;
};

std::vector<std::size_t> resolve_samples(const Dataset& ds, const VoxelwiseOptions& opt)
{
    if (!opt.samples.empty())
        return opt.samples;
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
}

void check_test_matches_labels(const Dataset& ds, const VoxelwiseOptions& opt)
{
    if (opt.test == VoxelTest::fisher && ds.label_kind != LabelKind::binary)
        throw ShapeError("Fisher test needs binary labels");
    if (opt.test == VoxelTest::bm && ds.label_kind != LabelKind::real)
        throw ShapeError("Brunner-Munzel test needs real labels");
}

std::vector<double> gather_labels(const Dataset& ds, const std::vector<std::size_t>& samples)
{
    std::vector<double> y(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        y[i] = ds.labels[samples[i]];
    return y;
}

std::size_t count_deficits(const std::vector<double>& y)
{
    return static_cast<std::size_t>(std::count_if(y.begin(), y.end(), [](double v) { return v > 0.5; }));
}

} // namespace

VolumeGrid voxelwise_map(const Dataset& dataset, const VoxelwiseOptions& options)
{
    check_test_matches_labels(dataset, options);
    const auto samples = resolve_samples(dataset, options);
    const auto idx = build_hit_index(dataset, options, samples);
    const auto labels = gather_labels(dataset, samples);

    VoxelScorer scorer(idx, options, count_deficits(labels));
    std::vector<double> stats;
    scorer.score(labels, stats);

    std::vector<double> full(voxel_count(dataset.dims), 0.0);
    for (std::size_t k = 0; k < idx.voxels.size(); ++k)
        full[idx.voxels[k]] = stats[k];
    return VolumeGrid::from_real(dataset.dims, full);
}

double percentile_of_sorted(const std::vector<double>& sorted, double percentile)
{
    if (sorted.empty())
        return 0.0;
    const double p = std::clamp(percentile, 0.0, 100.0);
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(sorted.size()) - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

PermutationResult fwer_threshold_permutation(const Dataset& dataset, const VoxelwiseOptions& options,
                                             std::size_t n_perm, double percentile, std::uint64_t seed,
                                             unsigned threads)
{
    check_test_matches_labels(dataset, options);
    if (n_perm < 100)
        throw InfeasibleError("permutation thresholds need at least 100 permutations");
    const auto samples = resolve_samples(dataset, options);
    const auto idx = build_hit_index(dataset, options, samples);
    const auto labels = gather_labels(dataset, samples);
    const auto deficits = count_deficits(labels);

    PermutationResult result;
    result.max_statistics.assign(n_perm, 0.0);
    auto worker = [&](std::size_t begin, std::size_t end) {
        VoxelScorer scorer(idx, options, deficits);
        std::vector<double> y, stats;
        for (auto k = begin; k < end; ++k) {
            y = labels;
            Rng rng(derive_seed(seed, k));
            shuffle_in_place(y, rng);
            scorer.score(y, stats);
            // Rounded like the float statistic grids it is compared against.
            result.max_statistics[k] = stats.empty() ? 0.0 : static_cast<float>(*std::max_element(stats.begin(), stats.end()));
        }
    };

    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n_perm)));
    if (threads == 1) {
        worker(0, n_perm);
    } else {
        std::vector<std::thread> pool;
        const auto chunk = (n_perm + threads - 1) / threads;
        for (unsigned t = 0; t < threads; ++t) {
            const auto b = std::min<std::size_t>(n_perm, t * chunk);
            const auto e = std::min<std::size_t>(n_perm, b + chunk);
            pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool)
            th.join();
    }
    std::sort(result.max_statistics.begin(), result.max_statistics.end());
    result.threshold = percentile_of_sorted(result.max_statistics, percentile);
    return result;
}

double bonferroni_threshold(double alpha, std::size_t n_tests)
{
    if (n_tests < 1)
        throw InfeasibleError("Bonferroni correction needs at least one test");
    return alpha / static_cast<double>(n_tests);
}

double bonferroni_neglog_threshold(double alpha, std::size_t n_tests)
{
    return -std::log(bonferroni_threshold(alpha, n_tests));
}

StatMap StatMap::make(VolumeGrid statistic, double threshold)
{
    std::vector<std::uint8_t> sig(statistic.size());
    for (std::size_t i = 0; i < statistic.size(); ++i)
        sig[i] = static_cast<double>(statistic[i]) > threshold;
    auto dims = statistic.dims();
    return StatMap{std::move(statistic), threshold, VolumeGrid::from_mask(std::move(dims), sig)};
}

} // namespace ldm
