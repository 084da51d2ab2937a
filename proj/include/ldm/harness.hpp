#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ldm/dlm.hpp"
#include "ldm/massuni.hpp"
#include "ldm/simulate.hpp"

namespace ldm {

enum class Method { vlsm_fisher, vlsm_bm, dlm, dlm_labels_only, dlm_deterministic };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
bool is_dlm(Method m);

struct VlsmSettings {
    std::size_t n_perm = 2000;
    double percentile = 95.0;
    std::size_t min_hits = 4;
    Direction fisher_direction = Direction::positive;
    Direction bm_direction = Direction::two_sided;
    unsigned threads = 1;
};

struct ExperimentSpec {
    std::string scenario = "scenario";
    Dims dims{32, 32};
    /// count is the pool size each sample is stratified from.
    LesionDistributionSpec lesions;
    /// One (homogeneous) or two (heterogeneous) substrates.
    std::vector<SubstrateSpec> substrates;
    DeficitModel deficit;
    std::vector<Method> methods;
    std::vector<std::size_t> sample_sizes;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::string> metrics{"dice", "hausdorff", "asd", "displacement"};
    DlmConfig dlm;
    VlsmSettings vlsm;
    std::uint64_t master_seed = 0;

    /// Throws ShapeError/InfeasibleError (method vs label kind, empty lists,
    /// unknown metrics, bad substrate count).
    void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentSpec& s);
void from_json(const nlohmann::json& j, ExperimentSpec& s);

struct ResultRow {
    std::string scenario;
    std::string method;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::optional<double> dice, hausdorff, asd, displacement;
    std::optional<double> threshold; // calibrated t (dlm) or FWER threshold (vlsm)
    bool excluded = false;
    std::string reason;
    double wall_secs = 0.0;
};

struct RowJob {
    Method method;
    std::size_t n;
    std::uint64_t seed;
};

/// Row order: sample size, then seed, then method.
std::vector<RowJob> enumerate_rows(const ExperimentSpec& spec);

/// The sample a (n, seed) cell draws; shared by every method of the cell.
/// Throws InfeasibleError when stratification cannot be met.
Dataset experiment_sample(const ExperimentSpec& spec, std::size_t n, std::uint64_t seed);
/// Ground truth used for scoring (union of substrates).
VolumeGrid experiment_truth(const ExperimentSpec& spec);

/// Binary substrate estimate of one method on one dataset, plus its threshold.
struct Inference {
    VolumeGrid map;
    double threshold = 0.0;
};
Inference run_method(Method method, const Dataset& ds, const DlmConfig& dlm_base, const VlsmSettings& vlsm,
                     std::uint64_t seed);

ResultRow run_row(const ExperimentSpec& spec, const RowJob& job);
/// Rows in enumerate_rows order regardless of `threads`.
std::vector<ResultRow> run_experiment(const ExperimentSpec& spec, unsigned threads = 1);

void write_results_header(std::ostream& out);
void write_result_row(std::ostream& out, const ResultRow& row);
void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows);

// Planar demonstration: three thresholded blobs, 400 elongated lesions,
// deficit when more than 10% of the substrate is hit, Fisher + Bonferroni.
enum class Complexity { simple, complex };

struct Fig1Options {
    Dims dims{42, 42};
    std::size_t lesion_count = 400;
    std::array<double, 2> radius_range{4.0, 12.0};
    std::array<double, 2> aspect_range{0.1, 0.4};
    double deficit_threshold = 0.10;
    double alpha = 0.05;
    std::size_t min_hits = 4;
};

SubstrateSpec fig1_substrate(Complexity substrate, const Fig1Options& options = {});

struct Fig1Result {
    StatMap map;
    VolumeGrid ground_truth;
    std::size_t deficits = 0;
    std::optional<std::array<double, 3>> displacement;
    std::optional<double> displacement_magnitude;
};

Fig1Result run_fig1_replication(Complexity lesions, Complexity substrate, std::uint64_t seed,
                                const Fig1Options& options = {});

// Single-voxel protocol: every eligible voxel becomes its own substrate and
// each method is scored by how far its estimate lands from that voxel.
struct SpatialBiasOptions {
    Dims dims{32, 32};
    LesionDistributionSpec lesions;
    std::vector<Method> methods{Method::vlsm_fisher, Method::dlm};
    std::size_t min_hits = 4;
    /// Only voxels whose every coordinate is a multiple of stride are visited.
    std::size_t stride = 1;
    DlmConfig dlm;
    VlsmSettings vlsm;
    std::uint64_t seed = 0;
};

struct SpatialBiasRow {
    std::size_t voxel = 0;
    std::array<double, 3> position{};
    std::string method;
    std::optional<double> displacement;
    std::string reason; // set when no estimate could be scored
};

struct SpatialBiasSummary {
    std::string method;
    std::size_t scored = 0;
    double mean = 0.0;
    double sd = 0.0;
};

struct SpatialBiasResult {
    std::vector<SpatialBiasRow> rows;
    std::vector<SpatialBiasSummary> summary;
    std::size_t skipped_voxels = 0; // hit fewer than min_hits times
};

SpatialBiasResult run_spatial_bias(const SpatialBiasOptions& options);
void write_spatial_bias_csv(std::ostream& out, const SpatialBiasResult& result);

} // namespace ldm
