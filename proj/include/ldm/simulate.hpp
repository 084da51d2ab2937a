#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ldm/grids.hpp"
#include "ldm/random.hpp"

namespace ldm {

enum class OrientationMode { uniform, spatially_structured };

/// Orientation rule for spatially structured lesions, keyed on the lesion
/// centre relative to the grid midpoint.
enum class StructuredOrientation {
    radial,     // major axis points away from the midpoint
    tangential, // major axis perpendicular to the radial direction
};

struct LesionDistributionSpec {
    std::size_t count = 400;
    std::array<double, 2> radius_range{3.0, 8.0}; // major semi-axis, voxels
    std::array<double, 2> aspect_range{0.1, 0.4}; // minor / major
    OrientationMode orientation_mode = OrientationMode::uniform;
    StructuredOrientation structured_orientation = StructuredOrientation::radial;
    std::uint64_t rng_seed = 0;

    void validate(const Dims& dims) const;
};

/// Filled ellipse (2D) or ellipsoid (3D) with integer-voxel centre.
struct Ellipsoid {
    std::array<double, 3> center{};
    std::array<double, 3> semi_axes{};                 // major first
    std::array<std::array<double, 3>, 3> axes{};       // orthonormal directions
};

/// Voxel belongs to the mask iff its centre lies inside the ellipsoid.
VolumeGrid voxelize(const Ellipsoid& e, const Dims& dims);

std::vector<VolumeGrid> generate_lesions(const LesionDistributionSpec& spec, const Dims& dims);

struct Blob {
    std::string name;
    std::array<double, 3> center{};
    std::array<double, 3> scale{1.0, 1.0, 1.0}; // Gaussian sd per axis
    double amplitude = 1.0;
};

struct SubstrateSpec {
    std::vector<Blob> blobs;
    double blob_threshold = 0.5;
    std::string formula;

    void validate(const Dims& dims) const;
};

struct RealizedSubstrate {
    std::vector<VolumeGrid> blob_masks;
    VolumeGrid ground_truth;
};

/// Throws InfeasibleError when the formula yields an empty ground truth.
RealizedSubstrate realize_substrate(const SubstrateSpec& spec, const Dims& dims);

/// sum(x*m) / sum(m). Throws InfeasibleError on an empty substrate.
double overlap_ratio(const VolumeGrid& lesion, const VolumeGrid& substrate);

enum class Omega { linear, binary, sigmoid };

double deficit_linear(double ratio);
double deficit_binary(double ratio, double threshold);
/// 1 / (1 + exp(20 R - 6)); decreasing in R.
double deficit_sigmoid(double ratio);

enum class LabelKind { binary, real };

struct NoiseModel {
    enum class Kind { none, flip, convex } kind = Kind::none;
    double p = 0.0;     // flip probability
    double alpha = 0.0; // convex weight of U(0,1) noise
};

struct DeficitModel {
    Omega omega = Omega::binary;
    double binary_T = 0.01;
    NoiseModel noise;
    std::optional<SubstrateSpec> heterogeneity;
    std::uint64_t rng_seed = 0;

    LabelKind label_kind() const { return omega == Omega::binary ? LabelKind::binary : LabelKind::real; }
    void validate() const;
};

double apply_omega(const DeficitModel& model, double ratio);

/// Flip applies to binary labels only, convex to real labels only; a mismatch
/// throws ShapeError.
std::vector<double> apply_noise(std::vector<double> labels, LabelKind kind, const NoiseModel& noise,
                                Rng& rng);

struct Splits {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::vector<std::size_t> calibration;
};

/// 10% held out, halved into validation and calibration (validation gets the
/// odd one), the rest is training.
Splits make_splits(std::size_t n, Rng& rng);

struct Dataset {
    Dims dims;
    std::vector<VolumeGrid> lesions;
    std::vector<double> labels;
    LabelKind label_kind = LabelKind::binary;
    std::vector<int> source_tag; // bookkeeping only, never read by models
    Splits splits;

    std::size_t size() const { return lesions.size(); }
    std::size_t count_positive() const;
};

/// One substrate (homogeneous) or two (heterogeneous, 50/50 tags).
Dataset simulate_dataset(const std::vector<VolumeGrid>& lesions, const std::vector<VolumeGrid>& substrates,
                         const DeficitModel& model);

/// Binary labels only. target_n < 500 draws 1:1; otherwise the first feasible
/// positive share among 40, 30, 20 and 10 percent. Throws InfeasibleError when
/// no ratio can be met.
Dataset stratified_sample(const Dataset& dataset, std::size_t target_n, Rng& rng);

/// Positive and negative counts the stratification policy picks for target_n.
std::pair<std::size_t, std::size_t> stratified_counts(std::size_t target_n, std::size_t positives,
                                                      std::size_t negatives);

} // namespace ldm
