#pragma once

#include <array>
#include <optional>
#include <vector>

#include "ldm/grids.hpp"

namespace ldm {

/// 2|a n b| / (|a| + |b|); two empty masks score 1.
double dice(const VolumeGrid& a, const VolumeGrid& b);

/// Voxels of the mask with at least one face neighbour outside it (the grid
/// exterior counts as outside).
std::vector<std::size_t> surface_voxels(const VolumeGrid& mask);

struct SurfaceDistances {
    double hausdorff = 0.0;
    double asd = 0.0;
};

/// Symmetric Hausdorff and pooled average surface distance in voxel units,
/// Euclidean between voxel centres. Throws InfeasibleError if a mask is empty.
SurfaceDistances surface_distances(const VolumeGrid& a, const VolumeGrid& b);

/// Exact squared Euclidean distance to the nearest site (separable lower
/// envelope transform). Sites are nonzero entries of `sites`.
std::vector<double> squared_distance_transform(const Dims& dims, const std::vector<std::uint8_t>& sites);

std::array<double, 3> centroid(const VolumeGrid& mask);

/// centroid(predicted) - target. Throws InfeasibleError on an empty prediction.
std::array<double, 3> centroid_displacement(const VolumeGrid& predicted, const std::array<double, 3>& target);

double norm(const std::array<double, 3>& v);

struct EvalReport {
    double dice = 0.0;
    std::optional<double> hausdorff; // unset when either mask is empty
    std::optional<double> asd;
    std::optional<std::array<double, 3>> displacement;
    std::optional<double> displacement_magnitude;
};

/// Distances are multiplied by `voxel_size`; displacement is measured against
/// the ground-truth centroid unless `target` is given.
EvalReport evaluate(const VolumeGrid& predicted, const VolumeGrid& truth,
                    std::optional<std::array<double, 3>> target = std::nullopt, double voxel_size = 1.0);

} // namespace ldm
