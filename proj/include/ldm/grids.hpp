#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "ldm/error.hpp"

namespace ldm {

/// Extent per axis, slowest axis first. Grids carry 1 to 3 axes.
using Dims = std::vector<std::size_t>;

enum class DType : std::uint8_t { binary = 0, real = 1 };

std::size_t voxel_count(const Dims& dims);

/// Throws ShapeError unless 1 <= dims.size() <= 3 and every extent is positive.
void check_dims(const Dims& dims);

/// Coordinates of a flat row-major index (last axis fastest). Unused axes are 0.
std::array<std::size_t, 3> unravel(const Dims& dims, std::size_t index);
std::size_t ravel(const Dims& dims, const std::array<std::size_t, 3>& coord);

/// Dense scalar field over a voxel grid.
///
/// The payload is stored as 32-bit floats, the on-disk precision, so that a
/// write/read cycle is exact. Binary grids hold only 0 and 1; real grids hold
/// only finite values. A grid is immutable once constructed.
class VolumeGrid {
public:
    VolumeGrid() = default;
    VolumeGrid(Dims dims, DType dtype, std::vector<float> data);

    static VolumeGrid zeros(Dims dims, DType dtype);
    static VolumeGrid from_mask(Dims dims, const std::vector<std::uint8_t>& mask);
    static VolumeGrid from_real(Dims dims, std::span<const double> values);

    const Dims& dims() const { return dims_; }
    DType dtype() const { return dtype_; }
    std::size_t ndim() const { return dims_.size(); }
    std::size_t size() const { return data_.size(); }
    std::span<const float> values() const { return data_; }
    float operator[](std::size_t i) const { return data_[i]; }

    bool is_binary() const { return dtype_ == DType::binary; }
    /// Number of voxels equal to 1 (binary grids) or nonzero (real grids).
    std::size_t count_nonzero() const;
    std::vector<std::uint8_t> mask() const;

    friend bool operator==(const VolumeGrid&, const VolumeGrid&) = default;

private:
    Dims dims_;
    DType dtype_ = DType::binary;
    std::vector<float> data_;
};

/// One real channel per axis; channel a at index i along a is 2*i/(dims[a]-1) - 1.
struct CoordinateField {
    Dims dims;
    std::vector<std::vector<double>> channels;

    std::size_t axis_count() const { return channels.size(); }
};

/// Throws ShapeError when any extent is below 2.
CoordinateField make_coordinate_field(const Dims& dims);

/// VOL1: 'V','O','L','1', u8 ndim, ndim x u32 LE dims, u8 dtype, row-major
/// payload (u8 for binary, f32 LE for real). Returns bytes written.
std::size_t write_volume(const VolumeGrid& grid, std::ostream& sink);
VolumeGrid read_volume(std::istream& source);

void save_volume(const VolumeGrid& grid, const std::filesystem::path& path);
VolumeGrid load_volume(const std::filesystem::path& path);

} // namespace ldm
