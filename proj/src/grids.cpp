#include "ldm/grids.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

namespace ldm {

std::size_t voxel_count(const Dims& dims)
{
    std::size_t n = 1;
    for (auto d : dims)
        n *= d;
    return n;
}

void check_dims(const Dims& dims)
{
    if (dims.empty() || dims.size() > 3)
        throw ShapeError("grids carry 1 to 3 axes, got " + std::to_string(dims.size()));
    for (auto d : dims)
        if (d == 0)
            throw ShapeError("zero-length axis");
}

std::array<std::size_t, 3> unravel(const Dims& dims, std::size_t index)
{
    std::array<std::size_t, 3> c{0, 0, 0};
    for (std::size_t a = dims.size(); a-- > 0;) {
        c[a] = index % dims[a];
        index /= dims[a];
    }
    return c;
}

std::size_t ravel(const Dims& dims, const std::array<std::size_t, 3>& coord)
{
    std::size_t index = 0;
    for (std::size_t a = 0; a < dims.size(); ++a)
        index = index * dims[a] + coord[a];
    return index;
}

VolumeGrid::VolumeGrid(Dims dims, DType dtype, std::vector<float> data)
    : dims_(std::move(dims)), dtype_(dtype), data_(std::move(data))
{
    check_dims(dims_);
    if (data_.size() != voxel_count(dims_))
        throw ShapeError("payload length " + std::to_string(data_.size()) + " does not match dims ("
                         + std::to_string(voxel_count(dims_)) + " voxels)");
    if (dtype_ == DType::binary) {
        for (float v : data_)
            if (v != 0.0f && v != 1.0f)
                throw ShapeError("binary grid holds a value other than 0 or 1");
    } else {
        for (float v : data_)
            if (!std::isfinite(v))
                throw ShapeError("real grid holds a non-finite value");
    }
}

VolumeGrid VolumeGrid::zeros(Dims dims, DType dtype)
{
    const auto n = voxel_count(dims);
    return VolumeGrid(std::move(dims), dtype, std::vector<float>(n, 0.0f));
}

VolumeGrid VolumeGrid::from_mask(Dims dims, const std::vector<std::uint8_t>& mask)
{
    std::vector<float> data(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i)
        data[i] = mask[i] ? 1.0f : 0.0f;
    return VolumeGrid(std::move(dims), DType::binary, std::move(data));
}

VolumeGrid VolumeGrid::from_real(Dims dims, std::span<const double> values)
{
    std::vector<float> data(values.begin(), values.end());
    return VolumeGrid(std::move(dims), DType::real, std::move(data));
}

std::size_t VolumeGrid::count_nonzero() const
{
    std::size_t n = 0;
    for (float v : data_)
        n += v != 0.0f;
    return n;
}

std::vector<std::uint8_t> VolumeGrid::mask() const
{
    std::vector<std::uint8_t> m(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i)
        m[i] = data_[i] != 0.0f;
    return m;
}

CoordinateField make_coordinate_field(const Dims& dims)
{
    check_dims(dims);
    for (auto d : dims)
        if (d < 2)
            throw ShapeError("degenerate axis: coordinate channels need every extent >= 2");

    CoordinateField field{dims, {}};
    const auto n = voxel_count(dims);
    for (std::size_t a = 0; a < dims.size(); ++a) {
        std::vector<double> channel(n);
        const double scale = 2.0 / static_cast<double>(dims[a] - 1);
        for (std::size_t i = 0; i < n; ++i)
            channel[i] = scale * static_cast<double>(unravel(dims, i)[a]) - 1.0;
        field.channels.push_back(std::move(channel));
    }
    return field;
}

namespace {

constexpr char kMagic[4] = {'V', 'O', 'L', '1'};

void put_u32(std::ostream& out, std::uint32_t v)
{
    const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                           static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in)
{
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError("VOL1: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8)
           | (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint8_t get_u8(std::istream& in)
{
    char c;
    if (!in.get(c))
        throw FormatError("VOL1: truncated header");
    return static_cast<std::uint8_t>(c);
}

} // namespace

std::size_t write_volume(const VolumeGrid& grid, std::ostream& sink)
{
    std::size_t bytes = 0;
    sink.write(kMagic, 4);
    sink.put(static_cast<char>(grid.ndim()));
    bytes += 5;
    for (auto d : grid.dims()) {
        put_u32(sink, static_cast<std::uint32_t>(d));
        bytes += 4;
    }
    sink.put(static_cast<char>(grid.dtype()));
    bytes += 1;

    if (grid.is_binary()) {
        std::string payload(grid.size(), '\0');
        for (std::size_t i = 0; i < grid.size(); ++i)
            payload[i] = grid[i] != 0.0f ? 1 : 0;
        sink.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        bytes += payload.size();
    } else {
        for (float v : grid.values())
            put_u32(sink, std::bit_cast<std::uint32_t>(v));
        bytes += 4 * grid.size();
    }
    if (!sink)
        throw Error("VOL1: write failed");
    return bytes;
}

VolumeGrid read_volume(std::istream& source)
{
    char magic[4];
    if (!source.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
        throw FormatError("VOL1: bad magic");
    const auto ndim = get_u8(source);
    if (ndim == 0 || ndim > 3)
        throw FormatError("VOL1: unsupported axis count " + std::to_string(ndim));
    Dims dims(ndim);
    for (auto& d : dims) {
        d = get_u32(source);
        if (d == 0)
            throw FormatError("VOL1: zero-length axis");
    }
    const auto dtype_byte = get_u8(source);
    if (dtype_byte > 1)
        throw FormatError("VOL1: dtype byte " + std::to_string(dtype_byte) + " is not 0 or 1");

    const auto n = voxel_count(dims);
    std::vector<float> data(n);
    if (dtype_byte == 0) {
        std::string payload(n, '\0');
        if (!source.read(payload.data(), static_cast<std::streamsize>(n)))
            throw FormatError("VOL1: truncated payload");
        for (std::size_t i = 0; i < n; ++i) {
            const auto b = static_cast<unsigned char>(payload[i]);
            if (b > 1)
                throw FormatError("VOL1: binary payload byte " + std::to_string(b) + " at voxel "
                                  + std::to_string(i));
            data[i] = static_cast<float>(b);
        }
    } else {
        for (auto& v : data) {
            try {
                v = std::bit_cast<float>(get_u32(source));
            } catch (const FormatError&) {
                throw FormatError("VOL1: truncated payload");
            }
        }
    }
    try {
        return VolumeGrid(std::move(dims), static_cast<DType>(dtype_byte), std::move(data));
    } catch (const ShapeError& e) {
        throw FormatError(std::string("VOL1: ") + e.what());
    }
}

void save_volume(const VolumeGrid& grid, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("cannot open " + path.string() + " for writing");
    write_volume(grid, out);
}

VolumeGrid load_volume(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    return read_volume(in);
}

} // namespace ldm
