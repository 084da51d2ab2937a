#include "ldm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ldm {

namespace {

void check_same(const VolumeGrid& a, const VolumeGrid& b)
{
    if (a.dims() != b.dims())
        throw ShapeError("metric inputs have different dims");
}

// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z)
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    std::size_t k = 0;
    std::size_t first = n;
    for (std::size_t q = 0; q < n; ++q)
        if (f[q] < inf) {
            first = q;
            break;
        }
    if (first == n) {
        std::fill(d, d + n, inf);
        return;
    }
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    for (std::size_t q = first + 1; q < n; ++q) {
        if (f[q] == inf)
            continue;
        const double fq = f[q] + static_cast<double>(q * q);
        double s;
        for (;;) {
            const auto vk = v[k];
            s = (fq - (f[vk] + static_cast<double>(vk * vk)))
                / (2.0 * static_cast<double>(q) - 2.0 * static_cast<double>(vk));
            if (s > z[k])
                break;
            --k; // z[0] is -inf, so this never passes below 0
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q))
            ++k;
        const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
        d[q] = diff * diff + f[v[k]];
    }
}

} // namespace

double dice(const VolumeGrid& a, const VolumeGrid& b)
{
    check_same(a, b);
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0.0f, y = b[i] != 0.0f;
        na += x;
        nb += y;
        both += x && y;
    }
    if (na + nb == 0)
        return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

std::vector<std::size_t> surface_voxels(const VolumeGrid& mask)
{
    const auto& dims = mask.dims();
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] == 0.0f)
            continue;
        const auto c = unravel(dims, i);
        bool surface = false;
        for (std::size_t a = 0; a < dims.size() && !surface; ++a) {
            for (int step : {-1, 1}) {
                auto n = c;
                if ((step < 0 && c[a] == 0) || (step > 0 && c[a] + 1 == dims[a])) {
                    surface = true;
                    break;
                }
                n[a] = step < 0 ? c[a] - 1 : c[a] + 1;
                if (mask[ravel(dims, n)] == 0.0f) {
                    surface = true;
                    break;
                }
            }
        }
        if (surface)
            out.push_back(i);
    }
    return out;
}

std::vector<double> squared_distance_transform(const Dims& dims, const std::vector<std::uint8_t>& sites)
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    const auto n = voxel_count(dims);
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i)
        g[i] = sites[i] ? 0.0 : inf;

    std::vector<std::size_t> v;
    std::vector<double> z, line, out;
    for (std::size_t axis = 0; axis < dims.size(); ++axis) {
        const auto len = dims[axis];
        std::size_t stride = 1;
        for (auto a = axis + 1; a < dims.size(); ++a)
            stride *= dims[a];
        line.resize(len);
        out.resize(len);
        for (std::size_t base = 0; base < n; ++base) {
            // Visit each line once: base must have coordinate 0 along `axis`.
            if ((base / stride) % len != 0)
                continue;
            for (std::size_t q = 0; q < len; ++q)
                line[q] = g[base + q * stride];
            edt_1d(line.data(), out.data(), len, v, z);
            for (std::size_t q = 0; q < len; ++q)
                g[base + q * stride] = out[q];
        }
    }
    return g;
}

SurfaceDistances surface_distances(const VolumeGrid& a, const VolumeGrid& b)
{
    check_same(a, b);
    const auto sa = surface_voxels(a);
    const auto sb = surface_voxels(b);
    if (sa.empty() || sb.empty())
        throw InfeasibleError("surface distances need two non-empty masks");

    auto directed = [&](const std::vector<std::size_t>& from, const std::vector<std::size_t>& to, double& max,
                        double& sum) {
        std::vector<std::uint8_t> sites(a.size(), 0);
        for (auto i : to)
            sites[i] = 1;
        const auto dt = squared_distance_transform(a.dims(), sites);
        for (auto i : from) {
            const double d = std::sqrt(dt[i]);
            max = std::max(max, d);
            sum += d;
        }
    };
    double max_ab = 0, sum_ab = 0, max_ba = 0, sum_ba = 0;
    directed(sa, sb, max_ab, sum_ab);
    directed(sb, sa, max_ba, sum_ba);
    return {std::max(max_ab, max_ba), (sum_ab + sum_ba) / static_cast<double>(sa.size() + sb.size())};
}

std::array<double, 3> centroid(const VolumeGrid& mask)
{
    std::array<double, 3> c{0, 0, 0};
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] == 0.0f)
            continue;
        const auto p = unravel(mask.dims(), i);
        for (std::size_t a = 0; a < 3; ++a)
            c[a] += static_cast<double>(p[a]);
        ++count;
    }
    if (count == 0)
        throw InfeasibleError("centroid of an empty mask");
    for (auto& v : c)
        v /= static_cast<double>(count);
    return c;
}

std::array<double, 3> centroid_displacement(const VolumeGrid& predicted, const std::array<double, 3>& target)
{
    const auto c = centroid(predicted);
    return {c[0] - target[0], c[1] - target[1], c[2] - target[2]};
}

double norm(const std::array<double, 3>& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

EvalReport evaluate(const VolumeGrid& predicted, const VolumeGrid& truth, std::optional<std::array<double, 3>> target,
                    double voxel_size)
{
    EvalReport r;
    r.dice = dice(predicted, truth);
    if (predicted.count_nonzero() > 0 && truth.count_nonzero() > 0) {
        const auto sd = surface_distances(predicted, truth);
        r.hausdorff = sd.hausdorff * voxel_size;
        r.asd = sd.asd * voxel_size;
    }
    if (predicted.count_nonzero() > 0 && (target || truth.count_nonzero() > 0)) {
        auto d = centroid_displacement(predicted, target ? *target : centroid(truth));
        for (auto& v : d)
            v *= voxel_size;
        r.displacement = d;
        r.displacement_magnitude = norm(d);
    }
    return r;
}

} // namespace ldm
