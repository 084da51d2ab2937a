#include "ldm/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "ldm/formula.hpp"

namespace ldm {

namespace {

using Vec3 = std::array<double, 3>;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 normalized(Vec3 v)
{
    const double n = std::sqrt(dot(v, v));
    for (auto& c : v)
        c /= n;
    return v;
}

Vec3 cross(const Vec3& a, const Vec3& b)
{
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

// Orthonormal frame whose first axis is `major` (3D).
std::array<Vec3, 3> frame_from_major(const Vec3& major)
{
    const Vec3 u = normalized(major);
    Vec3 ref = std::abs(u[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    const Vec3 v = normalized(cross(u, ref));
    const Vec3 w = cross(u, v);
    return {u, v, w};
}

std::array<Vec3, 3> random_rotation(Rng& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    double q[4];
    double norm = 0.0;
    do {
        norm = 0.0;
        for (auto& c : q) {
            c = normal(rng);
            norm += c * c;
        }
    } while (norm < 1e-12);
    norm = std::sqrt(norm);
    for (auto& c : q)
        c /= norm;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    // Columns of the rotation matrix.
    return {Vec3{1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)},
            Vec3{2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)},
            Vec3{2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)}};
}

Vec3 grid_midpoint(const Dims& dims)
{
    Vec3 mid{0, 0, 0};
    for (std::size_t a = 0; a < dims.size(); ++a)
        mid[a] = 0.5 * static_cast<double>(dims[a] - 1);
    return mid;
}

} // namespace

void LesionDistributionSpec::validate(const Dims& dims) const
{
    check_dims(dims);
    if (dims.size() < 2)
        throw ShapeError("lesions need a 2D or 3D grid");
    if (count < 1)
        throw InfeasibleError("lesion count must be >= 1");
    if (!(aspect_range[0] > 0.0 && aspect_range[0] <= aspect_range[1] && aspect_range[1] <= 1.0))
        throw InfeasibleError("aspect range must lie in (0, 1] with lo <= hi");
    if (!(radius_range[0] > 0.0 && radius_range[0] <= radius_range[1]))
        throw InfeasibleError("radius range must be positive with lo <= hi");
    const auto largest = *std::max_element(dims.begin(), dims.end());
    if (radius_range[1] > static_cast<double>(largest))
        throw InfeasibleError("lesion radius exceeds the grid");
}

VolumeGrid voxelize(const Ellipsoid& e, const Dims& dims)
{
    const std::size_t nd = dims.size();
    const double reach = e.semi_axes[0];
    std::array<std::size_t, 3> lo{0, 0, 0}, hi{0, 0, 0};
    for (std::size_t a = 0; a < nd; ++a) {
        const double l = std::ceil(e.center[a] - reach);
        const double h = std::floor(e.center[a] + reach);
        lo[a] = static_cast<std::size_t>(std::max(0.0, l));
        hi[a] = static_cast<std::size_t>(std::clamp(h, -1.0, static_cast<double>(dims[a] - 1)) + 1.0);
        if (l > static_cast<double>(dims[a] - 1) || h < 0.0)
            return VolumeGrid::zeros(dims, DType::binary);
    }
    for (std::size_t a = nd; a < 3; ++a)
        hi[a] = 1;

    std::vector<std::uint8_t> mask(voxel_count(dims), 0);
    for (std::size_t i = lo[0]; i < hi[0]; ++i)
        for (std::size_t j = lo[1]; j < hi[1]; ++j)
            for (std::size_t k = lo[2]; k < hi[2]; ++k) {
                const Vec3 p{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
                Vec3 d{p[0] - e.center[0], p[1] - e.center[1], p[2] - e.center[2]};
                for (std::size_t a = nd; a < 3; ++a)
                    d[a] = 0.0;
                double r = 0.0;
                for (std::size_t a = 0; a < nd; ++a) {
                    const double t = dot(d, e.axes[a]) / e.semi_axes[a];
                    r += t * t;
                }
                if (r <= 1.0)
                    mask[ravel(dims, {i, j, k})] = 1;
            }
    return VolumeGrid::from_mask(dims, mask);
}

std::vector<VolumeGrid> generate_lesions(const LesionDistributionSpec& spec, const Dims& dims)
{
    spec.validate(dims);
    Rng rng(spec.rng_seed);
    const std::size_t nd = dims.size();
    const Vec3 mid = grid_midpoint(dims);
    std::uniform_real_distribution<double> radius(spec.radius_range[0], spec.radius_range[1]);
    std::uniform_real_distribution<double> aspect(spec.aspect_range[0], spec.aspect_range[1]);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);

    constexpr int kMaxRetries = 100;
    std::vector<VolumeGrid> lesions;
    lesions.reserve(spec.count);
    for (std::size_t n = 0; n < spec.count; ++n) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > kMaxRetries)
                throw InfeasibleError("lesion voxelization stayed empty after 100 resamples");
            Ellipsoid e;
            for (std::size_t a = 0; a < nd; ++a) {
                std::uniform_int_distribution<std::size_t> pos(0, dims[a] - 1);
                e.center[a] = static_cast<double>(pos(rng));
            }
            const double major = radius(rng);
            e.semi_axes = {major, major * aspect(rng), nd == 3 ? major * aspect(rng) : 1.0};

            const Vec3 offset{e.center[0] - mid[0], e.center[1] - mid[1], nd == 3 ? e.center[2] - mid[2] : 0.0};
            const bool structured = spec.orientation_mode == OrientationMode::spatially_structured;
            if (nd == 2) {
                double theta;
                if (structured) {
                    theta = std::atan2(offset[1], offset[0]);
                    if (spec.structured_orientation == StructuredOrientation::tangential)
                        theta += 0.5 * std::numbers::pi;
                } else {
                    theta = angle(rng);
                }
                e.axes = {Vec3{std::cos(theta), std::sin(theta), 0.0}, Vec3{-std::sin(theta), std::cos(theta), 0.0},
                          Vec3{0.0, 0.0, 1.0}};
            } else if (structured) {
                Vec3 radial = dot(offset, offset) > 1e-12 ? offset : Vec3{1.0, 0.0, 0.0};
                if (spec.structured_orientation == StructuredOrientation::tangential) {
                    const Vec3 ref = std::abs(normalized(radial)[2]) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
                    radial = cross(radial, ref);
                }
                e.axes = frame_from_major(radial);
            } else {
                e.axes = random_rotation(rng);
            }

            auto mask = voxelize(e, dims);
            if (mask.count_nonzero() > 0) {
                lesions.push_back(std::move(mask));
                break;
            }
        }
    }
    return lesions;
}

void SubstrateSpec::validate(const Dims& dims) const
{
    check_dims(dims);
    if (blobs.empty())
        throw InfeasibleError("substrate declares no blobs");
    std::vector<std::string> names;
    for (const auto& b : blobs) {
        if (b.name.empty())
            throw FormatError("blob without a name");
        if (std::find(names.begin(), names.end(), b.name) != names.end())
            throw FormatError("duplicate blob name '" + b.name + "'");
        names.push_back(b.name);
        for (std::size_t a = 0; a < dims.size(); ++a) {
            if (b.center[a] < 0.0 || b.center[a] > static_cast<double>(dims[a] - 1))
                throw InfeasibleError("blob '" + b.name + "' centre lies outside the grid");
            if (!(b.scale[a] > 0.0))
                throw InfeasibleError("blob '" + b.name + "' has a non-positive scale");
        }
    }
    Formula(formula, names);
}

RealizedSubstrate realize_substrate(const SubstrateSpec& spec, const Dims& dims)
{
    spec.validate(dims);
    std::vector<std::string> names;
    for (const auto& b : spec.blobs)
        names.push_back(b.name);
    const Formula formula(spec.formula, names);

    const auto n = voxel_count(dims);
    std::vector<std::vector<std::uint8_t>> member(spec.blobs.size(), std::vector<std::uint8_t>(n, 0));
    for (std::size_t b = 0; b < spec.blobs.size(); ++b) {
        const auto& blob = spec.blobs[b];
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = unravel(dims, i);
            double q = 0.0;
            for (std::size_t a = 0; a < dims.size(); ++a) {
                const double t = (static_cast<double>(c[a]) - blob.center[a]) / blob.scale[a];
                q += t * t;
            }
            member[b][i] = blob.amplitude * std::exp(-0.5 * q) > spec.blob_threshold;
        }
        if (std::count(member[b].begin(), member[b].end(), 1) == 0)
            throw InfeasibleError("blob '" + blob.name + "' is empty at threshold "
                                  + std::to_string(spec.blob_threshold));
    }

    std::vector<std::uint8_t> gt(n, 0);
    auto flags = std::make_unique<bool[]>(spec.blobs.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t b = 0; b < spec.blobs.size(); ++b)
            flags[b] = member[b][i] != 0;
        gt[i] = formula.evaluate(std::span<const bool>(flags.get(), spec.blobs.size()));
    }
    if (std::count(gt.begin(), gt.end(), 1) == 0)
        throw InfeasibleError("formula '" + spec.formula + "' yields an empty ground truth");

    RealizedSubstrate out;
    for (const auto& m : member)
        out.blob_masks.push_back(VolumeGrid::from_mask(dims, m));
    out.ground_truth = VolumeGrid::from_mask(dims, gt);
    return out;
}

double overlap_ratio(const VolumeGrid& lesion, const VolumeGrid& substrate)
{
    if (lesion.dims() != substrate.dims())
        throw ShapeError("lesion and substrate dims differ");
    double hit = 0.0, total = 0.0;
    const auto x = lesion.values();
    const auto m = substrate.values();
    for (std::size_t k = 0; k < x.size(); ++k) {
        hit += static_cast<double>(x[k]) * m[k];
        total += m[k];
    }
    if (total <= 0.0)
        throw InfeasibleError("overlap ratio against an empty substrate");
    return hit / total;
}

double deficit_linear(double ratio) { return ratio; }

double deficit_binary(double ratio, double threshold) { return ratio > threshold ? 1.0 : 0.0; }

double deficit_sigmoid(double ratio) { return 1.0 / (1.0 + std::exp(20.0 * ratio - 6.0)); }

void DeficitModel::validate() const
{
    if (omega == Omega::binary && !(binary_T > 0.0 && binary_T < 1.0))
        throw InfeasibleError("binary threshold T must lie in (0, 1)");
    if (noise.kind == NoiseModel::Kind::flip && !(noise.p >= 0.0 && noise.p <= 1.0))
        throw InfeasibleError("flip probability must lie in [0, 1]");
    if (noise.kind == NoiseModel::Kind::convex && !(noise.alpha >= 0.0 && noise.alpha <= 1.0))
        throw InfeasibleError("convex noise weight must lie in [0, 1]");
}

double apply_omega(const DeficitModel& model, double ratio)
{
    switch (model.omega) {
    case Omega::linear:
        return deficit_linear(ratio);
    case Omega::binary:
        return deficit_binary(ratio, model.binary_T);
    case Omega::sigmoid:
        return deficit_sigmoid(ratio);
    }
    return 0.0;
}

std::vector<double> apply_noise(std::vector<double> labels, LabelKind kind, const NoiseModel& noise, Rng& rng)
{
    switch (noise.kind) {
    case NoiseModel::Kind::none:
        break;
    case NoiseModel::Kind::flip: {
        if (kind != LabelKind::binary)
            throw ShapeError("flip noise applies to binary labels only");
        std::bernoulli_distribution flip(noise.p);
        for (auto& y : labels)
            if (flip(rng))
                y = 1.0 - y;
        break;
    }
    case NoiseModel::Kind::convex: {
        if (kind != LabelKind::real)
            throw ShapeError("convex noise applies to real labels only");
        std::uniform_real_distribution<double> eps(0.0, 1.0);
        for (auto& y : labels)
            y = (1.0 - noise.alpha) * y + noise.alpha * eps(rng);
        break;
    }
    }
    return labels;
}

Splits make_splits(std::size_t n, Rng& rng)
{
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i)
        order[i] = i;
    shuffle_in_place(order, rng);

    const auto held = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
    const auto n_val = (held + 1) / 2;
    const auto n_cal = held - n_val;

    Splits s;
    s.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.calibration.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val),
                         order.begin() + static_cast<std::ptrdiff_t>(held));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
    for (auto* v : {&s.train, &s.validation, &s.calibration})
        std::sort(v->begin(), v->end());
    return s;
}

std::size_t Dataset::count_positive() const
{
    return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](double y) { return y > 0.5; }));
}

Dataset simulate_dataset(const std::vector<VolumeGrid>& lesions, const std::vector<VolumeGrid>& substrates,
                         const DeficitModel& model)
{
    model.validate();
    if (substrates.empty() || substrates.size() > 2)
        throw ShapeError("simulate_dataset takes one or two substrates");
    if (lesions.empty())
        throw InfeasibleError("no lesions");

    Dataset ds;
    ds.dims = lesions.front().dims();
    ds.label_kind = model.label_kind();
    ds.lesions = lesions;

    Rng tag_rng(derive_seed(model.rng_seed, 1));
    Rng noise_rng(derive_seed(model.rng_seed, 2));
    Rng split_rng(derive_seed(model.rng_seed, 3));

    std::bernoulli_distribution coin(0.5);
    std::vector<double> clean(lesions.size());
    ds.source_tag.assign(lesions.size(), 0);
    for (std::size_t i = 0; i < lesions.size(); ++i) {
        if (substrates.size() == 2)
            ds.source_tag[i] = coin(tag_rng) ? 1 : 0;
        const auto& m = substrates[static_cast<std::size_t>(ds.source_tag[i])];
        clean[i] = apply_omega(model, overlap_ratio(lesions[i], m));
    }
    ds.labels = apply_noise(std::move(clean), ds.label_kind, model.noise, noise_rng);
    ds.splits = make_splits(lesions.size(), split_rng);
    return ds;
}

std::pair<std::size_t, std::size_t> stratified_counts(std::size_t target_n, std::size_t positives,
                                                      std::size_t negatives)
{
    if (target_n < 500) {
        const auto pos = target_n / 2;
        const auto neg = target_n - pos;
        if (pos <= positives && neg <= negatives)
            return {pos, neg};
        throw InfeasibleError("cannot draw a 1:1 sample of " + std::to_string(target_n) + " ("
                              + std::to_string(positives) + " positives available)");
    }
    for (int share : {40, 30, 20, 10}) {
        const auto pos = target_n * static_cast<std::size_t>(share) / 100;
        const auto neg = target_n - pos;
        if (pos <= positives && neg <= negatives)
            return {pos, neg};
    }
    throw InfeasibleError("no positive/negative ratio down to 10/90 is achievable for n="
                          + std::to_string(target_n));
}

Dataset stratified_sample(const Dataset& dataset, std::size_t target_n, Rng& rng)
{
    if (dataset.label_kind != LabelKind::binary)
        throw ShapeError("stratified sampling needs binary labels");
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        (dataset.labels[i] > 0.5 ? pos : neg).push_back(i);
    const auto [n_pos, n_neg] = stratified_counts(target_n, pos.size(), neg.size());

    shuffle_in_place(pos, rng);
    shuffle_in_place(neg, rng);
    std::vector<std::size_t> chosen(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_pos));
    chosen.insert(chosen.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_neg));
    std::sort(chosen.begin(), chosen.end());

    Dataset out;
    out.dims = dataset.dims;
    out.label_kind = dataset.label_kind;
    for (auto i : chosen) {
        out.lesions.push_back(dataset.lesions[i]);
        out.labels.push_back(dataset.labels[i]);
        out.source_tag.push_back(dataset.source_tag.empty() ? 0 : dataset.source_tag[i]);
    }
    out.splits = make_splits(out.size(), rng);
    return out;
}

} // namespace ldm
