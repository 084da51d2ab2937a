#include "ldm/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>
#include <thread>

#include "ldm/error.hpp"
#include "ldm/io.hpp"
#include "ldm/metrics.hpp"

namespace ldm {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<Method, const char*>, 5> kMethods{{{Method::vlsm_fisher, "vlsm_fisher"},
                                                                  {Method::vlsm_bm, "vlsm_bm"},
                                                                  {Method::dlm, "dlm"},
                                                                  {Method::dlm_labels_only, "dlm_labels_only"},
                                                                  {Method::dlm_deterministic, "dlm_deterministic"}}};

const std::set<std::string> kMetricNames{"dice", "hausdorff", "asd", "displacement"};

// Stream ids for derive_seed.
enum : std::uint64_t { kLesionStream = 1, kDeficitStream = 2, kSampleStream = 3, kMethodStream = 4, kPriorStream = 5 };

std::uint64_t cell_seed(const ExperimentSpec& spec, std::uint64_t seed) { return derive_seed(spec.master_seed, seed); }

// The second substrate may come from the deficit model's heterogeneity entry.
std::vector<SubstrateSpec> scenario_substrates(const ExperimentSpec& spec)
{
    auto out = spec.substrates;
    if (spec.deficit.heterogeneity)
        out.push_back(*spec.deficit.heterogeneity);
    return out;
}

} // namespace

std::string to_string(Method m)
{
    for (const auto& [v, name] : kMethods)
        if (v == m)
            return name;
    return "?";
}

Method method_from_string(const std::string& s)
{
    for (const auto& [v, name] : kMethods)
        if (s == name)
            return v;
    throw FormatError("unknown method '" + s + "'");
}

bool is_dlm(Method m) { return m == Method::dlm || m == Method::dlm_labels_only || m == Method::dlm_deterministic; }

void ExperimentSpec::validate() const
{
    check_dims(dims);
    lesions.validate(dims);
    deficit.validate();
    const auto all = scenario_substrates(*this);
    if (all.empty() || all.size() > 2)
        throw ShapeError("an experiment needs one or two substrates");
    for (const auto& s : all)
        s.validate(dims);
    if (methods.empty() || sample_sizes.empty() || seeds.empty())
        throw InfeasibleError("methods, sample_sizes and seeds must be non-empty");
    const auto kind = deficit.label_kind();
    for (auto m : methods) {
        if (m == Method::vlsm_fisher && kind != LabelKind::binary)
            throw ShapeError("vlsm_fisher needs binary labels");
        if (m == Method::vlsm_bm && kind != LabelKind::real)
            throw ShapeError("vlsm_bm needs real-valued labels");
    }
    for (const auto& m : metrics)
        if (!kMetricNames.count(m))
            throw FormatError("unknown metric '" + m + "'");
    for (auto n : sample_sizes) {
        if (n < 20)
            throw InfeasibleError("sample sizes below 20 leave no held-out data");
        if (n > lesions.count)
            throw InfeasibleError("sample size " + std::to_string(n) + " exceeds the lesion pool");
    }
    if (std::any_of(methods.begin(), methods.end(), is_dlm)) {
        DlmConfig c = dlm;
        c.dims = dims;
        c.validate();
    }
}

void to_json(json& j, const ExperimentSpec& s)
{
    std::vector<std::string> methods;
    for (auto m : s.methods)
        methods.push_back(to_string(m));
    j = json{{"scenario", s.scenario},
             {"dims", s.dims},
             {"lesions", s.lesions},
             {"substrates", s.substrates},
             {"deficit", s.deficit},
             {"methods", methods},
             {"sample_sizes", s.sample_sizes},
             {"seeds", s.seeds},
             {"metrics", s.metrics},
             {"dlm", s.dlm},
             {"vlsm",
              {{"n_perm", s.vlsm.n_perm},
               {"percentile", s.vlsm.percentile},
               {"min_hits", s.vlsm.min_hits},
               {"fisher_direction", s.vlsm.fisher_direction == Direction::positive ? "positive" : "two_sided"},
               {"bm_direction", s.vlsm.bm_direction == Direction::positive ? "positive" : "two_sided"}}},
             {"master_seed", s.master_seed}};
}

void from_json(const json& j, ExperimentSpec& s)
{
    auto direction = [](const std::string& d) {
        if (d == "positive")
            return Direction::positive;
        if (d == "two_sided")
            return Direction::two_sided;
        throw FormatError("unknown direction '" + d + "'");
    };
    if (j.contains("scenario"))
        j.at("scenario").get_to(s.scenario);
    if (j.contains("dims"))
        j.at("dims").get_to(s.dims);
    if (j.contains("lesions"))
        j.at("lesions").get_to(s.lesions);
    if (j.contains("substrate"))
        s.substrates = {j.at("substrate").get<SubstrateSpec>()};
    if (j.contains("substrates"))
        j.at("substrates").get_to(s.substrates);
    if (j.contains("deficit"))
        j.at("deficit").get_to(s.deficit);
    if (j.contains("methods")) {
        s.methods.clear();
        for (const auto& m : j.at("methods"))
            s.methods.push_back(method_from_string(m.get<std::string>()));
    }
    if (j.contains("sample_sizes"))
        j.at("sample_sizes").get_to(s.sample_sizes);
    if (j.contains("seeds"))
        j.at("seeds").get_to(s.seeds);
    if (j.contains("metrics"))
        j.at("metrics").get_to(s.metrics);
    if (j.contains("dlm"))
        j.at("dlm").get_to(s.dlm);
    if (j.contains("vlsm")) {
        const auto& v = j.at("vlsm");
        s.vlsm.n_perm = v.value("n_perm", s.vlsm.n_perm);
        s.vlsm.percentile = v.value("percentile", s.vlsm.percentile);
        s.vlsm.min_hits = v.value("min_hits", s.vlsm.min_hits);
        if (v.contains("fisher_direction"))
            s.vlsm.fisher_direction = direction(v.at("fisher_direction").get<std::string>());
        if (v.contains("bm_direction"))
            s.vlsm.bm_direction = direction(v.at("bm_direction").get<std::string>());
    }
    if (j.contains("master_seed"))
        j.at("master_seed").get_to(s.master_seed);
}

std::vector<RowJob> enumerate_rows(const ExperimentSpec& spec)
{
    std::vector<RowJob> rows;
    for (auto n : spec.sample_sizes)
        for (auto seed : spec.seeds)
            for (auto m : spec.methods)
                rows.push_back({m, n, seed});
    return rows;
}

VolumeGrid experiment_truth(const ExperimentSpec& spec)
{
    const auto all = scenario_substrates(spec);
    auto truth = realize_substrate(all.front(), spec.dims).ground_truth;
    if (all.size() == 2) {
        const auto other = realize_substrate(all.back(), spec.dims).ground_truth;
        std::vector<std::uint8_t> u(truth.size());
        for (std::size_t i = 0; i < u.size(); ++i)
            u[i] = truth[i] > 0 || other[i] > 0;
        truth = VolumeGrid::from_mask(spec.dims, u);
    }
    return truth;
}

Dataset experiment_sample(const ExperimentSpec& spec, std::size_t n, std::uint64_t seed)
{
    const auto cell = cell_seed(spec, seed);
    auto lesion_spec = spec.lesions;
    lesion_spec.rng_seed = derive_seed(cell, kLesionStream);
    const auto pool = generate_lesions(lesion_spec, spec.dims);

    std::vector<VolumeGrid> substrates;
    for (const auto& s : scenario_substrates(spec))
        substrates.push_back(realize_substrate(s, spec.dims).ground_truth);
    auto model = spec.deficit;
    model.rng_seed = derive_seed(cell, kDeficitStream);
    const auto full = simulate_dataset(pool, substrates, model);

    Rng rng(derive_seed(cell, kSampleStream, n));
    if (full.label_kind == LabelKind::binary)
        return stratified_sample(full, n, rng);

    std::vector<std::size_t> idx(full.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle_in_place(idx, rng);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    Dataset out;
    out.dims = full.dims;
    out.label_kind = full.label_kind;
    for (auto i : idx) {
        out.lesions.push_back(full.lesions[i]);
        out.labels.push_back(full.labels[i]);
        out.source_tag.push_back(full.source_tag[i]);
    }
    out.splits = make_splits(out.size(), rng);
    return out;
}

Inference run_method(Method method, const Dataset& ds, const DlmConfig& dlm_base, const VlsmSettings& vlsm,
                     std::uint64_t seed)
{
    if (!is_dlm(method)) {
        VoxelwiseOptions opts;
        opts.test = method == Method::vlsm_fisher ? VoxelTest::fisher : VoxelTest::bm;
        opts.min_hits = vlsm.min_hits;
        opts.direction = method == Method::vlsm_fisher ? vlsm.fisher_direction : vlsm.bm_direction;
        auto stat = voxelwise_map(ds, opts);
        const auto perm = fwer_threshold_permutation(ds, opts, vlsm.n_perm, vlsm.percentile, seed, vlsm.threads);
        auto sm = StatMap::make(std::move(stat), perm.threshold);
        return {sm.significant, perm.threshold};
    }
    DlmConfig cfg = dlm_base;
    cfg.dims = ds.dims;
    cfg.label_kind = ds.label_kind;
    cfg.rng_seed = seed;
    if (method == Method::dlm_labels_only)
        cfg.elbo_terms = ElboTerms::labels_only;
    if (method == Method::dlm_deterministic) {
        cfg.elbo_terms = ElboTerms::labels_only;
        cfg.latent_mode = LatentMode::deterministic;
    }
    auto trained = train(DlmModel(cfg), ds);
    const auto mean_map = infer_substrate(trained.model, cfg.n_substrate_samples, derive_seed(seed, kPriorStream));
    auto cal = calibrate_threshold(mean_map, ds, cfg.sigma_floor);
    return {cal.binary_map, cal.threshold};
}

ResultRow run_row(const ExperimentSpec& spec, const RowJob& job)
{
    const auto start = std::chrono::steady_clock::now();
    ResultRow row;
    row.scenario = spec.scenario;
    row.method = to_string(job.method);
    row.n = job.n;
    row.seed = job.seed;
    auto wants = [&](const char* m) { return std::find(spec.metrics.begin(), spec.metrics.end(), m) != spec.metrics.end(); };
    try {
        const auto ds = experiment_sample(spec, job.n, job.seed);
        const auto method_seed =
            derive_seed(cell_seed(spec, job.seed), kMethodStream, derive_seed(job.n, static_cast<std::uint64_t>(job.method)));
        const auto inf = run_method(job.method, ds, spec.dlm, spec.vlsm, method_seed);
        const auto report = evaluate(inf.map, experiment_truth(spec));
        row.threshold = inf.threshold;
        if (wants("dice"))
            row.dice = report.dice;
        if (wants("hausdorff"))
            row.hausdorff = report.hausdorff;
        if (wants("asd"))
            row.asd = report.asd;
        if (wants("displacement"))
            row.displacement = report.displacement_magnitude;
    } catch (const InfeasibleError& e) {
        row.excluded = true;
        row.reason = std::string("infeasible: ") + e.what();
    } catch (const NumericError& e) {
        row.excluded = true;
        row.reason = std::string("numeric: ") + e.what();
    }
    row.wall_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return row;
}

std::vector<ResultRow> run_experiment(const ExperimentSpec& spec, unsigned threads)
{
    spec.validate();
    const auto jobs = enumerate_rows(spec);
    std::vector<ResultRow> rows(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++)
            rows[i] = run_row(spec, jobs[i]);
    };
    const unsigned n_workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(jobs.size())));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < n_workers; ++t)
            pool.emplace_back(worker);
    }
    return rows;
}

namespace {

std::string csv_field(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos)
        return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"')
            out += '"';
        out += c;
    }
    return out + '"';
}

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

} // namespace

void write_results_header(std::ostream& out)
{
    out << "scenario,method,n,seed,dice,hausdorff,asd,displacement,threshold,excluded,reason,wall_secs\n";
}

void write_result_row(std::ostream& out, const ResultRow& r)
{
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", r.wall_secs);
    out << csv_field(r.scenario) << ',' << r.method << ',' << r.n << ',' << r.seed << ',' << opt(r.dice) << ','
        << opt(r.hausdorff) << ',' << opt(r.asd) << ',' << opt(r.displacement) << ',' << opt(r.threshold) << ','
        << (r.excluded ? 1 : 0) << ',' << csv_field(r.reason) << ',' << wall << '\n';
}

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows)
{
    write_results_header(out);
    for (const auto& r : rows)
        write_result_row(out, r);
}

SubstrateSpec fig1_substrate(Complexity substrate, const Fig1Options& options)
{
    // Laid out on a 42-unit square and scaled to the grid. The cluster sits in
    // one quadrant; A overlaps both B and C so the conjunction is non-empty.
    const double sx = static_cast<double>(options.dims[0]) / 42.0, sy = static_cast<double>(options.dims[1]) / 42.0;
    auto blob = [&](const char* name, double x, double y) {
        return Blob{name, {x * sx, y * sy, 0.0}, {4.0 * sx, 4.0 * sy, 1.0}, 1.0};
    };
    SubstrateSpec spec;
    spec.blob_threshold = 0.5;
    spec.blobs = {blob("A", 12, 14), blob("B", 18, 10), blob("C", 17, 19)};
    spec.formula = substrate == Complexity::simple ? "A|B|C" : "A&(B|C)";
    return spec;
}

Fig1Result run_fig1_replication(Complexity lesions, Complexity substrate, std::uint64_t seed,
                                const Fig1Options& options)
{
    LesionDistributionSpec ls;
    ls.count = options.lesion_count;
    ls.radius_range = options.radius_range;
    ls.aspect_range = options.aspect_range;
    ls.orientation_mode =
        lesions == Complexity::simple ? OrientationMode::uniform : OrientationMode::spatially_structured;
    ls.rng_seed = derive_seed(seed, kLesionStream);
    const auto pool = generate_lesions(ls, options.dims);

    Fig1Result out;
    out.ground_truth = realize_substrate(fig1_substrate(substrate, options), options.dims).ground_truth;
    DeficitModel model;
    model.omega = Omega::binary;
    model.binary_T = options.deficit_threshold;
    model.rng_seed = derive_seed(seed, kDeficitStream);
    const auto ds = simulate_dataset(pool, {out.ground_truth}, model);
    out.deficits = ds.count_positive();

    VoxelwiseOptions opts;
    opts.test = VoxelTest::fisher;
    opts.min_hits = options.min_hits;
    opts.direction = Direction::positive;
    out.map = StatMap::make(voxelwise_map(ds, opts),
                            bonferroni_neglog_threshold(options.alpha, voxel_count(options.dims)));
    const auto report = evaluate(out.map.significant, out.ground_truth);
    out.displacement = report.displacement;
    out.displacement_magnitude = report.displacement_magnitude;
    return out;
}

SpatialBiasResult run_spatial_bias(const SpatialBiasOptions& options)
{
    if (options.stride < 1)
        throw InfeasibleError("stride must be >= 1");
    for (auto m : options.methods)
        if (m == Method::vlsm_bm)
            throw ShapeError("the single-voxel protocol has binary labels; vlsm_bm does not apply");
    auto ls = options.lesions;
    ls.rng_seed = derive_seed(options.seed, kLesionStream);
    const auto lesions = generate_lesions(ls, options.dims);
    const auto V = voxel_count(options.dims);

    std::vector<std::size_t> hits(V, 0);
    for (const auto& l : lesions)
        for (std::size_t v = 0; v < V; ++v)
            hits[v] += l[v] > 0;

    SpatialBiasResult res;
    DeficitModel model;
    model.omega = Omega::binary;
    model.binary_T = 0.5; // overlap with a single voxel is 0 or 1
    model.rng_seed = derive_seed(options.seed, kDeficitStream);
    for (std::size_t v = 0; v < V; ++v) {
        const auto coord = unravel(options.dims, v);
        if (std::any_of(coord.begin(), coord.end(), [&](std::size_t c) { return c % options.stride != 0; }))
            continue;
        if (hits[v] < options.min_hits) {
            ++res.skipped_voxels;
            continue;
        }
        std::vector<std::uint8_t> single(V, 0);
        single[v] = 1;
        const auto target = VolumeGrid::from_mask(options.dims, single);
        const auto ds = simulate_dataset(lesions, {target}, model);
        std::array<double, 3> pos{};
        for (std::size_t a = 0; a < coord.size(); ++a)
            pos[a] = static_cast<double>(coord[a]);
        for (auto m : options.methods) {
            SpatialBiasRow row{v, pos, to_string(m), std::nullopt, {}};
            try {
                const auto inf = run_method(m, ds, options.dlm, options.vlsm,
                                            derive_seed(options.seed, v, static_cast<std::uint64_t>(m)));
                if (inf.map.count_nonzero() == 0)
                    row.reason = "empty estimate";
                else
                    row.displacement = norm(centroid_displacement(inf.map, pos));
            } catch (const InfeasibleError& e) {
                row.reason = std::string("infeasible: ") + e.what();
            } catch (const NumericError& e) {
                row.reason = std::string("numeric: ") + e.what();
            }
            res.rows.push_back(std::move(row));
        }
    }
    for (auto m : options.methods) {
        SpatialBiasSummary s{to_string(m), 0, 0.0, 0.0};
        std::vector<double> d;
        for (const auto& r : res.rows)
            if (r.method == s.method && r.displacement)
                d.push_back(*r.displacement);
        s.scored = d.size();
        if (!d.empty()) {
            s.mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
            double ss = 0.0;
            for (double x : d)
                ss += (x - s.mean) * (x - s.mean);
            s.sd = d.size() > 1 ? std::sqrt(ss / static_cast<double>(d.size() - 1)) : 0.0;
        }
        res.summary.push_back(s);
    }
    return res;
}

void write_spatial_bias_csv(std::ostream& out, const SpatialBiasResult& result)
{
    out << "voxel,x,y,z,method,displacement,reason\n";
    for (const auto& r : result.rows)
        out << r.voxel << ',' << format_double(r.position[0]) << ',' << format_double(r.position[1]) << ','
            << format_double(r.position[2]) << ',' << r.method << ',' << opt(r.displacement) << ','
            << csv_field(r.reason) << '\n';
}

} // namespace ldm
