#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ldm/dlm.hpp"
#include "ldm/error.hpp"
#include "ldm/harness.hpp"
#include "ldm/io.hpp"
#include "ldm/metrics.hpp"
#include "ldm/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ldm;

namespace {

struct Common {
    std::uint64_t seed = 0;
    std::string config;
    std::string out = ".";
    unsigned threads = 1;
};

void add_common(CLI::App* cmd, Common& c, bool config_required)
{
    cmd->add_option("--seed", c.seed, "Master seed")->capture_default_str();
    auto* cfg = cmd->add_option("--config", c.config, "JSON configuration file");
    if (config_required)
        cfg->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
    cmd->add_option("--threads", c.threads, "Worker threads")->capture_default_str()->check(CLI::Range(1u, 1024u));
}

std::ofstream open_out(const fs::path& path)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f)
        throw Error("cannot write " + path.string());
    return f;
}

void finish(std::ofstream& f, const fs::path& path)
{
    f.close();
    if (!f)
        throw Error("failed writing " + path.string());
}

ExperimentSpec load_spec(const std::string& path)
{
    return read_json_file(path).get<ExperimentSpec>();
}

// ---- simulate ----

void cmd_simulate(const Common& c)
{
    auto spec = load_spec(c.config);
    check_dims(spec.dims);
    spec.lesions.validate(spec.dims);
    spec.deficit.validate();
    if (spec.substrates.empty())
        throw ShapeError("simulation needs a substrate");
    spec.lesions.rng_seed = derive_seed(c.seed, 1);
    spec.deficit.rng_seed = derive_seed(c.seed, 2);

    std::vector<SubstrateSpec> subs{spec.substrates.front()};
    if (spec.deficit.heterogeneity)
        subs.push_back(*spec.deficit.heterogeneity);
    else if (spec.substrates.size() > 1)
        subs.push_back(spec.substrates[1]);
    std::vector<VolumeGrid> masks;
    for (const auto& s : subs) {
        s.validate(spec.dims);
        masks.push_back(realize_substrate(s, spec.dims).ground_truth);
    }
    const auto lesions = generate_lesions(spec.lesions, spec.dims);
    const auto ds = simulate_dataset(lesions, masks, spec.deficit);

    const fs::path out(c.out);
    json extra{{"seed", c.seed},
               {"lesions", spec.lesions},
               {"substrates", subs},
               {"deficit", spec.deficit}};
    save_dataset(ds, out, extra);
    save_volume(masks.front(), out / "substrate.vol");
    if (masks.size() > 1)
        save_volume(masks.back(), out / "substrate_2.vol");
    std::cerr << "wrote " << ds.size() << " lesions (" << ds.count_positive() << " positive) to " << out << "\n";
}

// ---- train ----

struct TrainArgs {
    std::string data;
    std::string ablation = "none";
};

void cmd_train(const Common& c, const TrainArgs& a)
{
    const auto ds = load_dataset(a.data);
    DlmConfig cfg;
    if (!c.config.empty()) {
        // a bare model config, or an experiment spec carrying one under "dlm"
        const auto j = read_json_file(c.config);
        (j.contains("dlm") ? j.at("dlm") : j).get_to(cfg);
    }
    cfg.dims = ds.dims;
    cfg.label_kind = ds.label_kind;
    cfg.rng_seed = c.seed;
    if (a.ablation == "labels_only") {
        cfg.elbo_terms = ElboTerms::labels_only;
    } else if (a.ablation == "deterministic") {
        cfg.elbo_terms = ElboTerms::labels_only;
        cfg.latent_mode = LatentMode::deterministic;
    }
    cfg.validate();

    auto trained = train(DlmModel(cfg), ds);
    const fs::path out(c.out);
    fs::create_directories(out);
    save_checkpoint(trained.model, out / "checkpoint.json");

    const bool lesion_col = cfg.elbo_terms == ElboTerms::full;
    const bool kl_col = cfg.latent_mode == LatentMode::variational;
    const auto log_path = out / "training_log.csv";
    auto log = open_out(log_path);
    log << "epoch,train_loss,train_label_ll";
    if (lesion_col)
        log << ",train_lesion_ll";
    if (kl_col)
        log << ",train_kl";
    log << ",val_label_ll\n";
    for (const auto& e : trained.log) {
        log << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.train_label_ll);
        if (lesion_col)
            log << ',' << format_double(e.train_lesion_ll);
        if (kl_col)
            log << ',' << format_double(e.train_kl);
        log << ',' << format_double(e.val_label_ll) << '\n';
    }
    finish(log, log_path);

    const auto mean_map = infer_substrate(trained.model, cfg.n_substrate_samples, derive_seed(c.seed, 5));
    const auto cal = calibrate_threshold(mean_map, ds, cfg.sigma_floor);
    save_volume(cal.mean_map, out / "substrate_mean.vol");
    save_volume(cal.binary_map, out / "substrate.vol");
    write_json_file(out / "summary.json", json{{"best_epoch", trained.best_epoch},
                                               {"epochs_run", trained.epochs_run},
                                               {"best_val_label_ll", trained.best_val_label_ll},
                                               {"threshold", cal.threshold},
                                               {"substrate_voxels", cal.binary_map.count_nonzero()},
                                               {"ablation", a.ablation}});
    std::cerr << "trained " << trained.epochs_run << " epochs (best " << trained.best_epoch << "), t = "
              << cal.threshold << "\n";
}

// ---- evaluate ----

struct EvalArgs {
    std::string pred, truth;
    std::optional<double> quantile;
    std::vector<double> target;
    double voxel_size = 1.0;
};

json report_json(const EvalReport& r)
{
    json j{{"dice", r.dice}};
    j["hausdorff"] = r.hausdorff ? json(*r.hausdorff) : json(nullptr);
    j["asd"] = r.asd ? json(*r.asd) : json(nullptr);
    j["displacement"] = r.displacement ? json(*r.displacement) : json(nullptr);
    j["displacement_magnitude"] = r.displacement_magnitude ? json(*r.displacement_magnitude) : json(nullptr);
    return j;
}

void cmd_evaluate(const Common& c, const EvalArgs& a)
{
    auto pred = load_volume(a.pred);
    const auto truth = load_volume(a.truth);
    if (pred.dims() != truth.dims())
        throw ShapeError("prediction and ground truth differ in shape");
    if (!truth.is_binary())
        throw ShapeError("ground truth must be a binary volume");
    if (!pred.is_binary()) {
        if (!a.quantile)
            throw ShapeError("real-valued prediction needs --quantile");
        pred = quantile_binarize(pred, *a.quantile);
    }
    std::optional<std::array<double, 3>> target;
    if (!a.target.empty()) {
        if (a.target.size() != truth.ndim())
            throw ShapeError("--target needs one coordinate per axis");
        target = std::array<double, 3>{};
        std::copy(a.target.begin(), a.target.end(), target->begin());
    }
    const auto report = evaluate(pred, truth, target, a.voxel_size);
    const fs::path out(c.out);
    fs::create_directories(out);
    write_json_file(out / "report.json", report_json(report));
    save_volume(pred, out / "map.vol");
    std::cout << report_json(report).dump() << "\n";
}

// ---- benchmark ----

void cmd_benchmark(const Common& c)
{
    auto spec = load_spec(c.config);
    spec.master_seed = c.seed;
    spec.vlsm.threads = 1;
    spec.validate();
    const auto rows = run_experiment(spec, c.threads);
    const fs::path out(c.out);
    const auto path = out / "results.csv";
    auto f = open_out(path);
    write_results_csv(f, rows);
    finish(f, path);
    write_json_file(out / "spec.json", json(spec));
    std::cerr << rows.size() << " rows written to " << path << "\n";
}

// ---- spatial-bias ----

struct BiasArgs {
    std::size_t stride = 1;
};

void cmd_spatial_bias(const Common& c, const BiasArgs& a)
{
    const auto cfg = read_json_file(c.config);
    const auto spec = cfg.get<ExperimentSpec>();
    SpatialBiasOptions opt;
    opt.dims = spec.dims;
    opt.lesions = spec.lesions;
    if (cfg.contains("methods"))
        opt.methods = spec.methods;
    opt.min_hits = cfg.value("min_hits", opt.min_hits);
    opt.stride = cfg.value("stride", a.stride);
    opt.dlm = spec.dlm;
    opt.vlsm = spec.vlsm;
    opt.vlsm.threads = c.threads;
    opt.seed = c.seed;
    const auto result = run_spatial_bias(opt);

    const fs::path out(c.out);
    const auto path = out / "spatial_bias.csv";
    auto f = open_out(path);
    write_spatial_bias_csv(f, result);
    finish(f, path);
    json summary = json::array();
    for (const auto& s : result.summary) {
        summary.push_back({{"method", s.method}, {"scored", s.scored}, {"mean", s.mean}, {"sd", s.sd}});
        std::cout << s.method << ": " << s.mean << " +/- " << s.sd << " (" << s.scored << " voxels)\n";
    }
    write_json_file(out / "summary.json", json{{"methods", summary}, {"skipped_voxels", result.skipped_voxels}});
}

// ---- fig1 ----

struct Fig1Args {
    std::size_t seeds = 10;
    bool maps = false;
};

void cmd_fig1(const Common& c, const Fig1Args& a)
{
    Fig1Options opt;
    if (!c.config.empty()) {
        const auto j = read_json_file(c.config);
        opt.lesion_count = j.value("lesion_count", opt.lesion_count);
        opt.deficit_threshold = j.value("deficit_threshold", opt.deficit_threshold);
        opt.alpha = j.value("alpha", opt.alpha);
        opt.min_hits = j.value("min_hits", opt.min_hits);
        if (j.contains("radius_range"))
            j.at("radius_range").get_to(opt.radius_range);
        if (j.contains("aspect_range"))
            j.at("aspect_range").get_to(opt.aspect_range);
    }
    const fs::path out(c.out);
    const auto path = out / "fig1.csv";
    auto f = open_out(path);
    f << "lesions,substrate,seed,deficits,significant,displacement\n";
    const char* names[] = {"simple", "complex"};
    for (auto lc : {Complexity::simple, Complexity::complex}) {
        for (auto sc : {Complexity::simple, Complexity::complex}) {
            std::vector<double> mags;
            for (std::size_t s = 0; s < a.seeds; ++s) {
                const auto seed = derive_seed(c.seed, s);
                const auto r = run_fig1_replication(lc, sc, seed, opt);
                const auto ln = names[static_cast<int>(lc)], sn = names[static_cast<int>(sc)];
                f << ln << ',' << sn << ',' << s << ',' << r.deficits << ',' << r.map.significant.count_nonzero() << ','
                  << (r.displacement_magnitude ? format_double(*r.displacement_magnitude) : "") << '\n';
                if (r.displacement_magnitude)
                    mags.push_back(*r.displacement_magnitude);
                if (a.maps && s == 0) {
                    const std::string stem = std::string(ln) + "_" + sn;
                    save_volume(r.map.statistic, out / (stem + "_stat.vol"));
                    save_volume(r.map.significant, out / (stem + "_sig.vol"));
                    save_volume(r.ground_truth, out / (stem + "_truth.vol"));
                }
            }
            std::sort(mags.begin(), mags.end());
            std::cout << "lesions=" << names[static_cast<int>(lc)] << " substrate=" << names[static_cast<int>(sc)]
                      << " median displacement ";
            if (mags.empty())
                std::cout << "n/a\n";
            else
                std::cout << (mags.size() % 2 ? mags[mags.size() / 2]
                                              : 0.5 * (mags[mags.size() / 2 - 1] + mags[mags.size() / 2]))
                          << " (" << mags.size() << " scored)\n";
        }
    }
    finish(f, path);
}

// ---- render ----

struct RenderArgs {
    std::string input, overlay, output;
    int axis = 2;
    std::size_t slice = 0;
};

void cmd_render(const RenderArgs& a)
{
    const auto vol = load_volume(a.input);
    const auto& d = vol.dims();
    std::optional<VolumeGrid> overlay;
    if (!a.overlay.empty()) {
        overlay = load_volume(a.overlay);
        if (overlay->dims() != d)
            throw ShapeError("overlay shape differs from the input");
    }

    // In-plane axes (row, col) and the fixed index on the sliced axis.
    std::size_t row_axis = 0, col_axis = 1;
    if (d.size() == 3) {
        if (a.axis < 0 || a.axis > 2)
            throw ShapeError("--axis must be 0, 1 or 2");
        if (a.slice >= d[a.axis])
            throw ShapeError("slice index " + std::to_string(a.slice) + " out of range");
        std::vector<std::size_t> rest;
        for (std::size_t k = 0; k < 3; ++k)
            if (static_cast<int>(k) != a.axis)
                rest.push_back(k);
        row_axis = rest[0];
        col_axis = rest[1];
    } else if (a.slice != 0) {
        throw ShapeError("planar volumes have a single slice");
    }
    const auto H = d[row_axis], W = d[col_axis];
    auto at = [&](std::size_t r, std::size_t col) {
        std::array<std::size_t, 3> x{};
        x[row_axis] = r;
        x[col_axis] = col;
        if (d.size() == 3)
            x[a.axis] = a.slice;
        return ravel(d, x);
    };

    double lo = 0.0, hi = 0.0;
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t col = 0; col < W; ++col) {
            const double v = vol[at(r, col)];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    std::vector<int> px(H * W, 0);
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t col = 0; col < W; ++col)
            if (hi > lo)
                px[r * W + col] = static_cast<int>(std::lround(255.0 * (vol[at(r, col)] - lo) / (hi - lo)));
    if (overlay) {
        auto in = [&](long r, long col) {
            return r >= 0 && col >= 0 && r < static_cast<long>(H) && col < static_cast<long>(W) &&
                   (*overlay)[at(r, col)] != 0.0f;
        };
        for (long r = 0; r < static_cast<long>(H); ++r)
            for (long col = 0; col < static_cast<long>(W); ++col)
                if (in(r, col) && (!in(r - 1, col) || !in(r + 1, col) || !in(r, col - 1) || !in(r, col + 1)))
                    px[r * W + col] = 255;
    }

    const fs::path path(a.output);
    auto f = open_out(path);
    f << "P2\n" << W << ' ' << H << "\n255\n";
    for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t col = 0; col < W; ++col)
            f << (col ? " " : "") << px[r * W + col];
        f << '\n';
    }
    finish(f, path);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Lesion-deficit mapping toolkit"};
    app.require_subcommand(1);
    app.get_formatter()->column_width(36);

    Common c_sim, c_train, c_eval, c_bench, c_bias, c_fig1;

    auto* sim = app.add_subcommand("simulate", "Simulate a lesion-deficit dataset from a JSON spec");
    add_common(sim, c_sim, true);

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train the generative model on a dataset directory");
    add_common(tr, c_train, false);
    tr->add_option("--data", ta.data, "Dataset directory written by simulate")->required()->check(CLI::ExistingDirectory);
    tr->add_option("--ablation", ta.ablation, "Model variant")
        ->capture_default_str()
        ->check(CLI::IsMember({"none", "labels_only", "deterministic"}));

    EvalArgs ea;
    auto* ev = app.add_subcommand("evaluate", "Score a predicted map against a ground-truth mask");
    add_common(ev, c_eval, false);
    ev->add_option("--pred", ea.pred, "Predicted map (VOL1)")->required()->check(CLI::ExistingFile);
    ev->add_option("--truth", ea.truth, "Ground-truth mask (VOL1)")->required()->check(CLI::ExistingFile);
    ev->add_option("--quantile", ea.quantile, "Quantile threshold for real-valued predictions")
        ->check(CLI::Range(0.0, 1.0));
    ev->add_option("--target", ea.target, "Displacement target coordinates (default: ground-truth centroid)");
    ev->add_option("--voxel-size", ea.voxel_size, "Distance scale per voxel")->capture_default_str();

    auto* bench = app.add_subcommand("benchmark", "Run an experiment matrix and write results.csv");
    add_common(bench, c_bench, true);

    BiasArgs ba;
    auto* bias = app.add_subcommand("spatial-bias", "Single-voxel displacement protocol");
    add_common(bias, c_bias, true);
    bias->add_option("--stride", ba.stride, "Visit voxels on this lattice only (config may override)")
        ->capture_default_str();

    Fig1Args fa;
    auto* fig = app.add_subcommand("fig1", "Four-condition lesion/substrate complexity demonstration");
    add_common(fig, c_fig1, false);
    fig->add_option("--seeds", fa.seeds, "Replications per condition")->capture_default_str();
    fig->add_flag("--maps", fa.maps, "Also write the first replication's maps");

    RenderArgs ra;
    auto* ren = app.add_subcommand("render", "Render a plane of a volume as a P2 graymap");
    ren->add_option("--input", ra.input, "Volume (VOL1)")->required()->check(CLI::ExistingFile);
    ren->add_option("--overlay", ra.overlay, "Binary mask drawn as an outline")->check(CLI::ExistingFile);
    ren->add_option("--axis", ra.axis, "Sliced axis for 3D volumes")->capture_default_str();
    ren->add_option("--slice", ra.slice, "Index along the sliced axis")->capture_default_str();
    ren->add_option("--out", ra.output, "Output .pgm path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed())
            cmd_simulate(c_sim);
        else if (tr->parsed())
            cmd_train(c_train, ta);
        else if (ev->parsed())
            cmd_evaluate(c_eval, ea);
        else if (bench->parsed())
            cmd_benchmark(c_bench);
        else if (bias->parsed())
            cmd_spatial_bias(c_bias, ba);
        else if (fig->parsed())
            cmd_fig1(c_fig1, fa);
        else if (ren->parsed())
            cmd_render(ra);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
