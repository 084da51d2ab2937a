#include "ldm/io.hpp"

#include <charconv>
#include <fstream>
#include <optional>
#include <sstream>

#include "ldm/error.hpp"

namespace ldm {

using nlohmann::json;

namespace {

template <class T>
void read_opt(const json& j, const char* key, T& field)
{
    if (j.contains(key))
        j.at(key).get_to(field);
}

template <class E, std::size_t N>
E enum_from(const std::string& s, const std::array<std::pair<E, const char*>, N>& table, const char* what)
{
    for (const auto& [e, name] : table)
        if (s == name)
            return e;
    throw FormatError(std::string("unknown ") + what + " '" + s + "'");
}

template <class E, std::size_t N>
std::string enum_to(E e, const std::array<std::pair<E, const char*>, N>& table)
{
    for (const auto& [v, name] : table)
        if (v == e)
            return name;
    return "?";
}

constexpr std::array<std::pair<OrientationMode, const char*>, 2> kOrientation{
    {{OrientationMode::uniform, "uniform"}, {OrientationMode::spatially_structured, "spatially_structured"}}};
constexpr std::array<std::pair<StructuredOrientation, const char*>, 2> kStructured{
    {{StructuredOrientation::radial, "radial"}, {StructuredOrientation::tangential, "tangential"}}};
constexpr std::array<std::pair<Omega, const char*>, 3> kOmega{
    {{Omega::linear, "linear"}, {Omega::binary, "binary"}, {Omega::sigmoid, "sigmoid"}}};
constexpr std::array<std::pair<NoiseModel::Kind, const char*>, 3> kNoise{
    {{NoiseModel::Kind::none, "none"}, {NoiseModel::Kind::flip, "flip"}, {NoiseModel::Kind::convex, "convex"}}};
constexpr std::array<std::pair<LabelKind, const char*>, 2> kLabel{
    {{LabelKind::binary, "bernoulli"}, {LabelKind::real, "gaussian"}}};
constexpr std::array<std::pair<ElboTerms, const char*>, 2> kElbo{
    {{ElboTerms::full, "full"}, {ElboTerms::labels_only, "labels_only"}}};
constexpr std::array<std::pair<LatentMode, const char*>, 2> kLatent{
    {{LatentMode::variational, "variational"}, {LatentMode::deterministic, "deterministic"}}};

} // namespace

std::string to_string(LabelKind k) { return enum_to(k, kLabel); }
LabelKind label_kind_from_string(const std::string& s) { return enum_from(s, kLabel, "label kind"); }

void to_json(json& j, const LesionDistributionSpec& s)
{
    j = json{{"count", s.count},
             {"radius_range", s.radius_range},
             {"aspect_range", s.aspect_range},
             {"orientation_mode", enum_to(s.orientation_mode, kOrientation)},
             {"structured_orientation", enum_to(s.structured_orientation, kStructured)},
             {"rng_seed", s.rng_seed}};
}

void from_json(const json& j, LesionDistributionSpec& s)
{
    read_opt(j, "count", s.count);
    read_opt(j, "radius_range", s.radius_range);
    read_opt(j, "aspect_range", s.aspect_range);
    if (j.contains("orientation_mode"))
        s.orientation_mode = enum_from(j.at("orientation_mode").get<std::string>(), kOrientation, "orientation mode");
    if (j.contains("structured_orientation"))
        s.structured_orientation =
            enum_from(j.at("structured_orientation").get<std::string>(), kStructured, "structured orientation");
    read_opt(j, "rng_seed", s.rng_seed);
}

void to_json(json& j, const Blob& b)
{
    j = json{{"name", b.name}, {"center", b.center}, {"scale", b.scale}, {"amplitude", b.amplitude}};
}

namespace {

// Accepts 1-3 entries; a short array pads with `fill` (or repeats its last entry).
std::array<double, 3> read_triple(const json& v, const char* key, std::optional<double> fill)
{
    if (v.is_number())
        return {v.get<double>(), v.get<double>(), v.get<double>()};
    if (!v.is_array() || v.empty() || v.size() > 3)
        throw FormatError(std::string("'") + key + "' must be a number or an array of 1 to 3 numbers");
    std::array<double, 3> out{};
    for (std::size_t i = 0; i < 3; ++i)
        out[i] = i < v.size() ? v[i].get<double>() : fill.value_or(out[i - 1]);
    return out;
}

} // namespace

void from_json(const json& j, Blob& b)
{
    j.at("name").get_to(b.name);
    if (j.contains("center"))
        b.center = read_triple(j.at("center"), "center", 0.0);
    if (j.contains("scale"))
        b.scale = read_triple(j.at("scale"), "scale", std::nullopt);
    read_opt(j, "amplitude", b.amplitude);
}

void to_json(json& j, const SubstrateSpec& s)
{
    j = json{{"blobs", s.blobs}, {"blob_threshold", s.blob_threshold}, {"formula", s.formula}};
}

void from_json(const json& j, SubstrateSpec& s)
{
    j.at("blobs").get_to(s.blobs);
    read_opt(j, "blob_threshold", s.blob_threshold);
    j.at("formula").get_to(s.formula);
}

void to_json(json& j, const NoiseModel& n)
{
    j = json{{"kind", enum_to(n.kind, kNoise)}, {"p", n.p}, {"alpha", n.alpha}};
}

void from_json(const json& j, NoiseModel& n)
{
    if (j.contains("kind"))
        n.kind = enum_from(j.at("kind").get<std::string>(), kNoise, "noise kind");
    read_opt(j, "p", n.p);
    read_opt(j, "alpha", n.alpha);
}

void to_json(json& j, const DeficitModel& d)
{
    j = json{{"omega", enum_to(d.omega, kOmega)}, {"binary_T", d.binary_T}, {"noise", d.noise}, {"rng_seed", d.rng_seed}};
    if (d.heterogeneity)
        j["heterogeneity"] = *d.heterogeneity;
}

void from_json(const json& j, DeficitModel& d)
{
    if (j.contains("omega"))
        d.omega = enum_from(j.at("omega").get<std::string>(), kOmega, "omega");
    read_opt(j, "binary_T", d.binary_T);
    read_opt(j, "noise", d.noise);
    read_opt(j, "rng_seed", d.rng_seed);
    if (j.contains("heterogeneity") && !j.at("heterogeneity").is_null())
        d.heterogeneity = j.at("heterogeneity").get<SubstrateSpec>();
}

void to_json(json& j, const DlmConfig& c)
{
    j = json{{"dims", c.dims},
             {"latent_dim", c.latent_dim},
             {"base_channels", c.base_channels},
             {"levels", c.levels},
             {"label_kind", enum_to(c.label_kind, kLabel)},
             {"l2_weight", c.l2_weight},
             {"early_stop_patience", c.early_stop_patience},
             {"max_epochs", c.max_epochs},
             {"batch_size", c.batch_size},
             {"lr", c.adam.lr},
             {"beta1", c.adam.beta1},
             {"beta2", c.adam.beta2},
             {"adam_eps", c.adam.eps},
             {"elbo_terms", enum_to(c.elbo_terms, kElbo)},
             {"latent_mode", enum_to(c.latent_mode, kLatent)},
             {"n_substrate_samples", c.n_substrate_samples},
             {"sigma_floor", c.sigma_floor},
             {"decoder_coords", c.decoder_coords},
             {"rng_seed", c.rng_seed}};
}

void from_json(const json& j, DlmConfig& c)
{
    read_opt(j, "dims", c.dims);
    read_opt(j, "latent_dim", c.latent_dim);
    read_opt(j, "base_channels", c.base_channels);
    read_opt(j, "levels", c.levels);
    if (j.contains("label_kind"))
        c.label_kind = label_kind_from_string(j.at("label_kind").get<std::string>());
    read_opt(j, "l2_weight", c.l2_weight);
    read_opt(j, "early_stop_patience", c.early_stop_patience);
    read_opt(j, "max_epochs", c.max_epochs);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "lr", c.adam.lr);
    read_opt(j, "beta1", c.adam.beta1);
    read_opt(j, "beta2", c.adam.beta2);
    read_opt(j, "adam_eps", c.adam.eps);
    if (j.contains("elbo_terms"))
        c.elbo_terms = enum_from(j.at("elbo_terms").get<std::string>(), kElbo, "elbo terms");
    if (j.contains("latent_mode"))
        c.latent_mode = enum_from(j.at("latent_mode").get<std::string>(), kLatent, "latent mode");
    read_opt(j, "n_substrate_samples", c.n_substrate_samples);
    read_opt(j, "sigma_floor", c.sigma_floor);
    read_opt(j, "decoder_coords", c.decoder_coords);
    read_opt(j, "rng_seed", c.rng_seed);
}

json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_json_file(const std::filesystem::path& path, const json& j)
{
    std::ofstream out(path);
    if (!out)
        throw Error("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out)
        throw Error("failed writing " + path.string());
}

std::string format_double(double v)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

std::string lesion_file(std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "lesion_%05zu.vol", i);
    return buf;
}

} // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir, const json& extra)
{
    std::filesystem::create_directories(dir);
    std::vector<const char*> split(ds.size(), "");
    for (auto i : ds.splits.train)
        split[i] = "train";
    for (auto i : ds.splits.validation)
        split[i] = "validation";
    for (auto i : ds.splits.calibration)
        split[i] = "calibration";

    std::ofstream csv(dir / "labels.csv");
    if (!csv)
        throw Error("cannot write " + (dir / "labels.csv").string());
    csv << "id,label,source_tag,split\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        save_volume(ds.lesions[i], dir / lesion_file(i));
        csv << lesion_file(i) << ',' << format_double(ds.labels[i]) << ','
            << (ds.source_tag.empty() ? 0 : ds.source_tag[i]) << ',' << split[i] << '\n';
    }
    if (!csv)
        throw Error("failed writing labels.csv");

    json manifest = extra.is_object() ? extra : json::object();
    manifest["dims"] = ds.dims;
    manifest["label_kind"] = to_string(ds.label_kind);
    manifest["count"] = ds.size();
    write_json_file(dir / "manifest.json", manifest);
}

Dataset load_dataset(const std::filesystem::path& dir)
{
    const auto manifest = read_json_file(dir / "manifest.json");
    Dataset ds;
    manifest.at("dims").get_to(ds.dims);
    ds.label_kind = label_kind_from_string(manifest.at("label_kind").get<std::string>());

    std::ifstream csv(dir / "labels.csv");
    if (!csv)
        throw Error("cannot open " + (dir / "labels.csv").string());
    std::string line;
    std::getline(csv, line);
    if (line != "id,label,source_tag,split")
        throw FormatError("labels.csv: unexpected header '" + line + "'");
    while (std::getline(csv, line)) {
        if (line.empty())
            continue;
        std::stringstream row(line);
        std::string id, label, tag, split;
        if (!std::getline(row, id, ',') || !std::getline(row, label, ',') || !std::getline(row, tag, ',')
            || !std::getline(row, split))
            throw FormatError("labels.csv: malformed row '" + line + "'");
        const std::size_t idx = ds.size();
        auto vol = load_volume(dir / id);
        if (vol.dims() != ds.dims)
            throw ShapeError(id + ": grid differs from the manifest");
        ds.lesions.push_back(std::move(vol));
        try {
            ds.labels.push_back(std::stod(label));
            ds.source_tag.push_back(std::stoi(tag));
        } catch (const std::exception&) {
            throw FormatError("labels.csv: bad number in row '" + line + "'");
        }
        if (split == "train")
            ds.splits.train.push_back(idx);
        else if (split == "validation")
            ds.splits.validation.push_back(idx);
        else if (split == "calibration")
            ds.splits.calibration.push_back(idx);
        else if (!split.empty())
            throw FormatError("labels.csv: unknown split '" + split + "'");
    }
    return ds;
}

} // namespace ldm
