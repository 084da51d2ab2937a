#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ldm/io.hpp"

using namespace ldm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name)
    {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST(Json, LesionSpecRoundTrip)
{
    LesionDistributionSpec s;
    s.count = 17;
    s.radius_range = {2.5, 6};
    s.orientation_mode = OrientationMode::spatially_structured;
    s.structured_orientation = StructuredOrientation::tangential;
    s.rng_seed = 99;
    const auto back = nlohmann::json(s).get<LesionDistributionSpec>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(s));
    EXPECT_EQ(back.structured_orientation, StructuredOrientation::tangential);
}

TEST(Json, DeficitModelWithHeterogeneity)
{
    DeficitModel d;
    d.omega = Omega::sigmoid;
    d.noise = {NoiseModel::Kind::convex, 0.0, 0.25};
    SubstrateSpec s;
    s.blobs = {Blob{"A", {1, 2, 0}, {1, 1, 1}, 2.0}};
    s.formula = "A";
    d.heterogeneity = s;
    const nlohmann::json j = d;
    const auto back = j.get<DeficitModel>();
    ASSERT_TRUE(back.heterogeneity.has_value());
    EXPECT_EQ(back.heterogeneity->blobs[0].amplitude, 2.0);
    EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Json, DlmConfigRoundTripAndDefaults)
{
    DlmConfig c;
    c.dims = {16, 16, 16};
    c.label_kind = LabelKind::real;
    c.elbo_terms = ElboTerms::labels_only;
    c.adam.lr = 3e-4;
    c.rng_seed = 1234567890123ULL;
    const nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(j.get<DlmConfig>()), j);
    EXPECT_EQ(j.at("label_kind"), "gaussian");
    const auto partial = nlohmann::json{{"latent_dim", 8}}.get<DlmConfig>();
    EXPECT_EQ(partial.latent_dim, 8);
    EXPECT_EQ(partial.early_stop_patience, 20);
    EXPECT_EQ(partial.l2_weight, 1e-4);
}

TEST(Json, UnknownEnumIsFormatError)
{
    EXPECT_THROW((nlohmann::json{{"omega", "cubic"}}.get<DeficitModel>()), FormatError);
    EXPECT_THROW((nlohmann::json{{"label_kind", "poisson"}}.get<DlmConfig>()), FormatError);
}

TEST(Json, BlobAcceptsShortArrays)
{
    const auto b = nlohmann::json::parse(R"({"name": "A", "center": [5, 7], "scale": [2, 3]})").get<Blob>();
    EXPECT_EQ(b.center, (std::array<double, 3>{5, 7, 0}));
    EXPECT_EQ(b.scale, (std::array<double, 3>{2, 3, 3}));
    const auto iso = nlohmann::json::parse(R"({"name": "B", "scale": 1.5})").get<Blob>();
    EXPECT_EQ(iso.scale, (std::array<double, 3>{1.5, 1.5, 1.5}));
    EXPECT_THROW(nlohmann::json::parse(R"({"name": "C", "center": [1, 2, 3, 4]})").get<Blob>(), FormatError);
}

TEST(Json, FileErrors)
{
    TempDir dir("ldm_io_json");
    EXPECT_THROW(read_json_file(dir.path / "missing.json"), Error);
    std::ofstream(dir.path / "bad.json") << "{not json";
    EXPECT_THROW(read_json_file(dir.path / "bad.json"), FormatError);
}

TEST(Numbers, ShortestRoundTrip)
{
    for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456.789, -2.5})
        EXPECT_EQ(std::stod(format_double(v)), v);
    EXPECT_EQ(format_double(0.5), "0.5");
}

TEST(DatasetFiles, RoundTrip)
{
    TempDir dir("ldm_io_dataset");
    Dataset ds;
    ds.dims = {3, 4};
    ds.label_kind = LabelKind::real;
    Rng rng(1);
    std::bernoulli_distribution bit(0.5);
    for (int i = 0; i < 12; ++i) {
        std::vector<std::uint8_t> m(12);
        for (auto& b : m)
            b = bit(rng);
        ds.lesions.push_back(VolumeGrid::from_mask(ds.dims, m));
        ds.labels.push_back(0.1 * i + 1.0 / 3.0);
        ds.source_tag.push_back(i % 2);
    }
    ds.splits = make_splits(ds.size(), rng);
    save_dataset(ds, dir.path, {{"seed", 5}});

    const auto back = load_dataset(dir.path);
    EXPECT_EQ(back.lesions, ds.lesions);
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.source_tag, ds.source_tag);
    EXPECT_EQ(back.splits.train, ds.splits.train);
    EXPECT_EQ(back.splits.validation, ds.splits.validation);
    EXPECT_EQ(back.splits.calibration, ds.splits.calibration);
    EXPECT_EQ(read_json_file(dir.path / "manifest.json").at("seed"), 5);

    std::ifstream csv(dir.path / "labels.csv");
    std::string line;
    std::size_t rows = 0;
    std::getline(csv, line);
    EXPECT_EQ(line, "id,label,source_tag,split");
    while (std::getline(csv, line))
        ++rows;
    EXPECT_EQ(rows, ds.size());
}

TEST(DatasetFiles, RejectsBadLabels)
{
    TempDir dir("ldm_io_bad");
    Dataset ds;
    ds.dims = {2};
    ds.lesions = {VolumeGrid::from_mask({2}, {1, 0})};
    ds.labels = {1};
    ds.source_tag = {0};
    save_dataset(ds, dir.path);
    std::ofstream(dir.path / "labels.csv") << "id,label,source_tag,split\nlesion_00000.vol,abc,0,train\n";
    EXPECT_THROW(load_dataset(dir.path), FormatError);
    std::ofstream(dir.path / "labels.csv") << "id,label\n";
    EXPECT_THROW(load_dataset(dir.path), FormatError);
}
