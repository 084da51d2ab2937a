#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ldm/dlm.hpp"
#include "ldm/error.hpp"
#include "support/gradcheck.hpp"

using namespace ldm;
using nn::Matrix;

namespace {

using gradcheck::random_batch;
using gradcheck::random_eps;
using gradcheck::tiny_config;

void expect_gradients_match(DlmModel& model, const Batch& batch, const Matrix& eps)
{
    for (const auto& [name, err] : gradcheck::block_errors(model, batch, eps))
        EXPECT_LE(err, 1e-4) << name;
}

} // namespace

TEST(DlmGradients, BernoulliVariationalFull)
{
    DlmModel m(tiny_config(LabelKind::binary));
    expect_gradients_match(m, random_batch(4, LabelKind::binary, 1), random_eps(3, 4, 2));
}

TEST(DlmGradients, GaussianVariationalFull)
{
    DlmModel m(tiny_config(LabelKind::real));
    expect_gradients_match(m, random_batch(4, LabelKind::real, 3), random_eps(3, 4, 4));
}

TEST(DlmGradients, DeterministicLabelsOnly)
{
    auto c = tiny_config(LabelKind::binary);
    c.latent_mode = LatentMode::deterministic;
    c.elbo_terms = ElboTerms::labels_only;
    c.decoder_coords = false;
    DlmModel m(c);
    expect_gradients_match(m, random_batch(4, LabelKind::binary, 5), random_eps(3, 4, 6));
}

TEST(DlmLoss, LabelsOnlyPlusLesionTermIsFull)
{
    auto full_cfg = tiny_config(LabelKind::binary);
    auto lo_cfg = full_cfg;
    lo_cfg.elbo_terms = ElboTerms::labels_only;
    DlmModel full(full_cfg), lo(lo_cfg);
    const auto b = random_batch(4, LabelKind::binary, 7);
    const auto eps = random_eps(3, 4, 8);
    const auto tf = full.loss(b, eps, true, false);
    const auto tl = lo.loss(b, eps, true, false);
    EXPECT_NEAR(tl.total - tf.lesion_ll, tf.total, 1e-10);
}

TEST(DlmLoss, DeterministicIgnoresNoiseAndKl)
{
    auto c = tiny_config(LabelKind::binary);
    c.latent_mode = LatentMode::deterministic;
    DlmModel m(c);
    const auto b = random_batch(4, LabelKind::binary, 9);
    const auto a = m.loss(b, random_eps(3, 4, 1), false, false);
    const auto z = m.loss(b, random_eps(3, 4, 2), false, false);
    EXPECT_DOUBLE_EQ(a.total, z.total);
    EXPECT_DOUBLE_EQ(a.kl, 0.0);
}

TEST(DlmPieces, KlNonNegativeAndZeroAtPrior)
{
    Rng rng(3);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0.05, 3.0);
    Matrix mu(5, 200), sigma(5, 200);
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        mu.data()[i] = 2 * g(rng);
        sigma.data()[i] = u(rng);
    }
    const auto kl = kl_to_standard_normal(mu, sigma);
    for (Eigen::Index j = 0; j < kl.size(); ++j)
        EXPECT_GE(kl(j), 0.0);
    EXPECT_NEAR(kl_to_standard_normal(Matrix::Zero(4, 2), Matrix::Ones(4, 2)).cwiseAbs().maxCoeff(), 0.0, 1e-15);
}

TEST(DlmPieces, KlMatchesMonteCarlo)
{
    Matrix mu(1, 1), sigma(1, 1);
    mu << 0.7;
    sigma << 0.5;
    Rng rng(17);
    std::normal_distribution<double> g;
    double acc = 0.0;
    const int n = 400000;
    for (int i = 0; i < n; ++i) {
        const double z = mu(0, 0) + sigma(0, 0) * g(rng);
        const double e = (z - mu(0, 0)) / sigma(0, 0);
        acc += (-0.5 * e * e - std::log(sigma(0, 0))) - (-0.5 * z * z);
    }
    EXPECT_NEAR(kl_to_standard_normal(mu, sigma)(0), acc / n, 5e-3);
}

TEST(DlmPieces, ReparameterizeZeroNoiseIsMean)
{
    Matrix mu = Matrix::Random(4, 3), sigma = Matrix::Random(4, 3).cwiseAbs();
    EXPECT_EQ(reparameterize(mu, sigma, Matrix::Zero(4, 3)), mu);
}

TEST(DlmPieces, LabelLikelihoods)
{
    const std::vector<double> x{1, 0, 1}, g{0.5, 9.0, -0.25};
    const double eta = 0.5 - 0.25 + 0.1;
    EXPECT_NEAR(bernoulli_label_loglik(x, g, 0.1, 1.0), std::log(1 / (1 + std::exp(-eta))), 1e-12);
    EXPECT_NEAR(bernoulli_label_loglik(x, g, 0.1, 0.0), std::log(1 / (1 + std::exp(eta))), 1e-12);

    const std::vector<double> gs{0.2, 5.0, 0.3};
    const double mean = eta, sd = 0.5 + 0.1;
    const double y = 0.9;
    EXPECT_NEAR(gaussian_label_loglik(x, g, gs, 0.1, 0.1, y, 1e-3),
                -0.5 * std::log(2 * M_PI * sd * sd) - (y - mean) * (y - mean) / (2 * sd * sd), 1e-12);
    // Floor binds when the scale would vanish.
    EXPECT_NEAR(gaussian_label_loglik(std::vector<double>{0, 0, 0}, g, gs, 0.0, 0.0, 0.0, 1e-3),
                -0.5 * std::log(2 * M_PI * 1e-6), 1e-9);
}

TEST(DlmPieces, LesionLikelihoodClamps)
{
    const std::vector<double> x{1, 0}, p{0.0, 1.0};
    EXPECT_NEAR(lesion_loglik(x, p), 2 * std::log(1e-12), 1e-3); // 1 - (1 - 1e-12) is inexact
    EXPECT_NEAR(lesion_loglik(x, std::vector<double>{0.8, 0.25}), std::log(0.8) + std::log(0.75), 1e-12);
}

TEST(QuantileBinarize, CountsForDistinctValues)
{
    std::vector<double> v(200);
    Rng rng(5);
    std::uniform_real_distribution<double> u;
    for (auto& x : v)
        x = u(rng);
    const auto map = VolumeGrid::from_real({10, 20}, v);
    for (int k = 1; k <= 99; ++k) {
        const double t = k / 100.0;
        const auto b = quantile_binarize(map, t);
        EXPECT_EQ(b.count_nonzero(), static_cast<std::size_t>(std::ceil((1 - t) * 200 - 1e-9))) << t;
    }
}

TEST(QuantileBinarize, NestedAndStrict)
{
    const auto map = VolumeGrid::from_real({2, 2}, std::vector<double>{0.1, 0.4, 0.3, 0.2});
    const auto b = quantile_binarize(map, 0.5);
    EXPECT_EQ(b.values()[1], 1.0f);
    EXPECT_EQ(b.values()[2], 1.0f);
    EXPECT_EQ(b.count_nonzero(), 2u);
    const auto flat = VolumeGrid::from_real({2, 2}, std::vector<double>{0.5, 0.5, 0.5, 0.5});
    EXPECT_EQ(quantile_binarize(flat, 0.5).count_nonzero(), 0u);
}

TEST(DlmModelShape, PathsAndChannels)
{
    DlmConfig c;
    DlmModel m(c);
    EXPECT_EQ(m.encoder_input_channels(), 4);
    const auto path = m.encoder_path();
    ASSERT_EQ(path.size(), 6u);
    EXPECT_EQ(path.back().size(), 1);
    EXPECT_EQ(m.encoder_channels(), (std::vector<int>{8, 16, 32, 64, 128}));
    EXPECT_EQ(m.decoder_channels(), (std::vector<int>{128, 64, 32, 16, 8}));
}

TEST(DlmModelShape, ConfigValidation)
{
    DlmConfig c;
    c.dims = {30, 32};
    EXPECT_THROW(DlmModel{c}, ShapeError);
    c = DlmConfig{};
    c.batch_size = 4;
    EXPECT_THROW(c.validate(), InfeasibleError);
    c = DlmConfig{};
    c.dims = {32};
    EXPECT_THROW(c.validate(), ShapeError);
}

TEST(DlmCheckpoint, RoundTripGivesIdenticalOutputs)
{
    auto c = tiny_config(LabelKind::real);
    DlmModel m(c);
    // Move away from the initial state so buffers and params are non-trivial.
    const auto b = random_batch(4, LabelKind::real, 21);
    nn::Adam adam(m.params(), {});
    for (int i = 0; i < 3; ++i) {
        adam.zero_grad();
        m.loss(b, random_eps(3, 4, 30 + i), true, true);
        adam.step();
    }
    const auto path = std::filesystem::temp_directory_path() / "ldm_ckpt_test.json";
    save_checkpoint(m, path);
    DlmModel back = load_checkpoint(path);
    std::filesystem::remove(path);
    const Matrix z = random_eps(3, 5, 40);
    EXPECT_EQ(m.substrate_maps(z), back.substrate_maps(z));
    EXPECT_EQ(m.substrate_scale_maps(z), back.substrate_scale_maps(z));
    EXPECT_EQ(m.lesion_probabilities(z), back.lesion_probabilities(z));
    EXPECT_EQ(m.loss(b, z.leftCols(4), false, false).total, back.loss(b, z.leftCols(4), false, false).total);
}

TEST(DlmInference, SubstrateMapIsInUnitIntervalAndDeterministic)
{
    DlmModel m(tiny_config(LabelKind::binary));
    const auto a = infer_substrate(m, 10, 3);
    const auto b = infer_substrate(m, 10, 3);
    EXPECT_EQ(a, b);
    for (float v : a.values()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(DlmCalibration, RecoversPlantedSubstrate)
{
    // A map whose top voxels form the true substrate: the calibrated threshold
    // should keep exactly those.
    Dataset ds;
    ds.dims = {8, 8};
    ds.label_kind = LabelKind::binary;
    std::vector<double> map(64, 0.0);
    for (int v = 0; v < 64; ++v)
        map[v] = v / 100.0;
    const std::vector<int> substrate{60, 61, 62, 63};
    Rng rng(8);
    std::bernoulli_distribution hit(0.15);
    for (int i = 0; i < 300; ++i) {
        std::vector<std::uint8_t> mask(64);
        for (auto& m : mask)
            m = hit(rng);
        bool y = false;
        for (int s : substrate)
            y = y || mask[s];
        ds.lesions.push_back(VolumeGrid::from_mask(ds.dims, mask));
        ds.labels.push_back(y);
        (i < 240 ? ds.splits.train : i < 270 ? ds.splits.validation : ds.splits.calibration).push_back(i);
    }
    const auto res = calibrate_threshold(VolumeGrid::from_real(ds.dims, map), ds);
    EXPECT_EQ(res.grid.size(), 99u);
    EXPECT_EQ(res.binary_map.count_nonzero(), 4u);
    for (int s : substrate)
        EXPECT_EQ(res.binary_map.values()[s], 1.0f);
}
