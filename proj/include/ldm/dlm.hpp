#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ldm/grids.hpp"
#include "ldm/nn/adam.hpp"
#include "ldm/nn/layers.hpp"
#include "ldm/simulate.hpp"

namespace ldm {

enum class ElboTerms { full, labels_only };
enum class LatentMode { variational, deterministic };

struct DlmConfig {
    Dims dims{32, 32};
    int latent_dim = 32;
    int base_channels = 8;
    int levels = 5;
    LabelKind label_kind = LabelKind::binary; // binary -> Bernoulli readout, real -> Gaussian
    double l2_weight = 1e-4;
    int early_stop_patience = 20;
    int max_epochs = 200;
    int batch_size = 32;
    nn::AdamOptions adam;
    ElboTerms elbo_terms = ElboTerms::full;
    LatentMode latent_mode = LatentMode::variational;
    int n_substrate_samples = 64;
    double sigma_floor = 1e-3;
    /// Coordinate channels ahead of every decoder convolution.
    bool decoder_coords = true;
    std::uint64_t rng_seed = 0;

    /// Throws ShapeError/InfeasibleError on violated invariants.
    void validate() const;
    /// Encoder channel count at level l (doubles per halving).
    int channels_at(int level) const { return base_channels << level; }
};

/// Column-per-sample view of a batch: lesions is voxels x N, labels has N entries.
struct Batch {
    nn::Matrix lesions;
    nn::Vector labels;

    static Batch from_dataset(const Dataset& ds, const std::vector<std::size_t>& indices);
};

struct Posterior {
    nn::Matrix mu;    // latent x N
    nn::Matrix sigma; // latent x N, > 0
};

struct LossTerms {
    double total = 0.0;     // negative ELBO (batch mean) + L2 penalty
    double label_ll = 0.0;  // batch mean
    double lesion_ll = 0.0; // batch mean, summed over voxels
    double kl = 0.0;        // batch mean
    double l2 = 0.0;
};

/// Encoder phi, lesion decoder theta, substrate decoder gamma and the scalar
/// readout parameters. Layers cache activations, so one instance must not run
/// two passes concurrently.
class DlmModel {
public:
    explicit DlmModel(const DlmConfig& config);
    DlmModel(DlmModel&&) noexcept;
    DlmModel& operator=(DlmModel&&) noexcept;
    ~DlmModel();

    const DlmConfig& config() const { return config_; }

    /// Channel count entering the encoder: lesion + coordinates + label plane.
    int encoder_input_channels() const;
    /// Spatial extents after each encoder stage, input first.
    std::vector<nn::Spatial> encoder_path() const;
    std::vector<int> encoder_channels() const;
    std::vector<int> decoder_channels() const;

    /// mu and sigma = exp(raw log-scale). Evaluation-mode normalisation.
    Posterior encode(const Batch& batch);

    /// Raw substrate maps gamma(z): voxels x N (Bernoulli) or, for the
    /// Gaussian readout, the mean maps. Evaluation mode.
    nn::Matrix substrate_maps(const nn::Matrix& z);
    /// gamma_sigma(z) after the floor, voxels x N (Gaussian readout only).
    nn::Matrix substrate_scale_maps(const nn::Matrix& z);
    /// Bernoulli probabilities of the lesion decoder, voxels x N. Evaluation mode.
    nn::Matrix lesion_probabilities(const nn::Matrix& z);

    /// Loss for one batch with explicit noise eps (latent x N). When
    /// `accumulate` is set, gradients are added to every parameter.
    LossTerms loss(const Batch& batch, const nn::Matrix& eps, bool train, bool accumulate);

    /// Mean log P(y | x, z = mu(x, y)) in evaluation mode.
    double label_loglik_at_posterior_mean(const Batch& batch);

    std::vector<nn::Param*> params();
    std::vector<nn::Buffer*> buffers();
    void zero_grad();

    nn::Param& label_bias();
    /// Readout bias of the Gaussian scale (Gaussian readout only).
    nn::Param& scale_bias();

private:
    struct Nets;
    DlmConfig config_;
    std::unique_ptr<Nets> nets_;
};

DlmModel build_network(const DlmConfig& config);

/// z = mu + sigma * eps, elementwise.
nn::Matrix reparameterize(const nn::Matrix& mu, const nn::Matrix& sigma, const nn::Matrix& eps);

/// sum_i 0.5 (mu_i^2 + sigma_i^2 - 1 - 2 log sigma_i), one value per column.
nn::Vector kl_to_standard_normal(const nn::Matrix& mu, const nn::Matrix& sigma);

/// log Bernoulli(y; logistic(<x, gamma> + bias)).
double bernoulli_label_loglik(std::span<const double> lesion, std::span<const double> gamma, double bias, double y);

/// log N(y; <x, gamma_mu> + bias_mu, max(<x, gamma_sigma> + scale_offset, floor)).
double gaussian_label_loglik(std::span<const double> lesion, std::span<const double> gamma_mu,
                             std::span<const double> gamma_sigma, double bias_mu, double scale_offset, double y,
                             double sigma_floor);

/// Sum over voxels of log Bernoulli(x_v; p_v); probabilities are clamped to
/// [1e-12, 1 - 1e-12].
double lesion_loglik(std::span<const double> lesion, std::span<const double> probabilities);

/// Single-sample negative ELBO averaged over the batch (training mode).
LossTerms elbo(DlmModel& model, const Batch& batch, const nn::Matrix& eps);

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double train_label_ll = 0.0;
    double train_lesion_ll = 0.0;
    double train_kl = 0.0;
    double val_label_ll = 0.0;
};

struct TrainedDlm {
    DlmModel model;
    std::vector<EpochLog> log;
    int best_epoch = 0;
    double best_val_label_ll = 0.0;
    int epochs_run = 0;
};

/// Adam with early stopping on validation label log-likelihood; returns the
/// best snapshot. Throws NumericError on a non-finite loss.
TrainedDlm train(DlmModel model, const Dataset& dataset);

/// Logistic of the mean raw substrate map over n_samples prior draws.
VolumeGrid infer_substrate(DlmModel& model, int n_samples, std::uint64_t seed);
/// Same, with explicit prior draws (latent x N).
VolumeGrid infer_substrate_from(DlmModel& model, const nn::Matrix& z);

/// Voxels strictly above the t-quantile of the map; for distinct values exactly
/// ceil((1 - t) V) voxels are set.
VolumeGrid quantile_binarize(const VolumeGrid& map, double t);

struct InferredSubstrate {
    VolumeGrid mean_map;
    double threshold = 0.5;
    VolumeGrid binary_map;
    std::vector<double> grid;                // candidate t values
    std::vector<double> calibration_loglik;  // mean calibration log-likelihood per t
};

/// Scans t in {0.01, ..., 0.99}. For each t the binarised map is the substrate
/// readout: a scale and bias are fitted on the training split, and the mean
/// log-likelihood on the calibration split is scored. Picks the maximum.
InferredSubstrate calibrate_threshold(const VolumeGrid& mean_map, const Dataset& dataset, double sigma_floor = 1e-3);

/// Lesion decoder probabilities for the posterior mean of (x, y).
VolumeGrid reconstruct(DlmModel& model, const VolumeGrid& lesion, double label);

void save_checkpoint(DlmModel& model, const std::filesystem::path& path);
DlmModel load_checkpoint(const std::filesystem::path& path);

} // namespace ldm
