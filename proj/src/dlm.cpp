#include "ldm/dlm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "json.hpp"

#include "ldm/io.hpp"

namespace ldm {

using nn::FeatureMap;
using nn::Matrix;
using nn::Spatial;
using nn::Vector;

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double logistic(double x)
{
    if (x >= 0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kHalfLog2Pi = 0.91893853320467274178;

// Decoder: latent -> dense -> bottom feature map -> (conv, BN, GELU, upsample)
// per level -> output head at full resolution.
struct Decoder {
    nn::Linear fc;
    nn::Sequential body;
    int bottom_channels;
    Spatial bottom;

    Decoder(const std::string& name, const DlmConfig& cfg, int out_channels, Rng& rng, const Spatial& full,
            const Spatial& bottom_sp)
        : fc(name + ".fc", cfg.latent_dim, cfg.channels_at(cfg.levels - 1) * bottom_sp.size(), rng),
          bottom_channels(cfg.channels_at(cfg.levels - 1)), bottom(bottom_sp)
    {
        const int nd = full.nd;
        const int extra = cfg.decoder_coords ? nd : 0;
        Spatial sp = bottom_sp;
        int in = bottom_channels;
        for (int level = cfg.levels - 1; level >= 0; --level) {
            const std::string tag = name + ".level" + std::to_string(level);
            const int out = cfg.channels_at(level);
            if (cfg.decoder_coords)
                body.add(std::make_unique<nn::ConcatCoords>(sp));
            body.add(std::make_unique<nn::Conv>(tag + ".conv", in + extra, out, nd, false, rng));
            body.add(std::make_unique<nn::BatchNorm>(tag + ".bn", out));
            body.add(std::make_unique<nn::Gelu>());
            body.add(std::make_unique<nn::Upsample>());
            sp = sp.doubled();
            in = out;
        }
        if (cfg.decoder_coords)
            body.add(std::make_unique<nn::ConcatCoords>(full));
        auto head = std::make_unique<nn::Conv>(name + ".head", in + extra, out_channels, nd, true, rng);
        // Small initial outputs keep the initial readout near its bias.
        for (auto* p : head->params())
            p->value *= 0.1;
        body.add(std::move(head));
    }

    FeatureMap forward(const Matrix& z, bool train)
    {
        return body.forward(nn::unflatten(fc.forward(z), bottom_channels, bottom), train);
    }

    Matrix backward(const FeatureMap& grad)
    {
        return fc.backward(nn::flatten(body.backward(grad)));
    }

    std::vector<nn::Param*> params()
    {
        auto out = fc.params();
        for (auto* p : body.params())
            out.push_back(p);
        return out;
    }
};

} // namespace

struct DlmModel::Nets {
    Spatial full;
    Spatial bottom;
    int bottom_channels = 0;
    Matrix coords; // nd x V
    nn::Sequential encoder;
    std::unique_ptr<nn::Linear> mu_head, logsig_head;
    std::unique_ptr<Decoder> theta, gamma;
    nn::Param label_bias{"readout.bias", 1, 1};
    nn::Param scale_bias{"readout.scale_bias", 1, 1};
};

void DlmConfig::validate() const
{
    check_dims(dims);
    if (dims.size() < 2)
        throw ShapeError("the model needs a 2D or 3D grid");
    if (levels < 1)
        throw InfeasibleError("levels must be >= 1");
    for (auto d : dims)
        if (d % (std::size_t{1} << levels) != 0)
            throw ShapeError("grid extent " + std::to_string(d) + " is not divisible by 2^" + std::to_string(levels));
    if (latent_dim < 1)
        throw InfeasibleError("latent_dim must be >= 1");
    if (base_channels < 1)
        throw InfeasibleError("base_channels must be >= 1");
    if (!(sigma_floor > 0.0))
        throw InfeasibleError("sigma_floor must be positive");
    if (batch_size < 8)
        throw InfeasibleError("batch_size must be >= 8 for stable batch statistics");
    if (n_substrate_samples < 1)
        throw InfeasibleError("n_substrate_samples must be >= 1");
    if (early_stop_patience < 1 || max_epochs < 1)
        throw InfeasibleError("patience and max_epochs must be >= 1");
}

Batch Batch::from_dataset(const Dataset& ds, const std::vector<std::size_t>& indices)
{
    const auto V = static_cast<Eigen::Index>(voxel_count(ds.dims));
    Batch b{Matrix(V, static_cast<Eigen::Index>(indices.size())), Vector(static_cast<Eigen::Index>(indices.size()))};
    for (std::size_t j = 0; j < indices.size(); ++j) {
        const auto vals = ds.lesions[indices[j]].values();
        for (Eigen::Index v = 0; v < V; ++v)
            b.lesions(v, static_cast<Eigen::Index>(j)) = vals[static_cast<std::size_t>(v)];
        b.labels(static_cast<Eigen::Index>(j)) = ds.labels[indices[j]];
    }
    return b;
}

DlmModel::DlmModel(const DlmConfig& config) : config_(config), nets_(std::make_unique<Nets>())
{
    config_.validate();
    Rng rng(config_.rng_seed);
    auto& n = *nets_;
    n.full = Spatial::from_dims(config_.dims);
    n.coords = nn::coordinate_channels(n.full);

    Spatial sp = n.full;
    int in = encoder_input_channels();
    for (int level = 0; level < config_.levels; ++level) {
        const std::string tag = "encoder.level" + std::to_string(level);
        const int out = config_.channels_at(level);
        n.encoder.add(std::make_unique<nn::Conv>(tag + ".conv", in, out, n.full.nd, false, rng));
        n.encoder.add(std::make_unique<nn::BatchNorm>(tag + ".bn", out));
        n.encoder.add(std::make_unique<nn::Gelu>());
        n.encoder.add(std::make_unique<nn::AvgPool>());
        sp = sp.halved();
        in = out;
    }
    n.bottom = sp;
    n.bottom_channels = in;
    const int flat = in * sp.size();
    n.mu_head = std::make_unique<nn::Linear>("encoder.mu", flat, config_.latent_dim, rng);
    n.logsig_head = std::make_unique<nn::Linear>("encoder.log_sigma", flat, config_.latent_dim, rng);
    n.theta = std::make_unique<Decoder>("theta", config_, 1, rng, n.full, n.bottom);
    const int gamma_out = config_.label_kind == LabelKind::binary ? 1 : 2;
    n.gamma = std::make_unique<Decoder>("gamma", config_, gamma_out, rng, n.full, n.bottom);
}

DlmModel::DlmModel(DlmModel&&) noexcept = default;
DlmModel& DlmModel::operator=(DlmModel&&) noexcept = default;
DlmModel::~DlmModel() = default;

int DlmModel::encoder_input_channels() const { return 1 + static_cast<int>(config_.dims.size()) + 1; }

std::vector<Spatial> DlmModel::encoder_path() const
{
    std::vector<Spatial> path{nets_->full};
    for (int l = 0; l < config_.levels; ++l)
        path.push_back(path.back().halved());
    return path;
}

std::vector<int> DlmModel::encoder_channels() const
{
    std::vector<int> c;
    for (int l = 0; l < config_.levels; ++l)
        c.push_back(config_.channels_at(l));
    return c;
}

std::vector<int> DlmModel::decoder_channels() const
{
    std::vector<int> c;
    for (int l = config_.levels - 1; l >= 0; --l)
        c.push_back(config_.channels_at(l));
    return c;
}

std::vector<nn::Param*> DlmModel::params()
{
    auto& n = *nets_;
    auto out = n.encoder.params();
    for (auto* p : n.mu_head->params())
        out.push_back(p);
    for (auto* p : n.logsig_head->params())
        out.push_back(p);
    for (auto* p : n.theta->params())
        out.push_back(p);
    for (auto* p : n.gamma->params())
        out.push_back(p);
    out.push_back(&n.label_bias);
    if (config_.label_kind == LabelKind::real)
        out.push_back(&n.scale_bias);
    return out;
}

std::vector<nn::Buffer*> DlmModel::buffers()
{
    auto out = nets_->encoder.buffers();
    for (auto* b : nets_->theta->body.buffers())
        out.push_back(b);
    for (auto* b : nets_->gamma->body.buffers())
        out.push_back(b);
    return out;
}

void DlmModel::zero_grad()
{
    for (auto* p : params())
        p->zero_grad();
}

nn::Param& DlmModel::label_bias() { return nets_->label_bias; }
nn::Param& DlmModel::scale_bias() { return nets_->scale_bias; }

namespace {

FeatureMap encoder_input(const Batch& batch, const Matrix& coords)
{
    const auto V = batch.lesions.rows();
    const auto N = batch.lesions.cols();
    const auto nd = coords.rows();
    FeatureMap fm{Matrix(2 + nd, V * N), static_cast<int>(N), {}};
    fm.x.row(0) = Eigen::Map<const Eigen::RowVectorXd>(batch.lesions.data(), V * N);
    for (Eigen::Index n = 0; n < N; ++n) {
        fm.x.block(1, n * V, nd, V) = coords;
        fm.x.block(1 + nd, n * V, 1, V).setConstant(batch.labels(n));
    }
    return fm;
}

// Row `r` of a (channels x N*V) map as a V x N matrix.
Matrix channel_as_columns(const FeatureMap& fm, Eigen::Index r, Eigen::Index V)
{
    Matrix out(V, fm.batch);
    for (Eigen::Index n = 0; n < fm.batch; ++n)
        out.col(n) = fm.x.block(r, n * V, 1, V).transpose();
    return out;
}

} // namespace

Posterior DlmModel::encode(const Batch& batch)
{
    auto& n = *nets_;
    auto in = encoder_input(batch, n.coords);
    in.spatial = n.full;
    const Matrix h = nn::flatten(n.encoder.forward(in, false));
    Posterior post{n.mu_head->forward(h), n.logsig_head->forward(h).array().exp().matrix()};
    return post;
}

Matrix DlmModel::substrate_maps(const Matrix& z)
{
    const auto fm = nets_->gamma->forward(z, false);
    return channel_as_columns(fm, 0, nets_->full.size());
}

Matrix DlmModel::substrate_scale_maps(const Matrix& z)
{
    if (config_.label_kind != LabelKind::real)
        throw ShapeError("scale maps exist only for the Gaussian readout");
    const auto fm = nets_->gamma->forward(z, false);
    const double floor = config_.sigma_floor;
    return channel_as_columns(fm, 1, nets_->full.size()).unaryExpr([floor](double r) { return floor + softplus(r); });
}

Matrix DlmModel::lesion_probabilities(const Matrix& z)
{
    const auto fm = nets_->theta->forward(z, false);
    return channel_as_columns(fm, 0, nets_->full.size()).unaryExpr([](double l) { return logistic(l); });
}

LossTerms DlmModel::loss(const Batch& batch, const Matrix& eps, bool train, bool accumulate)
{
    auto& n = *nets_;
    const auto V = batch.lesions.rows();
    const auto N = batch.lesions.cols();
    if (V != n.full.size())
        throw ShapeError("batch voxel count does not match the model grid");
    const double w = 1.0 / static_cast<double>(N);
    const bool variational = config_.latent_mode == LatentMode::variational;
    const bool with_lesions = config_.elbo_terms == ElboTerms::full;
    const bool gaussian = config_.label_kind == LabelKind::real;

    auto in = encoder_input(batch, n.coords);
    in.spatial = n.full;
    const auto h_map = n.encoder.forward(in, train);
    const Matrix h = nn::flatten(h_map);
    const Matrix mu = n.mu_head->forward(h);
    const Matrix log_sigma = n.logsig_head->forward(h);
    const Matrix sigma = log_sigma.array().exp();
    Matrix z = mu;
    if (variational) {
        if (eps.rows() != mu.rows() || eps.cols() != N)
            throw ShapeError("noise matrix must be latent x batch");
        z.array() += sigma.array() * eps.array();
    }

    LossTerms terms;
    Matrix d_mu = Matrix::Zero(mu.rows(), N);
    Matrix d_log_sigma = Matrix::Zero(mu.rows(), N);

    // Label readout through gamma(z).
    const auto g_map = n.gamma->forward(z, train);
    FeatureMap d_g{Matrix::Zero(g_map.x.rows(), g_map.x.cols()), g_map.batch, g_map.spatial};
    const double b = n.label_bias.value(0, 0);
    for (Eigen::Index j = 0; j < N; ++j) {
        const auto x = batch.lesions.col(j);
        const auto g_mu = g_map.x.row(0).segment(j * V, V);
        const double y = batch.labels(j);
        if (!gaussian) {
            const double eta = g_mu.dot(x.transpose()) + b;
            terms.label_ll += w * (y * eta - softplus(eta));
            const double d_eta = -w * (y - logistic(eta));
            d_g.x.block(0, j * V, 1, V) = d_eta * x.transpose();
            n.label_bias.grad(0, 0) += accumulate ? d_eta : 0.0;
        } else {
            const auto raw = g_map.x.row(1).segment(j * V, V);
            const double floor = config_.sigma_floor;
            const double sb = n.scale_bias.value(0, 0);
            double scale = softplus(sb) + floor;
            for (Eigen::Index v = 0; v < V; ++v)
                scale += x(v) * (floor + softplus(raw(v)));
            const double mean = g_mu.dot(x.transpose()) + b;
            const double r = y - mean;
            terms.label_ll += w * (-kHalfLog2Pi - std::log(scale) - r * r / (2 * scale * scale));
            const double d_mean = -w * r / (scale * scale);
            const double d_scale = -w * (-1.0 / scale + r * r / (scale * scale * scale));
            d_g.x.block(0, j * V, 1, V) = d_mean * x.transpose();
            for (Eigen::Index v = 0; v < V; ++v)
                d_g.x(1, j * V + v) = d_scale * x(v) * logistic(raw(v));
            if (accumulate) {
                n.label_bias.grad(0, 0) += d_mean;
                n.scale_bias.grad(0, 0) += d_scale * logistic(sb);
            }
        }
    }

    Matrix d_z = Matrix::Zero(mu.rows(), N);
    if (accumulate)
        d_z += n.gamma->backward(d_g);

    if (with_lesions) {
        const auto l_map = n.theta->forward(z, train);
        FeatureMap d_l{Matrix(1, l_map.x.cols()), l_map.batch, l_map.spatial};
        for (Eigen::Index j = 0; j < N; ++j)
            for (Eigen::Index v = 0; v < V; ++v) {
                const double x = batch.lesions(v, j);
                const double l = l_map.x(0, j * V + v);
                terms.lesion_ll += w * (x * l - softplus(l));
                d_l.x(0, j * V + v) = -w * (x - logistic(l));
            }
        if (accumulate)
            d_z += n.theta->backward(d_l);
    }

    if (variational) {
        for (Eigen::Index j = 0; j < N; ++j)
            for (Eigen::Index i = 0; i < mu.rows(); ++i) {
                const double m = mu(i, j), s = log_sigma(i, j), s2 = sigma(i, j) * sigma(i, j);
                terms.kl += w * 0.5 * (m * m + s2 - 1.0 - 2.0 * s);
                d_mu(i, j) += w * m;
                d_log_sigma(i, j) += w * (s2 - 1.0);
            }
        d_mu += d_z;
        d_log_sigma.array() += d_z.array() * eps.array() * sigma.array();
    } else {
        d_mu += d_z;
    }

    for (auto* p : params()) {
        terms.l2 += 0.5 * config_.l2_weight * p->value.squaredNorm();
        if (accumulate)
            p->grad += config_.l2_weight * p->value;
    }

    terms.total = -terms.label_ll - (with_lesions ? terms.lesion_ll : 0.0) + (variational ? terms.kl : 0.0) + terms.l2;

    if (accumulate) {
        Matrix d_h = n.mu_head->backward(d_mu);
        if (variational)
            d_h += n.logsig_head->backward(d_log_sigma);
        n.encoder.backward(nn::unflatten(d_h, n.bottom_channels, n.bottom));
    }
    return terms;
}

double DlmModel::label_loglik_at_posterior_mean(const Batch& batch)
{
    const auto post = encode(batch);
    const auto V = batch.lesions.rows();
    const auto N = batch.lesions.cols();
    const auto g_map = nets_->gamma->forward(post.mu, false);
    const double b = nets_->label_bias.value(0, 0);
    double total = 0.0;
    for (Eigen::Index j = 0; j < N; ++j) {
        const auto x = batch.lesions.col(j);
        std::vector<double> xs(x.data(), x.data() + V);
        Vector g = g_map.x.row(0).segment(j * V, V).transpose();
        if (config_.label_kind == LabelKind::binary) {
            total += bernoulli_label_loglik(xs, std::span<const double>(g.data(), static_cast<std::size_t>(V)), b,
                                            batch.labels(j));
        } else {
            Vector gs = g_map.x.row(1).segment(j * V, V).transpose();
            for (auto& r : gs)
                r = config_.sigma_floor + softplus(r);
            total += gaussian_label_loglik(xs, std::span<const double>(g.data(), static_cast<std::size_t>(V)),
                                           std::span<const double>(gs.data(), static_cast<std::size_t>(V)), b,
                                           softplus(nets_->scale_bias.value(0, 0)) + config_.sigma_floor,
                                           batch.labels(j), config_.sigma_floor);
        }
    }
    return total / static_cast<double>(N);
}

DlmModel build_network(const DlmConfig& config) { return DlmModel(config); }

Matrix reparameterize(const Matrix& mu, const Matrix& sigma, const Matrix& eps)
{
    return (mu.array() + sigma.array() * eps.array()).matrix();
}

Vector kl_to_standard_normal(const Matrix& mu, const Matrix& sigma)
{
    Vector kl(mu.cols());
    for (Eigen::Index j = 0; j < mu.cols(); ++j) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < mu.rows(); ++i) {
            const double m = mu(i, j), sd = sigma(i, j);
            s += 0.5 * (m * m + sd * sd - 1.0 - 2.0 * std::log(sd));
        }
        kl(j) = s;
    }
    return kl;
}

double bernoulli_label_loglik(std::span<const double> lesion, std::span<const double> gamma, double bias, double y)
{
    double eta = bias;
    for (std::size_t v = 0; v < lesion.size(); ++v)
        eta += lesion[v] * gamma[v];
    return y * eta - softplus(eta);
}

double gaussian_label_loglik(std::span<const double> lesion, std::span<const double> gamma_mu,
                             std::span<const double> gamma_sigma, double bias_mu, double scale_offset, double y,
                             double sigma_floor)
{
    double mean = bias_mu, scale = scale_offset;
    for (std::size_t v = 0; v < lesion.size(); ++v) {
        mean += lesion[v] * gamma_mu[v];
        scale += lesion[v] * gamma_sigma[v];
    }
    scale = std::max(scale, sigma_floor);
    const double r = y - mean;
    return -kHalfLog2Pi - std::log(scale) - r * r / (2 * scale * scale);
}

double lesion_loglik(std::span<const double> lesion, std::span<const double> probabilities)
{
    double ll = 0.0;
    for (std::size_t v = 0; v < lesion.size(); ++v) {
        const double p = std::clamp(probabilities[v], 1e-12, 1.0 - 1e-12);
        ll += lesion[v] * std::log(p) + (1.0 - lesion[v]) * std::log1p(-p);
    }
    return ll;
}

LossTerms elbo(DlmModel& model, const Batch& batch, const Matrix& eps)
{
    return model.loss(batch, eps, true, false);
}

namespace {

struct Snapshot {
    std::vector<Matrix> params, buffers;

    void take(DlmModel& m)
    {
        params.clear();
        buffers.clear();
        for (auto* p : m.params())
            params.push_back(p->value);
        for (auto* b : m.buffers())
            buffers.push_back(b->value);
    }
    void restore(DlmModel& m) const
    {
        auto ps = m.params();
        auto bs = m.buffers();
        for (std::size_t i = 0; i < ps.size(); ++i)
            ps[i]->value = params[i];
        for (std::size_t i = 0; i < bs.size(); ++i)
            bs[i]->value = buffers[i];
    }
};

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i)
            m(i, j) = normal(rng);
    return m;
}

} // namespace

TrainedDlm train(DlmModel model, const Dataset& dataset)
{
    const auto& cfg = model.config();
    if (dataset.dims != cfg.dims)
        throw ShapeError("dataset grid does not match the model grid");
    if (dataset.label_kind != cfg.label_kind)
        throw ShapeError("dataset label kind does not match the model readout");
    if (dataset.splits.validation.empty())
        throw InfeasibleError("training needs a non-empty validation split");
    if (dataset.splits.train.size() < 8)
        throw InfeasibleError("training needs at least 8 training samples");

    Rng rng(derive_seed(cfg.rng_seed, 0x7a11));
    nn::Adam adam(model.params(), cfg.adam);
    const Batch val_batch = Batch::from_dataset(dataset, dataset.splits.validation);

    std::vector<std::size_t> order = dataset.splits.train;
    const std::size_t n_train = order.size();
    const std::size_t n_batches = std::max<std::size_t>(1, n_train / static_cast<std::size_t>(cfg.batch_size));

    TrainedDlm out{std::move(model), {}, 0, -std::numeric_limits<double>::infinity(), 0};
    Snapshot best;
    best.take(out.model);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        shuffle_in_place(order, rng);
        EpochLog entry;
        entry.epoch = epoch;
        std::size_t start = 0;
        for (std::size_t bi = 0; bi < n_batches; ++bi) {
            const std::size_t len = n_train / n_batches + (bi < n_train % n_batches ? 1 : 0);
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(start + len));
            start += len;
            const Batch batch = Batch::from_dataset(dataset, idx);
            const Matrix eps = standard_normal(cfg.latent_dim, static_cast<Eigen::Index>(len), rng);
            adam.zero_grad();
            const auto terms = out.model.loss(batch, eps, true, true);
            if (!std::isfinite(terms.total))
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch "
                                   + std::to_string(bi) + " (label ll " + std::to_string(terms.label_ll)
                                   + ", lesion ll " + std::to_string(terms.lesion_ll) + ", kl "
                                   + std::to_string(terms.kl) + ")");
            adam.step();
            const double f = static_cast<double>(len) / static_cast<double>(n_train);
            entry.train_loss += f * terms.total;
            entry.train_label_ll += f * terms.label_ll;
            entry.train_lesion_ll += f * terms.lesion_ll;
            entry.train_kl += f * terms.kl;
        }
        entry.val_label_ll = out.model.label_loglik_at_posterior_mean(val_batch);
        out.log.push_back(entry);
        out.epochs_run = epoch;
        if (entry.val_label_ll > out.best_val_label_ll) {
            out.best_val_label_ll = entry.val_label_ll;
            out.best_epoch = epoch;
            best.take(out.model);
        }
        if (epoch - out.best_epoch >= cfg.early_stop_patience)
            break;
    }
    best.restore(out.model);
    return out;
}

VolumeGrid infer_substrate_from(DlmModel& model, const Matrix& z)
{
    const auto& cfg = model.config();
    const auto V = static_cast<Eigen::Index>(voxel_count(cfg.dims));
    Vector sum = Vector::Zero(V);
    constexpr Eigen::Index kChunk = 64;
    for (Eigen::Index start = 0; start < z.cols(); start += kChunk) {
        const auto len = std::min(kChunk, z.cols() - start);
        sum += model.substrate_maps(z.middleCols(start, len)).rowwise().sum();
    }
    sum /= static_cast<double>(z.cols());
    std::vector<double> m(static_cast<std::size_t>(V));
    for (Eigen::Index v = 0; v < V; ++v)
        m[static_cast<std::size_t>(v)] = logistic(sum(v));
    return VolumeGrid::from_real(cfg.dims, m);
}

VolumeGrid infer_substrate(DlmModel& model, int n_samples, std::uint64_t seed)
{
    if (n_samples < 1)
        throw InfeasibleError("infer_substrate needs at least one sample");
    Rng rng(seed);
    return infer_substrate_from(model, standard_normal(model.config().latent_dim, n_samples, rng));
}

VolumeGrid quantile_binarize(const VolumeGrid& map, double t)
{
    const auto V = map.size();
    auto count = static_cast<std::size_t>(std::ceil((1.0 - t) * static_cast<double>(V) - 1e-9));
    count = std::min(count, V);
    std::vector<std::uint8_t> out(V, 0);
    if (count == V) {
        std::fill(out.begin(), out.end(), 1);
    } else if (count > 0) {
        std::vector<float> sorted(map.values().begin(), map.values().end());
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(V - count - 1), sorted.end());
        const float q = sorted[V - count - 1];
        for (std::size_t i = 0; i < V; ++i)
            out[i] = map[i] > q;
    }
    return VolumeGrid::from_mask(map.dims(), out);
}

namespace {

// Logistic regression of y on a*s + c with a small ridge on both terms
// (finite optimum on separable data).
std::pair<double, double> fit_logistic(const std::vector<double>& s, const std::vector<double>& y)
{
    constexpr double ridge_a = 1e-2, ridge_c = 1e-6;
    double a = 0.0, c = 0.0;
    for (int it = 0; it < 100; ++it) {
        double ga = -ridge_a * a, gc = -ridge_c * c;
        double haa = ridge_a, hac = 0.0, hcc = ridge_c;
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double p = logistic(a * s[i] + c);
            const double r = y[i] - p, q = p * (1 - p);
            ga += r * s[i];
            gc += r;
            haa += q * s[i] * s[i];
            hac += q * s[i];
            hcc += q;
        }
        const double det = haa * hcc - hac * hac;
        if (!(det > 0.0))
            break;
        const double da = (hcc * ga - hac * gc) / det;
        const double dc = (haa * gc - hac * ga) / det;
        a += da;
        c += dc;
        if (std::abs(da) + std::abs(dc) < 1e-10)
            break;
    }
    return {a, c};
}

struct GaussianFit {
    double a = 0.0, c = 0.0, sd = 1.0;
};

GaussianFit fit_linear(const std::vector<double>& s, const std::vector<double>& y, double floor)
{
    const double n = static_cast<double>(s.size());
    double ms = 0, my = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        ms += s[i] / n;
        my += y[i] / n;
    }
    double sxx = 1e-9, sxy = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        sxx += (s[i] - ms) * (s[i] - ms);
        sxy += (s[i] - ms) * (y[i] - my);
    }
    GaussianFit f;
    f.a = sxy / sxx;
    f.c = my - f.a * ms;
    double sse = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double r = y[i] - f.a * s[i] - f.c;
        sse += r * r;
    }
    f.sd = std::max(std::sqrt(sse / n), floor);
    return f;
}

} // namespace

InferredSubstrate calibrate_threshold(const VolumeGrid& mean_map, const Dataset& dataset, double sigma_floor)
{
    if (dataset.splits.calibration.empty())
        throw InfeasibleError("calibration split is empty");
    if (dataset.splits.train.empty())
        throw InfeasibleError("training split is empty");
    if (mean_map.dims() != dataset.dims)
        throw ShapeError("map and dataset grids differ");

    auto readout = [&](const VolumeGrid& b, const std::vector<std::size_t>& idx, std::vector<double>& s,
                       std::vector<double>& y) {
        s.assign(idx.size(), 0.0);
        y.assign(idx.size(), 0.0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto x = dataset.lesions[idx[i]].values();
            double acc = 0.0;
            for (std::size_t v = 0; v < x.size(); ++v)
                acc += static_cast<double>(x[v]) * b[v];
            s[i] = acc;
            y[i] = dataset.labels[idx[i]];
        }
    };

    InferredSubstrate out;
    out.mean_map = mean_map;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> s_tr, y_tr, s_cal, y_cal;
    for (int k = 1; k <= 99; ++k) {
        const double t = k / 100.0;
        const auto b = quantile_binarize(mean_map, t);
        readout(b, dataset.splits.train, s_tr, y_tr);
        readout(b, dataset.splits.calibration, s_cal, y_cal);
        double ll = 0.0;
        if (dataset.label_kind == LabelKind::binary) {
            const auto [a, c] = fit_logistic(s_tr, y_tr);
            for (std::size_t i = 0; i < s_cal.size(); ++i) {
                const double eta = a * s_cal[i] + c;
                ll += y_cal[i] * eta - softplus(eta);
            }
        } else {
            const auto f = fit_linear(s_tr, y_tr, sigma_floor);
            for (std::size_t i = 0; i < s_cal.size(); ++i) {
                const double r = y_cal[i] - f.a * s_cal[i] - f.c;
                ll += -kHalfLog2Pi - std::log(f.sd) - r * r / (2 * f.sd * f.sd);
            }
        }
        ll /= static_cast<double>(s_cal.size());
        out.grid.push_back(t);
        out.calibration_loglik.push_back(ll);
        if (ll > best) {
            best = ll;
            out.threshold = t;
            out.binary_map = b;
        }
    }
    return out;
}

VolumeGrid reconstruct(DlmModel& model, const VolumeGrid& lesion, double label)
{
    if (lesion.dims() != model.config().dims)
        throw ShapeError("lesion grid does not match the model grid");
    Batch b{Matrix(static_cast<Eigen::Index>(lesion.size()), 1), Vector::Constant(1, label)};
    for (std::size_t v = 0; v < lesion.size(); ++v)
        b.lesions(static_cast<Eigen::Index>(v), 0) = lesion[v];
    const auto post = model.encode(b);
    const Matrix p = model.lesion_probabilities(post.mu);
    return VolumeGrid::from_real(lesion.dims(), std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
}

void save_checkpoint(DlmModel& model, const std::filesystem::path& path)
{
    nlohmann::json j;
    j["format"] = "ldm-checkpoint-1";
    j["config"] = model.config();
    auto dump = [](const Matrix& m) {
        nlohmann::json t;
        t["rows"] = m.rows();
        t["cols"] = m.cols();
        t["data"] = std::vector<double>(m.data(), m.data() + m.size());
        return t;
    };
    for (auto* p : model.params())
        j["params"][p->name] = dump(p->value);
    for (auto* b : model.buffers())
        j["buffers"][b->name] = dump(b->value);
    std::ofstream out(path);
    if (!out)
        throw Error("cannot open " + path.string() + " for writing");
    out << j.dump();
    if (!out)
        throw Error("failed writing checkpoint " + path.string());
}

DlmModel load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open checkpoint " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint " + path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "ldm-checkpoint-1")
        throw FormatError("checkpoint " + path.string() + ": unknown format");
    DlmModel model(j.at("config").get<DlmConfig>());
    auto load = [&](const nlohmann::json& t, Matrix& m, const std::string& name) {
        if (t.at("rows").get<Eigen::Index>() != m.rows() || t.at("cols").get<Eigen::Index>() != m.cols())
            throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
        const auto data = t.at("data").get<std::vector<double>>();
        std::copy(data.begin(), data.end(), m.data());
    };
    for (auto* p : model.params())
        load(j.at("params").at(p->name), p->value, p->name);
    for (auto* b : model.buffers())
        load(j.at("buffers").at(b->name), b->value, b->name);
    return model;
}

} // namespace ldm
