#include "ldm/nn/layers.hpp"

#include <cmath>
#include <numbers>

#include "ldm/error.hpp"

namespace ldm::nn {

namespace {

void init_uniform(Matrix& m, double bound, Rng& rng)
{
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            m(i, j) = u(rng);
}

// Tap offsets of a 3^nd stencil, padded to three axes.
std::vector<std::array<int, 3>> stencil(int nd)
{
    std::vector<std::array<int, 3>> taps;
    for (int a = -1; a <= 1; ++a)
        for (int b = -1; b <= 1; ++b)
            for (int c = -1; c <= 1; ++c) {
                const std::array<int, 3> d{a, b, c};
                bool ok = true;
                for (int ax = nd; ax < 3; ++ax)
                    ok = ok && d[ax] == 0;
                if (ok)
                    taps.push_back(d);
            }
    return taps;
}

} // namespace

// ---------------------------------------------------------------- Conv

Conv::Conv(std::string name, int in_channels, int out_channels, int nd, bool bias, Rng& rng)
    : in_(in_channels), out_(out_channels), nd_(nd), stencil_(stencil(nd)), taps_(static_cast<int>(stencil_.size())),
      has_bias_(bias), weight_(name + ".weight", out_channels, static_cast<Eigen::Index>(taps_) * in_channels),
      bias_(name + ".bias", bias ? out_channels : 0, 1)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(taps_ * in_channels));
    init_uniform(weight_.value, bound, rng);
    if (has_bias_)
        init_uniform(bias_.value, bound, rng);
}

std::vector<Param*> Conv::params()
{
    if (has_bias_)
        return {&weight_, &bias_};
    return {&weight_};
}

// Source voxel of every (voxel, tap) pair, -1 where the stencil leaves the grid.
const std::vector<int>& Conv::tap_table(const Spatial& sp)
{
    if (table_spatial_ == sp && !table_.empty())
        return table_;
    table_spatial_ = sp;
    table_.clear();
    table_.reserve(static_cast<std::size_t>(sp.size()) * static_cast<std::size_t>(taps_));
    for (int i = 0; i < sp.ext[0]; ++i)
        for (int j = 0; j < sp.ext[1]; ++j)
            for (int k = 0; k < sp.ext[2]; ++k)
                for (const auto& d : stencil_) {
                    const int ii = i + d[0], jj = j + d[1], kk = k + d[2];
                    const bool inside =
                        ii >= 0 && jj >= 0 && kk >= 0 && ii < sp.ext[0] && jj < sp.ext[1] && kk < sp.ext[2];
                    table_.push_back(inside ? (ii * sp.ext[1] + jj) * sp.ext[2] + kk : -1);
                }
    return table_;
}

// Patch matrix (taps * in) x S of sample n of the cached input.
void Conv::gather(int n)
{
    const int S = shape_.spatial.size();
    const auto& table = tap_table(shape_.spatial);
    cols_.resize(static_cast<Eigen::Index>(taps_) * in_, S);
    const double* src = input_.data() + static_cast<Eigen::Index>(n) * S * in_;
    double* dst = cols_.data();
    const int* from = table.data();
    for (int slot = 0; slot < S * taps_; ++slot, dst += in_) {
        if (from[slot] < 0) {
            for (int c = 0; c < in_; ++c)
                dst[c] = 0.0;
        } else {
            const double* s = src + static_cast<Eigen::Index>(from[slot]) * in_;
            for (int c = 0; c < in_; ++c)
                dst[c] = s[c];
        }
    }
}

FeatureMap Conv::forward(const FeatureMap& in, bool)
{
    if (in.channels() != in_)
        throw ShapeError("conv expects " + std::to_string(in_) + " channels, got " + std::to_string(in.channels()));
    const int S = in.spatial.size();
    input_ = in.x;
    shape_ = FeatureMap{Matrix(), in.batch, in.spatial};
    // One sample at a time keeps the patch matrix in cache.
    FeatureMap out{Matrix(out_, in.x.cols()), in.batch, in.spatial};
    for (int n = 0; n < in.batch; ++n) {
        gather(n);
        out.x.middleCols(static_cast<Eigen::Index>(n) * S, S).noalias() = weight_.value * cols_;
    }
    if (has_bias_)
        out.x.colwise() += bias_.value.col(0);
    return out;
}

FeatureMap Conv::backward(const FeatureMap& grad_out)
{
    if (has_bias_)
        bias_.grad.col(0) += grad_out.x.rowwise().sum();
    const int S = shape_.spatial.size();
    FeatureMap grad_in = FeatureMap::zeros(in_, shape_.batch, shape_.spatial);
    for (int n = 0; n < shape_.batch; ++n) {
        const auto g = grad_out.x.middleCols(static_cast<Eigen::Index>(n) * S, S);
        gather(n);
        weight_.grad.noalias() += g * cols_.transpose();
        dcols_.noalias() = weight_.value.transpose() * g;
        const double* src = dcols_.data();
        double* dst = grad_in.x.data() + static_cast<Eigen::Index>(n) * S * in_;
        const int* to = tap_table(shape_.spatial).data();
        for (int slot = 0; slot < S * taps_; ++slot, src += in_) {
            if (to[slot] < 0)
                continue;
            double* d = dst + static_cast<Eigen::Index>(to[slot]) * in_;
            for (int c = 0; c < in_; ++c)
                d[c] += src[c];
        }
    }
    return grad_in;
}

// ---------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(std::string name, int channels)
    : gamma_(name + ".gamma", channels, 1), beta_(name + ".beta", channels, 1),
      running_mean_{name + ".running_mean", Matrix::Zero(channels, 1)},
      running_var_{name + ".running_var", Matrix::Ones(channels, 1)}
{
    gamma_.value.setOnes();
}

FeatureMap BatchNorm::forward(const FeatureMap& in, bool train)
{
    train_mode_ = train;
    const double m = static_cast<double>(in.x.cols());
    Vector mean, var;
    if (train) {
        mean = in.x.rowwise().mean();
        var = (in.x.colwise() - mean).array().square().rowwise().sum() / m;
        running_mean_.value.col(0) = (1.0 - kMomentum) * running_mean_.value.col(0) + kMomentum * mean;
        const double unbias = m > 1 ? m / (m - 1) : 1.0;
        running_var_.value.col(0) = (1.0 - kMomentum) * running_var_.value.col(0) + kMomentum * unbias * var;
    } else {
        mean = running_mean_.value.col(0);
        var = running_var_.value.col(0);
    }
    inv_std_ = (var.array() + kEps).rsqrt().matrix();
    xhat_ = (in.x.colwise() - mean).array().colwise() * inv_std_.array();
    FeatureMap out{(xhat_.array().colwise() * gamma_.value.col(0).array()).matrix(), in.batch, in.spatial};
    out.x.colwise() += beta_.value.col(0);
    return out;
}

FeatureMap BatchNorm::backward(const FeatureMap& grad_out)
{
    const auto& dy = grad_out.x;
    const Vector sum_dy = dy.rowwise().sum();
    const Vector sum_dy_xhat = (dy.array() * xhat_.array()).rowwise().sum();
    beta_.grad.col(0) += sum_dy;
    gamma_.grad.col(0) += sum_dy_xhat;

    FeatureMap grad_in{Matrix(), grad_out.batch, grad_out.spatial};
    const Vector scale = (gamma_.value.col(0).array() * inv_std_.array()).matrix();
    if (!train_mode_) {
        grad_in.x = dy.array().colwise() * scale.array();
        return grad_in;
    }
    const double m = static_cast<double>(dy.cols());
    const Vector mean_dy = sum_dy / m;
    const Vector mean_dy_xhat = sum_dy_xhat / m;
    grad_in.x = ((dy.colwise() - mean_dy).array() - xhat_.array().colwise() * mean_dy_xhat.array()).colwise()
                * scale.array();
    return grad_in;
}

// ---------------------------------------------------------------- Gelu

FeatureMap Gelu::forward(const FeatureMap& in, bool)
{
    input_ = in.x;
    cdf_ = in.x.unaryExpr([](double v) { return 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2)); });
    return FeatureMap{in.x.cwiseProduct(cdf_), in.batch, in.spatial};
}

FeatureMap Gelu::backward(const FeatureMap& grad_out)
{
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    const Matrix pdf_term = input_.unaryExpr([inv_sqrt_2pi](double v) { return v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
    return FeatureMap{grad_out.x.cwiseProduct(cdf_ + pdf_term), grad_out.batch, grad_out.spatial};
}

// ---------------------------------------------------------------- pooling

namespace {

// Visits (coarse voxel, fine voxel) pairs for a factor-2 resampling.
template <class F>
void for_each_child(const Spatial& coarse, const Spatial& fine, int batch, F&& f)
{
    const int Sc = coarse.size(), Sf = fine.size();
    for (int n = 0; n < batch; ++n)
        for (int i = 0; i < fine.ext[0]; ++i)
            for (int j = 0; j < fine.ext[1]; ++j)
                for (int k = 0; k < fine.ext[2]; ++k) {
                    const int ci = coarse.nd > 0 ? i / 2 : i;
                    const int cj = coarse.nd > 1 ? j / 2 : j;
                    const int ck = coarse.nd > 2 ? k / 2 : k;
                    const Eigen::Index c = static_cast<Eigen::Index>(n) * Sc + (ci * coarse.ext[1] + cj) * coarse.ext[2] + ck;
                    const Eigen::Index fcol = static_cast<Eigen::Index>(n) * Sf + (i * fine.ext[1] + j) * fine.ext[2] + k;
                    f(c, fcol);
                }
}

} // namespace

FeatureMap AvgPool::forward(const FeatureMap& in, bool)
{
    in_spatial_ = in.spatial;
    for (int a = 0; a < in.spatial.nd; ++a)
        if (in.spatial.ext[a] % 2 != 0)
            throw ShapeError("average pooling needs even extents");
    const Spatial coarse = in.spatial.halved();
    FeatureMap out = FeatureMap::zeros(in.channels(), in.batch, coarse);
    const double w = 1.0 / static_cast<double>(1 << in.spatial.nd);
    for_each_child(coarse, in.spatial, in.batch,
                   [&](Eigen::Index c, Eigen::Index f) { out.x.col(c) += w * in.x.col(f); });
    return out;
}

FeatureMap AvgPool::backward(const FeatureMap& grad_out)
{
    FeatureMap grad_in = FeatureMap::zeros(grad_out.channels(), grad_out.batch, in_spatial_);
    const double w = 1.0 / static_cast<double>(1 << in_spatial_.nd);
    for_each_child(grad_out.spatial, in_spatial_, grad_out.batch,
                   [&](Eigen::Index c, Eigen::Index f) { grad_in.x.col(f) = w * grad_out.x.col(c); });
    return grad_in;
}

FeatureMap Upsample::forward(const FeatureMap& in, bool)
{
    in_spatial_ = in.spatial;
    const Spatial fine = in.spatial.doubled();
    FeatureMap out = FeatureMap::zeros(in.channels(), in.batch, fine);
    for_each_child(in.spatial, fine, in.batch, [&](Eigen::Index c, Eigen::Index f) { out.x.col(f) = in.x.col(c); });
    return out;
}

FeatureMap Upsample::backward(const FeatureMap& grad_out)
{
    FeatureMap grad_in = FeatureMap::zeros(grad_out.channels(), grad_out.batch, in_spatial_);
    for_each_child(in_spatial_, grad_out.spatial, grad_out.batch,
                   [&](Eigen::Index c, Eigen::Index f) { grad_in.x.col(c) += grad_out.x.col(f); });
    return grad_in;
}

// ---------------------------------------------------------------- coordinates

Matrix coordinate_channels(const Spatial& spatial)
{
    Matrix m(spatial.nd, spatial.size());
    for (int i = 0; i < spatial.ext[0]; ++i)
        for (int j = 0; j < spatial.ext[1]; ++j)
            for (int k = 0; k < spatial.ext[2]; ++k) {
                const int s = (i * spatial.ext[1] + j) * spatial.ext[2] + k;
                const int idx[3] = {i, j, k};
                for (int a = 0; a < spatial.nd; ++a)
                    m(a, s) = spatial.ext[a] > 1 ? 2.0 * idx[a] / (spatial.ext[a] - 1) - 1.0 : 0.0;
            }
    return m;
}

ConcatCoords::ConcatCoords(const Spatial& spatial) : coords_(coordinate_channels(spatial)) {}

FeatureMap ConcatCoords::forward(const FeatureMap& in, bool)
{
    in_channels_ = in.channels();
    const int S = in.spatial.size();
    if (S != coords_.cols())
        throw ShapeError("coordinate channels built for a different spatial extent");
    FeatureMap out{Matrix(in_channels_ + coords_.rows(), in.x.cols()), in.batch, in.spatial};
    out.x.topRows(in_channels_) = in.x;
    for (int n = 0; n < in.batch; ++n)
        out.x.block(in_channels_, static_cast<Eigen::Index>(n) * S, coords_.rows(), S) = coords_;
    return out;
}

FeatureMap ConcatCoords::backward(const FeatureMap& grad_out)
{
    return FeatureMap{grad_out.x.topRows(in_channels_), grad_out.batch, grad_out.spatial};
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in, int out, Rng& rng)
    : weight_(name + ".weight", out, in), bias_(name + ".bias", out, 1)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    init_uniform(weight_.value, bound, rng);
    init_uniform(bias_.value, bound, rng);
}

Matrix Linear::forward(const Matrix& in)
{
    input_ = in;
    Matrix out = weight_.value * in;
    out.colwise() += bias_.value.col(0);
    return out;
}

Matrix Linear::backward(const Matrix& grad_out)
{
    weight_.grad.noalias() += grad_out * input_.transpose();
    bias_.grad.col(0) += grad_out.rowwise().sum();
    return weight_.value.transpose() * grad_out;
}

Matrix flatten(const FeatureMap& fm)
{
    const int C = fm.channels(), S = fm.spatial.size();
    Matrix m(static_cast<Eigen::Index>(C) * S, fm.batch);
    for (int n = 0; n < fm.batch; ++n)
        for (int s = 0; s < S; ++s)
            for (int c = 0; c < C; ++c)
                m(static_cast<Eigen::Index>(c) * S + s, n) = fm.x(c, static_cast<Eigen::Index>(n) * S + s);
    return m;
}

FeatureMap unflatten(const Matrix& m, int channels, const Spatial& spatial)
{
    const int S = spatial.size();
    const int batch = static_cast<int>(m.cols());
    FeatureMap fm = FeatureMap::zeros(channels, batch, spatial);
    for (int n = 0; n < batch; ++n)
        for (int s = 0; s < S; ++s)
            for (int c = 0; c < channels; ++c)
                fm.x(c, static_cast<Eigen::Index>(n) * S + s) = m(static_cast<Eigen::Index>(c) * S + s, n);
    return fm;
}

// ---------------------------------------------------------------- Sequential

FeatureMap Sequential::forward(FeatureMap x, bool train)
{
    for (auto& l : layers_)
        x = l->forward(x, train);
    return x;
}

FeatureMap Sequential::backward(FeatureMap grad)
{
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
        grad = (*it)->backward(grad);
    return grad;
}

std::vector<Param*> Sequential::params()
{
    std::vector<Param*> out;
    for (auto& l : layers_)
        for (auto* p : l->params())
            out.push_back(p);
    return out;
}

std::vector<Buffer*> Sequential::buffers()
{
    std::vector<Buffer*> out;
    for (auto& l : layers_)
        for (auto* b : l->buffers())
            out.push_back(b);
    return out;
}

} // namespace ldm::nn
