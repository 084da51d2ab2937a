#pragma once

#include <memory>
#include <vector>

#include "ldm/nn/tensor.hpp"
#include "ldm/random.hpp"

namespace ldm::nn {

/// Layer acting on feature maps. forward() caches what backward() needs;
/// backward() accumulates parameter gradients and returns the input gradient.
class Layer {
public:
    virtual ~Layer() = default;
    virtual FeatureMap forward(const FeatureMap& in, bool train) = 0;
    virtual FeatureMap backward(const FeatureMap& grad_out) = 0;
    virtual std::vector<Param*> params() { return {}; }
    virtual std::vector<Buffer*> buffers() { return {}; }
};

/// 3^nd kernel, stride 1, zero padding 1.
class Conv : public Layer {
public:
    Conv(std::string name, int in_channels, int out_channels, int nd, bool bias, Rng& rng);

    FeatureMap forward(const FeatureMap& in, bool train) override;
    FeatureMap backward(const FeatureMap& grad_out) override;
    std::vector<Param*> params() override;

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }

private:
    const std::vector<int>& tap_table(const Spatial& sp);
    void gather(int n);

    int in_, out_, nd_;
    std::vector<std::array<int, 3>> stencil_;
    int taps_;
    bool has_bias_;
    Param weight_; // out x (taps * in), column = tap * in + channel
    Param bias_;
    Matrix input_, cols_, dcols_;
    FeatureMap shape_;
    Spatial table_spatial_;
    std::vector<int> table_;
};

class BatchNorm : public Layer {
public:
    BatchNorm(std::string name, int channels);

    FeatureMap forward(const FeatureMap& in, bool train) override;
    FeatureMap backward(const FeatureMap& grad_out) override;
    std::vector<Param*> params() override { return {&gamma_, &beta_}; }
    std::vector<Buffer*> buffers() override { return {&running_mean_, &running_var_}; }

    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

private:
    Param gamma_, beta_;
    Buffer running_mean_, running_var_;
    Matrix xhat_;
    Vector inv_std_;
    bool train_mode_ = true;
};

/// x * Phi(x), exact (erf) form.
class Gelu : public Layer {
public:
    FeatureMap forward(const FeatureMap& in, bool train) override;
    FeatureMap backward(const FeatureMap& grad_out) override;

private:
    Matrix input_, cdf_;
};

/// Mean over 2^nd blocks, stride 2.
class AvgPool : public Layer {
public:
    FeatureMap forward(const FeatureMap& in, bool train) override;
    FeatureMap backward(const FeatureMap& grad_out) override;

private:
    Spatial in_spatial_;
};

/// Nearest-neighbour upsampling by 2 along each axis.
class Upsample : public Layer {
public:
    FeatureMap forward(const FeatureMap& in, bool train) override;
    FeatureMap backward(const FeatureMap& grad_out) override;

private:
    Spatial in_spatial_;
};

/// Appends one coordinate channel per axis, values in [-1, 1].
class ConcatCoords : public Layer {
public:
    explicit ConcatCoords(const Spatial& spatial);

    FeatureMap forward(const FeatureMap& in, bool train) override;
    FeatureMap backward(const FeatureMap& grad_out) override;

private:
    Matrix coords_; // nd x spatial
    int in_channels_ = 0;
};

/// Fills `out` (nd x spatial.size()) with the affine coordinate channels.
Matrix coordinate_channels(const Spatial& spatial);

/// Dense layer on column-per-sample matrices.
class Linear {
public:
    Linear(std::string name, int in, int out, Rng& rng);

    Matrix forward(const Matrix& in);
    Matrix backward(const Matrix& grad_out);
    std::vector<Param*> params() { return {&weight_, &bias_}; }
    Param& weight() { return weight_; }
    Param& bias() { return bias_; }

private:
    Param weight_, bias_;
    Matrix input_;
};

/// FeatureMap (C x N*S) <-> Matrix (C*S x N), feature = c * S + s.
Matrix flatten(const FeatureMap& fm);
FeatureMap unflatten(const Matrix& m, int channels, const Spatial& spatial);

/// Ordered layer stack.
class Sequential {
public:
    void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
    FeatureMap forward(FeatureMap x, bool train);
    FeatureMap backward(FeatureMap grad);
    std::vector<Param*> params();
    std::vector<Buffer*> buffers();
    std::size_t size() const { return layers_.size(); }
    Layer& at(std::size_t i) { return *layers_[i]; }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

} // namespace ldm::nn
