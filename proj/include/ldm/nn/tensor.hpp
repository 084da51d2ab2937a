#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ldm/grids.hpp"

namespace ldm::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Spatial extent padded to three axes; axes at or beyond `nd` have extent 1.
struct Spatial {
    std::array<int, 3> ext{1, 1, 1};
    int nd = 0;

    static Spatial from_dims(const Dims& dims);
    int size() const { return ext[0] * ext[1] * ext[2]; }
    Spatial halved() const;
    Spatial doubled() const;
    friend bool operator==(const Spatial&, const Spatial&) = default;
};

/// Batch of feature maps, one row per channel and one column per
/// (sample, voxel) pair: column = sample * spatial.size() + voxel.
struct FeatureMap {
    Matrix x;
    int batch = 0;
    Spatial spatial;

    int channels() const { return static_cast<int>(x.rows()); }
    static FeatureMap zeros(int channels, int batch, const Spatial& spatial);
};

/// Trainable tensor with its gradient accumulator.
struct Param {
    std::string name;
    Matrix value;
    Matrix grad;

    Param() = default;
    Param(std::string n, Eigen::Index rows, Eigen::Index cols)
        : name(std::move(n)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols))
    {
    }
    void zero_grad() { grad.setZero(); }
};

/// Non-trainable persistent state (batch-norm running statistics).
struct Buffer {
    std::string name;
    Matrix value;
};

} // namespace ldm::nn
