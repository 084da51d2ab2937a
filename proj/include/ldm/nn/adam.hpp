#pragma once

#include <vector>

#include "ldm/nn/tensor.hpp"

namespace ldm::nn {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(std::vector<Param*> params, AdamOptions options);

    /// One update from the accumulated gradients.
    void step();
    void zero_grad();
    long steps() const { return t_; }

private:
    std::vector<Param*> params_;
    AdamOptions opt_;
    std::vector<Matrix> m_, v_;
    long t_ = 0;
};

} // namespace ldm::nn
