#include "ldm/nn/adam.hpp"

#include <cmath>

namespace ldm::nn {

Adam::Adam(std::vector<Param*> params, AdamOptions options) : params_(std::move(params)), opt_(options)
{
    for (auto* p : params_) {
        m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

void Adam::step()
{
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i];
        m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * p.grad;
        v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= opt_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + opt_.eps);
    }
}

void Adam::zero_grad()
{
    for (auto* p : params_)
        p->zero_grad();
}

} // namespace ldm::nn
