#include "raydiff/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace raydiff {

void AdamW::step(std::vector<nn::Parameter<float>>& params, double lr) {
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.push_back(nn::Matrix<float>::Zero(p.value.rows(), p.value.cols()));
            v_.push_back(nn::Matrix<float>::Zero(p.value.rows(), p.value.cols()));
        }
    }
    if (m_.size() != params.size()) throw std::logic_error("AdamW: parameter list changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float step = static_cast<float>(lr / bc1);
    const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const float eps = static_cast<float>(cfg_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (p.grad.size() != p.value.size()) continue;  // never touched by a forward pass
        if (p.decay && cfg_.weight_decay > 0.0) p.value *= static_cast<float>(1.0 - lr * cfg_.weight_decay);
        m_[i] = b1 * m_[i] + (1.0f - b1) * p.grad;
        v_[i] = b2 * v_[i] + (1.0f - b2) * p.grad.cwiseAbs2();
        p.value.array() -= step * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + eps);
    }
}

double LrSchedule::at(std::int64_t step) const {
    if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = std::max<std::int64_t>(1, total - warmup);
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(std::vector<nn::Parameter<float>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        if (p.grad.size()) sq += p.grad.template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const float s = static_cast<float>(max_norm / norm);
        for (auto& p : params)
            if (p.grad.size()) p.grad *= s;
    }
    return norm;
}

}  // namespace raydiff
