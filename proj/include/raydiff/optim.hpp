#pragma once

#include <cstdint>
#include <vector>

#include "raydiff/nn/tape.hpp"

namespace raydiff {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// Adam with decoupled weight decay; decay applies only to parameters flagged `decay`.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(std::vector<nn::Parameter<float>>& params, double lr);

    const AdamWConfig& config() const { return cfg_; }
    std::int64_t steps() const { return t_; }
    std::vector<nn::Matrix<float>>& first_moment() { return m_; }
    std::vector<nn::Matrix<float>>& second_moment() { return v_; }
    const std::vector<nn::Matrix<float>>& first_moment() const { return m_; }
    const std::vector<nn::Matrix<float>>& second_moment() const { return v_; }
    void set_steps(std::int64_t t) { t_ = t; }

private:
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
    std::vector<nn::Matrix<float>> m_;
    std::vector<nn::Matrix<float>> v_;
};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to `floor` at `total`.
struct LrSchedule {
    double peak = 1e-4;
    std::int64_t warmup = 0;
    std::int64_t total = 1;
    double floor = 0.0;

    double at(std::int64_t step) const;
};

/// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
double clip_grad_norm(std::vector<nn::Parameter<float>>& params, double max_norm);

}  // namespace raydiff
