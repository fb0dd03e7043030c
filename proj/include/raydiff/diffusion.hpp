#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "raydiff/nn/tape.hpp"

// Sigmoid noise schedule, forward noising, deterministic DDIM sampling, EMA and ensembling.

namespace raydiff {

class DiffusionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using StateMatrix = nn::Matrix<double>;

inline constexpr int kScheduleVersion = 1;
inline constexpr double kMinAlphaBar = 1e-5;

/// Cumulative signal coefficients alpha_bar[t], t = 0..T, from a normalized sigmoid:
///   alpha_bar(t) = (sig(-(a + (t/T)(b - a))) - sig(-b)) / (sig(-a) - sig(-b)),
/// clamped to [kMinAlphaBar, 1] so the x0 estimate stays finite at t = T.
class NoiseSchedule {
public:
    explicit NoiseSchedule(int steps = 1000, double start = -3.0, double end = 3.0);

    int steps() const { return steps_; }
    double start() const { return start_; }
    double end() const { return end_; }
    double alpha_bar(int t) const;
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

private:
    int steps_;
    double start_;
    double end_;
    std::vector<double> alpha_bar_;
};

/// x_t = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps.
StateMatrix q_sample(const StateMatrix& x0, double alpha_bar, const StateMatrix& eps);
StateMatrix q_sample(const NoiseSchedule& schedule, const StateMatrix& x0, int t, const StateMatrix& eps);

/// Schedule indices visited by DDIM: round(T i / T_eval) for i = T_eval..0, strictly decreasing.
std::vector<int> ddim_timesteps(int steps, int eval_steps);

/// eps estimate for state x_t at schedule index t.
using Denoiser = std::function<StateMatrix(const StateMatrix& x_t, int t)>;

struct DdimOptions {
    int eval_steps = 10;
    bool clip_x0 = true;  // clamp the x0 estimate to [-1, 1] before each update
};

/// Deterministic (eta = 0) DDIM from a given x_T. Entries where `mask` is zero are held at 0.
StateMatrix ddim_sample_from(const NoiseSchedule& schedule, const Denoiser& denoiser, StateMatrix x_t,
                             const DdimOptions& options, const StateMatrix* mask = nullptr);

/// Draws x_T ~ N(0, I) from `seed` (masked), then runs ddim_sample_from.
StateMatrix ddim_sample(const NoiseSchedule& schedule, const Denoiser& denoiser, const StateMatrix& mask,
                        const DdimOptions& options, std::uint64_t seed);

/// Standard normal matrix from a dedicated stream.
StateMatrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng);

/// Per-entry median over ensemble members (mean of the middle pair for even counts).
StateMatrix elementwise_median(const std::vector<StateMatrix>& samples);

/// Exponential moving average of parameters: shadow <- beta shadow + (1 - beta) p.
template <class T>
class Ema {
public:
    explicit Ema(double decay = 0.999) : decay_(decay) {}

    void reset(const std::vector<nn::Parameter<T>>& params) {
        shadow_.clear();
        for (const auto& p : params) shadow_.push_back(p.value);
    }
    void update(const std::vector<nn::Parameter<T>>& params) {
        if (shadow_.size() != params.size()) throw DiffusionError("Ema: parameter list changed shape");
        const T b = static_cast<T>(decay_);
        for (std::size_t i = 0; i < params.size(); ++i) shadow_[i] = b * shadow_[i] + (T(1) - b) * params[i].value;
    }
    void copy_to(std::vector<nn::Parameter<T>>& params) const {
        if (shadow_.size() != params.size()) throw DiffusionError("Ema: parameter list changed shape");
        for (std::size_t i = 0; i < params.size(); ++i) params[i].value = shadow_[i];
    }

    double decay() const { return decay_; }
    std::vector<nn::Matrix<T>>& shadow() { return shadow_; }
    const std::vector<nn::Matrix<T>>& shadow() const { return shadow_; }

private:
    double decay_;
    std::vector<nn::Matrix<T>> shadow_;
};

/// SplitMix64 finalizer; used to derive independent per-step / per-member seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace raydiff
