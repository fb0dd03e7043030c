#include "raydiff/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace raydiff {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

NoiseSchedule::NoiseSchedule(int steps, double start, double end)
    : steps_(steps), start_(start), end_(end) {
    if (steps < 1) throw DiffusionError("NoiseSchedule: need at least one step");
    if (!(start < end)) throw DiffusionError("NoiseSchedule: need start < end");
    const double hi = sigmoid(-start), lo = sigmoid(-end);
    alpha_bar_.resize(steps + 1);
    for (int t = 0; t <= steps; ++t) {
        const double x = start + (static_cast<double>(t) / steps) * (end - start);
        alpha_bar_[t] = std::clamp((sigmoid(-x) - lo) / (hi - lo), kMinAlphaBar, 1.0);
    }
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > steps_) throw DiffusionError("NoiseSchedule: timestep out of range");
    return alpha_bar_[t];
}

StateMatrix q_sample(const StateMatrix& x0, double alpha_bar, const StateMatrix& eps) {
    if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw DiffusionError("q_sample: shape mismatch");
    if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw DiffusionError("q_sample: alpha_bar outside [0,1]");
    return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

StateMatrix q_sample(const NoiseSchedule& schedule, const StateMatrix& x0, int t, const StateMatrix& eps) {
    return q_sample(x0, schedule.alpha_bar(t), eps);
}

std::vector<int> ddim_timesteps(int steps, int eval_steps) {
    if (eval_steps < 1) throw DiffusionError("ddim: T_eval must be at least 1");
    if (eval_steps > steps) throw DiffusionError("ddim: T_eval exceeds the training schedule");
    std::vector<int> ts;
    for (int i = eval_steps; i >= 0; --i)
        ts.push_back(static_cast<int>(std::lround(static_cast<double>(steps) * i / eval_steps)));
    return ts;
}

StateMatrix ddim_sample_from(const NoiseSchedule& schedule, const Denoiser& denoiser, StateMatrix x,
                             const DdimOptions& options, const StateMatrix* mask) {
    if (mask && (mask->rows() != x.rows() || mask->cols() != x.cols()))
        throw DiffusionError("ddim: mask shape mismatch");
    const auto ts = ddim_timesteps(schedule.steps(), options.eval_steps);
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        const int t = ts[i], prev = ts[i + 1];
        const double ab = schedule.alpha_bar(t);
        StateMatrix eps = denoiser(x, t);
        if (eps.rows() != x.rows() || eps.cols() != x.cols()) throw DiffusionError("ddim: denoiser output shape");
        StateMatrix x0 = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
        if (options.clip_x0) {
            x0 = x0.cwiseMax(-1.0).cwiseMin(1.0);
            eps = (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
        }
        if (prev == 0) {
            x = std::move(x0);
        } else {
            const double ab_prev = schedule.alpha_bar(prev);
            x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
        }
        if (mask) x = (x.array() * mask->array()).matrix();
    }
    return x;
}

StateMatrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    StateMatrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

StateMatrix ddim_sample(const NoiseSchedule& schedule, const Denoiser& denoiser, const StateMatrix& mask,
                        const DdimOptions& options, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    StateMatrix x = (gaussian(mask.rows(), mask.cols(), rng).array() * mask.array()).matrix();
    return ddim_sample_from(schedule, denoiser, std::move(x), options, &mask);
}

StateMatrix elementwise_median(const std::vector<StateMatrix>& samples) {
    if (samples.empty()) throw DiffusionError("median: no samples");
    StateMatrix out(samples[0].rows(), samples[0].cols());
    std::vector<double> v(samples.size());
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        for (std::size_t k = 0; k < samples.size(); ++k) {
            if (samples[k].size() != out.size()) throw DiffusionError("median: shape mismatch");
            v[k] = samples[k].data()[i];
        }
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        out.data()[i] = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    }
    return out;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace raydiff
