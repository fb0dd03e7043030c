#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "raydiff/diffusion.hpp"
#include "raydiff/optim.hpp"

namespace raydiff {
namespace {

TEST(NoiseScheduleTest, EndpointsAndMonotone) {
    const NoiseSchedule s;
    EXPECT_EQ(s.steps(), 1000);
    EXPECT_GE(s.alpha_bar(0), 0.999);
    EXPECT_LE(s.alpha_bar(1000), 0.001);
    for (int t = 1; t <= 1000; ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    EXPECT_THROW(s.alpha_bar(-1), DiffusionError);
    EXPECT_THROW(s.alpha_bar(1001), DiffusionError);
    EXPECT_THROW(NoiseSchedule(0), DiffusionError);
}

TEST(NoiseScheduleTest, MatchesNormalizedSigmoid) {
    const NoiseSchedule s(100);
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    for (int t = 0; t <= 100; t += 7) {
        const double v = -3.0 + 6.0 * t / 100.0;
        const double expect = (sig(-v) - sig(-3.0)) / (sig(3.0) - sig(-3.0));
        EXPECT_NEAR(s.alpha_bar(t), std::max(expect, kMinAlphaBar), 1e-15);
    }
}

TEST(QSampleTest, ExtremesAreExact) {
    std::mt19937_64 rng(31);
    const StateMatrix x0 = gaussian(6, 4, rng), eps = gaussian(6, 4, rng);
    EXPECT_EQ(q_sample(x0, 1.0, eps), x0);
    EXPECT_EQ(q_sample(x0, 0.0, eps), eps);
    EXPECT_EQ(q_sample(NoiseSchedule(), x0, 0, eps), x0);
    EXPECT_THROW(q_sample(NoiseSchedule(), x0, 1001, eps), DiffusionError);
}

TEST(QSampleTest, MonteCarloMoments) {
    const NoiseSchedule s;
    std::mt19937_64 rng(32);
    const int n = 100000;
    for (int t : {50, 400, 900}) {
        const double ab = s.alpha_bar(t);
        StateMatrix x0 = StateMatrix::Constant(n, 1, 0.7);
        const StateMatrix xt = q_sample(s, x0, t, gaussian(n, 1, rng));
        const double mean = xt.mean();
        const double var = (xt.array() - mean).square().sum() / (n - 1);
        const double sd = std::sqrt(1.0 - ab);
        EXPECT_NEAR(mean, std::sqrt(ab) * 0.7, 3.0 * sd / std::sqrt(n));
        // Var of the sample variance for a normal is 2 sigma^4 / (n - 1).
        EXPECT_NEAR(var, 1.0 - ab, 3.0 * std::sqrt(2.0 / (n - 1)) * (1.0 - ab));
    }
}

TEST(DdimTest, TimestepsAndValidation) {
    EXPECT_EQ(ddim_timesteps(1000, 10), (std::vector<int>{1000, 900, 800, 700, 600, 500, 400, 300, 200, 100, 0}));
    EXPECT_EQ(ddim_timesteps(1000, 1), (std::vector<int>{1000, 0}));
    EXPECT_EQ(ddim_timesteps(10, 3), (std::vector<int>{10, 7, 3, 0}));
    EXPECT_THROW(ddim_timesteps(1000, 0), DiffusionError);
}

StateMatrix clipped_x0_target(std::mt19937_64& rng, int rows, int cols) {
    std::uniform_real_distribution<double> u(-0.95, 0.95);
    StateMatrix x0(rows, cols);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = u(rng);
    return x0;
}

TEST(DdimTest, PlugInOracleRecoversX0) {
    const NoiseSchedule s;
    std::mt19937_64 rng(33);
    const StateMatrix x0 = clipped_x0_target(rng, 16, 4);
    const Denoiser oracle = [&](const StateMatrix& xt, int t) {
        const double ab = s.alpha_bar(t);
        return StateMatrix((xt - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab));
    };
    const StateMatrix mask = StateMatrix::Ones(16, 4);
    for (int steps : {1, 2, 5, 10, 50, 1000}) {
        for (bool clip : {true, false}) {
            const StateMatrix out = ddim_sample(s, oracle, mask, {steps, clip}, 99);
            EXPECT_LE((out - x0).cwiseAbs().maxCoeff(), 1e-4) << steps << " clip=" << clip;
        }
    }
}

TEST(DdimTest, OneStepEqualsClosedForm) {
    const NoiseSchedule s;
    std::mt19937_64 rng(34);
    const StateMatrix w = gaussian(4, 4, rng);
    const Denoiser net = [&](const StateMatrix& xt, int) { return StateMatrix(0.3 * xt + 0.1 * w); };
    const StateMatrix mask = StateMatrix::Ones(4, 4);
    for (bool clip : {false, true}) {
        const StateMatrix out = ddim_sample(s, net, mask, {1, clip}, 5);
        std::mt19937_64 again(5);
        const StateMatrix xT = gaussian(4, 4, again);
        const double ab = s.alpha_bar(1000);
        StateMatrix x0 = (xT - std::sqrt(1.0 - ab) * (0.3 * xT + 0.1 * w)) / std::sqrt(ab);
        if (clip) x0 = x0.cwiseMax(-1.0).cwiseMin(1.0);
        EXPECT_LE((out - x0).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(DdimTest, DeterministicAndMasked) {
    const NoiseSchedule s;
    const Denoiser net = [](const StateMatrix& xt, int t) { return StateMatrix(std::sin(t * 0.01) * xt); };
    StateMatrix mask = StateMatrix::Zero(10, 4);
    mask.col(3).setOnes();
    const StateMatrix a = ddim_sample(s, net, mask, {}, 123);
    const StateMatrix b = ddim_sample(s, net, mask, {}, 123);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.leftCols(3).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_NE(a, ddim_sample(s, net, mask, {}, 124));
}

TEST(MedianTest, OddEvenAndConstant) {
    std::vector<StateMatrix> v{StateMatrix::Constant(2, 2, 3.0), StateMatrix::Constant(2, 2, 1.0),
                               StateMatrix::Constant(2, 2, 2.0)};
    EXPECT_EQ(elementwise_median(v), StateMatrix::Constant(2, 2, 2.0));
    v.push_back(StateMatrix::Constant(2, 2, 10.0));
    EXPECT_EQ(elementwise_median(v), StateMatrix::Constant(2, 2, 2.5));
    std::vector<StateMatrix> same(5, StateMatrix::Constant(3, 1, -0.25));
    EXPECT_EQ(elementwise_median(same), same[0]);
    EXPECT_EQ(elementwise_median({same[0]}), same[0]);
}

TEST(EmaTest, GeometricConvergence) {
    std::vector<nn::Parameter<double>> params(1);
    params[0].value = nn::Matrix<double>::Constant(2, 3, 4.0);
    Ema<double> ema(0.999);
    ema.reset(params);
    params[0].value.setConstant(1.0);
    const double gap0 = 3.0;
    for (int k = 1; k <= 3000; ++k) {
        ema.update(params);
        const double gap = (ema.shadow()[0].array() - 1.0).abs().maxCoeff();
        EXPECT_LE(gap, std::pow(0.999, k) * gap0 * (1 + 1e-9));
        if (k % 1000 == 0) EXPECT_NEAR(gap, std::pow(0.999, k) * gap0, 1e-9);
    }
    ema.copy_to(params);
    EXPECT_NEAR(params[0].value(0, 0), 1.0 + std::pow(0.999, 3000) * 3.0, 1e-9);
}

TEST(LrScheduleTest, WarmupThenCosine) {
    const LrSchedule s{1e-3, 10, 110, 0.0};
    EXPECT_NEAR(s.at(0), 1e-4, 1e-15);
    EXPECT_NEAR(s.at(9), 1e-3, 1e-15);
    EXPECT_NEAR(s.at(10), 1e-3, 1e-15);
    EXPECT_NEAR(s.at(60), 0.5e-3, 1e-12);
    EXPECT_NEAR(s.at(110), 0.0, 1e-15);
    for (int i = 11; i < 110; ++i) EXPECT_LT(s.at(i), s.at(i - 1));
}

TEST(AdamWTest, MatchesReferenceUpdate) {
    std::vector<nn::Parameter<float>> params(2);
    params[0].value = nn::Matrix<float>::Constant(1, 2, 1.0f);
    params[0].decay = true;
    params[1].value = nn::Matrix<float>::Constant(1, 1, -2.0f);
    params[1].decay = false;
    AdamW opt({0.9, 0.99, 1e-8, 0.1});
    double p0 = 1.0, p1 = -2.0, m = 0, v = 0;
    for (int t = 1; t <= 5; ++t) {
        const double g = 0.5 * t;
        params[0].grad = nn::Matrix<float>::Constant(1, 2, static_cast<float>(g));
        params[1].grad = nn::Matrix<float>::Constant(1, 1, static_cast<float>(g));
        opt.step(params, 0.01);
        p0 *= 1.0 - 0.01 * 0.1;
        m = 0.9 * m + 0.1 * g;
        v = 0.99 * v + 0.01 * g * g;
        const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.99, t));
        p0 -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
        p1 -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
        EXPECT_NEAR(params[0].value(0, 0), p0, 1e-6);
        EXPECT_NEAR(params[0].value(0, 1), p0, 1e-6);
        EXPECT_NEAR(params[1].value(0, 0), p1, 1e-6);
    }
    EXPECT_EQ(opt.steps(), 5);
}

TEST(ClipGradTest, ScalesToMaxNorm) {
    std::vector<nn::Parameter<float>> params(2);
    params[0].value.setZero(1, 2);
    params[0].grad = nn::Matrix<float>::Constant(1, 2, 3.0f);
    params[1].value.setZero(1, 1);
    params[1].grad = nn::Matrix<float>::Constant(1, 1, std::sqrt(7.0f));
    const double norm = clip_grad_norm(params, 1.0);
    EXPECT_NEAR(norm, 5.0, 1e-5);
    double sq = params[0].grad.squaredNorm() + params[1].grad.squaredNorm();
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
    EXPECT_EQ(mix_seed(1, 2), mix_seed(1, 2));
    EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
}

}  // namespace
}  // namespace raydiff
