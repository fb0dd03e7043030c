#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "rin_fixtures.hpp"
#include "raydiff/rin.hpp"

namespace raydiff {
namespace {

using testing::random_batch;
using testing::randomize;
using testing::tiny_config;

TEST(RinConfigTest, ProfilesValidate) {
    EXPECT_NO_THROW(RinConfig::paper_defaults().validate());
    EXPECT_NO_THROW(RinConfig::toy().validate());
    RinConfig bad = RinConfig::toy();
    bad.num_heads = 3;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = RinConfig::toy();
    bad.num_latents = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(RinConfigTest, ParameterCountIsPureFunctionOfConfig) {
    const RinConfig cfg = RinConfig::toy();
    EXPECT_EQ(RinModel<float>(cfg, 1).parameter_count(), parameter_count(cfg));
    EXPECT_EQ(RinModel<float>(cfg, 2).parameter_count(), parameter_count(cfg));
}

TEST(TokenGridTest, QuarterResolutionAndPadding) {
    const TokenGrid g = token_grid(64, 64);
    EXPECT_EQ(g.width * g.height, 256);
    EXPECT_EQ(g.valid_cells.size(), 256u);
    const TokenGrid padded = token_grid(30, 30);
    EXPECT_EQ(padded.width, 8);
    EXPECT_EQ(padded.valid_cells.size(), 49u);
}

TEST(TokenizerTest, ShapeAndDeterminism) {
    RinConfig cfg = RinConfig::toy();
    RinModel<float> model(cfg, 3);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    ImageF a(64, 64, 3), b(64, 64, 3);
    for (float& x : a.data) x = u(rng);
    for (float& x : b.data) x = u(rng);
    const auto ta = model.tokenize_image(a);
    EXPECT_EQ(ta.rows(), 256);
    EXPECT_EQ(ta.cols(), cfg.image_embed_dim);
    EXPECT_EQ(ta, model.tokenize_image(a));
    EXPECT_EQ(model.tokenize_image(ImageF(30, 30, 3)).rows(), 64);

    // Batch independence: swapping views swaps their scene-token blocks.
    TokenBatch batch = random_batch(cfg, rng, 2, 16, 8, 16);
    const auto s1 = model.embed_scene(batch.scene);
    std::swap(batch.scene.views[0], batch.scene.views[1]);
    const auto s2 = model.embed_scene(batch.scene);
    EXPECT_EQ(s1.topRows(16), s2.bottomRows(16));
    EXPECT_EQ(s1.bottomRows(16), s2.topRows(16));
}

TEST(RinForwardTest, ShapeMaskingAndDeterminism) {
    const RinConfig cfg = RinConfig::toy();
    RinModel<float> model(cfg, 4);
    randomize(model, 4, 0.2);
    std::mt19937_64 rng(4);
    const TokenBatch batch = random_batch(cfg, rng, 3, 20, 37, 16);
    const auto out = model.forward(batch);
    ASSERT_EQ(out.rows(), 37);
    ASSERT_EQ(out.cols(), kStateColumns);
    for (int i = 0; i < 37; ++i) {
        if (batch.prediction.tasks[i] == TaskId::Rgb) {
            EXPECT_EQ(out(i, kDepthColumn), 0.0f);
        } else {
            EXPECT_EQ(out.row(i).head(3).norm(), 0.0f);
        }
    }
    EXPECT_EQ(out, model.forward(batch));
}

TEST(RinForwardTest, FreshModelPredictsZeroNoise) {
    const RinConfig cfg = RinConfig::toy();
    RinModel<float> model(cfg, 5);
    std::mt19937_64 rng(5);
    EXPECT_EQ(model.forward(random_batch(cfg, rng, 2, 10, 12, 16)).norm(), 0.0f);
}

TEST(RinForwardTest, RejectsMismatchedTokens) {
    const RinConfig cfg = RinConfig::toy();
    RinModel<float> model(cfg, 6);
    std::mt19937_64 rng(6);
    TokenBatch batch = random_batch(cfg, rng, 1, 8, 8, 16);
    batch.prediction.rays.conservativeResize(8, cfg.ray_embed_dim - 1);
    EXPECT_THROW(model.forward(batch), ConfigError);
    batch = random_batch(cfg, rng, 1, 8, 8, 16);
    batch.prediction.tasks.pop_back();
    EXPECT_THROW(model.forward(batch), ConfigError);
}

TEST(RinForwardTest, ScenePermutationInvarianceAndPredictionEquivariance) {
    const RinConfig cfg = RinConfig::toy();
    RinModel<float> model(cfg, 7);
    randomize(model, 7, 0.2);
    std::mt19937_64 rng(7);
    const TokenBatch batch = random_batch(cfg, rng, 2, 32, 24, 32);
    const auto scene = model.embed_scene(batch.scene);
    const auto ref = model.forward_with_scene(scene, batch.prediction, batch.timestep);

    std::vector<int> perm(scene.rows());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    nn::Matrix<float> shuffled(scene.rows(), scene.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) shuffled.row(i) = scene.row(perm[i]);
    const auto out = model.forward_with_scene(shuffled, batch.prediction, batch.timestep);
    EXPECT_LE((out - ref).cwiseAbs().maxCoeff(), 1e-6);

    std::vector<int> pp(batch.prediction.size());
    std::iota(pp.begin(), pp.end(), 0);
    std::shuffle(pp.begin(), pp.end(), rng);
    PredictionInput permuted = batch.prediction;
    for (std::size_t i = 0; i < pp.size(); ++i) {
        permuted.rays.row(i) = batch.prediction.rays.row(pp[i]);
        permuted.state.row(i) = batch.prediction.state.row(pp[i]);
        permuted.tasks[i] = batch.prediction.tasks[pp[i]];
    }
    const auto pout = model.forward_with_scene(scene, permuted, batch.timestep);
    for (std::size_t i = 0; i < pp.size(); ++i)
        EXPECT_LE((pout.row(i) - ref.row(pp[i])).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(RinForwardTest, LatentComputeIndependentOfTokenCount) {
    const RinConfig cfg = RinConfig::toy();
    RinModel<float> model(cfg, 8);
    std::mt19937_64 rng(8);
    const TokenBatch batch = random_batch(cfg, rng, 2, 64, 32, 32);
    const auto scene = model.embed_scene(batch.scene);
    nn::Matrix<float> doubled(2 * scene.rows(), scene.cols());
    doubled << scene, scene;
    nn::OpCounter one, two;
    model.forward_with_scene(scene, batch.prediction, batch.timestep, &one);
    model.forward_with_scene(doubled, batch.prediction, batch.timestep, &two);
    EXPECT_GT(two[nn::Stage::Read], one[nn::Stage::Read]);
    EXPECT_EQ(two[nn::Stage::Latent], one[nn::Stage::Latent]);
    EXPECT_EQ(two[nn::Stage::Write], one[nn::Stage::Write]);
    EXPECT_EQ(two[nn::Stage::Embed], one[nn::Stage::Embed]);
    EXPECT_EQ(two[nn::Stage::Head], one[nn::Stage::Head]);
    EXPECT_GT(one[nn::Stage::Latent], 0u);
}

// Loss = sum(out .* W) for a fixed random W, so d(loss)/d(out) = W.
double weighted_loss(const RinModel<double>& m, const TokenBatch& b, const nn::Matrix<double>& W) {
    return (m.forward(b).array() * W.array()).sum();
}

TEST(RinGradientTest, MatchesCentralFiniteDifferences) {
    const RinConfig cfg = tiny_config();
    RinModel<double> model(cfg, 9);
    randomize(model, 9, 0.5);
    std::mt19937_64 rng(9);
    const TokenBatch batch = random_batch(cfg, rng, 2, 3, 5, 8);
    nn::Matrix<double> W = nn::Matrix<double>::Random(5, kStateColumns);

    model.zero_grad();
    nn::Tape<double> tape(true);
    const auto out = model.forward(tape, batch);
    tape.backward(out, W);

    const double h = 1e-5;
    int checked = 0;
    for (auto& par : model.parameters()) {
        const Eigen::Index n = par.value.size();
        const Eigen::Index stride = std::max<Eigen::Index>(1, n / 12);
        double group_max = 0.0;
        for (Eigen::Index i = 0; i < n; i += stride) {
            double& x = par.value.data()[i];
            const double saved = x;
            x = saved + h;
            const double up = weighted_loss(model, batch, W);
            x = saved - h;
            const double down = weighted_loss(model, batch, W);
            x = saved;
            const double numeric = (up - down) / (2 * h);
            const double analytic = par.grad.data()[i];
            const double err = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            group_max = std::max(group_max, err);
            ++checked;
        }
        EXPECT_LE(group_max, 1e-4) << par.name;
    }
    EXPECT_GT(checked, 100);
}

TEST(RinDuplicationTest, ParameterCensus) {
    const RinConfig cfg = RinConfig::paper_defaults();
    RinConfig big = cfg;
    big.num_latents *= 2;
    EXPECT_EQ(parameter_count(big) - parameter_count(cfg), 256u * 1024u);
}

TEST(RinDuplicationTest, PreservesOutputs) {
    const RinConfig cfg = RinConfig::toy();
    RinModel<float> model(cfg, 10);
    randomize(model, 10, 0.2);
    std::mt19937_64 rng(10);
    const TokenBatch batch = random_batch(cfg, rng, 2, 32, 40, 32);
    const auto ref = model.forward(batch);
    const RinModel<float> twice = model.duplicate_latents();
    EXPECT_EQ(twice.config().num_latents, 2 * cfg.num_latents);
    EXPECT_EQ(twice.parameter_count() - model.parameter_count(),
              static_cast<std::size_t>(cfg.num_latents) * cfg.latent_dim);
    EXPECT_LE((twice.forward(batch) - ref).cwiseAbs().maxCoeff(), 1e-5);
    const RinModel<float> four = twice.duplicate_latents();
    EXPECT_EQ(four.config().num_latents, 4 * cfg.num_latents);
    EXPECT_LE((four.forward(batch) - ref).cwiseAbs().maxCoeff(), 1e-5);

    RinModel<double> md = model.cast<double>();
    const auto refd = md.forward(batch);
    EXPECT_LE((md.duplicate_latents().forward(batch) - refd).cwiseAbs().maxCoeff(), 1e-10);
}

}  // namespace
}  // namespace raydiff
