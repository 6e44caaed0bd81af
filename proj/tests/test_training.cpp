#include <cmath>

#include <gtest/gtest.h>

#include "dwn/training.hpp"
#include "support.hpp"

using dwn::Activation;
using dwn::Field;
using dwn::LossKind;
using dwn::TrainConfig;

TEST(Loss, L2ZeroAtPerfectPrediction) {
    Field pred = dwntest::random_field(6, 6, 1, 1, 0.0, 1.0);
    auto [value, grad] = dwn::loss_and_grad(pred, pred, LossKind::L2);
    EXPECT_DOUBLE_EQ(value, 0.0);
    for (std::size_t k = 0; k < grad.size(); ++k) EXPECT_DOUBLE_EQ(grad.data()[k], 0.0);
}

TEST(Loss, BceAtHalfIsLogTwo) {
    Field pred(8, 8, 1, 0.5);
    Field mask = dwn::threshold(dwntest::random_field(8, 8, 1, 2, 0.0, 1.0));
    EXPECT_NEAR(dwn::loss_and_grad(pred, mask, LossKind::BCE).first, std::log(2.0), 1e-12);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
    Field pred = dwntest::random_field(8, 8, 1, 3, 0.05, 0.95);
    Field mask = dwn::threshold(dwntest::random_field(8, 8, 1, 4, 0.0, 1.0));
    const double eps = 1e-7;
    for (LossKind kind : {LossKind::BCE, LossKind::L2}) {
        auto [value, grad] = dwn::loss_and_grad(pred, mask, kind);
        (void)value;
        for (int i = 0; i < 8; i += 3)
            for (int j = 0; j < 8; j += 2) {
                const double saved = pred.at(i, j, 0);
                pred.at(i, j, 0) = saved + eps;
                const double lp = dwn::loss_and_grad(pred, mask, kind).first;
                pred.at(i, j, 0) = saved - eps;
                const double lm = dwn::loss_and_grad(pred, mask, kind).first;
                pred.at(i, j, 0) = saved;
                EXPECT_NEAR((lp - lm) / (2 * eps), grad.at(i, j, 0), 1e-7);
            }
    }
    EXPECT_THROW(dwn::loss_and_grad(pred, Field(4, 4, 1), LossKind::L2), dwn::config_error);
}

namespace {

struct FlatParams {
    std::vector<double> w;
    std::vector<dwn::TensorView> manifest() {
        return {{"w", w.data(), w.size(), {static_cast<int>(w.size())}}};
    }
};

} // namespace

TEST(Adam, ZeroGradientIsIdentity) {
    FlatParams p{{0.5, -1.5, 2.0}};
    FlatParams g{{0.0, 0.0, 0.0}};
    TrainConfig cfg;
    auto pv = p.manifest();
    dwn::AdamState state(pv);
    auto gv = g.manifest();
    dwn::adam_step(pv, gv, state, cfg);
    EXPECT_DOUBLE_EQ(p.w[0], 0.5);
    EXPECT_DOUBLE_EQ(p.w[1], -1.5);
    EXPECT_DOUBLE_EQ(p.w[2], 2.0);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
    FlatParams p{{1.0, 1.0, 1.0}};
    FlatParams g{{0.3, -0.7, 4.0}};
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    auto pv = p.manifest();
    dwn::AdamState state(pv);
    auto gv = g.manifest();
    dwn::adam_step(pv, gv, state, cfg);
    // bias correction makes mhat/sqrt(vhat) = g/|g| up to adam_eps
    EXPECT_NEAR(p.w[0], 1.0 - 1e-3, 1e-8);
    EXPECT_NEAR(p.w[1], 1.0 + 1e-3, 1e-8);
    EXPECT_NEAR(p.w[2], 1.0 - 1e-3, 1e-8);
}

TEST(Adam, DeterministicBitwise) {
    std::vector<double> reference;
    for (int run = 0; run < 2; ++run) {
        FlatParams p{{0.1, 0.2, 0.3, 0.4}};
        dwn::Rng rng(5);
        auto pv = p.manifest();
        dwn::AdamState state(pv);
        TrainConfig cfg;
        for (int t = 0; t < 25; ++t) {
            FlatParams g{{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
                          rng.uniform(-1, 1)}};
            auto gv = g.manifest();
            dwn::adam_step(pv, gv, state, cfg);
        }
        if (run == 0) reference = p.w;
        else
            for (std::size_t k = 0; k < p.w.size(); ++k) EXPECT_EQ(p.w[k], reference[k]);
    }
}

TEST(Metrics, AccuracyAgreementAndLiteral) {
    Field mask = dwn::threshold(dwntest::random_field(8, 8, 1, 6, 0.0, 1.0));
    EXPECT_DOUBLE_EQ(dwn::accuracy({mask}, {mask}), 100.0);

    Field complement = mask;
    for (double& v : complement.raw()) v = 1.0 - v;
    EXPECT_DOUBLE_EQ(dwn::accuracy({complement}, {mask}), 0.0);

    // 48 of 64 pixels agree
    Field pred = mask;
    int flipped = 0;
    for (int i = 0; i < 8 && flipped < 16; ++i)
        for (int j = 0; j < 8 && flipped < 16; ++j) {
            pred.at(i, j, 0) = 1.0 - pred.at(i, j, 0);
            ++flipped;
        }
    EXPECT_DOUBLE_EQ(dwn::accuracy({pred}, {mask}), 75.0);

    // the literal mode counts only true positives
    Field ones(8, 8, 1, 1.0);
    std::size_t fg = 0;
    for (std::size_t k = 0; k < mask.size(); ++k) fg += mask.data()[k] != 0.0;
    EXPECT_NEAR(dwn::accuracy({ones}, {mask}, dwn::AccuracyMode::LiteralAnd),
                100.0 * static_cast<double>(fg) / 64.0, 1e-12);
}

TEST(Metrics, DiceValuesAndSymmetry) {
    Field a(4, 4, 1, 1.0);
    EXPECT_DOUBLE_EQ(dwn::dice({a}, {a}), 1.0);

    Field left(4, 4, 1), right(4, 4, 1);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            (j < 2 ? left : right).at(i, j, 0) = 1.0;
    EXPECT_DOUBLE_EQ(dwn::dice({left}, {right}), 0.0);

    // |pred| = 4, |mask| = 8, overlap 4 -> 2*4/12
    Field pred(4, 4, 1), mask(4, 4, 1);
    for (int j = 0; j < 4; ++j) {
        mask.at(0, j, 0) = 1.0;
        mask.at(1, j, 0) = 1.0;
        pred.at(0, j, 0) = 1.0;
    }
    EXPECT_NEAR(dwn::dice({pred}, {mask}), 2.0 * 4.0 / 12.0, 1e-12);
    EXPECT_DOUBLE_EQ(dwn::dice({pred}, {mask}), dwn::dice({mask}, {pred}));

    Field empty(4, 4, 1, 0.0);
    EXPECT_DOUBLE_EQ(dwn::dice({empty}, {empty}), 1.0);
    EXPECT_DOUBLE_EQ(dwn::dice({empty}, {mask}), 0.0);
}

namespace {

dwn::Dataset tiny_dataset(int n, int size, std::uint64_t seed) {
    return dwn::synth_dataset(seed, n, size, 0.05, {0.25, 0.75});
}

dwn::DNIParams tiny_model(std::uint64_t seed) {
    dwn::DN1Config cfg{1, {2}, 2, 3,
                       dwn::DoubleWellParams{0.2, 1.0, 15.0, 3, Activation::QgammaSig}};
    return dwn::build_dn1(cfg, seed);
}

} // namespace

TEST(Train, ZeroEpochsLeavesModelUntouched) {
    dwn::DNIParams model = tiny_model(7);
    dwn::DNIParams reference = tiny_model(7);
    TrainConfig cfg;
    cfg.epochs = 0;
    auto records = dwn::train(model, tiny_dataset(5, 16, 8), cfg);
    EXPECT_TRUE(records.empty());
    auto mv = model.manifest(), rv = reference.manifest();
    for (std::size_t t = 0; t < mv.size(); ++t)
        for (std::size_t e = 0; e < mv[t].size; ++e) EXPECT_EQ(mv[t].data[e], rv[t].data[e]);
}

TEST(Train, SingleSampleLossDecreases) {
    dwn::DNIParams model = tiny_model(9);
    dwn::Dataset data = tiny_dataset(1, 16, 10);
    TrainConfig cfg;
    cfg.loss = LossKind::L2;
    cfg.learning_rate = 1e-3;
    cfg.epochs = 1;
    cfg.batch_size = 1;
    const double before =
        dwn::loss_and_grad(dwn::dn1_forward(data.images[0], model).pred, data.masks[0], LossKind::L2)
            .first;
    dwn::train(model, data, cfg);
    const double after =
        dwn::loss_and_grad(dwn::dn1_forward(data.images[0], model).pred, data.masks[0], LossKind::L2)
            .first;
    EXPECT_LT(after, before);
}

TEST(Train, DeterministicMetricsAndParameters) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 11;
    dwn::Dataset data = tiny_dataset(10, 16, 12);

    dwn::DNIParams a = tiny_model(11);
    auto ra = dwn::train(a, data, cfg);
    dwn::DNIParams b = tiny_model(11);
    auto rb = dwn::train(b, data, cfg);

    ASSERT_EQ(ra.size(), rb.size());
    for (std::size_t k = 0; k < ra.size(); ++k) {
        EXPECT_EQ(ra[k].mean_loss, rb[k].mean_loss);
        EXPECT_EQ(ra[k].accuracy_pct, rb[k].accuracy_pct);
        EXPECT_EQ(ra[k].dice, rb[k].dice);
    }
    auto va = a.manifest(), vb = b.manifest();
    for (std::size_t t = 0; t < va.size(); ++t)
        for (std::size_t e = 0; e < va[t].size; ++e) EXPECT_EQ(va[t].data[e], vb[t].data[e]);
}

TEST(Train, NonFiniteParametersRaiseDivergence) {
    dwn::DNIParams model = tiny_model(13);
    model.region_net.layers[0].weights[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.epochs = 1;
    EXPECT_THROW(dwn::train(model, tiny_dataset(5, 16, 14), cfg), dwn::divergence_error);
}

TEST(Evaluate, ZeroModelAgainstConstantMasks) {
    dwn::DN1Config cfg{1, {2}, 2, 3,
                       dwn::DoubleWellParams{0.2, 1.0, 15.0, 3, Activation::QgammaProj}};
    dwn::DNIParams model = dwn::zeros_like(dwn::build_dn1(cfg, 0));

    dwn::Dataset ones;
    ones.images.push_back(dwntest::random_field(16, 16, 1, 15, 0.0, 1.0));
    ones.masks.emplace_back(16, 16, 1, 1.0);
    ones.names.push_back("ones");
    // the zero model predicts exactly 0.5 and the threshold tie goes foreground
    dwn::MetricsRecord r = dwn::evaluate(model, ones);
    EXPECT_DOUBLE_EQ(r.dice, 1.0);
    EXPECT_DOUBLE_EQ(r.accuracy_pct, 100.0);

    dwn::Dataset zeros = ones;
    zeros.masks[0].fill(0.0);
    r = dwn::evaluate(model, zeros);
    EXPECT_DOUBLE_EQ(r.accuracy_pct, 0.0);
    EXPECT_DOUBLE_EQ(r.dice, 0.0);
}

TEST(Evaluate, MatchesHandRolledLoop) {
    dwn::DNIParams model = tiny_model(17);
    dwn::Dataset data = tiny_dataset(6, 16, 18);
    dwn::MetricsRecord r = dwn::evaluate(model, data, LossKind::BCE);

    double loss = 0.0;
    std::vector<Field> preds;
    for (std::size_t k = 0; k < data.size(); ++k) {
        Field pred = dwn::dn1_forward(data.images[k], model).pred;
        loss += dwn::loss_and_grad(pred, data.masks[k], LossKind::BCE).first;
        preds.push_back(dwn::threshold(pred));
    }
    EXPECT_NEAR(r.mean_loss, loss / 6.0, 1e-12);
    EXPECT_NEAR(r.accuracy_pct, dwn::accuracy(preds, data.masks), 1e-12);
    EXPECT_NEAR(r.dice, dwn::dice(preds, data.masks), 1e-12);
}

TEST(TrainConfig, Validation) {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    EXPECT_THROW(cfg.validate(), dwn::config_error);
    cfg = TrainConfig{};
    cfg.adam_beta1 = 1.0;
    EXPECT_THROW(cfg.validate(), dwn::config_error);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), dwn::config_error);
    EXPECT_NO_THROW(TrainConfig{}.validate());
}
