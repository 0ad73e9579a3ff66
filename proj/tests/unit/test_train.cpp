#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "nn_fixtures.hpp"
#include "sourcenet/train.hpp"

using namespace sourcenet;
using fixtures::random_record;

namespace {

std::vector<EventRecord> tiny_data(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<EventRecord> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(random_record(rng, "t" + std::to_string(i), 2 + i % 3, 16));
  return out;
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig c;
  c.lr = 1e-3;
  c.batch = 4;
  c.max_epochs = epochs;
  c.patience = 100;
  c.seed = 5;
  return c;
}

nn::Model<float> tiny_model(std::uint64_t seed = 1) {
  Rng rng(seed);
  return nn::Model<float>(fixtures::tiny_config(), rng);
}

std::string tmp(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(Loss, MseValues) {
  const std::vector<double> y{0.1, -0.4, 2.0, 3.5};
  EXPECT_EQ(mse_value(y, y), 0.0);
  std::vector<double> off = y;
  for (double& v : off) v += 0.3;
  EXPECT_NEAR(mse_value(off, y), 0.09, 1e-15);
  // Graph loss against a direct re-summation.
  Rng rng(1);
  nn::Tensor<double> p({3, 6}), t({3, 6});
  for (auto& v : p.data) v = standard_normal(rng);
  for (auto& v : t.data) v = standard_normal(rng);
  nn::Graph<double> g;
  const double got = g.value(nn::mse_loss(g, g.input(p), t))[0];
  double want = 0;
  for (std::size_t i = 0; i < 18; ++i) want += (p.data[i] - t.data[i]) * (p.data[i] - t.data[i]);
  EXPECT_NEAR(got, want / 18.0, 1e-12);
  EXPECT_THROW(mse_value(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST(Loss, FocalL1Values) {
  const std::vector<double> zero{0.0}, one{1.0};
  EXPECT_EQ(focal_l1_value(zero, zero), 0.0);
  // (2 sigmoid(1) - 1)^1.5 * 1
  const double sig = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(focal_l1_value(one, zero, 1.5, 1.0), std::pow(2 * sig - 1, 1.5), 1e-12);
  EXPECT_NEAR(focal_l1_value(one, zero, 1.5, 1.0), 0.3142, 1e-4);
  const std::vector<double> big{200.0};
  EXPECT_NEAR(focal_l1_value(big, zero) / 200.0, 1.0, 1e-9);
  nn::Graph<double> g;
  nn::Tensor<double> p({1, 6}, 1.0), t({1, 6}, 0.0);
  EXPECT_NEAR(g.value(nn::focal_l1_loss(g, g.input(p), t))[0], std::pow(2 * sig - 1, 1.5), 1e-12);
}

TEST(AdamW, ZeroGradNoDecayIsIdentity) {
  std::vector<nn::Param<double>> ps(1);
  ps[0].value = nn::Tensor<double>({3}, std::vector<double>{1, -2, 3});
  ps[0].grad = nn::Tensor<double>({3});
  OptimState<double> st(ps);
  adamw_step(ps, st, 1e-2, 0.0);
  EXPECT_EQ(ps[0].value.values(), (std::vector<double>{1, -2, 3}));
}

TEST(AdamW, FirstStepIsSignedLr) {
  std::vector<nn::Param<double>> ps(1);
  ps[0].value = nn::Tensor<double>({4}, std::vector<double>{1, 1, 1, 1});
  ps[0].grad = nn::Tensor<double>({4}, std::vector<double>{0.5, -3, 1e-3, -20});
  OptimState<double> st(ps);
  const double lr = 1e-2;
  adamw_step(ps, st, lr, 0.0);
  for (int k = 0; k < 4; ++k) {
    const double g = ps[0].grad.data[k];
    // Bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps).
    EXPECT_NEAR(ps[0].value.data[k] - 1.0, -lr * g / (std::abs(g) + 1e-8), 1e-12);
    EXPECT_NEAR(ps[0].value.data[k] - 1.0, -lr * (g > 0 ? 1 : -1), 1e-4 * lr);
  }
}

TEST(AdamW, DecoupledDecayShrinksOnlyDecayParams) {
  std::vector<nn::Param<double>> ps(2);
  ps[0].value = nn::Tensor<double>({2}, std::vector<double>{2, -4});
  ps[1].value = nn::Tensor<double>({2}, std::vector<double>{2, -4});
  ps[1].decay = false;
  OptimState<double> st(ps);
  adamw_step(ps, st, 0.1, 0.5);
  EXPECT_DOUBLE_EQ(ps[0].value.data[0], 2 * (1 - 0.05));
  EXPECT_DOUBLE_EQ(ps[0].value.data[1], -4 * (1 - 0.05));
  EXPECT_EQ(ps[1].value.data[0], 2);
}

TEST(ClipGrad, ScalesToMaxNorm) {
  std::vector<nn::Param<double>> ps(1);
  ps[0].value = nn::Tensor<double>({2});
  ps[0].grad = nn::Tensor<double>({2}, std::vector<double>{3, 4});
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps[0].grad.data[0], 0.6, 1e-15);
  EXPECT_NEAR(ps[0].grad.data[1], 0.8, 1e-15);
}

TEST(Sampler, UniformAndRareCell) {
  std::vector<std::array<float, 6>> same(7, {0.1f, 0.1f, 0.1f, 0.1f, 0.1f, 4.f});
  for (double w : weighted_sampler(same)) EXPECT_NEAR(w, 1.0, 1e-12);
  std::vector<std::array<float, 6>> two(9, {-0.9f, -0.9f, -0.9f, -0.9f, -0.9f, 4.f});
  two.push_back({0.9f, 0.9f, 0.9f, 0.9f, 0.9f, 4.f});
  const auto w = weighted_sampler(two);
  EXPECT_NEAR(w[9] / w[0], 5.0, 1e-12);
  double mean = 0;
  for (double x : w) mean += x / static_cast<double>(w.size());
  EXPECT_NEAR(mean, 1.0, 1e-9);
  // Draws follow the weights.
  Rng rng(3);
  const auto draws = weighted_draw(w, 20000, rng);
  double rare = 0;
  for (auto d : draws) rare += d == 9;
  EXPECT_NEAR(rare / 20000.0, w[9] / 10.0, 0.02);
}

TEST(Split, DeterministicDisjointCover) {
  const auto a = split_indices(100, {0.8, 0.1, 0.1}, 42);
  const auto b = split_indices(100, {0.8, 0.1, 0.1}, 42);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.train.size(), 80u);
  EXPECT_EQ(a.val.size(), 10u);
  EXPECT_EQ(a.test.size(), 10u);
  std::vector<int> seen(100, 0);
  for (const auto* part : {&a.train, &a.val, &a.test})
    for (auto i : *part) ++seen[i];
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_NE(split_indices(100, {0.8, 0.1, 0.1}, 43).train, a.train);
  EXPECT_THROW(split_indices(10, {0.5, 0.1, 0.1}, 1), ConfigError);
}

TEST(Kagan, LabelKaganDegenerateIsMax) {
  const auto t = mt_to_label(sdr_to_mt({10, 40, 50, 1e15})).as_array();
  EXPECT_NEAR(label_kagan(t, t), 0.0, 1e-4);
  EXPECT_EQ(label_kagan(t, {0, 0, 0, 0, 0, 4}), 120.0);
}

TEST(RunStage, PatienceStopsOnConstantLoss) {
  const auto data = tiny_data(12, 1);
  const auto split = split_indices(data.size(), {0.5, 0.5, 0.0}, 1);
  auto cfg = tiny_train(10);
  cfg.lr = 1e-30;  // parameters cannot move in float
  cfg.weight_decay = 0.0;
  cfg.patience = 1;
  const auto res = run_stage(data, split, cfg, tiny_model());
  EXPECT_EQ(res.epochs_run, 2u);
  EXPECT_TRUE(res.early_stopped);
  EXPECT_EQ(res.best_epoch, 1u);
  EXPECT_EQ(res.history[0].val_loss, res.history[1].val_loss);
}

TEST(RunStage, DeterministicHistoryAndLearning) {
  const auto data = tiny_data(24, 2);
  const auto split = split_indices(data.size(), {0.75, 0.25, 0.0}, 2);
  auto cfg = tiny_train(6);
  cfg.loss = LossKind::Mse;
  const auto a = run_stage(data, split, cfg, tiny_model());
  const auto b = run_stage(data, split, cfg, tiny_model());
  EXPECT_EQ(history_csv(a.history), history_csv(b.history));
  EXPECT_LT(a.history.back().train_loss, a.history.front().train_loss);
  cfg.seed = 6;
  EXPECT_NE(history_csv(run_stage(data, split, cfg, tiny_model()).history), history_csv(a.history));
}

TEST(RunStage, ResumeMatchesUninterrupted) {
  const auto data = tiny_data(20, 3);
  const auto split = split_indices(data.size(), {0.7, 0.3, 0.0}, 3);
  const StagePaths paths{tmp("sn_resume.best"), tmp("sn_resume.last")};
  auto cfg = tiny_train(5);
  cfg.weighted_sampling = true;
  const auto full = run_stage(data, split, cfg, tiny_model());

  auto part = cfg;
  part.max_epochs = 3;
  run_stage(data, split, part, tiny_model(), {}, paths);
  const auto resumed = run_stage(data, split, cfg, tiny_model(), {}, paths, true);
  EXPECT_EQ(history_csv(resumed.history), history_csv(full.history));
  for (std::size_t i = 0; i < full.best.params().size(); ++i)
    EXPECT_EQ(resumed.best.params()[i].value, full.best.params()[i].value);

  const auto ck = nn::load_checkpoint(paths.best);
  EXPECT_EQ(ck.meta.at("stage"), "pretrain");
  EXPECT_EQ(ck.meta.at("history").size(), 5u);
  std::filesystem::remove(paths.best);
  std::filesystem::remove(paths.last);
}

TEST(RunStage, Errors) {
  const auto data = tiny_data(6, 4);
  Split empty_val{{0, 1, 2}, {}, {}};
  EXPECT_THROW(run_stage(data, empty_val, tiny_train(1), tiny_model()), EmptySplit);
  auto bad = tiny_train(1);
  bad.lr = 0;
  EXPECT_THROW(run_stage(data, split_indices(6, {0.5, 0.5, 0}, 1), bad, tiny_model()), ConfigError);
  EXPECT_THROW(run_stage(data, split_indices(6, {0.5, 0.5, 0}, 1), tiny_train(1), tiny_model(), {}, {}, true),
               ConfigError);
}

TEST(RunStage, NonFiniteLossThrows) {
  auto data = tiny_data(6, 5);
  data[0].label[0] = std::numeric_limits<float>::quiet_NaN();
  const Split split{{0, 1, 2, 3}, {4, 5}, {}};
  auto cfg = tiny_train(1);
  cfg.batch = 8;
  EXPECT_THROW(run_stage(data, split, cfg, tiny_model()), NonFiniteLoss);
}

TEST(History, CsvSchema) {
  const std::vector<HistoryRow> rows{{1, 0.5, 0.25, 60.0, 0.125}};
  const auto csv = history_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_loss,val_kagan_mean,val_mw_mae");
  const auto back = history_from_json(history_to_json(rows));
  EXPECT_EQ(history_csv(back), csv);
}
