#include <gtest/gtest.h>

#include <functional>
#include <numeric>

#include "nn_fixtures.hpp"
#include "sourcenet/nn/checkpoint.hpp"
#include "sourcenet/train.hpp"

using namespace sourcenet;
using namespace sourcenet::nn;
using fixtures::random_record;

namespace {

using OpFn = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

Tensor<double> randn(Shape s, Rng& rng) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = standard_normal(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

// Worst relative error of d(sum(out * R))/d(input) over all inputs.
double op_gradcheck(std::vector<Tensor<double>> inputs, const OpFn& f, std::uint64_t seed = 1) {
  Rng rng(seed);
  Tensor<double> R;
  std::vector<Tensor<double>> grads;
  {
    Graph<double> g;
    std::vector<Var> vs;
    for (const auto& t : inputs) vs.push_back(g.input(t, true));
    Var out = f(g, vs);
    R = randn(g.value(out).shape, rng);
    Graph<double>* gp = &g;
    Var loss = g.op(Tensor<double>({1}, dot(g.value(out), R)), {out}, [gp, out, R](const Tensor<double>& go) {
      auto& gr = gp->grad(out);
      for (std::size_t i = 0; i < gr.data.size(); ++i) gr.data[i] += go[0] * R.data[i];
    });
    g.backward(loss);
    for (Var v : vs) grads.push_back(g.has_grad(v) ? g.grad(v) : Tensor<double>(g.value(v).shape));
  }
  auto eval = [&]() {
    Graph<double> g;
    std::vector<Var> vs;
    for (const auto& t : inputs) vs.push_back(g.input(t, true));
    return dot(g.value(f(g, vs)), R);
  };
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t k = 0; k < inputs[i].data.size(); ++k) {
      const double o = inputs[i].data[k];
      inputs[i].data[k] = o + h;
      const double up = eval();
      inputs[i].data[k] = o - h;
      const double dn = eval();
      inputs[i].data[k] = o;
      worst = std::max(worst, fixtures::rel_error(grads[i].data[k], (up - dn) / (2 * h)));
    }
  return worst;
}

const std::vector<std::uint8_t> kMask{1, 1, 0, 1, 1, 1};  // B=2, N=3, one padded slot

}  // namespace

TEST(OpGrad, Dense) {
  Rng rng(1);
  EXPECT_LT(op_gradcheck({randn({4, 5}, rng), randn({3, 5}, rng), randn({3}, rng)},
                         [](auto& g, auto& v) { return linear(g, v[0], v[1], v[2]); }),
            1e-6);
  EXPECT_LT(op_gradcheck({randn({4, 5}, rng)}, [](auto& g, auto& v) { return tanh(g, v[0]); }), 1e-6);
  EXPECT_LT(op_gradcheck({randn({4, 5}, rng)}, [](auto& g, auto& v) { return gelu(g, v[0]); }), 1e-6);
  EXPECT_LT(op_gradcheck({randn({4, 5}, rng)}, [](auto& g, auto& v) { return relu(g, v[0]); }), 1e-6);
  EXPECT_LT(op_gradcheck({randn({4, 6}, rng), randn({6}, rng), randn({6}, rng)},
                         [](auto& g, auto& v) { return layernorm(g, v[0], v[1], v[2]); }),
            1e-5);
}

TEST(OpGrad, ShapeOps) {
  Rng rng(2);
  EXPECT_LT(op_gradcheck({randn({3, 2}, rng), randn({3, 4}, rng)},
                         [](auto& g, auto& v) { return concat_cols(g, std::vector<Var>{v[0], v[1]}); }),
            1e-6);
  EXPECT_LT(op_gradcheck({randn({4, 3}, rng)},
                         [](auto& g, auto& v) { return gather_rows(g, v[0], {2, -1, 0, 2, 3, 1}); }),
            1e-6);
  EXPECT_LT(op_gradcheck({randn({6, 3}, rng), randn({6, 3}, rng)},
                         [](auto& g, auto& v) { return masked_residual(g, v[0], v[1], kMask); }),
            1e-6);
  EXPECT_LT(op_gradcheck({randn({3, 4, 7}, rng)}, [](auto& g, auto& v) { return mean_time(g, v[0]); }), 1e-6);
  EXPECT_LT(op_gradcheck({randn({3, 6}, rng)},
                         [](auto& g, auto& v) { return source_head(g, v[0], 4.0, 0.5); }),
            1e-6);
}

TEST(OpGrad, Conv1d) {
  Rng rng(3);
  for (int stride : {1, 2})
    for (int pad : {0, 1, 2})
      EXPECT_LT(op_gradcheck({randn({3, 2, 11}, rng), randn({4, 3, 3}, rng)},
                             [=](auto& g, auto& v) { return conv1d(g, v[0], v[1], stride, pad); }),
                1e-6)
          << "stride " << stride << " pad " << pad;
}

TEST(OpGrad, SetOps) {
  Rng rng(4);
  EXPECT_LT(op_gradcheck({randn({6, 4}, rng), randn({6, 4}, rng), randn({6, 4}, rng)},
                         [](auto& g, auto& v) { return attention(g, v[0], v[1], v[2], kMask, 2, 3, 2); }),
            1e-6);
  EXPECT_LT(op_gradcheck({randn({6, 4}, rng), randn({6, 1}, rng)},
                         [](auto& g, auto& v) { return softmax_pool(g, v[0], v[1], kMask, 2, 3); }),
            1e-6);
  EXPECT_LT(op_gradcheck({randn({6, 4}, rng)},
                         [](auto& g, auto& v) { return masked_mean(g, v[0], kMask, 2, 3); }),
            1e-6);
}

TEST(OpGrad, Losses) {
  Rng rng(5);
  const auto target = randn({2, 6}, rng);
  EXPECT_LT(op_gradcheck({randn({2, 6}, rng)}, [&](auto& g, auto& v) { return mse_loss(g, v[0], target); }), 1e-6);
  EXPECT_LT(op_gradcheck({randn({2, 6}, rng)},
                         [&](auto& g, auto& v) { return focal_l1_loss(g, v[0], target, 1.5, 1.0); }),
            1e-5);
}

TEST(Ops, AttentionMasksAndSingleStation) {
  Rng rng(6);
  Graph<double> g;
  Var q = g.input(randn({6, 4}, rng)), k = g.input(randn({6, 4}, rng)), v = g.input(randn({6, 4}, rng));
  std::shared_ptr<Tensor<double>> P;
  attention(g, q, k, v, {1, 0, 1, 1, 0, 0}, 2, 3, 2, &P);
  for (int h = 0; h < 2; ++h) {
    // Event 0: key 1 masked; event 1: only station 0 valid.
    for (int i : {0, 2}) {
      EXPECT_EQ((*P)[((0 * 2 + h) * 3 + i) * 3 + 1], 0.0);
      double s = 0;
      for (int j = 0; j < 3; ++j) s += (*P)[((0 * 2 + h) * 3 + i) * 3 + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    EXPECT_NEAR((*P)[((1 * 2 + h) * 3 + 0) * 3 + 0], 1.0, 1e-15);
  }
}

TEST(Ops, PoolingWeights) {
  Rng rng(7);
  Graph<double> g;
  Var H = g.input(randn({6, 3}, rng)), s = g.input(randn({6, 1}, rng));
  std::shared_ptr<Tensor<double>> A;
  softmax_pool(g, H, s, kMask, 2, 3, &A);
  EXPECT_NEAR((*A)[0] + (*A)[1], 1.0, 1e-12);
  EXPECT_EQ((*A)[2], 0.0);
  EXPECT_NEAR((*A)[3] + (*A)[4] + (*A)[5], 1.0, 1e-12);
  // Equal scores: uniform weights over the valid stations.
  Graph<double> g2;
  Var s2 = g2.input(Tensor<double>({6, 1}, 0.3));
  softmax_pool(g2, g2.input(randn({6, 3}, rng)), s2, kMask, 2, 3, &A);
  EXPECT_NEAR((*A)[0], 0.5, 1e-15);
  EXPECT_NEAR((*A)[4], 1.0 / 3.0, 1e-15);
}

TEST(Model, ParameterCountDefaultConfig) {
  Rng rng(1);
  const Model<float> m(ModelConfig{}, rng);
  const double n = static_cast<double>(m.parameter_count());
  EXPECT_GE(n, 1.5e6 * 0.8);
  EXPECT_LE(n, 1.5e6 * 1.2);
}

TEST(Model, SeededDeterminismAndFinite) {
  Rng a(3), b(3), c(4);
  const Model<float> m1(fixtures::small_config(), a), m2(fixtures::small_config(), b), m3(fixtures::small_config(), c);
  for (std::size_t i = 0; i < m1.params().size(); ++i) EXPECT_EQ(m1.params()[i].value, m2.params()[i].value);
  EXPECT_NE(m1.params()[0].value, m3.params()[0].value);
  Rng rng(9);
  std::vector<EventRecord> recs{random_record(rng, "a", 5), random_record(rng, "b", 2)};
  const auto y = m1.predict(make_batch<float>(recs));
  for (float v : y.data) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(y, m1.predict(make_batch<float>(recs)));
}

TEST(Model, IdenticalStationsGetIdenticalEmbeddingsAndUniformPool) {
  Rng rng(10);
  const Model<double> m(fixtures::small_config(), rng);
  auto r = random_record(rng, "same", 4);
  for (auto& s : r.stations) s = r.stations[0];
  Graph<double> g;
  const auto bt = make_batch<double>(std::vector<EventRecord>{r});
  auto tr = m.forward(g, bt, Mode::Eval);
  const auto& h = g.value(tr.h_station);
  const auto D = h.dim(1);
  for (int s = 1; s < 4; ++s)
    for (std::int64_t d = 0; d < D; ++d) EXPECT_EQ(h.data[s * D + d], h.data[d]);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR((*tr.pool_weights)[i], 0.25, 1e-12);
}

TEST(Model, PermutationInvariance) {
  Rng rng(11);
  const Model<float> m(fixtures::small_config(), rng);
  for (int e = 0; e < 5; ++e) {
    const auto r = random_record(rng, "p", 7);
    Graph<float> g0;
    const auto bt0 = make_batch<float>(std::vector<EventRecord>{r});
    auto t0 = m.forward(g0, bt0, Mode::Eval);
    const auto y0 = g0.value(t0.y);
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<std::size_t> perm(7);
      std::iota(perm.begin(), perm.end(), 0);
      shuffle(perm, rng);
      auto q = r;
      for (std::size_t i = 0; i < 7; ++i) q.stations[i] = r.stations[perm[i]];
      Graph<float> g1;
      const auto bt1 = make_batch<float>(std::vector<EventRecord>{q});
      auto t1 = m.forward(g1, bt1, Mode::Eval);
      const auto& y1 = g1.value(t1.y);
      for (int k = 0; k < 6; ++k) EXPECT_NEAR(y1[k], y0[k], 1e-5 * std::max(1.0f, std::abs(y0[k])));
      for (std::size_t i = 0; i < 7; ++i)
        EXPECT_NEAR((*t1.pool_weights)[i], (*t0.pool_weights)[perm[i]], 1e-6);
    }
  }
}

TEST(Model, PaddedBatchMatchesSingleEvents) {
  Rng rng(12);
  for (auto variant : {Variant::Full, Variant::DeepSets, Variant::NoScalar}) {
    auto cfg = fixtures::small_config();
    cfg.variant = variant;
    if (variant == Variant::NoScalar) cfg.tower_scalar = 4;
    const Model<float> m(cfg, rng);
    std::vector<EventRecord> recs;
    for (int i = 0; i < 6; ++i) recs.push_back(random_record(rng, "e", 1 + static_cast<std::size_t>(i) * 2));
    const auto yb = m.predict(make_batch<float>(recs));
    for (std::size_t b = 0; b < recs.size(); ++b) {
      const auto ys = m.predict(make_batch<float>(std::vector<EventRecord>{recs[b]}));
      for (int k = 0; k < 6; ++k)
        EXPECT_NEAR(yb[b * 6 + k], ys[k], 1e-5 * std::max(1.0f, std::abs(ys[k]))) << variant_name(variant);
    }
  }
}

TEST(Model, MaskingEqualsDeletion) {
  Rng rng(13);
  const Model<double> m(fixtures::small_config(), rng);
  const auto r = random_record(rng, "m", 5);
  auto deleted = r;
  deleted.stations.erase(deleted.stations.begin() + 2);
  auto bt = make_batch<double>(std::vector<EventRecord>{r});
  bt.mask_station(0, 2);
  Graph<double> g;
  auto tr = m.forward(g, bt, Mode::Eval, nullptr, true);
  const auto yd = m.predict(make_batch<double>(std::vector<EventRecord>{deleted}));
  for (int k = 0; k < 6; ++k) EXPECT_NEAR(g.value(tr.y)[k], yd[k], 1e-10);
  EXPECT_EQ((*tr.pool_weights)[2], 0.0);

  // Gradient with respect to the masked station's inputs is exactly zero.
  Graph<double>* gp = &g;
  Var y = tr.y;
  Var loss = g.op(Tensor<double>({1}, 0.0), {y}, [gp, y](const Tensor<double>& go) {
    for (auto& v : gp->grad(y).data) v += go[0];
  });
  g.backward(loss);
  const auto S = bt.S, L = bt.window;
  const auto& gw = g.grad(tr.wave_inputs[0]);
  const auto& gs = g.grad(tr.scalar_input);
  double other = 0.0;
  for (std::int64_t c = 0; c < static_cast<std::int64_t>(kChannels); ++c)
    for (std::int64_t t = 0; t < L; ++t) {
      EXPECT_EQ(gw.data[(c * 2 * S + 2) * L + t], 0.0);
      EXPECT_EQ(gw.data[(c * 2 * S + S + 2) * L + t], 0.0);
      other += std::abs(gw.data[(c * 2 * S + 1) * L + t]);
    }
  for (std::size_t k = 0; k < kScalarDim; ++k) EXPECT_EQ(gs.data[2 * kScalarDim + k], 0.0);
  EXPECT_GT(other, 0.0);
}

TEST(Model, GradCheckTinyConfig) {
  Rng rng(14);
  Model<double> m(fixtures::tiny_config(), rng);
  std::vector<EventRecord> recs{random_record(rng, "a", 3, 16), random_record(rng, "b", 2, 16)};
  const auto bt = make_batch<double>(recs);
  const auto R = fixtures::projection<double>(2, rng);
  const auto rep = fixtures::gradcheck(m, bt, R);
  EXPECT_EQ(rep.checked, rep.total);
  EXPECT_EQ(rep.failures, 0u) << "worst " << rep.worst_rel << " at " << rep.worst_name;
}

TEST(Model, ZeroLossGivesZeroGradients) {
  Rng rng(15);
  Model<double> m(fixtures::tiny_config(), rng);
  auto r = random_record(rng, "z", 3, 16);
  auto bt = make_batch<double>(std::vector<EventRecord>{r});
  bt.target = m.predict(bt);
  m.zero_grad();
  Graph<double> g;
  auto tr = m.forward(g, bt, Mode::Eval);
  g.backward(mse_loss(g, tr.y, bt.target));
  for (const auto& p : m.params())
    for (double v : p.grad.data) ASSERT_EQ(v, 0.0) << p.name;
}

TEST(Model, ConfigJsonStrict) {
  ModelConfig c = fixtures::small_config();
  c.variant = Variant::DeepSets;
  const nlohmann::json j = c;
  const auto back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  auto bad = j;
  bad["d_modle"] = 3;
  EXPECT_THROW(bad.get<ModelConfig>(), ConfigError);
  auto wrong_type = j;
  wrong_type["d_model"] = "big";
  EXPECT_THROW(wrong_type.get<ModelConfig>(), ConfigError);
  EXPECT_THROW(parse_variant("transformer"), ConfigError);
  ModelConfig odd;
  odd.n_heads = 3;
  EXPECT_THROW(odd.validate(), ConfigError);
}

TEST(Checkpoint, RoundTripAndErrors) {
  Rng rng(16);
  const Model<float> m(fixtures::small_config(), rng);
  Checkpoint ck;
  ck.config = m.config();
  ck.meta = {{"stage", "pretrain"}, {"x", 1.5}};
  ck.tensors = export_params(m);
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(back.tensors, ck.tensors);
  const auto m2 = model_from_checkpoint<float>(back);
  for (std::size_t i = 0; i < m.params().size(); ++i) EXPECT_EQ(m2.params()[i].value, m.params()[i].value);

  auto cut = bytes;
  cut.resize(cut.size() / 2);
  EXPECT_THROW(decode_checkpoint(cut), TruncatedFile);
  auto magic = bytes;
  magic[1] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), FormatError);
  auto missing = back;
  missing.tensors.pop_back();
  EXPECT_THROW(model_from_checkpoint<float>(missing), ConfigMismatch);
}
