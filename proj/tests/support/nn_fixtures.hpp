#pragma once

// Shared helpers for network tests: a tiny configuration, random records and
// a central-difference gradient check over every parameter entry.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sourcenet/features.hpp"
#include "sourcenet/nn/model.hpp"

namespace fixtures {

using namespace sourcenet;

inline nn::ModelConfig tiny_config(std::int64_t window = 16) {
  nn::ModelConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 12;
  c.dropout = 0.0;
  c.resnet_blocks = 1;
  c.resnet_channels = {4, 5};
  c.conv_kernel = 3;
  c.stem_stride = 2;
  c.tower_p = 3;
  c.tower_s = 3;
  c.tower_scalar = 2;
  c.scalar_hidden = 4;
  c.pool_hidden = 4;
  c.head_hidden = 5;
  c.window = static_cast<int>(window);
  return c;
}

/// Small but complete configuration for invariance tests at the real window.
inline nn::ModelConfig small_config() {
  nn::ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.resnet_blocks = 2;
  c.resnet_channels = {6, 8, 8};
  c.conv_kernel = 5;
  c.stem_stride = 2;
  c.tower_p = 6;
  c.tower_s = 6;
  c.tower_scalar = 4;
  c.scalar_hidden = 8;
  c.pool_hidden = 8;
  c.head_hidden = 8;
  return c;
}

inline EventRecord random_record(Rng& rng, const std::string& id, std::size_t n_st,
                                 std::size_t T = kWindowLen) {
  EventRecord r;
  r.id = id;
  r.T = static_cast<std::uint16_t>(T);
  const auto mt = sample_uniform_dc(rng, 3, 5);
  const auto y = mt_to_label(mt).as_array();
  for (int k = 0; k < 6; ++k) r.label[k] = static_cast<float>(y[k]);
  for (std::size_t s = 0; s < n_st; ++s) {
    StationFeatures f;
    f.azimuth = static_cast<float>(uniform(rng, 0, 360));
    f.dist_km = static_cast<float>(uniform(rng, 10, 280));
    for (auto& v : f.scalars) v = static_cast<float>(standard_normal(rng));
    f.p_win.resize(kChannels * T);
    f.s_win.resize(kChannels * T);
    for (auto& v : f.p_win) v = static_cast<float>(standard_normal(rng));
    for (auto& v : f.s_win) v = static_cast<float>(standard_normal(rng));
    r.stations.push_back(std::move(f));
  }
  r.normalized = true;
  return r;
}

/// Scalar objective sum(y * R) for a fixed random R, so every output
/// contributes with a distinct weight.
template <class T>
nn::Tensor<T> projection(std::int64_t B, Rng& rng) {
  nn::Tensor<T> r({B, 6});
  for (auto& v : r.data) v = static_cast<T>(standard_normal(rng));
  return r;
}

template <class T>
T objective(const nn::Tensor<T>& y, const nn::Tensor<T>& r) {
  T acc = 0;
  for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * r.data[i];
  return acc;
}

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t total = 0;
  std::size_t failures = 0;
  double worst_rel = 0.0;
  std::string worst_name;
};

/// Relative error with a small absolute floor in the denominator, so entries
/// whose true gradient is zero are judged on absolute error at that scale.
inline double rel_error(double a, double n, double floor = 1e-7) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Analytic parameter gradients against central differences for every
/// entry of every parameter. The differences are taken on an extended
/// precision copy of the model: in double, rounding in the objective alone is
/// about eps * |f| / h, which swamps entries whose true gradient is zero.
inline GradCheckReport gradcheck(nn::Model<double>& model, const nn::Batch<double>& bt,
                                 const nn::Tensor<double>& r, double tol = 1e-4,
                                 double h = 1e-6) {
  using Ext = long double;
  model.zero_grad();
  {
    nn::Graph<double> g;
    auto tr = model.forward(g, bt, nn::Mode::Eval);
    nn::Graph<double>* gp = &g;
    const nn::Tensor<double> rr = r;
    nn::Var y = tr.y;
    nn::Var loss = g.op(nn::Tensor<double>({1}, objective(g.value(y), rr)), {y},
                        [gp, y, rr](const nn::Tensor<double>& go) {
                          auto& gy = gp->grad(y);
                          for (std::size_t i = 0; i < gy.data.size(); ++i) gy.data[i] += go[0] * rr.data[i];
                        });
    g.backward(loss);
  }
  auto ext = nn::cast_model<Ext>(model);
  const auto ebt = nn::cast_batch<Ext>(bt);
  nn::Tensor<Ext> er(r.shape);
  for (std::size_t i = 0; i < r.data.size(); ++i) er.data[i] = r.data[i];

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < model.params().size(); ++pi) {
    const auto& p = model.params()[pi];
    auto& q = ext.params()[pi];
    rep.total += p.value.data.size();
    for (std::size_t k = 0; k < p.value.data.size(); ++k) {
      const Ext orig = q.value.data[k];
      q.value.data[k] = orig + h;
      const Ext up = objective(ext.predict(ebt), er);
      q.value.data[k] = orig - h;
      const Ext down = objective(ext.predict(ebt), er);
      q.value.data[k] = orig;
      const double num = static_cast<double>((up - down) / (2 * static_cast<Ext>(h)));
      const double ana = p.grad.data.empty() ? 0.0 : p.grad.data[k];
      const double e = rel_error(ana, num);
      ++rep.checked;
      if (e > tol) ++rep.failures;
      if (e > rep.worst_rel) {
        rep.worst_rel = e;
        rep.worst_name = p.name + "[" + std::to_string(k) + "]";
      }
    }
  }
  return rep;
}

}  // namespace fixtures
