#pragma once

// Losses, AdamW, balanced sampling and the staged training loop.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sourcenet/errors.hpp"
#include "sourcenet/features.hpp"
#include "sourcenet/mtmath.hpp"
#include "sourcenet/nn/checkpoint.hpp"
#include "sourcenet/nn/model.hpp"
#include "sourcenet/nn/ops.hpp"
#include "sourcenet/rng.hpp"

namespace sourcenet {

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { Mse, FocalL1 };

inline double focal_weight(double abs_e, double gamma, double beta) {
  // 2 * sigmoid(x) - 1 == tanh(x / 2)
  return std::pow(std::tanh(0.5 * beta * abs_e), gamma);
}

/// Plain-value losses (mean over all elements).
inline double mse_value(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) throw ShapeError("mse: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

inline double focal_l1_value(std::span<const double> pred, std::span<const double> target,
                             double gamma = 1.5, double beta = 1.0) {
  if (pred.size() != target.size() || pred.empty()) throw ShapeError("focal_l1: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = std::abs(pred[i] - target[i]);
    acc += focal_weight(a, gamma, beta) * a;
  }
  return acc / static_cast<double>(pred.size());
}

namespace nn {

template <class T>
Var mse_loss(Graph<T>& g, Var pred, const Tensor<T>& target) {
  const auto& vp = g.value(pred);
  if (vp.shape != target.shape) throw ShapeError("mse_loss: " + shape_str(vp.shape) + " vs " + shape_str(target.shape));
  const auto n = static_cast<T>(vp.size());
  T acc = 0;
  for (std::int64_t i = 0; i < vp.size(); ++i) acc += (vp[i] - target[i]) * (vp[i] - target[i]);
  return g.op(Tensor<T>({1}, acc / n), {pred}, [&g, pred, target, n](const Tensor<T>& go) {
    const auto& vp = g.value(pred);
    auto& gp = g.grad(pred);
    for (std::int64_t i = 0; i < vp.size(); ++i) gp[i] += go[0] * T(2) * (vp[i] - target[i]) / n;
  });
}

template <class T>
Var focal_l1_loss(Graph<T>& g, Var pred, const Tensor<T>& target, T gamma = T(1.5), T beta = T(1)) {
  const auto& vp = g.value(pred);
  if (vp.shape != target.shape) throw ShapeError("focal_l1_loss: " + shape_str(vp.shape) + " vs " + shape_str(target.shape));
  const auto n = static_cast<T>(vp.size());
  T acc = 0;
  for (std::int64_t i = 0; i < vp.size(); ++i) {
    const T a = std::abs(vp[i] - target[i]);
    acc += std::pow(std::tanh(T(0.5) * beta * a), gamma) * a;
  }
  return g.op(Tensor<T>({1}, acc / n), {pred}, [&g, pred, target, n, gamma, beta](const Tensor<T>& go) {
    const auto& vp = g.value(pred);
    auto& gp = g.grad(pred);
    for (std::int64_t i = 0; i < vp.size(); ++i) {
      const T e = vp[i] - target[i];
      const T a = std::abs(e);
      if (a == T(0)) continue;
      const T w = std::tanh(T(0.5) * beta * a);
      const T dw = T(0.5) * beta * (T(1) - w * w);
      const T d = std::pow(w, gamma) + a * gamma * std::pow(w, gamma - T(1)) * dw;
      gp[i] += go[0] * (e > T(0) ? d : -d) / n;
    }
  });
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Optimizer

struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct OptimState {
  std::vector<nn::Tensor<T>> m, v;
  std::int64_t step = 0;

  explicit OptimState(const std::vector<nn::Param<T>>& params = {}) {
    for (const auto& p : params) {
      m.emplace_back(p.value.shape);
      v.emplace_back(p.value.shape);
    }
  }
};

/// One decoupled-weight-decay Adam step. Weight decay applies to parameters
/// flagged `decay` (not biases or normalization gains).
template <class T>
void adamw_step(std::vector<nn::Param<T>>& params, OptimState<T>& st, double lr, double wd,
                const AdamW& hp = {}) {
  if (st.m.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
  ++st.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.grad.data.size() != p.value.data.size())
      p.grad = nn::Tensor<T>(p.value.shape);
    if (st.m[i].shape != p.value.shape) throw ShapeError("optimizer moment shape for " + p.name);
    const double decay = p.decay ? 1.0 - lr * wd : 1.0;
    for (std::size_t k = 0; k < p.value.data.size(); ++k) {
      const double g = p.grad.data[k];
      double m = st.m[i].data[k], v = st.v[i].data[k];
      m = hp.beta1 * m + (1.0 - hp.beta1) * g;
      v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
      st.m[i].data[k] = static_cast<T>(m);
      st.v[i].data[k] = static_cast<T>(v);
      const double mh = m / bc1, vh = v / bc2;
      double w = static_cast<double>(p.value.data[k]) * decay;
      w -= lr * mh / (std::sqrt(vh) + hp.eps);
      p.value.data[k] = static_cast<T>(w);
    }
  }
}

/// Scales gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping. max_norm <= 0 disables.
template <class T>
double clip_grad_norm(std::vector<nn::Param<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      for (T& g : p.grad.data) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Sampling and splits

/// Inverse-frequency weights over a bins^5 grid of the deviatoric label
/// components on [-1, 1]; normalized to mean 1.
inline std::vector<double> weighted_sampler(std::span<const std::array<float, 6>> labels,
                                            int bins_per_dim = 3) {
  std::vector<double> w(labels.size(), 1.0);
  if (labels.empty()) return w;
  std::vector<std::int64_t> cell(labels.size());
  std::map<std::int64_t, std::int64_t> counts;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::int64_t c = 0;
    for (int k = 0; k < 5; ++k) {
      const double u = (std::clamp(static_cast<double>(labels[i][k]), -1.0, 1.0) + 1.0) / 2.0;
      const int b = std::min(bins_per_dim - 1, static_cast<int>(u * bins_per_dim));
      c = c * bins_per_dim + b;
    }
    cell[i] = c;
    ++counts[c];
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    w[i] = 1.0 / static_cast<double>(counts[cell[i]] + 1);
    sum += w[i];
  }
  const double mean = sum / static_cast<double>(w.size());
  for (double& x : w) x /= mean;
  return w;
}

/// `n` draws with replacement proportional to `weights`.
inline std::vector<std::size_t> weighted_draw(std::span<const double> weights, std::size_t n, Rng& rng) {
  std::vector<double> cdf(weights.size());
  std::partial_sum(weights.begin(), weights.end(), cdf.begin());
  const double total = cdf.empty() ? 0.0 : cdf.back();
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = uniform01(rng) * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    out.push_back(std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1));
  }
  return out;
}

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Seeded permutation cut by (train, val, test) fractions.
inline Split split_indices(std::size_t n, std::array<double, 3> fractions, std::uint64_t seed) {
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, {0x5911u});
  shuffle(idx, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<long>(n_train));
  s.val.assign(idx.begin() + static_cast<long>(n_train), idx.begin() + static_cast<long>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<long>(n_train + n_val), idx.end());
  return s;
}

// ---------------------------------------------------------------------------
// Prediction and metrics

struct Prediction {
  std::array<double, 6> y{};
  std::vector<double> z;     // pooled latent
  std::vector<double> pool;  // pooling weights over the event's stations (empty for deepsets)
};

template <class T>
std::vector<Prediction> predict_records(const nn::Model<T>& model, std::span<const EventRecord* const> recs,
                                        std::size_t batch = 64) {
  std::vector<Prediction> out;
  out.reserve(recs.size());
  for (std::size_t s0 = 0; s0 < recs.size(); s0 += batch) {
    const std::size_t n = std::min(batch, recs.size() - s0);
    auto bt = nn::make_batch<T>(recs.subspan(s0, n));
    nn::Graph<T> g;
    auto tr = model.forward(g, bt, nn::Mode::Eval);
    const auto& y = g.value(tr.y);
    const auto& z = g.value(tr.z);
    const std::int64_t D = z.dim(1);
    for (std::size_t b = 0; b < n; ++b) {
      Prediction p;
      for (int k = 0; k < 6; ++k) p.y[k] = static_cast<double>(y.data[b * 6 + k]);
      p.z.assign(z.data.begin() + static_cast<long>(b * D), z.data.begin() + static_cast<long>((b + 1) * D));
      if (tr.pool_weights) {
        const std::size_t ns = recs[s0 + b]->stations.size();
        for (std::size_t i = 0; i < ns; ++i)
          p.pool.push_back(static_cast<double>(tr.pool_weights->data[b * bt.N + i]));
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline std::array<double, 6> to_double(const std::array<float, 6>& a) {
  std::array<double, 6> d;
  for (int k = 0; k < 6; ++k) d[k] = a[k];
  return d;
}

/// Kagan angle between two labels; a degenerate predicted tensor counts as
/// the maximum (120 degrees).
inline double label_kagan(const std::array<double, 6>& truth, const std::array<double, 6>& pred) {
  try {
    return kagan_angle(label_to_mt(SourceLabel::from_array(truth)),
                       label_to_mt(SourceLabel::from_array(pred)));
  } catch (const ZeroTensor&) {
    return 120.0;
  } catch (const DegenerateTensor&) {
    return 120.0;
  }
}

// ---------------------------------------------------------------------------
// Training stage

enum class Stage { Pretrain, Finetune };

struct TrainConfig {
  Stage stage = Stage::Pretrain;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::size_t batch = 512;
  std::size_t max_epochs = 150;  // 0 = unbounded (patience only)
  std::size_t patience = 30;
  LossKind loss = LossKind::FocalL1;
  double focal_gamma = 1.5;
  double focal_beta = 1.0;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  double clip_norm = 5.0;  // <= 0 disables
  bool weighted_sampling = false;
  int sampler_bins = 3;

  static TrainConfig defaults(Stage s) {
    TrainConfig c;
    c.stage = s;
    if (s == Stage::Finetune) {
      c.lr = 2e-6;
      c.weight_decay = 1e-4;
      c.batch = 64;
      c.max_epochs = 0;
      c.patience = 50;
      c.split = {0.7, 0.15, 0.15};
      c.weighted_sampling = true;
    }
    return c;
  }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("train config: " + what);
    };
    need(lr > 0.0, "lr must be > 0");
    need(weight_decay >= 0.0, "weight_decay must be >= 0");
    need(batch >= 1, "batch >= 1");
    need(patience >= 1, "patience >= 1");
    need(split[0] >= 0 && split[1] >= 0 && split[2] >= 0 &&
             std::abs(split[0] + split[1] + split[2] - 1.0) <= 1e-9,
         "split fractions must be non-negative and sum to 1");
    need(sampler_bins >= 1, "sampler_bins >= 1");
    need(focal_gamma > 0.0 && focal_beta > 0.0, "focal parameters must be > 0");
  }
};

inline std::string stage_name(Stage s) { return s == Stage::Pretrain ? "pretrain" : "finetune"; }

struct HistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0, val_loss = 0, val_kagan_mean = 0, val_mw_mae = 0;
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,train_loss,val_loss,val_kagan_mean,val_mw_mae\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.4f,%.4f\n", r.epoch, r.train_loss, r.val_loss,
                  r.val_kagan_mean, r.val_mw_mae);
    out += buf;
  }
  return out;
}

inline nlohmann::json history_to_json(const std::vector<HistoryRow>& rows) {
  auto j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({r.epoch, r.train_loss, r.val_loss, r.val_kagan_mean, r.val_mw_mae});
  return j;
}

inline std::vector<HistoryRow> history_from_json(const nlohmann::json& j) {
  std::vector<HistoryRow> rows;
  for (const auto& e : j)
    rows.push_back({e.at(0).get<std::size_t>(), e.at(1).get<double>(), e.at(2).get<double>(),
                    e.at(3).get<double>(), e.at(4).get<double>()});
  return rows;
}

struct ValMetrics {
  double loss = 0, kagan_mean = 0, mw_mae = 0;
};

template <class T>
double batch_loss_value(const nn::Tensor<T>& pred, const nn::Tensor<T>& target, const TrainConfig& cfg) {
  std::vector<double> p(pred.data.begin(), pred.data.end()), t(target.data.begin(), target.data.end());
  return cfg.loss == LossKind::Mse ? mse_value(p, t) : focal_l1_value(p, t, cfg.focal_gamma, cfg.focal_beta);
}

template <class T>
ValMetrics validate_model(const nn::Model<T>& model, std::span<const EventRecord* const> recs,
                          const TrainConfig& cfg) {
  ValMetrics m;
  if (recs.empty()) return m;
  const auto preds = predict_records(model, recs);
  std::vector<double> p, t;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto truth = to_double(recs[i]->label);
    p.insert(p.end(), preds[i].y.begin(), preds[i].y.end());
    t.insert(t.end(), truth.begin(), truth.end());
    m.kagan_mean += label_kagan(truth, preds[i].y);
    m.mw_mae += std::abs(preds[i].y[5] - truth[5]);
  }
  const auto n = static_cast<double>(recs.size());
  m.loss = cfg.loss == LossKind::Mse ? mse_value(p, t) : focal_l1_value(p, t, cfg.focal_gamma, cfg.focal_beta);
  m.kagan_mean /= n;
  m.mw_mae /= n;
  return m;
}

/// Where run_stage writes checkpoints. The best-validation checkpoint goes to
/// `best`; `last` holds the resumable state after each epoch.
struct StagePaths {
  std::string best;
  std::string last;
};

struct StageResult {
  nn::Model<float> best;
  std::vector<HistoryRow> history;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
};

/// Optional per-epoch hook (for progress output).
using EpochHook = std::function<void(const HistoryRow&)>;

namespace detail {

inline std::vector<const EventRecord*> select(std::span<const EventRecord> data,
                                              const std::vector<std::size_t>& idx) {
  std::vector<const EventRecord*> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(&data[i]);
  return out;
}

inline std::uint64_t stage_key(Stage s) { return s == Stage::Pretrain ? 0x9e7au : 0xf17eu; }

inline nlohmann::json optim_meta(const OptimState<float>& st) { return {{"step", st.step}}; }

}  // namespace detail

/// Trains `init` on the `train` records, early-stopping on `val`. `meta` is
/// stored in every checkpoint header (normalization stats, split info).
/// With `resume`, continues from a `.last` checkpoint written by an earlier
/// call with the same arguments.
inline StageResult run_stage(std::span<const EventRecord> data, const Split& split,
                             const TrainConfig& cfg, const nn::Model<float>& init,
                             const nlohmann::json& meta = nlohmann::json::object(),
                             const StagePaths& paths = {}, bool resume = false,
                             const EpochHook& hook = {}) {
  cfg.validate();
  if (split.train.empty()) throw EmptySplit("training split is empty");
  if (split.val.empty()) throw EmptySplit("validation split is empty");
  const auto train = detail::select(data, split.train);
  const auto val = detail::select(data, split.val);

  nn::Model<float> model = init;
  OptimState<float> opt(model.params());
  StageResult res;
  res.best = model;
  std::size_t since_best = 0;
  std::size_t start_epoch = 1;

  auto make_ckpt = [&](const nn::Model<float>& m, bool with_state) {
    nn::Checkpoint ck;
    ck.config = m.config();
    ck.meta = meta;
    ck.meta["stage"] = stage_name(cfg.stage);
    ck.meta["seed"] = cfg.seed;
    ck.meta["best_val"] = res.best_val;
    ck.meta["best_epoch"] = res.best_epoch;
    ck.meta["epoch"] = res.epochs_run;
    ck.meta["history"] = history_to_json(res.history);
    ck.tensors = nn::export_params(m);
    if (with_state) {
      ck.meta["since_best"] = since_best;
      ck.meta["optim"] = detail::optim_meta(opt);
      for (std::size_t i = 0; i < m.params().size(); ++i) {
        ck.tensors.push_back({"opt.m." + m.params()[i].name, opt.m[i]});
        ck.tensors.push_back({"opt.v." + m.params()[i].name, opt.v[i]});
      }
    }
    return ck;
  };

  if (resume) {
    if (paths.last.empty() || paths.best.empty()) throw ConfigError("resume needs checkpoint paths");
    const nn::Checkpoint last = nn::load_checkpoint(paths.last);
    model = nn::model_from_checkpoint<float>(last);
    res.best = nn::model_from_checkpoint<float>(nn::load_checkpoint(paths.best));
    res.history = history_from_json(last.meta.at("history"));
    res.best_val = last.meta.at("best_val").get<double>();
    res.best_epoch = last.meta.at("best_epoch").get<std::size_t>();
    res.epochs_run = last.meta.at("epoch").get<std::size_t>();
    since_best = last.meta.at("since_best").get<std::size_t>();
    opt = OptimState<float>(model.params());
    opt.step = last.meta.at("optim").at("step").get<std::int64_t>();
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      const auto* m = last.find("opt.m." + model.params()[i].name);
      const auto* v = last.find("opt.v." + model.params()[i].name);
      if (!m || !v) throw FormatError("resume checkpoint lacks optimizer state");
      opt.m[i] = m->value;
      opt.v[i] = v->value;
    }
    start_epoch = res.epochs_run + 1;
    if (since_best >= cfg.patience) {
      res.early_stopped = true;
      return res;
    }
  }

  std::vector<double> weights;
  if (cfg.weighted_sampling) {
    std::vector<std::array<float, 6>> labels;
    for (const auto* r : train) labels.push_back(r->label);
    weights = weighted_sampler(labels, cfg.sampler_bins);
  }

  const std::uint64_t key = detail::stage_key(cfg.stage);
  for (std::size_t epoch = start_epoch; cfg.max_epochs == 0 || epoch <= cfg.max_epochs; ++epoch) {
    Rng order_rng = make_rng(cfg.seed, {key, epoch});
    std::vector<std::size_t> order;
    if (cfg.weighted_sampling) {
      order = weighted_draw(weights, train.size(), order_rng);
    } else {
      order.resize(train.size());
      std::iota(order.begin(), order.end(), 0);
      shuffle(order, order_rng);
    }
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (std::size_t b0 = 0, bi = 0; b0 < order.size(); b0 += cfg.batch, ++bi) {
      const std::size_t n = std::min(cfg.batch, order.size() - b0);
      std::vector<const EventRecord*> evs;
      for (std::size_t k = 0; k < n; ++k) evs.push_back(train[order[b0 + k]]);
      auto bt = nn::make_batch<float>(evs);
      Rng drop_rng = make_rng(cfg.seed, {key, epoch, bi, 0xd509u});
      nn::Graph<float> g;
      model.zero_grad();
      auto tr = model.forward(g, bt, nn::Mode::Train, &drop_rng);
      nn::Var loss = cfg.loss == LossKind::Mse
                         ? nn::mse_loss(g, tr.y, bt.target)
                         : nn::focal_l1_loss(g, tr.y, bt.target, static_cast<float>(cfg.focal_gamma),
                                             static_cast<float>(cfg.focal_beta));
      const double lv = g.value(loss)[0];
      if (!std::isfinite(lv))
        throw NonFiniteLoss("non-finite training loss at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(bi));
      g.backward(loss);
      clip_grad_norm(model.params(), cfg.clip_norm);
      adamw_step(model.params(), opt, cfg.lr, cfg.weight_decay);
      loss_sum += lv * static_cast<double>(n);
      loss_n += n;
    }
    const ValMetrics vm = validate_model(model, val, cfg);
    if (!std::isfinite(vm.loss))
      throw NonFiniteLoss("non-finite validation loss at epoch " + std::to_string(epoch));
    HistoryRow row{epoch, loss_sum / static_cast<double>(loss_n), vm.loss, vm.kagan_mean, vm.mw_mae};
    res.history.push_back(row);
    res.epochs_run = epoch;
    if (vm.loss < res.best_val) {
      res.best_val = vm.loss;
      res.best_epoch = epoch;
      res.best = model;
      since_best = 0;
      if (!paths.best.empty()) nn::save_checkpoint(make_ckpt(model, false), paths.best);
    } else {
      ++since_best;
    }
    if (!paths.last.empty()) nn::save_checkpoint(make_ckpt(model, true), paths.last);
    if (hook) hook(row);
    if (since_best >= cfg.patience) {
      res.early_stopped = true;
      break;
    }
  }
  // Final best checkpoint carries the complete history.
  if (!paths.best.empty()) nn::save_checkpoint(make_ckpt(res.best, false), paths.best);
  return res;
}

}  // namespace sourcenet
