#pragma once

// Metrics, attention diagnostics, Grad-CAM and latent export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "sourcenet/dsp.hpp"
#include "sourcenet/errors.hpp"
#include "sourcenet/features.hpp"
#include "sourcenet/nn/model.hpp"
#include "sourcenet/train.hpp"

namespace sourcenet {

inline constexpr int kKaganBins = 60;  // 2-degree bins over [0, 120]

struct EventRow {
  std::string id;
  std::size_t n_stations = 0;
  std::array<double, 6> truth{}, pred{};
  double kagan = 0.0;
};

struct MetricsReport {
  std::vector<EventRow> rows;
  double mw_mae = 0.0;
  std::array<double, 5> dev_mae{};
  double dev_mae_mean = 0.0;
  double kagan_mean = 0.0;
  double kagan_median = 0.0;
  std::array<std::size_t, kKaganBins> kagan_hist{};
};

/// Aggregates per-event rows; Kagan angles are clamped to [0, 120].
inline MetricsReport summarize(std::vector<EventRow> rows) {
  MetricsReport m;
  std::vector<double> kag;
  for (auto& r : rows) {
    r.kagan = std::clamp(r.kagan, 0.0, 120.0);
    m.mw_mae += std::abs(r.pred[5] - r.truth[5]);
    for (int k = 0; k < 5; ++k) m.dev_mae[k] += std::abs(r.pred[k] - r.truth[k]);
    m.kagan_mean += r.kagan;
    ++m.kagan_hist[std::min(kKaganBins - 1, static_cast<int>(r.kagan / 2.0))];
    kag.push_back(r.kagan);
  }
  m.rows = std::move(rows);
  if (kag.empty()) return m;
  const auto n = static_cast<double>(kag.size());
  m.mw_mae /= n;
  m.kagan_mean /= n;
  for (double& d : m.dev_mae) {
    d /= n;
    m.dev_mae_mean += d / 5.0;
  }
  std::sort(kag.begin(), kag.end());
  const std::size_t h = kag.size() / 2;
  m.kagan_median = kag.size() % 2 ? kag[h] : 0.5 * (kag[h - 1] + kag[h]);
  return m;
}

inline MetricsReport metrics_from_predictions(std::span<const EventRecord> recs,
                                              std::span<const std::array<double, 6>> preds) {
  if (recs.size() != preds.size()) throw ShapeError("one prediction per record expected");
  std::vector<EventRow> rows;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EventRow r;
    r.id = recs[i].id;
    r.n_stations = recs[i].stations.size();
    r.truth = to_double(recs[i].label);
    r.pred = preds[i];
    r.kagan = label_kagan(r.truth, r.pred);
    rows.push_back(std::move(r));
  }
  return summarize(std::move(rows));
}

/// Eval-mode metrics of a model on a dataset.
template <class T>
MetricsReport evaluate(const nn::Model<T>& model, std::span<const EventRecord> recs) {
  for (const auto& r : recs)
    if (r.T != model.config().window)
      throw ConfigMismatch("record '" + r.id + "' has window " + std::to_string(r.T) +
                           ", model expects " + std::to_string(model.config().window));
  std::vector<const EventRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  const auto preds = predict_records(model, ptrs);
  std::vector<std::array<double, 6>> y;
  for (const auto& p : preds) y.push_back(p.y);
  return metrics_from_predictions(recs, y);
}

inline std::string metrics_csv(const MetricsReport& m) {
  std::string out = "event_id,n_stations,true_mw,pred_mw";
  for (int k = 1; k <= 5; ++k) out += ",true_m" + std::to_string(k);
  for (int k = 1; k <= 5; ++k) out += ",pred_m" + std::to_string(k);
  out += ",kagan_deg\n";
  char buf[64];
  for (const auto& r : m.rows) {
    out += r.id + "," + std::to_string(r.n_stations);
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f", r.truth[5], r.pred[5]);
    out += buf;
    for (int k = 0; k < 5; ++k) {
      std::snprintf(buf, sizeof buf, ",%.6f", r.truth[k]);
      out += buf;
    }
    for (int k = 0; k < 5; ++k) {
      std::snprintf(buf, sizeof buf, ",%.6f", r.pred[k]);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%.4f\n", r.kagan);
    out += buf;
  }
  return out;
}

/// Inverse of metrics_csv.
inline MetricsReport parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<EventRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line.rfind("event_id,n_stations,true_mw,pred_mw", 0) != 0) throw ParseError(1, "not a metrics CSV");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string tok; std::getline(ls, tok, ',');) f.push_back(tok);
    if (f.size() != 15) throw ParseError(lineno, "expected 15 fields, got " + std::to_string(f.size()));
    EventRow r;
    try {
      r.id = f[0];
      r.n_stations = std::stoul(f[1]);
      r.truth[5] = std::stod(f[2]);
      r.pred[5] = std::stod(f[3]);
      for (int k = 0; k < 5; ++k) {
        r.truth[k] = std::stod(f[4 + k]);
        r.pred[k] = std::stod(f[9 + k]);
      }
      r.kagan = std::stod(f[14]);
    } catch (const std::exception&) {
      throw ParseError(lineno, "bad number");
    }
    rows.push_back(std::move(r));
  }
  return summarize(std::move(rows));
}

inline std::string metrics_summary(const MetricsReport& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "events=%zu kagan_mean=%.2f kagan_median=%.2f mw_mae=%.4f dev_mae=[%.4f %.4f %.4f %.4f %.4f] dev_mae_mean=%.4f",
                m.rows.size(), m.kagan_mean, m.kagan_median, m.mw_mae, m.dev_mae[0], m.dev_mae[1],
                m.dev_mae[2], m.dev_mae[3], m.dev_mae[4], m.dev_mae_mean);
  return buf;
}

// ---------------------------------------------------------------------------
// Azimuthal attention

inline constexpr int kAzimuthBins = 12;

struct AzimuthProfile {
  std::array<double, kAzimuthBins> weight{};  // mean rescaled weight (NaN when empty)
  std::array<std::size_t, kAzimuthBins> count{};
  bool empty(int bin) const { return count[bin] == 0; }
};

enum class AttentionSource {
  Pooling,        // pooling weight a_i * N
  SelfAttention,  // attention received in the set encoder, averaged over layers and heads
};

namespace detail {

inline int azimuth_bin(double az) {
  double a = std::fmod(az, 360.0);
  if (a < 0) a += 360.0;
  return std::min(kAzimuthBins - 1, static_cast<int>(a / 30.0));
}

}  // namespace detail

template <class T>
AzimuthProfile azimuth_attention(const nn::Model<T>& model, std::span<const EventRecord> recs,
                                 AttentionSource src = AttentionSource::Pooling, std::size_t batch = 64) {
  AzimuthProfile prof;
  std::array<double, kAzimuthBins> sum{};
  for (std::size_t s0 = 0; s0 < recs.size(); s0 += batch) {
    const std::size_t n = std::min(batch, recs.size() - s0);
    std::vector<const EventRecord*> ptrs;
    for (std::size_t k = 0; k < n; ++k) ptrs.push_back(&recs[s0 + k]);
    auto bt = nn::make_batch<T>(ptrs);
    nn::Graph<T> g;
    auto tr = model.forward(g, bt, nn::Mode::Eval);
    for (std::size_t b = 0; b < n; ++b) {
      const EventRecord& r = *ptrs[b];
      const auto N = static_cast<double>(r.stations.size());
      for (std::size_t i = 0; i < r.stations.size(); ++i) {
        double w = 0.0;
        if (src == AttentionSource::Pooling) {
          if (!tr.pool_weights) throw ConfigMismatch("model variant has no attention pooling");
          w = static_cast<double>(tr.pool_weights->data[b * bt.N + i]) * N;
        } else {
          if (tr.attention_maps.empty()) throw ConfigMismatch("model variant has no self-attention");
          double acc = 0.0;
          std::size_t terms = 0;
          for (const auto& P : tr.attention_maps) {
            const std::int64_t H = P->dim(1);
            for (std::int64_t h = 0; h < H; ++h) {
              for (std::size_t q = 0; q < r.stations.size(); ++q)
                acc += static_cast<double>(P->data[((b * H + h) * bt.N + q) * bt.N + i]);
              ++terms;
            }
          }
          w = acc / static_cast<double>(terms);
        }
        const int bin = detail::azimuth_bin(r.stations[i].azimuth);
        sum[bin] += w;
        ++prof.count[bin];
      }
    }
  }
  for (int k = 0; k < kAzimuthBins; ++k)
    prof.weight[k] = prof.count[k] ? sum[k] / static_cast<double>(prof.count[k])
                                   : std::numeric_limits<double>::quiet_NaN();
  return prof;
}

inline std::string azimuth_csv(const AzimuthProfile& p) {
  std::string out = "bin_start_deg,bin_end_deg,count,mean_weight\n";
  char buf[96];
  for (int k = 0; k < kAzimuthBins; ++k) {
    if (p.empty(k))
      std::snprintf(buf, sizeof buf, "%d,%d,0,empty\n", 30 * k, 30 * (k + 1));
    else
      std::snprintf(buf, sizeof buf, "%d,%d,%zu,%.6f\n", 30 * k, 30 * (k + 1), p.count[k], p.weight[k]);
    out += buf;
  }
  return out;
}

/// Mean weight of stations in the E-W sectors (60-120 and 240-300 degrees)
/// over that of the N-S sectors (330-30 and 150-210 degrees).
inline double east_west_ratio(const AzimuthProfile& p) {
  auto mean_of = [&](std::initializer_list<int> bins) {
    double s = 0.0;
    std::size_t c = 0;
    for (int b : bins) {
      if (p.empty(b)) continue;
      s += p.weight[b] * static_cast<double>(p.count[b]);
      c += p.count[b];
    }
    return c ? s / static_cast<double>(c) : std::numeric_limits<double>::quiet_NaN();
  };
  return mean_of({2, 3, 8, 9}) / mean_of({11, 0, 5, 6});
}

// ---------------------------------------------------------------------------
// Grad-CAM

enum class CamTarget { Dev1 = 0, Dev2, Dev3, Dev4, Dev5, Mw };

struct GradCam {
  std::vector<double> p;  // length T, in [0, 1]
  std::vector<double> s;
};

namespace detail {

template <class T>
nn::Var select_output(nn::Graph<T>& g, nn::Var y, std::int64_t index) {
  const T v = g.value(y).data.at(static_cast<std::size_t>(index));
  return g.op(nn::Tensor<T>({1}, v), {y}, [&g, y, index](const nn::Tensor<T>& go) {
    g.grad(y).data[static_cast<std::size_t>(index)] += go[0];
  });
}

/// Rectified, gradient-weighted channel sum for sample `s` of a [C, S, L]
/// activation, upsampled to T and scaled to unit maximum.
template <class T>
std::vector<double> cam_for(const nn::Tensor<T>& act, const nn::Tensor<T>& grad, std::int64_t s,
                            std::size_t T_out) {
  const std::int64_t C = act.dim(0), S = act.dim(1), L = act.dim(2);
  std::vector<double> cam(static_cast<std::size_t>(L), 0.0);
  for (std::int64_t c = 0; c < C; ++c) {
    const std::int64_t off = (c * S + s) * L;
    double alpha = 0.0;
    if (!grad.data.empty())
      for (std::int64_t t = 0; t < L; ++t) alpha += static_cast<double>(grad.data[off + t]);
    alpha /= static_cast<double>(L);
    for (std::int64_t t = 0; t < L; ++t) cam[t] += alpha * static_cast<double>(act.data[off + t]);
  }
  for (double& v : cam) v = std::max(0.0, v);
  auto up = dsp::resample_linear(cam, T_out);
  const double mx = *std::max_element(up.begin(), up.end());
  if (mx > 0.0)
    for (double& v : up) v /= mx;
  return up;
}

}  // namespace detail

/// Grad-CAM of one station's P and S windows on the final residual
/// activations, for one output component.
template <class T>
GradCam gradcam(const nn::Model<T>& model, const EventRecord& rec, std::size_t station,
                CamTarget target) {
  if (station >= rec.stations.size())
    throw IndexError("station index " + std::to_string(station) + " out of range (event has " +
                     std::to_string(rec.stations.size()) + ")");
  std::vector<const EventRecord*> one{&rec};
  auto bt = nn::make_batch<T>(one);
  nn::Graph<T> g;
  auto tr = model.forward(g, bt, nn::Mode::Eval);
  nn::Var out = detail::select_output(g, tr.y, static_cast<std::int64_t>(target));
  g.backward(out);
  const auto s = static_cast<std::int64_t>(station);
  GradCam cam;
  auto grad_of = [&](nn::Var v) { return g.has_grad(v) ? g.grad(v) : nn::Tensor<T>(); };
  if (tr.last_conv.size() == 1) {
    const auto& a = g.value(tr.last_conv[0]);
    const auto gr = grad_of(tr.last_conv[0]);
    cam.p = detail::cam_for(a, gr, s, rec.T);
    cam.s = detail::cam_for(a, gr, bt.S + s, rec.T);
  } else {
    cam.p = detail::cam_for(g.value(tr.last_conv[0]), grad_of(tr.last_conv[0]), s, rec.T);
    cam.s = detail::cam_for(g.value(tr.last_conv[1]), grad_of(tr.last_conv[1]), s, rec.T);
  }
  // Parameter gradients from this pass are discarded.
  const_cast<nn::Model<T>&>(model).zero_grad();
  return cam;
}

// ---------------------------------------------------------------------------
// Latents

template <class T>
std::string latents_csv(const nn::Model<T>& model, std::span<const EventRecord> recs) {
  std::vector<const EventRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  const auto preds = predict_records(model, ptrs);
  const std::size_t D = static_cast<std::size_t>(model.config().d_model);
  std::string out = "event_id,domain";
  for (std::size_t k = 0; k < D; ++k) out += ",z" + std::to_string(k);
  out += ",kagan_deg\n";
  char buf[48];
  for (std::size_t i = 0; i < recs.size(); ++i) {
    out += recs[i].id + "," + domain_name(recs[i].domain);
    for (double z : preds[i].z) {
      std::snprintf(buf, sizeof buf, ",%.6g", z);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%.4f\n", label_kagan(to_double(recs[i].label), preds[i].y));
    out += buf;
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

template <class T>
void export_latents(const nn::Model<T>& model, std::span<const EventRecord> recs, const std::string& path) {
  write_text(path, latents_csv(model, recs));
}

}  // namespace sourcenet
