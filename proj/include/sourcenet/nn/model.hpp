#pragma once

// The station-set network: Siamese 1-D ResNet towers + scalar MLP per station,
// a transformer encoder over the (unordered, masked) station set, attention
// pooling, and the source head.

#include <nlohmann/json.hpp>

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sourcenet/errors.hpp"
#include "sourcenet/features.hpp"
#include "sourcenet/nn/graph.hpp"
#include "sourcenet/nn/ops.hpp"
#include "sourcenet/rng.hpp"

namespace sourcenet::nn {

enum class Variant { Full, NoScalar, DeepSets };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoScalar: return "no_scalar";
    case Variant::DeepSets: return "deepsets";
  }
  return "full";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "no_scalar") return Variant::NoScalar;
  if (s == "deepsets") return Variant::DeepSets;
  throw ConfigError("unknown model variant '" + s + "'");
}

struct ModelConfig {
  int d_model = 128;
  int n_layers = 3;
  int n_heads = 4;
  int d_ff = 256;
  double dropout = 0.1;
  int resnet_blocks = 3;
  int conv_kernel = 7;
  int stem_stride = 1;
  // Stem width followed by the output width of each residual block.
  std::vector<int> resnet_channels{64, 128, 160, 192};
  int tower_p = 48;
  int tower_s = 48;
  int tower_scalar = 32;
  int scalar_hidden = 64;
  int pool_hidden = 64;
  int head_hidden = 64;
  Variant variant = Variant::Full;
  bool siamese = true;
  int in_channels = static_cast<int>(kChannels);
  int scalar_dim = static_cast<int>(kScalarDim);
  int window = static_cast<int>(kWindowLen);
  // Mw output = mw_offset + mw_scale * raw, so the head starts near the data.
  double mw_offset = 4.0;
  double mw_scale = 0.5;

  int fusion_in() const {
    return tower_p + tower_s + (variant == Variant::NoScalar ? 0 : tower_scalar);
  }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("model config: " + what);
    };
    need(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
    need(n_layers >= 0 && d_ff > 0, "n_layers >= 0 and d_ff > 0");
    need(dropout >= 0.0 && dropout < 1.0, "dropout in [0, 1)");
    need(resnet_blocks >= 1, "resnet_blocks >= 1");
    need(static_cast<int>(resnet_channels.size()) == resnet_blocks + 1,
         "resnet_channels needs resnet_blocks + 1 entries");
    for (int c : resnet_channels) need(c > 0, "resnet_channels must be positive");
    need(conv_kernel >= 1 && conv_kernel % 2 == 1, "conv_kernel must be odd");
    need(stem_stride >= 1, "stem_stride >= 1");
    need(tower_p > 0 && tower_s > 0 && tower_scalar > 0, "tower dims must be positive");
    if (variant == Variant::Full)
      need(tower_p + tower_s + tower_scalar == d_model, "tower dims must sum to d_model");
    need(pool_hidden > 0 && head_hidden > 0 && scalar_hidden > 0, "hidden sizes must be positive");
    need(window >= 2 && in_channels > 0 && scalar_dim > 0, "input dims");
    need(mw_scale > 0.0, "mw_scale must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d_model", c.d_model},         {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
       {"dropout", c.dropout},         {"resnet_blocks", c.resnet_blocks},
       {"conv_kernel", c.conv_kernel}, {"stem_stride", c.stem_stride},
       {"resnet_channels", c.resnet_channels},
       {"tower_p", c.tower_p},         {"tower_s", c.tower_s},
       {"tower_scalar", c.tower_scalar}, {"scalar_hidden", c.scalar_hidden},
       {"pool_hidden", c.pool_hidden}, {"head_hidden", c.head_hidden},
       {"variant", variant_name(c.variant)}, {"siamese", c.siamese},
       {"in_channels", c.in_channels}, {"scalar_dim", c.scalar_dim},
       {"window", c.window},           {"mw_offset", c.mw_offset},
       {"mw_scale", c.mw_scale}};
}

/// Strict: unknown keys are rejected, missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "d_model") c.d_model = v.get<int>();
      else if (k == "n_layers") c.n_layers = v.get<int>();
      else if (k == "n_heads") c.n_heads = v.get<int>();
      else if (k == "d_ff") c.d_ff = v.get<int>();
      else if (k == "dropout") c.dropout = v.get<double>();
      else if (k == "resnet_blocks") c.resnet_blocks = v.get<int>();
      else if (k == "conv_kernel") c.conv_kernel = v.get<int>();
      else if (k == "stem_stride") c.stem_stride = v.get<int>();
      else if (k == "resnet_channels") c.resnet_channels = v.get<std::vector<int>>();
      else if (k == "tower_p") c.tower_p = v.get<int>();
      else if (k == "tower_s") c.tower_s = v.get<int>();
      else if (k == "tower_scalar") c.tower_scalar = v.get<int>();
      else if (k == "scalar_hidden") c.scalar_hidden = v.get<int>();
      else if (k == "pool_hidden") c.pool_hidden = v.get<int>();
      else if (k == "head_hidden") c.head_hidden = v.get<int>();
      else if (k == "variant") c.variant = parse_variant(v.get<std::string>());
      else if (k == "siamese") c.siamese = v.get<bool>();
      else if (k == "in_channels") c.in_channels = v.get<int>();
      else if (k == "scalar_dim") c.scalar_dim = v.get<int>();
      else if (k == "window") c.window = v.get<int>();
      else if (k == "mw_offset") c.mw_offset = v.get<double>();
      else if (k == "mw_scale") c.mw_scale = v.get<double>();
      else throw ConfigError("model config: unknown key '" + k + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model config: bad value for '" + k + "': " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// Batches

/// Events padded to the largest station count. Position r = b * N + i holds
/// station `station_of[r]` (-1 for padding).
template <class T>
struct Batch {
  std::int64_t B = 0, N = 0, S = 0, window = 0;
  std::vector<std::uint8_t> mask;         // [B*N]
  std::vector<std::int64_t> station_of;   // [B*N]
  Tensor<T> waves;                        // [C, 2S, window]: P windows then S windows
  Tensor<T> scalars;                      // [S, scalar_dim]
  Tensor<T> target;                       // [B, 6]
  std::vector<float> azimuth;             // [S]

  /// Excludes position i of event b from attention and pooling.
  void mask_station(std::int64_t b, std::int64_t i) { mask.at(b * N + i) = 0; }
};

template <class T>
Batch<T> make_batch(std::span<const EventRecord* const> events) {
  Batch<T> bt;
  bt.B = static_cast<std::int64_t>(events.size());
  if (bt.B == 0) throw ShapeError("empty batch");
  bt.window = events[0]->T;
  for (const auto* e : events) {
    if (e->stations.empty()) throw AllMasked("event '" + e->id + "' has no stations");
    if (e->T != bt.window) throw ShapeError("events with different window lengths in one batch");
    bt.N = std::max<std::int64_t>(bt.N, static_cast<std::int64_t>(e->stations.size()));
    bt.S += static_cast<std::int64_t>(e->stations.size());
  }
  const std::int64_t C = kChannels, L = bt.window, S = bt.S;
  bt.mask.assign(static_cast<std::size_t>(bt.B * bt.N), 0);
  bt.station_of.assign(static_cast<std::size_t>(bt.B * bt.N), -1);
  bt.waves = Tensor<T>({C, 2 * S, L});
  bt.scalars = Tensor<T>({S, static_cast<std::int64_t>(kScalarDim)});
  bt.target = Tensor<T>({bt.B, 6});
  std::int64_t s = 0;
  for (std::int64_t b = 0; b < bt.B; ++b) {
    const EventRecord& e = *events[b];
    for (int k = 0; k < 6; ++k) bt.target.data[b * 6 + k] = static_cast<T>(e.label[k]);
    for (std::size_t i = 0; i < e.stations.size(); ++i, ++s) {
      const StationFeatures& f = e.stations[i];
      bt.mask[b * bt.N + i] = 1;
      bt.station_of[b * bt.N + i] = s;
      bt.azimuth.push_back(f.azimuth);
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t t = 0; t < L; ++t) {
          bt.waves.data[(c * 2 * S + s) * L + t] = static_cast<T>(f.p_win[c * L + t]);
          bt.waves.data[(c * 2 * S + S + s) * L + t] = static_cast<T>(f.s_win[c * L + t]);
        }
      for (std::size_t k = 0; k < kScalarDim; ++k)
        bt.scalars.data[s * kScalarDim + k] = static_cast<T>(f.scalars[k]);
    }
  }
  return bt;
}

template <class T>
Batch<T> make_batch(const std::vector<EventRecord>& events) {
  std::vector<const EventRecord*> ptrs;
  for (const auto& e : events) ptrs.push_back(&e);
  return make_batch<T>(ptrs);
}

// ---------------------------------------------------------------------------
// Model

enum class Mode { Train, Eval };

template <class T>
struct ForwardTrace {
  Var y;                 // [B, 6]
  Var z;                 // [B, d_model]
  Var h_station;         // [S, d_model] fused station embeddings
  Var h_set;             // [B*N, d_model] after the set encoder
  std::vector<Var> wave_inputs;  // [C, 2S, L] (Siamese) or P and S inputs
  Var scalar_input;
  std::vector<Var> last_conv;    // final residual activations: P/S (or both at once)
  std::shared_ptr<Tensor<T>> pool_weights;                 // [B, N]
  std::vector<std::shared_ptr<Tensor<T>>> attention_maps;  // per layer [B, H, N, N]
};

template <class T>
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    build(&rng);
  }

  /// Parameters with the right shapes, zero-filled (for loading).
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    build(nullptr);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  Param<T>& param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("no parameter named " + name);
    return params_[it->second];
  }
  const Param<T>& param(const std::string& name) const {
    return const_cast<Model*>(this)->param(name);
  }
  bool has_param(const std::string& name) const { return index_.contains(name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.data.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad = Tensor<T>(p.value.shape);
  }

  /// Records the forward pass on `g`. `dropout_rng` is used only in Train mode.
  /// Parameters are read-only here; a later g.backward() accumulates into
  /// their `grad` buffers.
  ForwardTrace<T> forward(Graph<T>& g, const Batch<T>& bt, Mode mode, Rng* dropout_rng = nullptr,
                          bool input_grad = false) const {
    auto& self = const_cast<Model&>(*this);
    ParamVars pv{g, self, {}};
    Rng* drop = mode == Mode::Train ? dropout_rng : nullptr;
    ForwardTrace<T> tr;
    const std::int64_t S = bt.S, C = kChannels, L = bt.window;
    if (L != cfg_.window) throw ShapeError("window length does not match the model config");

    // Towers.
    Var p_emb, s_emb;
    if (cfg_.siamese) {
      Var x = g.input(bt.waves, input_grad);
      tr.wave_inputs.push_back(x);
      Var last = resnet(g, pv, "enc", x);
      tr.last_conv.push_back(last);
      Var pooled = mean_time(g, last);
      std::vector<std::int64_t> ip(S), is(S);
      for (std::int64_t s = 0; s < S; ++s) {
        ip[s] = s;
        is[s] = S + s;
      }
      p_emb = linear(g, gather_rows(g, pooled, ip), pv("enc.p_proj.w"), pv("enc.p_proj.b"));
      s_emb = linear(g, gather_rows(g, pooled, is), pv("enc.s_proj.w"), pv("enc.s_proj.b"));
    } else {
      Tensor<T> xp({C, S, L}), xs({C, S, L});
      for (std::int64_t c = 0; c < C; ++c) {
        std::copy_n(bt.waves.ptr() + c * 2 * S * L, S * L, xp.ptr() + c * S * L);
        std::copy_n(bt.waves.ptr() + (c * 2 * S + S) * L, S * L, xs.ptr() + c * S * L);
      }
      Var vp = g.input(std::move(xp), input_grad), vs = g.input(std::move(xs), input_grad);
      tr.wave_inputs = {vp, vs};
      Var lp = resnet(g, pv, "enc", vp), ls = resnet(g, pv, "enc_s", vs);
      tr.last_conv = {lp, ls};
      p_emb = linear(g, mean_time(g, lp), pv("enc.p_proj.w"), pv("enc.p_proj.b"));
      s_emb = linear(g, mean_time(g, ls), pv("enc.s_proj.w"), pv("enc.s_proj.b"));
    }
    std::vector<Var> parts{p_emb, s_emb};
    tr.scalar_input = g.input(bt.scalars, input_grad);
    if (cfg_.variant != Variant::NoScalar) {
      Var h = relu(g, linear(g, tr.scalar_input, pv("scalar.l1.w"), pv("scalar.l1.b")));
      parts.push_back(linear(g, h, pv("scalar.l2.w"), pv("scalar.l2.b")));
    }
    tr.h_station = linear(g, concat_cols(g, parts), pv("fuse.w"), pv("fuse.b"));

    // Set encoder.
    Var H = gather_rows(g, tr.h_station, bt.station_of);
    Var z;
    if (cfg_.variant == Variant::DeepSets) {
      Var u = relu(g, linear(g, H, pv("ds.l1.w"), pv("ds.l1.b")));
      H = linear(g, u, pv("ds.l2.w"), pv("ds.l2.b"));
      tr.h_set = H;
      z = masked_mean(g, H, bt.mask, bt.B, bt.N);
    } else {
      for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string pre = "tf." + std::to_string(l) + ".";
        Var a = layernorm(g, H, pv(pre + "ln1.g"), pv(pre + "ln1.b"));
        Var q = linear(g, a, pv(pre + "q.w"), pv(pre + "q.b"));
        Var k = linear(g, a, pv(pre + "k.w"), pv(pre + "k.b"));
        Var v = linear(g, a, pv(pre + "v.w"), pv(pre + "v.b"));
        std::shared_ptr<Tensor<T>> probs;
        Var o = attention(g, q, k, v, bt.mask, bt.B, bt.N, cfg_.n_heads, &probs);
        tr.attention_maps.push_back(probs);
        o = dropout(g, linear(g, o, pv(pre + "o.w"), pv(pre + "o.b")), cfg_.dropout, drop);
        H = masked_residual(g, H, o, bt.mask);
        Var f = layernorm(g, H, pv(pre + "ln2.g"), pv(pre + "ln2.b"));
        f = gelu(g, linear(g, f, pv(pre + "ff1.w"), pv(pre + "ff1.b")));
        f = dropout(g, linear(g, f, pv(pre + "ff2.w"), pv(pre + "ff2.b")), cfg_.dropout, drop);
        H = masked_residual(g, H, f, bt.mask);
      }
      H = layernorm(g, H, pv("tf.ln_f.g"), pv("tf.ln_f.b"));
      tr.h_set = H;
      Var u = tanh(g, linear(g, H, pv("pool.V.w"), pv("pool.V.b")));
      Var score = linear(g, u, pv("pool.w.w"));
      z = softmax_pool(g, H, score, bt.mask, bt.B, bt.N, &tr.pool_weights);
    }
    tr.z = z;
    Var hh = relu(g, linear(g, z, pv("head.l1.w"), pv("head.l1.b")));
    Var raw = linear(g, hh, pv("head.l2.w"), pv("head.l2.b"));
    tr.y = source_head(g, raw, static_cast<T>(cfg_.mw_offset), static_cast<T>(cfg_.mw_scale));
    return tr;
  }

  /// Eval-mode predictions [B, 6].
  Tensor<T> predict(const Batch<T>& bt) const {
    Graph<T> g;
    auto tr = forward(g, bt, Mode::Eval);
    return g.value(tr.y);
  }

 private:
  struct ParamVars {
    Graph<T>& g;
    Model& m;
    std::unordered_map<std::string, Var> cache;
    Var operator()(const std::string& name) {
      auto it = cache.find(name);
      if (it != cache.end()) return it->second;
      Var v = g.param(m.param(name));
      cache.emplace(name, v);
      return v;
    }
  };

  Var resnet(Graph<T>& g, ParamVars& pv, const std::string& pre, Var x) const {
    const int pad = cfg_.conv_kernel / 2;
    Var h = relu(g, conv1d(g, x, pv(pre + ".stem.w"), cfg_.stem_stride, pad));
    for (int b = 0; b < cfg_.resnet_blocks; ++b) {
      const std::string p = pre + ".b" + std::to_string(b) + ".";
      Var y = relu(g, conv1d(g, h, pv(p + "c1.w"), 2, pad));
      y = conv1d(g, y, pv(p + "c2.w"), 1, pad);
      Var sc = conv1d(g, h, pv(p + "sc.w"), 2, 0);
      h = relu(g, add(g, y, sc));
    }
    return h;
  }

  void add_param(const std::string& name, Shape shape, Rng* rng, double bound, bool decay = true,
                 T fill = T(0)) {
    Param<T> p;
    p.name = name;
    p.value = Tensor<T>(std::move(shape), fill);
    p.decay = decay;
    if (rng && bound > 0.0)
      for (T& v : p.value.data) v = static_cast<T>(uniform(*rng, -bound, bound));
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
  }

  // Weights ~ U(-b, b), b = gain * sqrt(3 / fan_in); gain sqrt(2) before ReLU.
  void weight(const std::string& name, Shape shape, Rng* rng, bool relu_gain) {
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const double b = (relu_gain ? std::sqrt(2.0) : 1.0) * std::sqrt(3.0 / static_cast<double>(fan_in));
    add_param(name, std::move(shape), rng, b);
  }
  void bias(const std::string& name, std::int64_t n) { add_param(name, {n}, nullptr, 0.0, false); }
  void dense(const std::string& pre, std::int64_t out, std::int64_t in, Rng* rng, bool relu_gain,
             bool with_bias = true) {
    weight(pre + ".w", {out, in}, rng, relu_gain);
    if (with_bias) bias(pre + ".b", out);
  }
  void norm(const std::string& pre, std::int64_t n) {
    add_param(pre + ".g", {n}, nullptr, 0.0, false, T(1));
    add_param(pre + ".b", {n}, nullptr, 0.0, false, T(0));
  }

  void resnet_params(const std::string& pre, Rng* rng) {
    const auto& ch = cfg_.resnet_channels;
    const std::int64_t K = cfg_.conv_kernel;
    weight(pre + ".stem.w", {ch[0], cfg_.in_channels, K}, rng, true);
    for (int b = 0; b < cfg_.resnet_blocks; ++b) {
      const std::string p = pre + ".b" + std::to_string(b) + ".";
      weight(p + "c1.w", {ch[b + 1], ch[b], K}, rng, true);
      weight(p + "c2.w", {ch[b + 1], ch[b + 1], K}, rng, false);
      weight(p + "sc.w", {ch[b + 1], ch[b], 1}, rng, false);
    }
  }

  void build(Rng* rng) {
    const std::int64_t d = cfg_.d_model;
    const std::int64_t c_last = cfg_.resnet_channels.back();
    resnet_params("enc", rng);
    if (!cfg_.siamese) resnet_params("enc_s", rng);
    dense("enc.p_proj", cfg_.tower_p, c_last, rng, false);
    dense("enc.s_proj", cfg_.tower_s, c_last, rng, false);
    if (cfg_.variant != Variant::NoScalar) {
      dense("scalar.l1", cfg_.scalar_hidden, cfg_.scalar_dim, rng, true);
      dense("scalar.l2", cfg_.tower_scalar, cfg_.scalar_hidden, rng, false);
    }
    dense("fuse", d, cfg_.fusion_in(), rng, false);
    if (cfg_.variant == Variant::DeepSets) {
      dense("ds.l1", d, d, rng, true);
      dense("ds.l2", d, d, rng, false);
    } else {
      for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string pre = "tf." + std::to_string(l) + ".";
        norm(pre + "ln1", d);
        for (const char* n : {"q", "k", "v", "o"}) dense(pre + n, d, d, rng, false);
        norm(pre + "ln2", d);
        dense(pre + "ff1", cfg_.d_ff, d, rng, false);
        dense(pre + "ff2", d, cfg_.d_ff, rng, false);
      }
      norm("tf.ln_f", d);
      dense("pool.V", cfg_.pool_hidden, d, rng, false);
      weight("pool.w.w", {1, cfg_.pool_hidden}, rng, false);
    }
    dense("head.l1", cfg_.head_hidden, d, rng, true);
    dense("head.l2", 6, cfg_.head_hidden, rng, false);
  }

  ModelConfig cfg_;
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Element-type conversion (parameters only).
template <class To, class From>
Model<To> cast_model(const Model<From>& m) {
  Model<To> out(m.config());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& src = m.params()[i].value.data;
    auto& dst = out.params()[i].value.data;
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<To>(src[k]);
  }
  return out;
}

template <class To, class From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
  Tensor<To> out(t.shape);
  for (std::size_t k = 0; k < t.data.size(); ++k) out.data[k] = static_cast<To>(t.data[k]);
  return out;
}

template <class To, class From>
Batch<To> cast_batch(const Batch<From>& b) {
  Batch<To> out;
  out.B = b.B;
  out.N = b.N;
  out.S = b.S;
  out.window = b.window;
  out.mask = b.mask;
  out.station_of = b.station_of;
  out.waves = cast_tensor<To>(b.waves);
  out.scalars = cast_tensor<To>(b.scalars);
  out.target = cast_tensor<To>(b.target);
  out.azimuth = b.azimuth;
  return out;
}

}  // namespace sourcenet::nn
