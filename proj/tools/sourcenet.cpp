// Command-line front end: gen, noise-lib, pretrain, finetune, eval, explain,
// latents, report.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "sourcenet/sourcenet.hpp"

#ifndef SOURCENET_DATA_DIR
#define SOURCENET_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using namespace sourcenet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

struct UsageError : Error {
  using Error::Error;
};

std::string data_path(const std::string& name) { return std::string(SOURCENET_DATA_DIR) + "/" + name; }

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration (JSON); default: bundled desk preset");
  cmd->add_option("--seed", c.seed, "seed; falls back to $SOURCENET_SEED, then the config");
}

RunConfig load_config(const Common& c) {
  RunConfig cfg = load_run_config(c.config.empty() ? data_path("desk.json") : c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
  } else if (const char* env = std::getenv("SOURCENET_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      cfg.seed = std::stoull(env, &used);
      if (env[used] != '\0') throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("SOURCENET_SEED is not an unsigned integer: ") + env);
    }
  }
  cfg.pretrain.seed = cfg.seed;
  cfg.finetune.seed = cfg.seed;
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void write_out(const std::string& path, const std::string& text) {
  write_text(path, text);
  std::cout << "wrote " << path << "\n";
}

// ---------------------------------------------------------------------------

struct GenArgs {
  Common common;
  std::string out, domain = "synthetic", catalog, noise;
  std::size_t n = 2000;
  unsigned threads = 1;
};

int cmd_gen(const GenArgs& a) {
  GenContext ctx;
  ctx.cfg = load_config(a.common);
  Domain domain;
  if (a.domain == "synthetic") domain = Domain::Synthetic;
  else if (a.domain == "pseudo_real") domain = Domain::PseudoReal;
  else throw UsageError("--domain must be synthetic or pseudo_real");
  ctx.stations = load_stations(ctx.cfg.stations.file.empty() ? data_path("stations.txt") : ctx.cfg.stations.file);
  ctx.base = load_velocity_model(ctx.cfg.gen.velocity_model.empty() ? data_path("socal_base.vel")
                                                                     : ctx.cfg.gen.velocity_model);
  ctx.library = training_library(ctx.cfg, ctx.base);
  const std::string noise = !a.noise.empty() ? a.noise : ctx.cfg.gen.noise_library;
  ctx.noise = noise.empty() ? synthetic_noise(ctx.cfg.seed) : load_noise_library(noise);

  GenStats st;
  auto records = generate_dataset(ctx, a.n, domain, a.threads, &st);
  if (!a.catalog.empty()) {
    const auto cat = load_catalog(a.catalog);
    std::cout << "catalog: matched " << apply_catalog(records, cat) << " of " << cat.size() << " events\n";
  }
  encode_dataset(records, a.out);
  std::cout << "events: " << records.size() << " (" << domain_name(domain) << ", seed " << ctx.cfg.seed
            << ", failed attempts " << st.failures << ")\nstation counts:";
  for (const auto& [k, v] : st.station_hist) std::cout << " " << k << ":" << v;
  std::cout << "\nwrote " << a.out << "\n";
  return kOk;
}

struct NoiseArgs {
  Common common;
  std::string out;
  std::size_t records = 32, length = 2048;
};

int cmd_noise(const NoiseArgs& a) {
  const RunConfig cfg = load_config(a.common);
  NoiseLibraryConfig nc;
  nc.n_records = a.records;
  nc.length = a.length;
  Rng rng = make_rng(cfg.seed, {0x401});
  save_noise_library(build_noise_library(nc, rng), a.out);
  std::cout << "wrote " << a.out << " (" << a.records << " records x " << a.length << " samples)\n";
  return kOk;
}

struct TrainArgs {
  Common common;
  std::string data, ckpt, out, history, variant;
  std::optional<std::size_t> epochs;
  bool resume = false;
};

int cmd_train(const TrainArgs& a, Stage stage) {
  RunConfig cfg = load_config(a.common);
  TrainConfig tc = stage == Stage::Pretrain ? cfg.pretrain : cfg.finetune;
  tc.stage = stage;
  if (a.epochs) tc.max_epochs = *a.epochs;

  std::optional<nn::Checkpoint> init_ck;
  if (stage == Stage::Finetune) {
    if (a.ckpt.empty()) throw UsageError("finetune requires --ckpt");
    init_ck = nn::load_checkpoint(a.ckpt);
  }
  nn::ModelConfig mc = init_ck ? init_ck->config : cfg.model;
  if (!a.variant.empty()) {
    if (init_ck) throw UsageError("--variant only applies to pretraining");
    mc.variant = nn::parse_variant(a.variant);
  }

  auto prep = prepare(decode_dataset(a.data), tc, cfg.wave_norm,
                      init_ck ? std::optional<NormStats>(checkpoint_norm(*init_ck)) : std::nullopt);
  for (auto i : prep.stats.degenerate)
    std::cerr << "warning: scalar feature " << i << " has zero variance\n";
  const nn::Model<float> init = init_ck ? nn::model_from_checkpoint<float>(*init_ck) : init_model(mc, cfg.seed);

  StagePaths paths{a.out, a.out + ".last"};
  auto meta = stage_meta(prep);
  meta["run_config"] = run_config_json(cfg);
  const std::string history = a.history.empty() ? a.out + ".history.csv" : a.history;
  auto res = run_stage(prep.records, prep.split, tc, init, meta, paths, a.resume, [](const HistoryRow& r) {
    std::printf("epoch %3zu  train %.4f  val %.4f  kagan %.2f  mw_mae %.3f\n", r.epoch, r.train_loss, r.val_loss,
                r.val_kagan_mean, r.val_mw_mae);
    std::fflush(stdout);
  });
  write_out(history, history_csv(res.history));
  std::cout << "best epoch " << res.best_epoch << " (val " << res.best_val << "), wrote " << a.out << "\n";
  return kOk;
}

struct EvalArgs {
  Common common;
  std::string ckpt, data, out, event, target = "mw", attention = "pooling";
  std::size_t max_stations = 8;
};

struct Loaded {
  nn::Checkpoint ck;
  nn::Model<float> model;
  std::vector<EventRecord> records;
};

Loaded load_eval(const EvalArgs& a) {
  Loaded l{nn::load_checkpoint(a.ckpt), {}, {}};
  l.model = nn::model_from_checkpoint<float>(l.ck);
  l.records = normalized_for(l.ck, decode_dataset(a.data));
  return l;
}

int cmd_eval(const EvalArgs& a) {
  auto l = load_eval(a);
  if (l.records.empty()) throw UsageError("dataset is empty");
  ensure_dir(a.out);
  const auto m = evaluate(l.model, std::span<const EventRecord>(l.records));
  write_out(a.out + "/metrics.csv", metrics_csv(m));
  write_out(a.out + "/summary.txt", metrics_summary(m) + "\n");
  write_out(a.out + "/report.svg", report::metrics_svg(m));
  if (l.model.config().variant != nn::Variant::DeepSets) {
    const auto src = a.attention == "self" ? AttentionSource::SelfAttention : AttentionSource::Pooling;
    const auto prof = azimuth_attention(l.model, std::span<const EventRecord>(l.records), src);
    write_out(a.out + "/azimuth.csv", azimuth_csv(prof));
    write_out(a.out + "/azimuth.svg", report::azimuth_svg(prof));
    std::printf("east-west / north-south attention ratio: %.3f\n", east_west_ratio(prof));
  }
  std::cout << metrics_summary(m) << "\n";
  return kOk;
}

CamTarget parse_target(const std::string& s) {
  if (s == "mw") return CamTarget::Mw;
  if (s.size() == 4 && s.rfind("dev", 0) == 0 && s[3] >= '1' && s[3] <= '5')
    return static_cast<CamTarget>(s[3] - '1');
  throw UsageError("--target must be dev1..dev5 or mw");
}

int cmd_explain(const EvalArgs& a) {
  const CamTarget target = parse_target(a.target);
  auto l = load_eval(a);
  const auto it = std::find_if(l.records.begin(), l.records.end(), [&](const auto& r) { return r.id == a.event; });
  if (it == l.records.end()) throw UsageError("unknown event id '" + a.event + "'");
  ensure_dir(a.out);
  std::vector<report::CamPanel> panels;
  std::string csv = "station,tower,t,cam\n";
  const std::size_t n = std::min(a.max_stations, it->stations.size());
  for (std::size_t i = 0; i < n; ++i) {
    report::CamPanel pn;
    pn.cam = gradcam(l.model, *it, i, target);
    const auto& st = it->stations[i];
    char label[64];
    std::snprintf(label, sizeof label, "st %zu az %.0f d %.0f km", i, st.azimuth, st.dist_km);
    pn.label = label;
    pn.wave.assign(st.p_win.begin(), st.p_win.begin() + it->T);
    pn.wave.insert(pn.wave.end(), st.s_win.begin(), st.s_win.begin() + it->T);
    for (std::size_t t = 0; t < pn.cam.p.size(); ++t) {
      char row[96];
      std::snprintf(row, sizeof row, "%zu,P,%zu,%.6f\n%zu,S,%zu,%.6f\n", i, t, pn.cam.p[t], i, t, pn.cam.s[t]);
      csv += row;
    }
    panels.push_back(std::move(pn));
  }
  write_out(a.out + "/gradcam_" + a.event + ".csv", csv);
  write_out(a.out + "/gradcam_" + a.event + ".svg",
            report::gradcam_svg(panels, "Grad-CAM " + a.event + " (" + a.target + ")"));
  return kOk;
}

int cmd_latents(const EvalArgs& a) {
  auto l = load_eval(a);
  export_latents(l.model, std::span<const EventRecord>(l.records), a.out);
  std::cout << "wrote " << a.out << " (" << l.records.size() << " events)\n";
  return kOk;
}

struct ReportArgs {
  std::string metrics, out;
};

int cmd_report(const ReportArgs& a) {
  const auto bytes = io::read_file(a.metrics);
  const auto m = parse_metrics_csv(std::string(bytes.begin(), bytes.end()));
  write_out(a.out, report::metrics_svg(m));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Moment tensor inversion with set encoders trained on randomized synthetics"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a dataset");
  add_common(g, gen.common);
  g->add_option("--out", gen.out, "output dataset (.snet)")->required();
  g->add_option("--n", gen.n, "number of events")->check(CLI::PositiveNumber);
  g->add_option("--domain", gen.domain, "synthetic | pseudo_real");
  g->add_option("--threads", gen.threads, "worker threads (output is identical for any count)");
  g->add_option("--catalog", gen.catalog, "JSON-lines catalog to attach to matching event ids");
  g->add_option("--noise", gen.noise, "noise library container");

  NoiseArgs noise;
  auto* nl = app.add_subcommand("noise-lib", "synthesize a noise library");
  add_common(nl, noise.common);
  nl->add_option("--out", noise.out, "output container")->required();
  nl->add_option("--records", noise.records)->check(CLI::PositiveNumber);
  nl->add_option("--length", noise.length)->check(CLI::PositiveNumber);

  TrainArgs pre, fine;
  for (auto [name, args] : {std::pair{"pretrain", &pre}, std::pair{"finetune", &fine}}) {
    auto* t = app.add_subcommand(name, std::string(name) + " a model");
    add_common(t, args->common);
    t->add_option("--data", args->data, "dataset (.snet)")->required();
    t->add_option("--out", args->out, "checkpoint path")->required();
    t->add_option("--ckpt", args->ckpt, "initial checkpoint");
    t->add_option("--history", args->history, "history CSV (default: <out>.history.csv)");
    t->add_option("--epochs", args->epochs, "override max epochs");
    t->add_option("--variant", args->variant, "full | no_scalar | deepsets");
    t->add_flag("--resume", args->resume, "continue from <out>.last");
  }

  EvalArgs ev, ex, lat;
  auto* e = app.add_subcommand("eval", "metrics, report and azimuth profile");
  auto* x = app.add_subcommand("explain", "Grad-CAM for one event");
  auto* la = app.add_subcommand("latents", "export pooled latents");
  for (auto [cmd, args] : {std::pair{e, &ev}, std::pair{x, &ex}, std::pair{la, &lat}}) {
    add_common(cmd, args->common);
    cmd->add_option("--ckpt", args->ckpt, "checkpoint")->required();
    cmd->add_option("--data", args->data, "dataset (.snet)")->required();
    cmd->add_option("--out", args->out, cmd == la ? "output CSV" : "output directory")->required();
  }
  e->add_option("--attention", ev.attention, "pooling | self");
  x->add_option("--event", ex.event, "event id")->required();
  x->add_option("--target", ex.target, "dev1..dev5 | mw");
  x->add_option("--stations", ex.max_stations, "stations to plot");

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "render an SVG from a metrics CSV");
  r->add_option("--metrics", rep.metrics, "metrics CSV")->required();
  r->add_option("--out", rep.out, "output SVG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen(gen);
    if (nl->parsed()) return cmd_noise(noise);
    if (app.got_subcommand("pretrain")) return cmd_train(pre, Stage::Pretrain);
    if (app.got_subcommand("finetune")) return cmd_train(fine, Stage::Finetune);
    if (e->parsed()) return cmd_eval(ev);
    if (x->parsed()) return cmd_explain(ex);
    if (la->parsed()) return cmd_latents(lat);
    if (r->parsed()) return cmd_report(rep);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kUsage;
  } catch (const NonFiniteLoss& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return kNumeric;
  } catch (const SimulationFailed& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return kNumeric;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kIo;
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    return kNumeric;
  }
  return kUsage;
}
