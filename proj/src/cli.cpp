#include "scgan/cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "scgan/data.hpp"
#include "scgan/metrics.hpp"
#include "scgan/segmenter.hpp"
#include "scgan/structure.hpp"
#include "scgan/training.hpp"

#ifndef SCGAN_VERSION
#define SCGAN_VERSION "unknown"
#endif

namespace scgan::cli {

namespace fs = std::filesystem;

std::string code_version() { return SCGAN_VERSION; }

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string pair_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%05d", i);
  return buf;
}

// Shared state for one invocation.
struct Context {
  std::vector<std::string> args;
  std::ostream& out;
  std::ostream& err;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool verbose = false;
  std::string started_at;

  void finish(const fs::path& dir, const std::string& sub, const nlohmann::json& config) const {
    RunMetadata meta{args, sub, config, seed, code_version(), started_at, utc_now()};
    write_run_metadata(dir, meta);
  }
};

// --- subcommands -------------------------------------------------------------------------------

struct SynthArgs {
  std::string spec;
  int n = 0;
  std::string out;
};

void cmd_synth(const Context& ctx, const SynthArgs& a) {
  const SynthSpec spec = read_json_file(a.spec).get<SynthSpec>();
  const fs::path out(a.out);
  for (const char* sub : {"he", "ihc", "truth"}) ensure_dir(out / sub);
  DatasetManifest manifest{".", {}};
  for (int i = 0; i < a.n; ++i) {
    const auto pair = generate_synthetic_pair(spec, mix_seed(ctx.seed, static_cast<std::uint64_t>(i)));
    const std::string name = pair_name(i);
    write_png(out / "he" / (name + ".png"), pair.he.pixels());
    write_png(out / "ihc" / (name + ".png"), pair.ihc.pixels());
    write_file_atomic(out / "truth" / (name + ".json"), truth_to_json(pair.truth));
    manifest.entries.push_back({"he/" + name + ".png", Stain::HE, "synthetic", name});
    manifest.entries.push_back({"ihc/" + name + ".png", pair.ihc.stain(), "synthetic", name});
  }
  write_file_atomic(out / "manifest.json", manifest_to_json(manifest));
  ctx.finish(out, "synth", {{"spec", spec}, {"n", a.n}});
  if (ctx.verbose) ctx.err << "wrote " << a.n << " synthetic pairs to " << out.string() << "\n";
}

struct EdgesArgs {
  std::string in, out;
  CannyParams canny;
};

void cmd_edges(const Context& ctx, const EdgesArgs& a) {
  a.canny.validate();
  const auto images = load_png_dir(a.in);
  const fs::path out(a.out);
  ensure_dir(out);
  for (const auto& img : images) {
    if (img.image.channels != 3) throw IoError(img.name + " is not an RGB image");
    EdgeMap e = canny_edges(img.image, a.canny);
    write_png(out / img.name, e.values);
  }
  ctx.finish(out, "edges", {{"canny", a.canny}, {"input", a.in}, {"count", images.size()}});
}

struct TrainArgs {
  std::string config, data, synth, out;
  int n = 200;
};

void cmd_train(const Context& ctx, const TrainArgs& a) {
  TrainConfig cfg;
  try {
    cfg = read_json_file(a.config).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed train config: ") + e.what());
  }
  if (ctx.seed_given) cfg.seed = ctx.seed;
  cfg = cfg.resolved();
  cfg.validate();

  PatchDataset data;
  nlohmann::json source;
  if (!a.data.empty()) {
    data = load_dataset(load_manifest(a.data));
    source = {{"manifest", a.data}};
  } else {
    const SynthSpec spec = read_json_file(a.synth).get<SynthSpec>();
    data = synthetic_dataset(spec, a.n, mix_seed(cfg.seed, 0x5e7));
    source = {{"synth", spec}, {"n", a.n}};
  }
  TrainHooks hooks;
  if (ctx.verbose)
    hooks.on_epoch_end = [&](int epoch, const TrainState&, const LossReport& m) {
      ctx.err << "epoch " << epoch << ": total " << m.total << " adv_g " << m.adv_g << " adv_d " << m.adv_d
              << " structural " << m.structural << "\n";
    };
  const TrainResult result = train(cfg, data, a.out, hooks);
  ctx.finish(a.out, "train", {{"train", cfg}, {"source", source}});
  ctx.out << result.final_checkpoint.string() << "\n";
}

struct TranslateArgs {
  std::string ckpt, in, out, direction;
};

void cmd_translate(const Context& ctx, const TranslateArgs& a) {
  const Direction dir = parse_direction(a.direction);
  const LoadedGenerator g = load_generator(a.ckpt, dir);
  const Stain source = dir == Direction::HeToIhc ? Stain::HE : g.ihc_stain;
  const Stain target = dir == Direction::HeToIhc ? g.ihc_stain : Stain::HE;
  const auto images = load_png_dir(a.in);
  if (images.empty()) throw IoError("no PNG images in " + a.in);
  std::vector<StainPatch> patches;
  for (const auto& img : images) patches.emplace_back(img.image, source, "unknown");
  const auto results = translate(g.generator, patches, source, target, g.config.canny);
  const fs::path out(a.out);
  ensure_dir(out / "edges");
  for (std::size_t i = 0; i < results.size(); ++i) {
    write_png(out / images[i].name, results[i].patch.pixels());
    write_png(out / "edges" / images[i].name, results[i].edges.values);
  }
  ctx.finish(out, "translate", {{"checkpoint", a.ckpt}, {"direction", a.direction}, {"count", results.size()}});
}

struct EvalArgs {
  std::string gen, ref, segmenter = "local", endpoint, report, thresholds;
  int min_area = 12;
  int max_in_flight = 4;
  double timeout = 30.0;
};

void cmd_eval(const Context& ctx, const EvalArgs& a) {
  EvalConfig cfg;
  if (!a.thresholds.empty()) cfg.thresholds = read_json_file(a.thresholds).get<BrownThresholds>();
  cfg.thresholds.validate();
  if (a.segmenter == "remote") {
    if (a.endpoint.empty()) throw std::invalid_argument("--segmenter remote requires --endpoint");
    cfg.segmenter = std::make_shared<RemoteSegmenter>(a.endpoint, a.timeout, a.max_in_flight);
  } else {
    LocalSegmenterConfig local;
    local.brown = cfg.thresholds;
    local.min_area = a.min_area;
    cfg.segmenter = std::make_shared<LocalSegmenter>(local);
  }
  const MetricReport report = evaluate_dataset(a.gen, a.ref, cfg);
  const fs::path report_path(a.report);
  const fs::path dir = report_path.has_parent_path() ? report_path.parent_path() : fs::path(".");
  ensure_dir(dir);
  write_file_atomic(report_path, report_to_json(report).dump(2) + "\n");
  fs::path csv_path = report_path;
  csv_path.replace_extension(".csv");
  write_file_atomic(csv_path, report_to_csv(report));
  ctx.finish(dir, "eval",
             {{"generated", a.gen},
              {"reference", a.ref},
              {"segmenter", report.segmenter},
              {"thresholds", cfg.thresholds},
              {"min_area", a.min_area}});
}

struct ServerArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  int min_area = 12;
};

void cmd_segment_server(const Context& ctx, const ServerArgs& a) {
  LocalSegmenterConfig local;
  local.min_area = a.min_area;
  SegmentServer server(std::make_shared<LocalSegmenter>(local));
  if (ctx.verbose) ctx.err << "serving POST /segment on " << a.host << ":" << a.port << "\n";
  server.run(a.host, a.port);
}

}  // namespace

nlohmann::json metadata_to_json(const RunMetadata& m) {
  return {{"command_line", m.command_line}, {"subcommand", m.subcommand}, {"config", m.config},
          {"seed", m.seed},                 {"code_version", m.code_version}, {"started_at", m.started_at},
          {"finished_at", m.finished_at}};
}

void write_run_metadata(const fs::path& dir, const RunMetadata& meta) {
  ensure_dir(dir);
  write_file_atomic(dir / "run_metadata.json", metadata_to_json(meta).dump(2) + "\n");
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Context ctx{args, out, err, 0, false, false, utc_now()};

  CLI::App app{"Edge-guided cycle-consistent virtual staining", "scgan"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  auto* seed_opt = app.add_option("--seed", ctx.seed, "Seed for every random choice");
  app.add_flag("--verbose", ctx.verbose, "Progress output on stderr");

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate synthetic H&E/IHC pairs");
  s_synth->add_option("--spec", synth.spec, "Synthesis spec JSON")->required()->check(CLI::ExistingFile);
  s_synth->add_option("--n", synth.n, "Number of pairs")->required()->check(CLI::PositiveNumber);
  s_synth->add_option("--out", synth.out, "Output directory")->required();

  EdgesArgs edges;
  auto* s_edges = app.add_subcommand("edges", "Write binary Canny edge maps");
  s_edges->add_option("--in", edges.in, "Input PNG directory")->required()->check(CLI::ExistingDirectory);
  s_edges->add_option("--out", edges.out, "Output directory")->required();
  s_edges->add_option("--sigma", edges.canny.sigma, "Gaussian sigma");
  s_edges->add_option("--low", edges.canny.low, "Low threshold (fraction of max gradient)");
  s_edges->add_option("--high", edges.canny.high, "High threshold (fraction of max gradient)");

  TrainArgs train_args;
  auto* s_train = app.add_subcommand("train", "Train both generators and discriminators");
  s_train->add_option("--config", train_args.config, "Training config JSON")->required()->check(CLI::ExistingFile);
  auto* data_opt = s_train->add_option("--data", train_args.data, "Dataset manifest JSON")->check(CLI::ExistingFile);
  auto* synth_opt = s_train->add_option("--synth", train_args.synth, "Synthesis spec JSON")->check(CLI::ExistingFile);
  data_opt->excludes(synth_opt);
  s_train->add_option("--n", train_args.n, "Synthetic pairs when using --synth")->check(CLI::PositiveNumber);
  s_train->add_option("--out", train_args.out, "Output directory")->required();

  TranslateArgs tr;
  auto* s_translate = app.add_subcommand("translate", "Translate patches with a trained generator");
  s_translate->add_option("--ckpt", tr.ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  s_translate->add_option("--in", tr.in, "Input PNG directory")->required()->check(CLI::ExistingDirectory);
  s_translate->add_option("--out", tr.out, "Output directory")->required();
  s_translate->add_option("--direction", tr.direction, "he_to_ihc or ihc_to_he")
      ->required()
      ->check(CLI::IsMember({"he_to_ihc", "ihc_to_he"}));

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Score generated IHC patches against references");
  s_eval->add_option("--gen", ev.gen, "Generated PNG directory")->required()->check(CLI::ExistingDirectory);
  s_eval->add_option("--ref", ev.ref, "Reference PNG directory")->required()->check(CLI::ExistingDirectory);
  s_eval->add_option("--segmenter", ev.segmenter, "local or remote")->check(CLI::IsMember({"local", "remote"}));
  s_eval->add_option("--endpoint", ev.endpoint, "Remote segmentation service URL");
  s_eval->add_option("--report", ev.report, "Report JSON path (CSV written alongside)")->required();
  s_eval->add_option("--thresholds", ev.thresholds, "Brown threshold JSON")->check(CLI::ExistingFile);
  s_eval->add_option("--min-area", ev.min_area, "Minimum cell area in pixels")->check(CLI::PositiveNumber);
  s_eval->add_option("--max-in-flight", ev.max_in_flight, "Concurrent remote requests")->check(CLI::PositiveNumber);
  s_eval->add_option("--timeout", ev.timeout, "Remote request timeout in seconds")->check(CLI::PositiveNumber);

  ServerArgs srv;
  auto* s_server = app.add_subcommand("segment-server", "Serve the local segmenter over HTTP");
  s_server->add_option("--host", srv.host, "Bind address");
  s_server->add_option("--port", srv.port, "Port")->check(CLI::Range(1, 65535));
  s_server->add_option("--min-area", srv.min_area, "Minimum cell area in pixels")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
    if (s_train->parsed() && train_args.data.empty() == train_args.synth.empty())
      throw CLI::ValidationError("train", "exactly one of --data or --synth is required");
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }
  ctx.seed_given = seed_opt->count() > 0;

  try {
    if (s_synth->parsed()) cmd_synth(ctx, synth);
    if (s_edges->parsed()) cmd_edges(ctx, edges);
    if (s_train->parsed()) cmd_train(ctx, train_args);
    if (s_translate->parsed()) cmd_translate(ctx, tr);
    if (s_eval->parsed()) cmd_eval(ctx, ev);
    if (s_server->parsed()) cmd_segment_server(ctx, srv);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace scgan::cli
