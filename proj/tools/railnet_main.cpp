// railnet: single entry point for the inspection pipeline. Subcommands wrap
// the library modules; every machine-readable command prints one JSON object
// on stdout. Exit codes: 0 ok, 1 usage, 2 bad input data, 3 runtime failure.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <csignal>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "railnet/errors.hpp"
#include "railnet/fuse.hpp"
#include "railnet/imgpipe.hpp"
#include "railnet/model.hpp"
#include "railnet/quant.hpp"
#include "railnet/report.hpp"
#include "railnet/tile.hpp"

using nlohmann::json;
using namespace railnet;

namespace {

volatile std::sig_atomic_t g_stop = 0;

void handle_stop(int) { g_stop = 1; }

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  if (n == 0) return 0.0;
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
double time_ms(F&& fn) {
  auto t0 = std::chrono::steady_clock::now();
  fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

double gops_from(long long macs, double wall_ms) {
  // 1 MAC = 2 ops; clamp to 1 us so a cached tiny model cannot divide by ~0.
  double seconds = std::max(wall_ms / 1000.0, 1e-6);
  return 2.0 * double(macs) / seconds / 1e9;
}

std::vector<std::string> list_images(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw DataError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    if (ext == ".png" || ext == ".ppm") out.push_back(entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Tensor> load_images(const std::vector<std::string>& paths) {
  std::vector<Tensor> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(load_normalize(p));
  return out;
}

void write_manifest(const std::string& path,
                    const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  for (const auto& l : lines) f << l << "\n";
  f.flush();
  if (!f) throw DataError("cannot write " + path);
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

uint64_t now_ms() {
  return uint64_t(std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::system_clock::now().time_since_epoch())
                      .count());
}

struct InferOpts {
  std::string model, image, qplan, tplan;
  long long budget = kDefaultBudgetBytes;
  int runs = 10;
  int warmups = 3;
  bool use_float = false, use_naive = false, use_tiled = false;
};

void run_infer(const InferOpts& o) {
  ModelGraph model = load_model(o.model);
  Tensor image = load_normalize(o.image);
  long long macs = mac_count(model);
  std::string mode = o.use_float ? "float" : o.use_naive ? "naive" : "tiled";

  json j;
  std::vector<double> times;
  if (mode == "float") {
    ForwardResult r;
    for (int i = 0; i < o.warmups; i++) r = forward_ref(model, image);
    for (int i = 0; i < o.runs; i++)
      times.push_back(time_ms([&] { r = forward_ref(model, image); }));
    j["class"] = r.class_id;
    j["class_name"] = size_t(r.class_id) < model.class_names.size()
                          ? model.class_names[r.class_id]
                          : std::to_string(r.class_id);
    j["confidence"] = r.confidence;
  } else {
    if (o.qplan.empty())
      throw DataError("fixed-point inference requires --qplan");
    QuantPlan plan = load_plan(o.qplan);
    FxModel fxm = quantize_model(model, plan);
    if (mode == "naive") {
      FxForwardResult r;
      for (int i = 0; i < o.warmups; i++) r = fx_forward_naive(fxm, image);
      for (int i = 0; i < o.runs; i++)
        times.push_back(time_ms([&] { r = fx_forward_naive(fxm, image); }));
      j["class"] = r.class_id;
      j["class_name"] = size_t(r.class_id) < model.class_names.size()
                            ? model.class_names[r.class_id]
                            : std::to_string(r.class_id);
      j["confidence"] = r.confidence;
      j["saturation_count"] = fxm.saturation_count + r.saturation_count;
    } else {
      TilePlan tplan = o.tplan.empty()
                           ? search_tilings(fxm.graph, fxm.plan, o.budget)
                           : load_tile_plan(o.tplan);
      TiledResult r;
      for (int i = 0; i < o.warmups; i++) r = run_tiled(fxm, image, tplan);
      for (int i = 0; i < o.runs; i++)
        times.push_back(time_ms([&] { r = run_tiled(fxm, image, tplan); }));
      j["class"] = r.fx.class_id;
      j["class_name"] = size_t(r.fx.class_id) < model.class_names.size()
                            ? model.class_names[r.fx.class_id]
                            : std::to_string(r.fx.class_id);
      j["confidence"] = r.fx.confidence;
      j["saturation_count"] = fxm.saturation_count + r.fx.saturation_count;
    }
  }
  double latency = median_of(times);
  j["mode"] = mode;
  j["latency_ms"] = latency;
  j["macs"] = macs;
  j["gops"] = gops_from(macs, latency);
  emit(j);
}

struct BenchOpts {
  std::string model, image, qplan, tplan;
  long long budget = kDefaultBudgetBytes;
  int runs = 10;
  int warmups = 3;
  double power_watts = 0.0;
  bool has_power = false;
};

void run_bench(const BenchOpts& o) {
  ModelGraph model = load_model(o.model);
  Tensor image = load_normalize(o.image);
  QuantPlan plan = load_plan(o.qplan);
  FxModel fxm = quantize_model(model, plan);
  TilePlan tplan = o.tplan.empty()
                       ? search_tilings(fxm.graph, fxm.plan, o.budget)
                       : load_tile_plan(o.tplan);

  TiledResult r;
  for (int i = 0; i < o.warmups; i++) r = run_tiled(fxm, image, tplan);
  std::vector<double> times;
  for (int i = 0; i < o.runs; i++)
    times.push_back(time_ms([&] { r = run_tiled(fxm, image, tplan); }));

  double wall = median_of(times);
  double gops = gops_from(r.counters.macs, wall);
  json j{{"macs", r.counters.macs},
         {"bytes_loaded", r.counters.bytes_loaded},
         {"bytes_stored", r.counters.bytes_stored},
         {"tiles_executed", r.counters.tiles_executed},
         {"wall_time_ms", wall},
         {"gops", gops},
         {"class", r.fx.class_id},
         {"confidence", r.fx.confidence}};
  if (o.has_power) {
    if (o.power_watts <= 0.0) throw DataError("--power-watts must be > 0");
    j["gops_per_watt"] = gops / o.power_watts;
  }
  emit(j);
}

void run_serve(const std::string& host, int port, const std::string& log) {
  ReportServer server(host, uint16_t(port), log);
  std::signal(SIGINT, handle_stop);
  std::signal(SIGTERM, handle_stop);
  server.start();
  emit(json{{"listening", host}, {"port", server.port()}, {"log", log}});
  while (g_stop == 0 && !server.log_failed())
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  if (server.log_failed()) throw std::runtime_error("log write failed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rail surface inspection pipeline"};
  app.require_subcommand(1);
  app.set_config("--config");

  uint64_t seed = 42;
  app.add_option("--seed", seed, "seed for all randomized steps")
      ->capture_default_str();

  // init
  auto init_cmd = app.add_subcommand("init", "write the canonical network");
  init_cmd->fallthrough();
  auto init_out = std::make_shared<std::string>("model.rnet");
  init_cmd->add_option("-o,--out", *init_out, "output .rnet path")
      ->capture_default_str();
  init_cmd->callback([&seed, init_out] {
    ModelGraph m = canonical_railnet(seed);
    save_model(m, *init_out);
    emit(json{{"written", *init_out},
              {"layers", m.layers.size()},
              {"macs", mac_count(m)}});
  });

  // fuse
  auto fuse_cmd = app.add_subcommand("fuse", "fold BatchNorm and absorb ReLU");
  fuse_cmd->fallthrough();
  auto fuse_in = std::make_shared<std::string>();
  auto fuse_out = std::make_shared<std::string>();
  fuse_cmd->add_option("model", *fuse_in, "input .rnet")->required();
  fuse_cmd->add_option("-o,--out", *fuse_out, "output .rnet path")->required();
  fuse_cmd->callback([fuse_in, fuse_out] {
    ModelGraph m = load_model(*fuse_in);
    ModelGraph fused = fuse_pass(m);
    save_model(fused, *fuse_out);
    emit(json{{"written", *fuse_out},
              {"layers_before", m.layers.size()},
              {"layers_after", fused.layers.size()}});
  });

  // calibrate
  auto cal_cmd = app.add_subcommand(
      "calibrate", "derive per-layer fixed-point formats from sample images");
  cal_cmd->fallthrough();
  auto cal = std::make_shared<std::tuple<std::string, std::string, std::string>>();
  cal_cmd->add_option("--model", std::get<0>(*cal), "model .rnet")->required();
  cal_cmd->add_option("--data", std::get<1>(*cal), "directory of .png/.ppm images")
      ->required();
  cal_cmd->add_option("-o,--out", std::get<2>(*cal), "output .qplan path")
      ->required();
  cal_cmd->callback([cal] {
    ModelGraph m = load_model(std::get<0>(*cal));
    auto paths = list_images(std::get<1>(*cal));
    if (paths.empty())
      throw DataError("no .png/.ppm images in " + std::get<1>(*cal));
    auto images = load_images(paths);
    CalibStats stats = calibrate(m, images);
    QuantPlan plan = plan_formats(m, stats);
    save_plan(plan, std::get<2>(*cal));
    emit(json{{"written", std::get<2>(*cal)}, {"images", images.size()}});
  });

  // quantize
  auto q_cmd = app.add_subcommand(
      "quantize", "quantize parameters per a plan and report saturation");
  q_cmd->fallthrough();
  auto qo = std::make_shared<std::tuple<std::string, std::string, std::string>>();
  q_cmd->add_option("--model", std::get<0>(*qo), "model .rnet")->required();
  q_cmd->add_option("--qplan", std::get<1>(*qo), "quantization plan")->required();
  q_cmd->add_option("--data", std::get<2>(*qo),
                    "optional image directory for a float-vs-fx parity report");
  q_cmd->callback([qo] {
    ModelGraph m = load_model(std::get<0>(*qo));
    QuantPlan plan = load_plan(std::get<1>(*qo));
    FxModel fxm = quantize_model(m, plan);
    json j{{"saturation_count", fxm.saturation_count}};
    if (!std::get<2>(*qo).empty()) {
      auto paths = list_images(std::get<2>(*qo));
      if (paths.empty())
        throw DataError("no .png/.ppm images in " + std::get<2>(*qo));
      auto images = load_images(paths);
      ParityReport pr = parity_report(m, fxm, images);
      j["images"] = images.size();
      j["top1_match_rate"] = pr.top1_match_rate;
      j["mean_abs_logit_err"] = pr.mean_abs_logit_err;
      j["max_abs_logit_err"] = pr.max_abs_logit_err;
      j["saturation_count"] = pr.saturation_count;
    }
    emit(j);
  });

  // infer
  auto infer_cmd = app.add_subcommand("infer", "classify one image");
  infer_cmd->fallthrough();
  auto io = std::make_shared<InferOpts>();
  infer_cmd->add_option("--model", io->model, "model .rnet")->required();
  infer_cmd->add_option("image", io->image, "input image")->required();
  infer_cmd->add_option("--qplan", io->qplan,
                        "quantization plan (required for fixed-point modes)");
  infer_cmd->add_option("--tplan", io->tplan,
                        "tile plan (default: search under --budget)");
  infer_cmd->add_option("--budget", io->budget, "tile buffer budget in bytes")
      ->capture_default_str();
  infer_cmd->add_option("--runs", io->runs, "timed runs (median reported)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  infer_cmd->add_option("--warmups", io->warmups, "untimed warmup runs")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  auto mode_group = infer_cmd->add_option_group("mode");
  mode_group->add_flag("--float", io->use_float, "float32 reference");
  mode_group->add_flag("--naive", io->use_naive, "fixed point, untiled");
  mode_group->add_flag("--tiled", io->use_tiled, "fixed point, tiled (default)");
  mode_group->require_option(0, 1);
  infer_cmd->callback([io] { run_infer(*io); });

  // bench
  auto bench_cmd =
      app.add_subcommand("bench", "tiled run with counters and GOPS");
  bench_cmd->fallthrough();
  auto bo = std::make_shared<BenchOpts>();
  bench_cmd->add_option("--model", bo->model, "model .rnet")->required();
  bench_cmd->add_option("--qplan", bo->qplan, "quantization plan")->required();
  bench_cmd->add_option("image", bo->image, "input image")->required();
  bench_cmd->add_option("--tplan", bo->tplan,
                        "tile plan (default: search under --budget)");
  bench_cmd->add_option("--budget", bo->budget, "tile buffer budget in bytes")
      ->capture_default_str();
  bench_cmd->add_option("--runs", bo->runs, "timed runs (median reported)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  bench_cmd->add_option("--warmups", bo->warmups, "untimed warmup runs")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  bench_cmd
      ->add_option("--power-watts", bo->power_watts,
                   "board power; adds gops_per_watt")
      ->check(CLI::PositiveNumber);
  bench_cmd->callback([bo, bench_cmd] {
    bo->has_power = bench_cmd->count("--power-watts") > 0;
    run_bench(*bo);
  });

  // dataset
  auto ds_cmd = app.add_subcommand("dataset", "dataset preparation");
  ds_cmd->fallthrough();
  ds_cmd->require_subcommand(1);

  auto split_cmd =
      ds_cmd->add_subcommand("split", "split a directory into manifests");
  split_cmd->fallthrough();
  auto so = std::make_shared<std::pair<std::string, std::string>>();
  split_cmd->add_option("dir", so->first, "directory of .png/.ppm images")
      ->required();
  split_cmd->add_option("-o,--out", so->second, "manifest output directory")
      ->capture_default_str()
      ->default_val(".");
  split_cmd->callback([&seed, so] {
    auto paths = list_images(so->first);
    DatasetSplit split = split_dataset(paths, seed);
    namespace fs = std::filesystem;
    fs::create_directories(so->second);
    std::string train = (fs::path(so->second) / "train.txt").string();
    std::string test = (fs::path(so->second) / "test.txt").string();
    std::string val = (fs::path(so->second) / "val.txt").string();
    write_manifest(train, split.train);
    write_manifest(test, split.test);
    write_manifest(val, split.val);
    emit(json{{"train", split.train.size()},
              {"test", split.test.size()},
              {"val", split.val.size()},
              {"manifests", json{{"train", train}, {"test", test}, {"val", val}}}});
  });

  auto aug_cmd = ds_cmd->add_subcommand("augment", "augment one image");
  aug_cmd->fallthrough();
  struct AugOpts {
    std::string in, out, flip = "none";
    bool blur = false, noise = false;
    double sigma = 8.0;
    int rotate = 0;
  };
  auto ao = std::make_shared<AugOpts>();
  aug_cmd->add_option("input", ao->in, "input image")->required();
  aug_cmd->add_option("output", ao->out, "output .png path")->required();
  aug_cmd->add_flag("--blur", ao->blur, "3x3 binomial blur");
  aug_cmd->add_flag("--noise", ao->noise, "seeded Gaussian noise");
  aug_cmd->add_option("--noise-sigma", ao->sigma, "noise sigma in pixel units")
      ->capture_default_str();
  aug_cmd->add_option("--flip", ao->flip, "none|h|v")
      ->check(CLI::IsMember({"none", "h", "v"}))
      ->capture_default_str();
  aug_cmd->add_option("--rotate", ao->rotate, "quarter turns clockwise, 0..3")
      ->check(CLI::Range(0, 3))
      ->capture_default_str();
  aug_cmd->callback([&seed, ao] {
    ImageU8 img = load_image(ao->in);
    AugmentSpec spec;
    spec.blur = ao->blur;
    spec.noise = ao->noise;
    spec.noise_sigma = ao->sigma;
    spec.flip = ao->flip == "h"   ? AugmentSpec::Flip::Horizontal
                : ao->flip == "v" ? AugmentSpec::Flip::Vertical
                                  : AugmentSpec::Flip::None;
    spec.rotate_k = ao->rotate;
    spec.seed = seed;
    save_png(augment(img, spec), ao->out);
    emit(json{{"written", ao->out}});
  });

  auto synth_cmd =
      ds_cmd->add_subcommand("synth", "generate synthetic inspection frames");
  synth_cmd->fallthrough();
  auto yo = std::make_shared<std::pair<std::string, int>>("", 16);
  synth_cmd->add_option("-o,--out", yo->first, "output directory")->required();
  synth_cmd->add_option("-n,--count", yo->second, "number of images")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  synth_cmd->callback([&seed, yo] {
    namespace fs = std::filesystem;
    fs::create_directories(yo->first);
    for (int i = 0; i < yo->second; i++) {
      char name[32];
      std::snprintf(name, sizeof(name), "synth_%04d.png", i);
      save_png(synthetic_image(seed + uint64_t(i)),
               (fs::path(yo->first) / name).string());
    }
    emit(json{{"written", yo->second}, {"dir", yo->first}});
  });

  // serve
  auto serve_cmd = app.add_subcommand("serve", "fault-report sink");
  serve_cmd->fallthrough();
  auto vo = std::make_shared<std::tuple<std::string, int, std::string>>(
      "127.0.0.1", 7462, "reports.jsonl");
  serve_cmd->add_option("--host", std::get<0>(*vo), "listen address")
      ->capture_default_str();
  serve_cmd->add_option("--port", std::get<1>(*vo), "listen port (0 = ephemeral)")
      ->check(CLI::Range(0, 65535))
      ->capture_default_str();
  serve_cmd->add_option("--log", std::get<2>(*vo), "JSON-lines log path")
      ->capture_default_str();
  serve_cmd->callback([vo] {
    run_serve(std::get<0>(*vo), std::get<1>(*vo), std::get<2>(*vo));
  });

  // send
  auto send_cmd = app.add_subcommand("send", "send one fault report");
  send_cmd->fallthrough();
  struct SendOpts {
    std::string host = "127.0.0.1";
    int port = 7462;
    int device = 0;
    uint64_t timestamp_ms = 0;
    uint64_t position_mm = 0;
    int class_id = 0;
    int confidence_bp = 0;
    int timeout_ms = 2000;
  };
  auto no = std::make_shared<SendOpts>();
  send_cmd->add_option("--host", no->host)->capture_default_str();
  send_cmd->add_option("--port", no->port)->check(CLI::Range(1, 65535))->required();
  send_cmd->add_option("--device", no->device, "device id")
      ->check(CLI::Range(0, 65535))
      ->capture_default_str();
  send_cmd->add_option("--timestamp-ms", no->timestamp_ms,
                       "Unix epoch milliseconds (default: now)");
  send_cmd->add_option("--position-mm", no->position_mm, "track position")
      ->capture_default_str();
  send_cmd->add_option("--class", no->class_id, "class id")
      ->check(CLI::Range(0, 255))
      ->capture_default_str();
  send_cmd->add_option("--confidence-bp", no->confidence_bp,
                       "confidence in basis points")
      ->check(CLI::Range(0, 10000))
      ->capture_default_str();
  send_cmd->add_option("--timeout-ms", no->timeout_ms)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  send_cmd->callback([no, send_cmd] {
    FaultReport r;
    r.device_id = uint16_t(no->device);
    r.timestamp_ms =
        send_cmd->count("--timestamp-ms") ? no->timestamp_ms : now_ms();
    r.track_position_mm = no->position_mm;
    r.class_id = uint8_t(no->class_id);
    r.confidence_bp = uint16_t(no->confidence_bp);
    send_report(no->host, uint16_t(no->port), r, no->timeout_ms);
    emit(json{{"acked", true}});
  });

  // reports
  auto rep_cmd = app.add_subcommand("reports", "list logged fault reports");
  rep_cmd->fallthrough();
  struct RepOpts {
    std::string log;
    int class_id = -1;
    uint64_t from_ms = 0, to_ms = 0;
  };
  auto ro = std::make_shared<RepOpts>();
  rep_cmd->add_option("--log", ro->log, "JSON-lines log path")->required();
  rep_cmd->add_option("--class", ro->class_id, "filter by class id")
      ->check(CLI::Range(0, 255));
  rep_cmd->add_option("--from-ms", ro->from_ms, "inclusive timestamp lower bound");
  rep_cmd->add_option("--to-ms", ro->to_ms, "inclusive timestamp upper bound");
  rep_cmd->callback([ro, rep_cmd] {
    ReportFilter f;
    if (rep_cmd->count("--class")) f.class_id = ro->class_id;
    if (rep_cmd->count("--from-ms")) f.from_ms = ro->from_ms;
    if (rep_cmd->count("--to-ms")) f.to_ms = ro->to_ms;
    ReportList list = list_reports(ro->log, f);
    json entries = json::array();
    for (const auto& e : list.entries) {
      entries.push_back(json{{"device_id", e.report.device_id},
                             {"timestamp_ms", e.report.timestamp_ms},
                             {"track_position_mm", e.report.track_position_mm},
                             {"class_id", e.report.class_id},
                             {"confidence_bp", e.report.confidence_bp},
                             {"received_at_ms", e.received_at_ms}});
    }
    json malformed = json::array();
    for (const auto& [line, what] : list.malformed)
      malformed.push_back(json{{"line", line}, {"error", what}});
    emit(json{{"reports", entries}, {"malformed", malformed}});
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
