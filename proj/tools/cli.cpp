#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "uformer/accounting.hpp"
#include "uformer/checkpoint.hpp"
#include "uformer/error.hpp"
#include "uformer/gradcheck.hpp"
#include "uformer/metrics.hpp"
#include "uformer/parallel.hpp"
#include "uformer/run_config.hpp"
#include "uformer/train.hpp"

namespace fs = std::filesystem;

namespace uformer::cli {

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool f64 = false;
  bool y_channel = false;
  bool identity = false;
  bool resume = false;
  std::int64_t tile = 0;
  std::int64_t overlap = 32;
  std::int64_t size = 0;
  std::int64_t stop_at = 0;
  double inject_fault = 0.0;
  std::string out;
  std::string checkpoint;
  std::string input;
  std::string csv;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

RunConfig load(const Options& o, bool required) {
  RunConfig rc;
  if (!o.config.empty()) {
    if (!fs::exists(o.config)) throw ConfigError("config file not found: " + o.config);
    rc = load_run_config(o.config);
  } else if (required) {
    throw ConfigError("--config is required");
  } else {
    rc.model = UformerConfig::tiny();
  }
  if (o.seed) rc.train.seed = *o.seed;
  rc.deterministic = rc.deterministic || o.deterministic;
  rc.f64 = rc.f64 || o.f64;
  if (!o.checkpoint.empty()) rc.paths.checkpoint = o.checkpoint;
  if (!o.out.empty()) rc.paths.out = o.out;
  rc.validate();
  set_deterministic_mode(rc.deterministic);
  return rc;
}

int cmd_build(const Options& o, std::ostream& out) {
  const auto rc = load(o, false);
  const auto& m = rc.model;
  const auto extent = o.size > 0 ? o.size : std::max(m.min_extent(), rc.train.patch_size);
  const auto model = build<float>(m, rc.train.seed, BuildOptions{o.identity});
  std::vector<StageShape> trace;
  {
    NoGradGuard guard;
    forward(Image::filled(m.in_channels, extent, extent, 0.5).to_tensor<float>(), model, &trace);
  }
  for (const auto& s : trace) out << s.name << " " << shape_str(s.shape) << "\n";
  out << "parameters " << model.parameter_count() << "\n";
  if (!rc.paths.checkpoint.empty()) {
    if (rc.f64) {
      save_checkpoint(rc.paths.checkpoint, serialize(rc), build<double>(m, rc.train.seed, BuildOptions{o.identity}));
    } else {
      save_checkpoint(rc.paths.checkpoint, serialize(rc), model);
    }
    out << "wrote " << rc.paths.checkpoint << "\n";
  }
  return kOk;
}

int cmd_count(const Options& o, std::ostream& out) {
  const auto rc = load(o, true);
  const auto extent = o.size > 0 ? o.size : kReferenceExtent;
  const auto report = count_macs(rc.model, extent, extent);
  print_table(out, report);
  if (!o.csv.empty()) {
    std::ofstream f(o.csv);
    if (!f) throw ConfigError("cannot write " + o.csv);
    write_csv(f, report);
  }
  return kOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  const auto rc = load(o, false);
  GradcheckOptions go;
  go.seed = rc.train.seed;
  go.inject_fault = o.inject_fault;
  auto results = primitive_suite(go);
  results.push_back(model_check(rc.model, o.size > 0 ? o.size : 16, go));
  std::vector<std::string> failed;
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-28s rel_err %.3e  tol %.0e  entries %lld  %s\n", r.name.c_str(), r.rel_error,
                  r.tolerance, static_cast<long long>(r.entries), r.passed() ? "ok" : "FAIL");
    out << line;
    if (!r.passed()) failed.push_back(r.name);
  }
  if (failed.empty()) return kOk;
  out << "failed:";
  for (const auto& f : failed) out << " " << f;
  out << "\n";
  return kFailure;
}

template <typename T>
int train_typed(const RunConfig& rc, const Options& o, std::ostream& out) {
  auto model = build<T>(rc.model, rc.train.seed);
  OptimizerState<T> state;
  if (o.resume) {
    if (rc.paths.checkpoint.empty()) throw ConfigError("--resume needs a checkpoint path");
    const auto ck = read_checkpoint<T>(rc.paths.checkpoint);
    state = OptimizerState<T>::init(model.parameters());
    restore(ck, model, &state);
    out << "resumed at step " << state.step << "\n";
  }
  const auto data = rc.paths.data.empty() ? make_synthetic_data(rc.train, rc.model.in_channels)
                                          : load_training_data(rc.paths.data, rc.train);

  std::ofstream log_file;
  TrainIo io;
  io.checkpoint = rc.paths.checkpoint;
  io.config_text = serialize(rc);
  io.stop_at = o.stop_at;
  if (!rc.paths.out.empty()) {
    fs::create_directories(rc.paths.out);
    log_file.open(fs::path(rc.paths.out) / "train_log.csv", o.resume ? std::ios::app : std::ios::trunc);
    io.log = &log_file;
  } else {
    io.log = &out;
  }
  const auto r = train_loop(model, state, rc.train, data, io);
  out << "steps " << r.steps << "  loss " << fmt("%.6g", r.first_loss) << " -> " << fmt("%.6g", r.last_loss) << "\n";
  out << "train_psnr " << fmt("%.4f", r.train_psnr) << "\n";
  if (!data.val_clean.empty()) {
    out << "val_psnr " << fmt("%.4f", r.val_psnr) << "  input " << fmt("%.4f", r.val_input_psnr) << "\n";
  }
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  const auto rc = load(o, true);
  return rc.f64 ? train_typed<double>(rc, o, out) : train_typed<float>(rc, o, out);
}

struct LoadedModel {
  Restorer restorer;
  std::int64_t min_extent = 1;
};

template <typename T>
LoadedModel load_typed(const fs::path& path, const UformerConfig& config) {
  auto model = std::make_shared<UformerParams<T>>(build<T>(config, 0));
  restore(read_checkpoint<T>(path), *model);
  auto inner = make_restorer(*model);
  return {[model, inner](const Image& img) { return inner(img); }, config.min_extent()};
}

LoadedModel load_model(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(o.checkpoint)) throw ConfigError("checkpoint not found: " + o.checkpoint);
  const auto rc = parse_run_config(read_checkpoint_config(o.checkpoint));
  rc.model.validate();
  set_deterministic_mode(rc.deterministic || o.deterministic);
  return rc.f64 ? load_typed<double>(o.checkpoint, rc.model) : load_typed<float>(o.checkpoint, rc.model);
}

Image run_model(const LoadedModel& m, const Image& img, const Options& o, TileStats* stats) {
  if (o.tile > 0) return tiled_inference(m.restorer, img, o.tile, o.overlap, m.min_extent, stats);
  if (img.height < m.min_extent || img.width < m.min_extent) {
    throw ConfigError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                      " is below the model minimum of " + std::to_string(m.min_extent) + "; use --tile");
  }
  if (stats) *stats = {1, 1};
  return m.restorer(img);
}

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path().filename());
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.input.empty()) throw ConfigError("--input is required");
  const fs::path root(o.input);
  const auto clean = png_files(root / "clean");
  const auto degraded = png_files(root / "degraded");
  for (const auto& f : clean)
    if (!std::binary_search(degraded.begin(), degraded.end(), f))
      throw ConfigError("unpaired file: clean/" + f.string() + " has no degraded counterpart");
  for (const auto& f : degraded)
    if (!std::binary_search(clean.begin(), clean.end(), f))
      throw ConfigError("unpaired file: degraded/" + f.string() + " has no clean counterpart");
  if (clean.empty()) throw ConfigError("no PNG pairs under " + root.string());

  const auto model = load_model(o);
  const auto view = [&](const Image& img) { return o.y_channel && img.channels == 3 ? rgb_to_y(img) : img; };

  std::ostringstream csv;
  csv << "name,psnr,ssim,input_psnr,input_ssim\n";
  double sp = 0, ss = 0, sip = 0, sis = 0;
  for (const auto& f : clean) {
    const auto target = read_png(root / "clean" / f);
    const auto input = read_png(root / "degraded" / f);
    if (!target.same_shape(input)) throw ConfigError("size mismatch for pair " + f.string());
    const auto restored = quantize8(run_model(model, input, o, nullptr));
    const auto a = view(restored), b = view(target), c = view(input);
    const double p = psnr(a, b), s = ssim(a, b), ip = psnr(c, b), is = ssim(c, b);
    sp += p, ss += s, sip += ip, sis += is;
    csv << f.string() << "," << fmt("%.6f", p) << "," << fmt("%.6f", s) << "," << fmt("%.6f", ip) << ","
        << fmt("%.6f", is) << "\n";
  }
  const double n = static_cast<double>(clean.size());
  csv << "mean," << fmt("%.6f", sp / n) << "," << fmt("%.6f", ss / n) << "," << fmt("%.6f", sip / n) << ","
      << fmt("%.6f", sis / n) << "\n";
  out << csv.str();
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw ConfigError("cannot write " + o.out);
    f << csv.str();
  }
  return kOk;
}

int cmd_infer(const Options& o, std::ostream& out) {
  if (o.input.empty()) throw ConfigError("--input is required");
  if (o.out.empty()) throw ConfigError("--out is required");
  const auto model = load_model(o);
  const auto img = read_png(o.input);
  TileStats stats;
  const auto restored = run_model(model, img, o, &stats);
  write_png(o.out, restored);
  out << "tiles " << stats.rows << "x" << stats.cols << " = " << stats.count() << "\n";
  out << "wrote " << o.out << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Uformer image restoration"};
  app.require_subcommand(1);
  Options o;

  const auto add_common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Run config file");
    c->add_option("--seed", o.seed, "Override train.seed");
    c->add_flag("--deterministic", o.deterministic, "Single-threaded, bitwise-reproducible execution");
    c->add_flag("--f64", o.f64, "Run the model in double precision");
  };
  const auto add_tiles = [&](CLI::App* c) {
    c->add_option("--tile", o.tile, "Tile size; 0 runs the whole image at once")->check(CLI::NonNegativeNumber);
    c->add_option("--overlap", o.overlap, "Overlap between neighbouring tiles")->check(CLI::NonNegativeNumber);
  };

  auto* build_cmd = app.add_subcommand("build", "Instantiate a model, print stage shapes, optionally save it");
  add_common(build_cmd);
  build_cmd->add_option("--size", o.size, "Square input extent for the shape trace");
  build_cmd->add_option("--checkpoint", o.checkpoint, "Write the initialized model here");
  build_cmd->add_flag("--identity", o.identity, "Zero the output projection so the model returns its input");

  auto* count_cmd = app.add_subcommand("count", "Parameter and MAC report");
  add_common(count_cmd);
  count_cmd->add_option("--size", o.size, "Square input extent (default 256)");
  count_cmd->add_option("--out", o.csv, "Also write the report as CSV");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  add_common(grad_cmd);
  grad_cmd->add_option("--size", o.size, "Input extent of the end-to-end check (default 16)");
  grad_cmd->add_option("--inject-fault", o.inject_fault)->group("");

  auto* train_cmd = app.add_subcommand("train", "Train from a run config");
  add_common(train_cmd);
  train_cmd->add_option("--out", o.out, "Output directory for train_log.csv");
  train_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint path (overrides paths.checkpoint)");
  train_cmd->add_flag("--resume", o.resume, "Continue from the checkpoint");
  train_cmd->add_option("--stop-at", o.stop_at, "Checkpoint and exit once this step is reached");

  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM over <input>/clean and <input>/degraded");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--input", o.input, "Directory with clean/ and degraded/")->required();
  eval_cmd->add_option("--out", o.out, "CSV report path");
  eval_cmd->add_flag("--y-channel", o.y_channel, "Measure on the luma channel");
  eval_cmd->add_flag("--deterministic", o.deterministic);
  add_tiles(eval_cmd);

  auto* infer_cmd = app.add_subcommand("infer", "Restore one PNG");
  infer_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  infer_cmd->add_option("--input", o.input, "Input PNG")->required();
  infer_cmd->add_option("--out", o.out, "Output PNG")->required();
  infer_cmd->add_flag("--deterministic", o.deterministic);
  add_tiles(infer_cmd);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*build_cmd) return cmd_build(o, out);
    if (*count_cmd) return cmd_count(o, out);
    if (*grad_cmd) return cmd_gradcheck(o, out);
    if (*train_cmd) return cmd_train(o, out);
    if (*eval_cmd) return cmd_eval(o, out);
    if (*infer_cmd) return cmd_infer(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace uformer::cli
