#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "solidmark/diffusion.hpp"
#include "solidmark/experiments.hpp"
#include "solidmark/imgdata.hpp"
#include "solidmark/outpaint.hpp"
#include "solidmark/solidmark.hpp"

// Command-line front end. Every command writes its resolved configuration to
// <out>/config.json; wall-clock times go to <out>/run.log only, so data files
// are byte-identical across reruns.
namespace solidmark::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"duplication", "augmentation", "mitigation", "ablation",
                                              "pathology",   "monobias",     "calibrate"};
  return names;
}

// ---------------------------------------------------------------------------
// Config files: a JSON object keyed by long flag names. Values fill only
// options absent from the command line.

inline json read_json_file(const fs::path& path) {
  try {
    return json::parse(imgdata::read_text(path));
  } catch (const json::exception& e) {
    throw ParseError("config " + path.string() + ": " + e.what());
  }
}

inline std::vector<std::string> json_to_results(const json& v, const std::string& key) {
  auto scalar = [&](const json& x) -> std::string {
    if (x.is_string()) return x.get<std::string>();
    if (x.is_boolean()) return x.get<bool>() ? "true" : "false";
    if (x.is_number()) return x.dump();
    throw ConfigError("config key '" + key + "' has an unsupported value " + x.dump());
  };
  std::vector<std::string> out;
  if (v.is_array()) {
    for (const auto& x : v) out.push_back(scalar(x));
  } else {
    out.push_back(scalar(v));
  }
  return out;
}

inline void apply_config(CLI::App& app, const json& cfg) {
  if (!cfg.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    CLI::Option* opt = nullptr;
    for (CLI::Option* o : app.get_options())
      if (o->check_lname(key)) opt = o;
    if (!opt) throw ConfigError("config key '" + key + "' is not an option of '" + app.get_name() + "'");
    if (opt->count() > 0 || key == "config") continue;
    opt->add_result(json_to_results(value, key));
    opt->run_callback();
  }
}

// ---------------------------------------------------------------------------
// Output helpers

inline void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  imgdata::write_text(path, text);
}

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

// Sidecar log; the only file that differs between identical reruns.
class RunLog {
 public:
  RunLog(const fs::path& dir, const std::string& command) : path_(dir / "run.log") {
    fs::create_directories(dir);
    line("start " + command);
  }
  void line(const std::string& msg) const {
    std::ofstream f(path_, std::ios::app);
    f << timestamp() << ' ' << msg << '\n';
  }

 private:
  fs::path path_;
};

inline void write_config(const fs::path& dir, const std::string& command, json blocks) {
  json rc = {{"command", command}, {"version", kVersion}};
  for (auto& [k, v] : blocks.items()) rc[k] = v;
  write_file(dir / "config.json", rc.dump(2) + "\n");
}

inline unsigned default_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

// ---------------------------------------------------------------------------
// Shared flag groups

struct TrainFlags {
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-3;
  int width = 16;
  std::uint64_t init_seed = 0;
  bool unconditional = false;

  void add(CLI::App& app) {
    app.add_option("--epochs", epochs, "training epochs")->capture_default_str();
    app.add_option("--batch-size", batch_size, "minibatch size")->capture_default_str();
    app.add_option("--lr", lr, "Adam learning rate")->capture_default_str();
    app.add_option("--width", width, "U-Net base channel width")->capture_default_str();
    app.add_option("--init-seed", init_seed, "parameter initialization seed")->capture_default_str();
    app.add_flag("--unconditional", unconditional, "ignore captions");
  }

  diffusion::TrainConfig train_config(std::uint64_t seed) const {
    diffusion::TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.learning_rate = lr;
    c.seed = seed;
    c.validate();
    return c;
  }

  experiments::ModelSpec model_spec() const {
    if (width < 1) throw ConfigError("width must be >= 1");
    experiments::ModelSpec m;
    m.base_width = width;
    m.init_seed = init_seed;
    m.mode = unconditional ? diffusion::ConditionMode::unconditional : diffusion::ConditionMode::conditional;
    return m;
  }
};

struct EvalFlags {
  std::vector<double> deltas{0.1, 0.05, 0.005};
  int repeats = 1;
  int subset_size = 0;  // 0: whole dataset
  std::string variant = "pixel";
  int remask_period = outpaint::kDefaultRemaskPeriod;
  int sampling_steps = 50;
  std::string noising = "standard";
  std::string transform = "identity";
  double gni = 0.0;
  std::string caption_method = "none";
  int caption_iterations = 0;

  void add(CLI::App& app) {
    app.add_option("--delta", deltas, "eidetic threshold (repeatable)")->capture_default_str();
    app.add_option("--repeats", repeats, "outpainting trials per image (r)")->capture_default_str();
    app.add_option("--subset-size", subset_size, "images evaluated (n); 0 means all")->capture_default_str();
    app.add_option("--variant", variant, "pixel or latent")->capture_default_str();
    app.add_option("--remask-period", remask_period, "latent-variant remask period (s)")->capture_default_str();
    app.add_option("--sampling-steps", sampling_steps, "reverse steps per outpainting")->capture_default_str();
    app.add_option("--noising", noising, "known-region noising: standard or literal")->capture_default_str();
    app.add_option("--transform", transform, "query transform, e.g. crop1, blur2, rotate-1")->capture_default_str();
    app.add_option("--gni", gni, "Gaussian noise magnitude on condition embeddings")->capture_default_str();
    app.add_option("--caption-method", caption_method, "none, rt, cwr or rna")->capture_default_str();
    app.add_option("--caption-iterations", caption_iterations, "caption rewrite iterations")->capture_default_str();
  }

  EvalConfig eval_config(std::uint64_t seed, int workers) const {
    EvalConfig c;
    c.thresholds = metrics::ThresholdSet::from(deltas);
    c.repeats = repeats;
    if (subset_size < 0) throw ConfigError("subset-size must be >= 0");
    if (subset_size > 0) c.subset_size = subset_size;
    c.seed = seed;
    c.query_transform = imgdata::parse_transform(transform);
    c.perturbation.gni_magnitude = gni;
    if (gni < 0) throw ConfigError("gni magnitude must be >= 0");
    c.perturbation.caption_method = captions::parse_method(caption_method);
    c.perturbation.caption_iterations = caption_iterations;
    if (caption_iterations < 0) throw ConfigError("caption-iterations must be >= 0");
    c.workers = workers;
    c.validate();
    return c;
  }

  outpaint::OutpaintConfig outpaint_config() const {
    outpaint::OutpaintConfig c;
    c.remask_period = remask_period;
    c.sampling_steps = sampling_steps;
    if (noising == "standard") c.noising = outpaint::KnownRegionNoising::standard;
    else if (noising == "literal") c.noising = outpaint::KnownRegionNoising::literal;
    else throw ConfigError("noising must be standard or literal, got '" + noising + "'");
    c.validate();
    return c;
  }

  json outpaint_json() const {
    return {{"variant", variant},
            {"remask_period", remask_period},
            {"sampling_steps", sampling_steps},
            {"noising", noising}};
  }
};

inline fs::path checkpoint_path(const fs::path& p) {
  return fs::is_directory(p) ? p / "model.smck" : p;
}

inline void print_report(std::ostream& out, const MemorizationReport& rep) {
  out << "images " << rep.size() << "  repeats " << rep.repeats << "  seed " << rep.seed << "\n";
  out << "delta      count   fraction  chance\n";
  for (std::size_t i = 0; i < rep.deltas.size(); ++i) {
    out << std::left << std::setw(10) << format_number(rep.deltas[i]) << ' ' << std::setw(7) << rep.counts[i]
        << ' ' << std::setw(9) << std::setprecision(4) << rep.fraction(i) << ' ' << rep.chance_baseline[i] << "\n";
  }
}

inline void print_run(std::ostream& out, const experiments::ExperimentRun& run) {
  out << "experiment " << run.name << "\n";
  for (std::size_t a = 0; a < run.arms.size(); ++a) {
    const auto& arm = run.arms[a];
    if (!arm.ok) {
      out << "  " << arm.name << ": FAILED " << arm.error << "\n";
      continue;
    }
    out << "  " << arm.name << " (n=" << arm.n << ")";
    for (std::size_t i = 0; i < arm.deltas.size(); ++i) {
      out << "  d=" << format_number(arm.deltas[i]) << ":" << arm.counts[i];
      if (i < arm.chance.size()) out << " [chance " << std::setprecision(3) << arm.chance[i] * arm.n << "]";
      if (const auto pc = experiments::percent_change(run, a, i)) out << " " << format_number(*pc) << "%";
    }
    out << "\n";
  }
}

inline void write_run(const fs::path& dir, const experiments::ExperimentRun& run) {
  write_file(dir / "summary.json", experiments::run_summary(run).dump(2) + "\n");
  write_file(dir / "results.csv", experiments::run_csv(run));
  write_file(dir / "plot.csv", experiments::plot_data_csv(run));
  for (const auto& arm : run.arms)
    if (arm.report) write_file(dir / "arms" / (arm.name + ".csv"), report_csv(*arm.report));
}

// ---------------------------------------------------------------------------
// Application

struct Cli {
  CLI::App app{"SolidMark: per-image memorization evaluation for diffusion models", "solidmark"};
  std::ostream& out;
  std::ostream& err;

  // shared
  std::uint64_t seed = 0;
  std::string config_path;
  std::string out_dir;
  std::string in_dir;
  std::string data_dir;
  std::string model_path;
  int workers = static_cast<int>(default_workers());

  // dataset
  imgdata::SyntheticConfig synth;
  int thickness = 4;
  std::string placement = "border";
  std::string color = "grayscale";
  std::vector<std::string> dup_ids;
  std::vector<int> dup_counts;
  int dup_random = 0;
  bool shared_keys = false;

  // train
  TrainFlags tf;
  bool resume = false;

  // evaluate
  EvalFlags ef;
  int save_samples = 0;

  // experiment
  std::string experiment;
  std::vector<int> levels{1, 4, 16};
  int images_per_level = 10;
  int control_images = 40;
  std::vector<std::string> transforms;
  std::vector<std::string> methods;
  std::string ablation_kind = "thickness";
  std::vector<std::string> values;
  int queries = 5000;
  int fixture_size = 16;

  CLI::App* c_generate = nullptr;
  CLI::App* c_augment = nullptr;
  CLI::App* c_duplicate = nullptr;
  CLI::App* c_train = nullptr;
  CLI::App* c_evaluate = nullptr;
  CLI::App* c_experiment = nullptr;
  CLI::App* c_report = nullptr;

  Cli(std::ostream& o, std::ostream& e) : out(o), err(e) {
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    auto* dataset = app.add_subcommand("dataset", "generate, augment or duplicate datasets");
    dataset->require_subcommand(1);

    c_generate = dataset->add_subcommand("generate", "write a synthetic captioned dataset");
    common(*c_generate, true);
    c_generate->add_option("--count", synth.count, "number of images")->capture_default_str();
    c_generate->add_option("--base-size", synth.base_size, "image side in pixels")->capture_default_str();
    c_generate->add_option("--classes", synth.num_classes, "number of classes")->capture_default_str();
    c_generate->add_option("--channels", synth.channels, "1 or 3")->capture_default_str();

    c_augment = dataset->add_subcommand("augment", "stamp key patterns onto a dataset");
    common(*c_augment, true);
    c_augment->add_option("--in", in_dir, "source dataset directory")->required();
    pattern_flags(*c_augment);

    c_duplicate = dataset->add_subcommand("duplicate", "inject duplicates into an augmented dataset");
    common(*c_duplicate, true);
    c_duplicate->add_option("--in", in_dir, "source dataset directory")->required();
    c_duplicate->add_option("--id", dup_ids, "image id to duplicate (repeatable)");
    c_duplicate->add_option("--count", dup_counts, "total copies per id; one value applies to all");
    c_duplicate->add_option("--random", dup_random, "duplicate this many ids chosen by --seed");
    c_duplicate->add_flag("--shared-keys", shared_keys, "copies share the original's key");

    c_train = app.add_subcommand("train", "train a denoiser on a dataset (resumable)");
    common(*c_train, true);
    c_train->add_option("--data", data_dir, "dataset directory")->required();
    tf.add(*c_train);
    c_train->add_flag("--resume", resume, "continue from <out>/model.smck if present");

    c_evaluate = app.add_subcommand("evaluate", "per-image memorization report for a trained model");
    common(*c_evaluate, true);
    c_evaluate->add_option("--data", data_dir, "augmented dataset directory")->required();
    c_evaluate->add_option("--model", model_path, "checkpoint file or training directory")->required();
    ef.add(*c_evaluate);
    c_evaluate->add_option("--save-samples", save_samples, "write trial-0 outpaintings of the first N rows");

    c_experiment = app.add_subcommand("experiment", "run a named experiment");
    common(*c_experiment, true);
    c_experiment->add_option("name", experiment, "one of: " + CLI::detail::join(experiment_names(), ", "))
        ->required();
    c_experiment->add_option("--data", data_dir, "dataset directory (generated when omitted)");
    c_experiment->add_option("--model", model_path, "checkpoint; skips training where applicable");
    tf.add(*c_experiment);
    ef.add(*c_experiment);
    pattern_flags(*c_experiment);
    c_experiment->add_option("--count", synth.count, "generated dataset size")->capture_default_str();
    c_experiment->add_option("--base-size", synth.base_size, "generated image side")->capture_default_str();
    c_experiment->add_option("--level", levels, "duplication level (repeatable)")->capture_default_str();
    c_experiment->add_option("--images-per-level", images_per_level, "originals per duplication level")
        ->capture_default_str();
    c_experiment->add_option("--control-images", control_images, "originals at level 1")->capture_default_str();
    c_experiment->add_option("--shared-keys", shared_keys, "duplicates share keys")->capture_default_str();
    c_experiment->add_option("--transforms", transforms, "augmentation arms, e.g. crop1 blur1 rotate1");
    c_experiment->add_option("--method", methods, "mitigation arms, e.g. gni:0.1 rt:2 cwr:1 rna:1");
    c_experiment->add_option("--kind", ablation_kind, "ablation: thickness, placement or color")
        ->capture_default_str();
    c_experiment->add_option("--value", values, "ablation values (repeatable)");
    c_experiment->add_option("--queries", queries, "calibration queries")->capture_default_str();
    c_experiment->add_option("--fixture-size", fixture_size, "monobias image side")->capture_default_str();

    c_report = app.add_subcommand("report", "recount an evaluation's CSV and print the table");
    common(*c_report, false);
    c_report->add_option("--in", in_dir, "evaluation output directory")->required();
    c_report->add_option("--delta", ef.deltas, "thresholds (default: those of the evaluation)");
    c_report->add_option("--out", out_dir, "also write recount.json here");
  }

  void common(CLI::App& c, bool needs_out) {
    c.add_option("--seed", seed, "master seed")->capture_default_str();
    c.add_option("--config", config_path, "JSON config; command-line flags take precedence");
    c.add_option("--workers", workers, "parallel workers")->capture_default_str();
    if (needs_out) c.add_option("--out", out_dir, "output directory")->required();
  }

  void pattern_flags(CLI::App& c) {
    c.add_option("--thickness", thickness, "pattern thickness in pixels")->capture_default_str();
    c.add_option("--placement", placement, "border or center")->capture_default_str();
    c.add_option("--color", color, "grayscale or rgb")->capture_default_str();
  }

  PatternSpec pattern() const {
    if (thickness < 1) throw ConfigError("--thickness must be >= 1, got " + std::to_string(thickness));
    PatternSpec p;
    p.thickness = thickness;
    p.placement = parse_placement(placement);
    p.color_mode = parse_color_mode(color);
    return p;
  }

  int worker_count() const {
    if (workers < 1) throw ConfigError("--workers must be >= 1");
    return workers;
  }

  // ---------------------------------------------------------------------
  int cmd_generate() {
    RunLog log(out_dir, "dataset generate");
    synth.seed = seed;
    const auto ds = imgdata::gen_synthetic_dataset(synth);
    imgdata::save_dataset(ds, out_dir);
    write_config(out_dir, "dataset generate",
                 {{"seed", seed},
                  {"dataset", {{"count", synth.count}, {"base_size", synth.base_size},
                               {"classes", synth.num_classes}, {"channels", synth.channels}}}});
    out << "wrote " << ds.size() << " images to " << out_dir << "\n";
    log.line("end ok");
    return 0;
  }

  int cmd_augment() {
    RunLog log(out_dir, "dataset augment");
    const auto spec = pattern();
    const auto ds = imgdata::augment_dataset(imgdata::load_dataset(in_dir), spec, seed);
    imgdata::save_dataset(ds, out_dir);
    write_config(out_dir, "dataset augment",
                 {{"seed", seed}, {"in", in_dir}, {"pattern", imgdata::pattern_to_json(spec)}});
    out << "augmented " << ds.size() << " images (" << to_string(spec.placement) << ", p=" << spec.thickness
        << ", " << to_string(spec.color_mode) << ")\n";
    log.line("end ok");
    return 0;
  }

  int cmd_duplicate() {
    RunLog log(out_dir, "dataset duplicate");
    const auto src = imgdata::load_dataset(in_dir);
    std::vector<std::string> ids = dup_ids;
    if (dup_random > 0) {
      std::vector<std::size_t> originals;
      for (std::size_t i = 0; i < src.items.size(); ++i)
        if (src.items[i].provenance.empty()) originals.push_back(i);
      for (auto j : sample_subset(originals.size(), static_cast<std::size_t>(dup_random), seed))
        ids.push_back(src.items[originals[j]].id);
    }
    if (ids.empty()) throw ConfigError("nothing to duplicate: give --id or --random");
    std::vector<int> counts = dup_counts;
    if (counts.empty()) throw ConfigError("--count is required");
    if (counts.size() == 1) counts.assign(ids.size(), counts.front());
    if (counts.size() != ids.size())
      throw ConfigError("--count must be given once or once per id (" + std::to_string(ids.size()) + " ids)");
    const auto ds = imgdata::inject_duplicates(src, ids, counts, !shared_keys);
    imgdata::save_dataset(ds, out_dir);
    write_config(out_dir, "dataset duplicate",
                 {{"seed", seed}, {"in", in_dir}, {"ids", ids}, {"counts", counts}, {"shared_keys", shared_keys}});
    out << "dataset now holds " << ds.size() << " items\n";
    log.line("end ok");
    return 0;
  }

  int cmd_train() {
    RunLog log(out_dir, "train");
    const auto ds = imgdata::load_dataset(data_dir);
    if (ds.items.empty()) throw InputError("dataset " + data_dir + " is empty");
    auto tc = tf.train_config(seed);
    const auto ms = tf.model_spec();
    const fs::path ck_path = fs::path(out_dir) / "model.smck";
    const json extra = {{"data", data_dir}, {"model", experiments::model_spec_to_json(ms)}};

    std::unique_ptr<diffusion::DenoiserModel> model;
    diffusion::TrainState state;
    if (resume && fs::exists(ck_path)) {
      auto ck = diffusion::load_checkpoint(ck_path);
      auto expected = tc;
      expected.epochs = ck.train_config.epochs;
      if (diffusion::train_config_to_json(expected) != diffusion::train_config_to_json(ck.train_config))
        throw ConfigError("cannot resume: training configuration differs from the checkpoint's");
      model = std::move(ck.model);
      state = std::move(ck.state);
      out << "resuming at epoch " << state.epochs_done << "\n";
      log.line("resume epoch " + std::to_string(state.epochs_done));
    } else {
      const Image& first = ds.items.front().image;
      model = std::make_unique<diffusion::DenoiserModel>(first.channels, first.height, first.width, ms.mode,
                                                         ms.base_width, ms.init_seed);
    }
    (void)diffusion::prepare_examples(*model, ds);  // dims check before any work
    write_config(out_dir, "train",
                 {{"seed", seed}, {"data", data_dir}, {"train", diffusion::train_config_to_json(tc)},
                  {"model", experiments::model_spec_to_json(ms)}});
    const int target = tc.epochs;
    for (int e = state.epochs_done; e < target; ++e) {
      tc.epochs = e + 1;
      state = diffusion::train(*model, ds, tc, std::move(state));
      diffusion::save_checkpoint(ck_path, *model, tc, state, extra);
      out << "epoch " << e << " loss " << state.epoch_losses.back() << "\n" << std::flush;
      log.line("epoch " + std::to_string(e));
    }
    std::string losses = csv_row({"epoch", "loss"});
    for (std::size_t i = 0; i < state.epoch_losses.size(); ++i)
      losses += csv_row({std::to_string(i), format_number(state.epoch_losses[i])});
    write_file(fs::path(out_dir) / "losses.csv", losses);
    log.line("end ok");
    return 0;
  }

  int cmd_evaluate() {
    RunLog log(out_dir, "evaluate");
    const auto ds = imgdata::load_dataset(data_dir);
    auto ck = diffusion::load_checkpoint(checkpoint_path(model_path));
    const auto ecfg = ef.eval_config(seed, worker_count());
    DiffusionOutpainter op(*ck.model, ck.schedule, ef.outpaint_config(), parse_variant(ef.variant));
    const auto rep = evaluate_model(op, ds, ecfg);
    const fs::path dir(out_dir);
    write_config(dir, "evaluate",
                 {{"seed", seed}, {"data", data_dir}, {"model", model_path}, {"workers", workers},
                  {"evaluation", rep.config}, {"outpaint", ef.outpaint_json()}});
    write_file(dir / "report.csv", report_csv(rep));
    json summary = report_summary(rep);
    summary["outpaint"] = ef.outpaint_json();
    write_file(dir / "summary.json", summary.dump(2) + "\n");
    if (save_samples > 0) {
      const auto queries = queries_from_dataset(ds);
      const auto mask = imgdata::build_pattern_mask(*ds.pattern, ds.items.front().image.height,
                                                    ds.items.front().image.width);
      fs::create_directories(dir / "samples");
      int written = 0;
      for (const auto& row : rep.rows) {
        if (written++ >= save_samples) break;
        for (const auto& q : queries)
          if (q.id == row.id) {
            const Image img = trial_output(op, q, *ds.pattern, mask, ecfg, 0);
            imgdata::write_pnm(dir / "samples" / (q.id + (img.channels == 1 ? ".pgm" : ".ppm")), img);
          }
      }
    }
    print_report(out, rep);
    log.line("end ok");
    return 0;
  }

  imgdata::CaptionedDataset base_dataset() const {
    if (!data_dir.empty()) return imgdata::load_dataset(data_dir);
    auto sc = synth;
    sc.seed = derive_seed(seed, "fixture-data");
    return imgdata::gen_synthetic_dataset(sc);
  }

  imgdata::CaptionedDataset augmented_dataset() const {
    auto ds = base_dataset();
    if (!ds.pattern) ds = imgdata::augment_dataset(ds, pattern(), derive_seed(seed, "fixture-keys"));
    return ds;
  }

  experiments::ExperimentRun run_experiment(json& resolved) {
    using namespace experiments;
    const auto ocfg = ef.outpaint_config();
    if (experiment == "pathology") {
      const auto f = percentile_pathology_fixture(seed);
      ExperimentRun run;
      run.name = "pathology";
      run.config = {{"seed", seed}};
      run.extra = f.demonstration;
      run.extra["dist_a"] = f.dist_a;
      run.extra["dist_b"] = f.dist_b;
      return run;
    }
    if (experiment == "monobias") {
      const auto f = monochrome_bias_fixture(seed, fixture_size);
      ExperimentRun run;
      run.name = "monobias";
      run.config = {{"seed", seed}, {"fixture_size", fixture_size}};
      run.extra = f.demonstration;
      return run;
    }
    if (experiment == "calibrate") {
      CalibrationConfig cc;
      cc.queries = queries;
      cc.repeats = ef.repeats;
      cc.seed = seed;
      cc.thresholds = metrics::ThresholdSet::from(ef.deltas);
      return run_calibration(cc, worker_count());
    }
    const auto ecfg = ef.eval_config(seed, worker_count());
    resolved["outpaint"] = ef.outpaint_json();
    if (experiment == "duplication") {
      DuplicationConfig dc;
      dc.levels = levels;
      dc.images_per_level = images_per_level;
      dc.control_images = control_images;
      dc.independent_keys = !shared_keys;
      dc.selection_seed = derive_seed(seed, "duplication");
      const auto fx = build_duplication_dataset(augmented_dataset(), dc);
      std::unique_ptr<diffusion::DenoiserModel> owned;
      diffusion::NoiseSchedule sched;
      const auto tc = tf.train_config(derive_seed(seed, "train"));
      if (!model_path.empty()) {
        auto ck = diffusion::load_checkpoint(checkpoint_path(model_path));
        owned = std::move(ck.model);
        sched = ck.schedule;
      } else {
        owned = train_model(fx.dataset, tc, tf.model_spec(), [&](int e, double loss) {
          out << "epoch " << e << " loss " << loss << "\n" << std::flush;
        });
        sched = schedule_for(tc);
        diffusion::TrainState st;
        st.epochs_done = tc.epochs;
        diffusion::save_checkpoint(fs::path(out_dir) / "model.smck", *owned, tc, st,
                                   {{"experiment", "duplication"}});
      }
      DiffusionOutpainter op(*owned, sched, ocfg, parse_variant(ef.variant));
      auto run = evaluate_duplication(op, fx, dc, ecfg);
      run.config["train"] = diffusion::train_config_to_json(tc);
      run.config["model"] = model_spec_to_json(tf.model_spec());
      run.config["model_path"] = model_path;
      return run;
    }
    if (experiment == "augmentation" || experiment == "mitigation") {
      if (model_path.empty()) throw ConfigError(experiment + " needs --model");
      if (data_dir.empty()) throw ConfigError(experiment + " needs --data");
      const auto ds = imgdata::load_dataset(data_dir);
      auto ck = diffusion::load_checkpoint(checkpoint_path(model_path));
      DiffusionOutpainter op(*ck.model, ck.schedule, ocfg, parse_variant(ef.variant));
      if (experiment == "augmentation") {
        std::vector<imgdata::QueryTransform> ts;
        for (const auto& t : transforms.empty() ? std::vector<std::string>{"crop1", "blur1", "rotate1"} : transforms)
          ts.push_back(imgdata::parse_transform(t));
        return run_augmentation_study(op, ds, ecfg, ts);
      }
      std::vector<Mitigation> ms;
      for (const auto& m : methods.empty() ? std::vector<std::string>{"gni:0.1", "rt:1", "cwr:1", "rna:1"} : methods)
        ms.push_back(parse_mitigation(m));
      return run_mitigation_study(op, ds, ecfg, ms);
    }
    if (experiment == "ablation") {
      const auto kind = parse_ablation(ablation_kind);
      std::vector<PatternSpec> specs;
      const PatternSpec base = pattern();
      std::vector<std::string> vals = values;
      if (vals.empty())
        vals = kind == AblationKind::thickness   ? std::vector<std::string>{"4", "16"}
               : kind == AblationKind::placement ? std::vector<std::string>{"border", "center"}
                                                 : std::vector<std::string>{"grayscale", "rgb"};
      for (const auto& v : vals) {
        PatternSpec p = base;
        if (kind == AblationKind::thickness) {
          try {
            p.thickness = std::stoi(v);
          } catch (const std::logic_error&) {
            throw ConfigError("thickness value '" + v + "' is not an integer");
          }
        } else if (kind == AblationKind::placement) {
          p.placement = parse_placement(v);
        } else {
          p.color_mode = parse_color_mode(v);
        }
        specs.push_back(p);
      }
      auto ds = base_dataset();
      if (ds.pattern) throw ConfigError("ablation needs an un-augmented --data dataset");
      return run_ablation(kind, specs, ds, derive_seed(seed, "ablation-keys"), tf.train_config(derive_seed(seed, "train")), tf.model_spec(),
                          ecfg, ocfg);
    }
    std::string list;
    for (const auto& n : experiment_names()) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown experiment '" + experiment + "'; available: " + list);
  }

  int cmd_experiment() {
    {
      const auto& names = experiment_names();
      if (std::find(names.begin(), names.end(), experiment) == names.end()) {
        std::string list;
        for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
        throw ConfigError("unknown experiment '" + experiment + "'; available: " + list);
      }
    }
    RunLog log(out_dir, "experiment " + experiment);
    json resolved = {{"seed", seed}, {"experiment", experiment}, {"workers", workers}};
    const auto run = run_experiment(resolved);
    resolved["run"] = run.config;
    write_config(out_dir, "experiment", resolved);
    write_run(out_dir, run);
    print_run(out, run);
    int failed = 0;
    for (const auto& a : run.arms)
      if (!a.ok) ++failed;
    log.line(failed ? "end with " + std::to_string(failed) + " failed arms" : "end ok");
    if (failed) {
      err << failed << " arm(s) failed; see summary.json\n";
      return 3;
    }
    return 0;
  }

  int cmd_report() {
    const fs::path dir(in_dir);
    const auto rows = parse_report_csv(imgdata::read_text(dir / "report.csv"));
    std::optional<json> summary;
    if (fs::exists(dir / "summary.json")) summary = read_json_file(dir / "summary.json");
    MemorizationReport rep;
    rep.rows = rows;
    std::vector<double> deltas;
    if (c_report->get_option("--delta")->count() > 0 || !summary) {
      deltas = ef.deltas;
    } else {
      for (const auto& t : summary->at("thresholds")) deltas.push_back(t.at("delta").get<double>());
    }
    rep.deltas = metrics::ThresholdSet::from(deltas).deltas;
    rep.counts = rep.recount();
    rep.repeats = summary ? summary->value("repeats", 1) : 1;
    rep.seed = summary ? summary->value("seed", std::uint64_t{0}) : 0;
    std::size_t keys = 1;
    for (const auto& r : rows) keys = std::max(keys, r.true_keys.size());
    for (double d : rep.deltas) rep.chance_baseline.push_back(chance_rate_any(d, rep.repeats * static_cast<int>(keys)));
    print_report(out, rep);
    bool consistent = true;
    if (summary)
      for (const auto& t : summary->at("thresholds"))
        for (std::size_t i = 0; i < rep.deltas.size(); ++i)
          if (rep.deltas[i] == t.at("delta").get<double>() && rep.counts[i] != t.at("count").get<std::size_t>())
            consistent = false;
    if (!out_dir.empty()) write_file(fs::path(out_dir) / "recount.json", report_summary(rep).dump(2) + "\n");
    if (!consistent) {
      err << "summary.json counts disagree with report.csv\n";
      return 1;
    }
    return 0;
  }

  int run(int argc, const char* const* argv) {
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      return app.exit(e, out, err);
    }
    try {
      for (CLI::App* c : {c_generate, c_augment, c_duplicate, c_train, c_evaluate, c_experiment, c_report})
        if (c->parsed() && !config_path.empty()) apply_config(*c, read_json_file(config_path));
      if (c_generate->parsed()) return cmd_generate();
      if (c_augment->parsed()) return cmd_augment();
      if (c_duplicate->parsed()) return cmd_duplicate();
      if (c_train->parsed()) return cmd_train();
      if (c_evaluate->parsed()) return cmd_evaluate();
      if (c_experiment->parsed()) return cmd_experiment();
      if (c_report->parsed()) return cmd_report();
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return 1;
    }
    return 0;
  }
};

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Cli cli(out, err);
  return cli.run(argc, argv);
}

}  // namespace solidmark::cli
