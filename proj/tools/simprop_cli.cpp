// simprop: data generation, training, prediction, evaluation, ablation,
// premise validation and gradient self-checks.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "simprop/checkpoint.hpp"
#include "simprop/data.hpp"
#include "simprop/eval.hpp"
#include "simprop/grad_suite.hpp"
#include "simprop/parallel.hpp"
#include "simprop/train.hpp"

namespace fs = std::filesystem;
using namespace simprop;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumeric = 2;

struct Globals {
  std::uint64_t seed = 0;
  int threads = 0;
};

struct ConfigLog {
  std::vector<std::pair<std::string, std::string>> entries;

  template <class T>
  void add(const std::string& key, const T& value) {
    std::ostringstream os;
    os << value;
    entries.emplace_back(key, os.str());
  }
  void add(const std::string& key, const std::vector<int>& v) { entries.emplace_back(key, join_ints(v)); }
  void add(const std::string& key, bool v) { entries.emplace_back(key, v ? "1" : "0"); }

  void emit(std::ostream& out, const std::string& prefix = "# ") const {
    for (const auto& [k, v] : entries) out << prefix << k << '=' << v << '\n';
  }
  void write(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    emit(out, "");
  }
};

void log_model(ConfigLog& log, const ModelConfig& c) {
  for (const auto& [k, v] : config_header(c)) log.entries.emplace_back("model." + k, v);
}

void log_train(ConfigLog& log, const TrainConfig& t) {
  log.add("train.lr", t.lr);
  log.add("train.batch_size", t.batch_size);
  log.add("train.epochs", t.epochs);
  log.add("train.episodes_per_epoch", t.episodes_per_epoch);
  log.add("train.val_episodes", t.val_episodes);
  log.add("train.seed", t.seed);
  log.add("train.use_dpr", t.use_dpr);
  log.add("train.use_ica", t.use_ica);
  log.add("train.ica_p0", t.ica_p0);
  log.add("train.ica_half_life", t.ica_half_life);
  log.add("train.classes", t.classes);
}

void log_synthetic(ConfigLog& log, const SyntheticConfig& s) {
  log.add("data.image_size", s.image_size);
  log.add("data.n_classes", s.n_classes);
  log.add("data.samples_per_class", s.samples_per_class);
  log.add("data.train_classes", s.train_classes);
  log.add("data.test_classes", s.test_classes);
  log.add("data.bg_noise", s.bg_noise);
  log.add("data.bg_blur_radius", s.bg_blur_radius);
  log.add("data.fg_noise", s.fg_noise);
  log.add("data.min_radius", s.min_radius);
  log.add("data.max_radius", s.max_radius);
  log.add("data.correlated_bg", s.correlated_bg);
}

// --- flag groups ------------------------------------------------------------------

struct ModelFlags {
  ModelConfig cfg;
  bool no_fbaf = false;

  void attach(CLI::App* app) {
    app->add_option("--input-size", cfg.input_size, "Network input side length (multiple of 8)")->capture_default_str();
    app->add_option("--feature-channels", cfg.feature_channels, "Encoder output channels")->capture_default_str();
    app->add_option("--fusion-channels", cfg.fusion_channels, "Fusion width (must be 2x feature channels)")
        ->capture_default_str();
    app->add_option("--decoder-channels", cfg.decoder_channels, "Decoder hidden channels")->capture_default_str();
    app->add_option("--encoder-channels", cfg.encoder_channels, "Widths of the three stride-2 encoder blocks")
        ->expected(3)
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--aspp-rates", cfg.aspp_rates, "Dilation rates of the pyramid branches")
        ->delimiter(',')
        ->capture_default_str();
    app->add_flag("--no-fbaf", no_fbaf, "Foreground-only fusion (omit the attention maps)");
    app->add_flag("--map-raw", cfg.map_raw, "Literal area-scaled masked average instead of the normalized mean");
    app->add_option("--input-mean", cfg.input_mean, "Input normalization mean")->capture_default_str();
    app->add_option("--input-std", cfg.input_std, "Input normalization std")->capture_default_str();
  }
  ModelConfig resolve() const {
    ModelConfig c = cfg;
    c.use_fbaf = !no_fbaf;
    c.validate();
    return c;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  bool no_dpr = false;
  bool no_ica = false;

  void attach(CLI::App* app) {
    app->add_option("--lr", cfg.lr, "SGD learning rate")->capture_default_str();
    app->add_option("--batch", cfg.batch_size, "Episodes per optimization step")->capture_default_str();
    app->add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
    app->add_option("--episodes-per-epoch", cfg.episodes_per_epoch, "Training episodes per epoch")
        ->capture_default_str();
    app->add_option("--val-episodes", cfg.val_episodes, "Validation episodes (train classes) per epoch")
        ->capture_default_str();
    app->add_flag("--no-dpr", no_dpr, "Train on the query loss only");
    app->add_flag("--no-ica", no_ica, "Disable input channel averaging");
    app->add_option("--ica-p0", cfg.ica_p0, "Initial channel-averaging probability")->capture_default_str();
    app->add_option("--ica-half-life", cfg.ica_half_life, "Epochs for the switch probability to halve")
        ->capture_default_str();
    app->add_option("--classes", cfg.classes, "Training classes (default: the manifest's train split)")
        ->delimiter(',');
  }
  TrainConfig resolve(const Globals& g) const {
    TrainConfig c = cfg;
    c.use_dpr = !no_dpr;
    c.use_ica = !no_ica;
    c.seed = g.seed;
    c.threads = resolve_threads(g.threads);
    c.validate();
    return c;
  }
};

std::vector<int> or_default(const std::vector<int>& given, const std::vector<int>& fallback) {
  return given.empty() ? fallback : given;
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p)) throw ValidationError(std::string(what) + " not found: " + p.string());
}

Dataset open_dataset(const fs::path& manifest, int threads) {
  const fs::path path = fs::is_directory(manifest) ? manifest / "manifest.txt" : manifest;
  require_file(path, "manifest");
  return load_dataset(path, threads);
}

void check_input_size(const Dataset& data, const ModelConfig& cfg) {
  if (data.image_size() != cfg.input_size) {
    throw ValidationError("dataset images are " + std::to_string(data.image_size()) + " px but --input-size is " +
                          std::to_string(cfg.input_size));
  }
}

std::ostream& open_output(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  file.open(path, std::ios::binary);
  if (!file) throw ValidationError("cannot write " + path);
  return file;
}

// --- subcommands --------------------------------------------------------------------

struct GenDataCmd {
  SyntheticConfig cfg;
  std::string out;
  int fold = -1;

  void attach(CLI::App* app) {
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--image-size", cfg.image_size, "Image side length")->capture_default_str();
    app->add_option("--n-classes", cfg.n_classes, "Number of shape classes")->capture_default_str();
    app->add_option("--samples-per-class", cfg.samples_per_class, "Images per class")->capture_default_str();
    app->add_option("--train-classes", cfg.train_classes, "Training classes")->delimiter(',')->capture_default_str();
    app->add_option("--test-classes", cfg.test_classes, "Held-out classes")->delimiter(',')->capture_default_str();
    app->add_option("--fold", fold, "Rotating split index (overrides the class lists)");
    app->add_option("--bg-noise", cfg.bg_noise, "Background noise amplitude")->capture_default_str();
    app->add_option("--bg-blur-radius", cfg.bg_blur_radius, "Background smoothing radius")->capture_default_str();
    app->add_option("--fg-noise", cfg.fg_noise, "Foreground noise amplitude")->capture_default_str();
    app->add_option("--min-radius", cfg.min_radius, "Smallest object radius (fraction of the image)")
        ->capture_default_str();
    app->add_option("--max-radius", cfg.max_radius, "Largest object radius (fraction of the image)")
        ->capture_default_str();
    app->add_flag("--correlated-bg", cfg.correlated_bg, "Per-class background tints");
  }

  int run(const Globals& g) {
    SyntheticConfig c = cfg;
    if (fold >= 0) {
      const int n_test = static_cast<int>(c.test_classes.size());
      std::tie(c.train_classes, c.test_classes) = SyntheticConfig::fold_split(c.n_classes, n_test, fold);
    }
    c.validate();
    ConfigLog log;
    log.add("command", "gen-data");
    log.add("seed", g.seed);
    log.add("out", out);
    log_synthetic(log, c);
    log.emit(std::cerr);
    const DatasetManifest m = generate_dataset(c, g.seed, out, resolve_threads(g.threads));
    std::cerr << "wrote " << m.records.size() << " samples to " << out << '\n';
    return kExitOk;
  }
};

struct TrainCmd {
  ModelFlags model;
  TrainFlags train;
  std::string data;
  std::string out;

  void attach(CLI::App* app) {
    app->add_option("--data", data, "Dataset directory or manifest")->required();
    app->add_option("--out", out, "Run directory (checkpoints, metrics.csv, config.txt)")->required();
    model.attach(app);
    train.attach(app);
  }

  int run(const Globals& g) {
    const ModelConfig mc = model.resolve();
    const TrainConfig tc = train.resolve(g);
    const Dataset ds = open_dataset(data, tc.threads);
    check_input_size(ds, mc);
    ConfigLog log;
    log.add("command", "train");
    log.add("seed", g.seed);
    log.add("data", data);
    log_model(log, mc);
    log_train(log, tc);
    log.emit(std::cerr);
    fs::create_directories(out);
    log.write(fs::path(out) / "config.txt");

    const auto start = std::chrono::steady_clock::now();
    TrainOutput output;
    output.dir = out;
    output.on_epoch = [&](const EpochMetrics& m) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cerr << "epoch " << m.epoch << " loss " << format_fixed(m.train_loss) << " val_miou "
                << format_fixed(m.val_miou) << " switch_prob " << format_fixed(m.switch_prob) << " ("
                << format_fixed(secs, 1) << " s)\n";
    };
    const TrainState s = simprop::train(tc, mc, ds, output);
    std::cerr << "best val mIoU " << format_fixed(s.best_val_miou) << " at epoch " << s.best_epoch << '\n';
    return kExitOk;
  }
};

struct PredictCmd {
  std::string checkpoint, query, out;
  std::vector<std::string> supports, support_masks;

  void attach(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    app->add_option("--query", query, "Query image (PPM)")->required();
    app->add_option("--supports", supports, "Support images (PPM)")->required();
    app->add_option("--support-masks", support_masks, "Support masks (PGM), one per support image")->required();
    app->add_option("--out", out, "Output mask (PGM)")->required();
  }

  int run(const Globals& g) {
    require_file(checkpoint, "checkpoint");
    const Checkpoint ck = read_checkpoint(checkpoint);
    if (supports.size() != support_masks.size()) {
      throw ValidationError("--supports and --support-masks must have the same length");
    }
    ConfigLog log;
    log.add("command", "predict");
    log.add("seed", g.seed);
    log.add("checkpoint", checkpoint);
    log.add("query", query);
    log_model(log, ck.config);
    log.emit(std::cerr);

    require_file(query, "query image");
    const Tensor q = load_image_ppm(query);
    std::vector<Tensor> imgs, masks;
    for (std::size_t i = 0; i < supports.size(); ++i) {
      require_file(supports[i], "support image");
      require_file(support_masks[i], "support mask");
      imgs.push_back(load_image_ppm(supports[i]));
      masks.push_back(load_mask_pgm(support_masks[i]));
    }
    const Tensor mask = simprop::predict(ck.params, ck.config, q, imgs, masks);
    if (const fs::path parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
    save_mask_pgm(mask, out);
    std::cout << out << '\n';
    return kExitOk;
  }
};

struct EvalCmd {
  std::string data, checkpoint, out, dump;
  bool oracle = false, background = false, ica = false;
  int k = 1, episodes = 300, repeats = 3, identical = 0;
  std::vector<int> classes;

  void attach(CLI::App* app) {
    app->add_option("--data", data, "Dataset directory or manifest")->required();
    app->add_option("--checkpoint", checkpoint, "Model checkpoint");
    app->add_flag("--oracle", oracle, "Debug predictor returning the ground-truth mask");
    app->add_flag("--background", background, "Baseline predictor returning an empty mask");
    app->add_option("--k", k, "Shots per episode")->check(CLI::IsMember({1, 5}))->capture_default_str();
    app->add_option("--episodes", episodes, "Episodes per repeat")->capture_default_str();
    app->add_option("--repeats", repeats, "Independent episode sets (seeds) to average")->capture_default_str();
    app->add_option("--classes", classes, "Classes to evaluate (default: the manifest's test split)")->delimiter(',');
    app->add_option("--identical", identical, "Also run the support == query test on this many images")
        ->capture_default_str();
    app->add_option("--out", out, "CSV path (default: standard output)");
    app->add_option("--dump", dump, "Directory for predicted masks and predictions.manifest");
    app->add_flag("--ica", ica, "Accepted for symmetry with train; evaluation never augments");
  }

  int run(const Globals& g) {
    const int threads = resolve_threads(g.threads);
    if (oracle && background) throw ValidationError("--oracle and --background are exclusive");
    if (!oracle && !background && checkpoint.empty()) throw ValidationError("eval needs --checkpoint or --oracle");
    if (episodes < 1 || repeats < 1) throw ValidationError("--episodes and --repeats must be >= 1");
    const Dataset ds = open_dataset(data, threads);
    const std::vector<int> cls = or_default(classes, ds.manifest().config().test_classes);

    ConfigLog log;
    log.add("command", "eval");
    log.add("seed", g.seed);
    log.add("data", data);
    log.add("k", k);
    log.add("episodes", episodes);
    log.add("repeats", repeats);
    log.add("classes", cls);
    log.add("identical", identical);
    log.add("ica", ica);
    Predictor predictor;
    ModelParams params;
    if (oracle) {
      log.add("predictor", "oracle");
      predictor = oracle_predictor();
    } else if (background) {
      log.add("predictor", "background");
      predictor = background_predictor();
    } else {
      require_file(checkpoint, "checkpoint");
      Checkpoint ck = read_checkpoint(checkpoint);
      check_input_size(ds, ck.config);
      log.add("checkpoint", checkpoint);
      log_model(log, ck.config);
      params = std::move(ck.params);
      predictor = model_predictor(params, ck.config);
    }
    log.emit(std::cerr);

    std::vector<EvalReport> reports;
    for (int r = 0; r < repeats; ++r) {
      const std::uint64_t seed = repeat_seed(g.seed, r);
      const auto eps = sample_episodes(ds, cls, k, episodes, seed);
      const auto preds = run_predictions(predictor, eps, threads);
      EvalReport rep = score_predictions(eps, preds, cls);
      rep.k = k;
      rep.seed = seed;
      reports.push_back(rep);
      if (!dump.empty()) dump_predictions(fs::path(dump) / ("repeat_" + std::to_string(r)), eps, preds);
    }
    std::ofstream file;
    std::ostream& os = open_output(out, file);
    write_eval_csv(os, reports);
    if (identical > 0) {
      const EvalReport id = identical_input_test(predictor, ds, cls, identical, g.seed, threads);
      os << "# identical_input_miou," << format_fixed(id.mean_iou) << '\n';
    }
    return kExitOk;
  }

  static void dump_predictions(const fs::path& dir, const std::vector<Episode>& eps, const std::vector<Tensor>& preds) {
    fs::create_directories(dir);
    std::ofstream index(dir / "predictions.manifest", std::ios::binary);
    index << "episode\tclass\tquery_id\tsupport_ids\tmask\n";
    for (std::size_t i = 0; i < eps.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06zu.pgm", i);
      save_mask_pgm(preds[i], dir / name);
      std::vector<int> ids;
      for (const ImageSample& s : eps[i].supports) ids.push_back(s.sample_id);
      index << i << '\t' << eps[i].class_id << '\t' << eps[i].query.sample_id << '\t' << join_ints(ids) << '\t'
            << name << '\n';
    }
  }
};

struct AblateCmd {
  ModelFlags model;
  TrainFlags train;
  std::string data, out;
  int episodes = 300, identical_n = 100, seeds = 1;

  void attach(CLI::App* app) {
    app->add_option("--data", data, "Dataset directory or manifest")->required();
    app->add_option("--out", out, "Output directory (ablation.csv and one run directory per row)")->required();
    app->add_option("--episodes", episodes, "Test episodes shared by all rows")->capture_default_str();
    app->add_option("--identical-n", identical_n, "Images for the support == query test")->capture_default_str();
    app->add_option("--seeds", seeds, "Training seeds (seed, seed+1, ...); rows are averaged over them")
        ->capture_default_str();
    model.attach(app);
    train.attach(app);
  }

  int run(const Globals& g) {
    if (seeds < 1) throw ValidationError("--seeds must be >= 1");
    const ModelConfig mc = model.resolve();
    const TrainConfig tc = train.resolve(g);
    const Dataset ds = open_dataset(data, tc.threads);
    check_input_size(ds, mc);
    ConfigLog log;
    log.add("command", "ablate");
    log.add("seed", g.seed);
    log.add("data", data);
    log.add("episodes", episodes);
    log.add("identical_n", identical_n);
    log.add("seeds", seeds);
    log_model(log, mc);
    log_train(log, tc);
    log.emit(std::cerr);
    fs::create_directories(out);
    log.write(fs::path(out) / "config.txt");

    AblationSettings settings;
    settings.n_episodes = episodes;
    settings.identical_n = identical_n;
    settings.eval_seed = g.seed;
    settings.threads = tc.threads;
    std::vector<std::vector<AblationResult>> per_seed;
    for (int s = 0; s < seeds; ++s) {
      TrainConfig t = tc;
      t.seed = g.seed + static_cast<std::uint64_t>(s);
      per_seed.push_back(ablate(mc, t, ds, settings, ablation_grid(), fs::path(out) / ("seed_" + std::to_string(t.seed))));
      for (const AblationResult& r : per_seed.back()) {
        std::cerr << "seed " << t.seed << ' ' << r.row.name << " mIoU " << format_fixed(r.report.mean_iou)
                  << " identical " << format_fixed(r.identical_iou) << '\n';
      }
    }
    std::ofstream csv(fs::path(out) / "ablation.csv", std::ios::binary);
    csv << "seed,row,use_dpr,use_fbaf,use_ica,mean_iou,fgbg_iou,identical_iou,best_val_miou\n";
    const auto grid = ablation_grid();
    for (std::size_t row = 0; row < grid.size(); ++row) {
      double m = 0, f = 0, id = 0, v = 0;
      for (int s = 0; s < seeds; ++s) {
        const AblationResult& r = per_seed[static_cast<std::size_t>(s)][row];
        csv << g.seed + static_cast<std::uint64_t>(s) << ',' << r.row.name << ',' << r.row.use_dpr << ','
            << r.row.use_fbaf << ',' << r.row.use_ica << ',' << format_fixed(r.report.mean_iou) << ','
            << format_fixed(r.report.fgbg_iou) << ',' << format_fixed(r.identical_iou) << ','
            << format_fixed(r.best_val_miou) << '\n';
        m += r.report.mean_iou;
        f += r.report.fgbg_iou;
        id += r.identical_iou;
        v += r.best_val_miou;
      }
      const AblationRow& r = grid[row];
      csv << "mean," << r.name << ',' << r.use_dpr << ',' << r.use_fbaf << ',' << r.use_ica << ','
          << format_fixed(m / seeds) << ',' << format_fixed(f / seeds) << ',' << format_fixed(id / seeds) << ','
          << format_fixed(v / seeds) << '\n';
    }
    std::cerr << "wrote " << (fs::path(out) / "ablation.csv").string() << '\n';
    return kExitOk;
  }
};

struct PremiseCmd {
  ModelFlags model;
  TrainFlags train;
  std::string data, checkpoint, reference, out;
  int pairs = 100, episodes = 300, identical_n = 100;

  void attach(CLI::App* app) {
    app->add_option("--data", data, "Dataset directory or manifest")->required();
    app->add_option("--checkpoint", checkpoint, "Few-shot model under test")->required();
    app->add_option("--reference", reference,
                    "Fully supervised reference checkpoint (trained on all classes here when absent)");
    app->add_option("--out", out, "Output directory for the reports")->required();
    app->add_option("--pairs", pairs, "Same-class pairs for the similarity statistics")->capture_default_str();
    app->add_option("--episodes", episodes, "Test episodes for the error-overlap report")->capture_default_str();
    app->add_option("--identical-n", identical_n, "Images for the support == query test")->capture_default_str();
    model.attach(app);
    train.attach(app);
  }

  int run(const Globals& g) {
    const TrainConfig tc = train.resolve(g);
    const int threads = tc.threads;
    const Dataset ds = open_dataset(data, threads);
    require_file(checkpoint, "checkpoint");
    const Checkpoint ck = read_checkpoint(checkpoint);
    check_input_size(ds, ck.config);
    const SyntheticConfig sc = ds.manifest().config();
    const std::vector<int>& test = sc.test_classes;
    std::vector<int> all;
    for (int c = 0; c < sc.n_classes; ++c) all.push_back(c);

    ConfigLog log;
    log.add("command", "premise");
    log.add("seed", g.seed);
    log.add("data", data);
    log.add("checkpoint", checkpoint);
    log.add("reference", reference.empty() ? std::string("<trained on all classes>") : reference);
    log.add("pairs", pairs);
    log.add("episodes", episodes);
    log.add("identical_n", identical_n);
    log_model(log, ck.config);
    if (reference.empty()) log_train(log, tc);
    log.emit(std::cerr);
    fs::create_directories(out);
    log.write(fs::path(out) / "config.txt");

    // The reference sees every class during training, standing in for a fully supervised segmenter.
    ModelParams ref_params;
    if (reference.empty()) {
      TrainConfig rt = tc;
      rt.classes = all;
      TrainOutput o;
      o.dir = fs::path(out) / "reference";
      o.on_epoch = [](const EpochMetrics& m) {
        std::cerr << "reference epoch " << m.epoch << " val_miou " << format_fixed(m.val_miou) << '\n';
      };
      ref_params = simprop::train(rt, ck.config, ds, o).best_params;
    } else {
      require_file(reference, "reference checkpoint");
      ref_params = load_checkpoint(reference, ck.config);
    }

    const Predictor fewshot = model_predictor(ck.params, ck.config);
    const Predictor supervised = model_predictor(ref_params, ck.config);

    {
      std::ofstream f(fs::path(out) / "identical_input.csv", std::ios::binary);
      f << "model,identical_input_miou,regular_miou\n";
      const auto eps = sample_episodes(ds, test, 1, episodes, g.seed);
      for (const auto& [name, p] : {std::pair{"fewshot", &fewshot}, std::pair{"reference", &supervised}}) {
        const EvalReport id = identical_input_test(*p, ds, test, identical_n, g.seed, threads);
        const EvalReport reg = score_predictions(eps, run_predictions(*p, eps, threads), test);
        f << name << ',' << format_fixed(id.mean_iou) << ',' << format_fixed(reg.mean_iou) << '\n';
      }
    }
    {
      const auto eps = sample_episodes(ds, test, 1, episodes, g.seed);
      const auto pa = run_predictions(fewshot, eps, threads);
      const auto pb = run_predictions(supervised, eps, threads);
      std::map<int, OverlapAccumulator> per_class;
      OverlapAccumulator total;
      for (std::size_t i = 0; i < eps.size(); ++i) {
        per_class[eps[i].class_id].add(pa[i], pb[i], eps[i].query.mask);
        total.add(pa[i], pb[i], eps[i].query.mask);
      }
      std::ofstream f(fs::path(out) / "error_overlap.csv", std::ios::binary);
      f << "# reconstructed metric: dataset-level error-set IoU; tp_gap = 100*(IoU_reference - IoU_fewshot)\n";
      f << "class,fn_overlap_pct,fp_overlap_pct,tp_gap_pct\n";
      auto row = [&](const std::string& label, const OverlapStats& s) {
        f << label << ',' << format_fixed(s.fn_overlap_pct) << ',' << format_fixed(s.fp_overlap_pct) << ','
          << format_fixed(s.tp_gap_pct) << '\n';
      };
      for (const auto& [c, acc] : per_class) row(std::to_string(c), acc.stats());
      row("all", total.stats());
    }
    {
      const SimilarityRatio r = map_similarity_ratio(ck.params, ck.config, ds, test, pairs, g.seed, threads);
      std::ofstream f(fs::path(out) / "similarity_ratio.csv", std::ios::binary);
      f << "mean,stddev,used,skipped\n"
        << format_fixed(r.mean) << ',' << format_fixed(r.stddev) << ',' << r.used << ',' << r.skipped << '\n';
    }
    {
      const auto stats = fgbg_similarity_stats(ck.params, ck.config, ds, all, pairs, g.seed, threads);
      std::ofstream f(fs::path(out) / "fgbg_similarity.csv", std::ios::binary);
      f << "class,fg_cos,bg_cos,pairs\n";
      for (const ClassSimilarity& s : stats) {
        f << s.class_id << ',' << format_fixed(s.fg_cos) << ',' << format_fixed(s.bg_cos) << ',' << s.pairs << '\n';
      }
    }
    std::cerr << "wrote premise reports to " << out << '\n';
    return kExitOk;
  }
};

struct GradCheckCmd {
  int size = 32;
  float tol_op = 1e-2f, tol_e2e = 3e-2f;
  std::size_t samples = 10000;
  float step = 1e-3f;

  void attach(CLI::App* app) {
    app->add_option("--size", size, "Input size of the end-to-end instance")->capture_default_str();
    app->add_option("--tol-op", tol_op, "Relative tolerance per op")->capture_default_str();
    app->add_option("--tol-e2e", tol_e2e, "Relative tolerance end to end")->capture_default_str();
    app->add_option("--step", step, "Finite-difference step of the end-to-end check")->capture_default_str();
    app->add_option("--samples", samples, "Max parameter elements probed end to end")->capture_default_str();
  }

  int run(const Globals& g) {
    const int threads = resolve_threads(g.threads);
    const ModelConfig mc = grad_check_model_config(size);
    ConfigLog log;
    log.add("command", "grad-check");
    log.add("seed", g.seed);
    log.add("tol_op", tol_op);
    log.add("tol_e2e", tol_e2e);
    log.add("samples", samples);
    log.add("step", step);
    log_model(log, mc);
    log.emit(std::cerr);

    auto cases = op_grad_cases(g.seed, tol_op);
    cases.push_back(end_to_end_grad_case(mc, g.seed, tol_e2e, samples, step));
    const auto results = run_grad_cases(cases, threads);
    bool ok = true;
    for (const GradCaseResult& r : results) {
      ok = ok && r.report.passed();
      std::cout << (r.report.passed() ? "PASS " : "FAIL ") << r.name << " tol=" << r.tolerance << ' '
                << describe(r.report) << " time=" << format_fixed(r.seconds, 2) << "s\n";
    }
    {
      // Diagnostic only: directional derivatives of the end-to-end loss,
      // which aggregate over all parameters and sit far above float32 noise.
      GradCase e2e = end_to_end_grad_case(mc, g.seed, tol_e2e, samples, step);
      GradCheckOptions o = e2e.options;
      o.step = 1e-4f;
      const GradCheckReport d = directional_grad_check(e2e.graph, e2e.inputs, 50, o);
      std::cout << "INFO end_to_end_directional (not a criterion) " << describe(d) << '\n';
    }
    std::cout << (ok ? "grad-check passed\n" : "grad-check FAILED\n");
    return ok ? kExitOk : kExitNumeric;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot segmentation by similarity propagation: data, training, evaluation and analysis"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Global seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0: hardware count; SIMPROP_THREADS overrides)")
      ->capture_default_str();

  GenDataCmd gen;
  TrainCmd train;
  PredictCmd pred;
  EvalCmd eval;
  AblateCmd abl;
  PremiseCmd prem;
  GradCheckCmd grad;
  gen.attach(app.add_subcommand("gen-data", "Generate the synthetic shape dataset"));
  train.attach(app.add_subcommand("train", "Episodic training"));
  pred.attach(app.add_subcommand("predict", "Segment one query image"));
  eval.attach(app.add_subcommand("eval", "Few-shot evaluation report (CSV)"));
  abl.attach(app.add_subcommand("ablate", "Train and evaluate the component ablation grid"));
  prem.attach(app.add_subcommand("premise", "Premise-validation reports"));
  grad.attach(app.add_subcommand("grad-check", "Finite-difference gradient checks"));
  // Global flags are accepted after the subcommand too.
  for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; })) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (app.got_subcommand("gen-data")) return gen.run(g);
    if (app.got_subcommand("train")) return train.run(g);
    if (app.got_subcommand("predict")) return pred.run(g);
    if (app.got_subcommand("eval")) return eval.run(g);
    if (app.got_subcommand("ablate")) return abl.run(g);
    if (app.got_subcommand("premise")) return prem.run(g);
    if (app.got_subcommand("grad-check")) return grad.run(g);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitValidation;
}
