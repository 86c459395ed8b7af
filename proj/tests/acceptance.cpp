// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; exits nonzero if any selected criterion fails.
//
// Criteria 6-8 train full-size models (about 30 minutes on one core).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli_util.hpp"
#include "simprop/data.hpp"
#include "simprop/eval.hpp"
#include "simprop/model.hpp"
#include "simprop/parallel.hpp"
#include "simprop/train.hpp"
#include "test_util.hpp"

using namespace simprop;
using namespace simprop::testing;
namespace fs = std::filesystem;

namespace {

// Regression floor for the desk-scale score: first full run (0.4958 at data
// seed 1, train seed 0) minus 0.03.
constexpr double kDeskScaleFloor = 0.4658;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[violated: " << what << "] ";
    }
  }
};

using Seconds = std::chrono::duration<double>;

double elapsed(std::chrono::steady_clock::time_point since) {
  return Seconds(std::chrono::steady_clock::now() - since).count();
}

int threads() { return resolve_threads(0); }

// 32 x 32 dataset shared by the property criteria and the CLI runs.
const fs::path& small_data_dir() {
  static const fs::path dir = [] {
    const fs::path d = scratch_dir("acc_small");
    SyntheticConfig c;
    c.image_size = 32;
    c.samples_per_class = 10;
    generate_dataset(c, 3, d);
    return d;
  }();
  return dir;
}

const Dataset& small_data() {
  static const Dataset data = load_dataset(small_data_dir() / "manifest.txt");
  return data;
}

// Default configuration at 64 x 64: seed 1, 5 classes, 3 train / 2 test.
const Dataset& desk_data() {
  static const Dataset data = [] {
    const fs::path d = scratch_dir("acc_desk");
    generate_dataset(SyntheticConfig{}, 1, d, threads());
    return load_dataset(d / "manifest.txt", threads());
  }();
  return data;
}

// --- 1 ----------------------------------------------------------------------------

void gradient_oracle(Outcome& o) {
  const auto start = std::chrono::steady_clock::now();
  const CliResult r = run_cli("--seed 0 grad-check");
  const double secs = elapsed(start);
  int passed = 0, failed = 0;
  std::istringstream lines(r.out);
  std::string line;
  std::vector<std::string> failures;
  while (std::getline(lines, line)) {
    if (line.rfind("PASS ", 0) == 0) ++passed;
    if (line.rfind("FAIL ", 0) == 0) {
      ++failed;
      failures.push_back(line.substr(5));
    }
  }
  o.detail << passed << " cases passed, " << failed << " failed, " << std::fixed << std::setprecision(1) << secs
           << "s; ";
  for (const std::string& f : failures) o.detail << "FAILED " << f << "; ";
  o.require(r.code == 0, "grad-check exit code " + std::to_string(r.code));
  o.require(passed > 0, "no cases ran");
  o.require(secs < 120.0, "runtime < 120 s");
}

// --- 2 ----------------------------------------------------------------------------

void attention_invariants(Outcome& o) {
  Rng rng(2);
  double worst_sum = 0.0;
  int out_of_range = 0, swap_mismatch = 0;
  for (int r = 0; r < 1000; ++r) {
    const int c = 2 + static_cast<int>(rng.below(15));
    const int h = 1 + static_cast<int>(rng.below(8)), w = 1 + static_cast<int>(rng.below(8));
    Tape tape;
    const Var f = tape.constant(random_tensor({c, h, w}, rng, -3, 3));
    const Var zf = tape.constant(random_tensor({c}, rng, -3, 3));
    const Var zb = tape.constant(random_tensor({c}, rng, -3, 3));
    const AttentionPair a = attention_maps(f, {zf, zb});
    const AttentionPair s = attention_maps(f, {zb, zf});
    for (std::size_t i = 0; i < a.fg.value().size(); ++i) {
      const double af = a.fg.value()[i], ab = a.bg.value()[i];
      worst_sum = std::max(worst_sum, std::abs(af + ab - 1.0));
      out_of_range += (af < 0 || af > 1 || ab < 0 || ab > 1) ? 1 : 0;
    }
    swap_mismatch += (a.fg.value() == s.bg.value() && a.bg.value() == s.fg.value()) ? 0 : 1;
  }
  o.detail << "max |A^f + A^b - 1| = " << worst_sum << ", out of range " << out_of_range << ", swap mismatches "
           << swap_mismatch;
  o.require(worst_sum <= 1e-5, "sum within 1e-5");
  o.require(out_of_range == 0, "maps in [0, 1]");
  o.require(swap_mismatch == 0, "swap is exact");
}

// --- 3 ----------------------------------------------------------------------------

void probe_oracle(Outcome& o) {
  Rng rng(3);
  double worst = 0.0;
  for (int r = 0; r < 100; ++r) {
    const int c = 1 + static_cast<int>(rng.below(16));
    const int h = 1 + static_cast<int>(rng.below(8)), w = 1 + static_cast<int>(rng.below(8));
    const Tensor f = random_tensor({c, h, w}, rng, -2, 2);
    Tensor m = random_tensor({h, w}, rng, 0, 1);
    if (r == 0) m.fill(1.0f);
    if (r == 1) m.fill(0.0f);
    if (r == 2) {
      for (float& v : m.data()) v = v < 0.5f ? 0.0f : 1.0f;
    }
    Tape tape;
    const ProbePair p = extract_probes(tape.constant(f), m);
    const std::size_t n = static_cast<std::size_t>(h * w);
    double wf = 0.0, wb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      wf += m[i];
      wb += 1.0 - m[i];
    }
    for (std::size_t ch = 0; ch < static_cast<std::size_t>(c); ++ch) {
      double sf = 0.0, sb = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        sf += static_cast<double>(f[ch * n + i]) * m[i];
        sb += static_cast<double>(f[ch * n + i]) * (1.0 - m[i]);
      }
      worst = std::max(worst, std::abs(p.fg.value()[ch] - sf / (wf + 1e-6)));
      worst = std::max(worst, std::abs(p.bg.value()[ch] - sb / (wb + 1e-6)));
    }
  }
  o.detail << "max deviation from the scalar oracle " << worst << " over 100 instances (full, empty, binary, soft)";
  o.require(worst <= 1e-5, "within 1e-5");
}

// --- 4 ----------------------------------------------------------------------------

void kshot_properties(Outcome& o) {
  Rng rng(4);
  Tape tape;
  std::vector<ProbePair> list;
  for (int i = 0; i < 5; ++i) {
    list.push_back({tape.constant(random_tensor({16}, rng, -3, 3)), tape.constant(random_tensor({16}, rng, -3, 3))});
  }
  const ProbePair ref = kshot_probes(list);
  double worst = 0.0;
  std::vector<int> order{0, 1, 2, 3, 4};
  while (std::next_permutation(order.begin(), order.end())) {
    std::vector<ProbePair> perm;
    for (int i : order) perm.push_back(list[static_cast<std::size_t>(i)]);
    const ProbePair got = kshot_probes(perm);
    for (std::size_t i = 0; i < 16; ++i) {
      worst = std::max(worst, static_cast<double>(std::abs(got.fg.value()[i] - ref.fg.value()[i])));
      worst = std::max(worst, static_cast<double>(std::abs(got.bg.value()[i] - ref.bg.value()[i])));
    }
  }
  const ProbePair one = kshot_probes({list[0]});
  const bool identity = one.fg.value() == list[0].fg.value() && one.bg.value() == list[0].bg.value();

  // k = 5 copies of the k = 1 support, episode by episode.
  const ModelConfig cfg = tiny_config();
  const ModelParams params = init_params(cfg, 4);
  const Predictor predict = model_predictor(params, cfg);
  const std::vector<Episode> k1 = sample_episodes(small_data(), {0, 1}, 1, 40, 4);
  std::vector<Episode> k5 = k1;
  for (Episode& e : k5) e.supports.assign(5, e.supports.front());
  const std::vector<Tensor> p1 = run_predictions(predict, k1, threads());
  const std::vector<Tensor> p5 = run_predictions(predict, k5, threads());
  int differing = 0;
  for (std::size_t i = 0; i < p1.size(); ++i) differing += p1[i] == p5[i] ? 0 : 1;
  const double m1 = score_predictions(k1, p1, {0, 1}).mean_iou;
  const double m5 = score_predictions(k5, p5, {0, 1}).mean_iou;

  o.detail << "permutation deviation " << worst << " over 120 orders, k=1 identity " << (identity ? "exact" : "NOT exact")
           << ", " << differing << "/" << p1.size() << " episodes differ between k=5 replicated and k=1 (mIoU " << m1
           << " vs " << m5 << ")";
  o.require(worst <= 1e-6, "permutation invariance within 1e-6");
  o.require(identity, "k=1 identity");
  o.require(differing == 0 && m1 == m5, "k=5 replicated equals k=1 per episode");
}

// --- 5 ----------------------------------------------------------------------------

void dual_consistency(Outcome& o) {
  const ModelConfig cfg;  // default architecture
  const ModelParams params = init_params(cfg, 5);
  int mismatches = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const ImageSample& s = desk_data().samples()[i * 97];
    Tape tape;
    const BoundParams p = bind(tape, params, false);
    const Tensor img = normalize_image(s.image, cfg);
    const std::vector<Var> sups{tape.constant(img)};
    const std::vector<Tensor> masks{s.mask};
    const DualPrediction d = forward_dual(p, cfg, tape.constant(img), sups, masks);
    mismatches += d.query_logits.value() == d.support_logits.value() ? 0 : 1;
  }
  const EvalReport oracle =
      identical_input_test(oracle_predictor(), desk_data(), desk_data().manifest().config().test_classes, 100, 5, threads());
  o.detail << mismatches << "/5 query==support instances with differing branch logits; oracle identical-input mIoU "
           << oracle.mean_iou;
  o.require(mismatches == 0, "bitwise-identical branches");
  o.require(oracle.mean_iou == 1.0, "oracle identical-input mIoU = 1");
}

// --- 6 ----------------------------------------------------------------------------

double mean_test_miou(const Predictor& predict, const Dataset& data) {
  double s = 0.0;
  for (int r = 0; r < 3; ++r) {
    s += evaluate(predict, data, data.manifest().config().test_classes, 1, 300, repeat_seed(0, r), threads()).mean_iou;
  }
  return s / 3.0;
}

void desk_scale(Outcome& o) {
  const Dataset& data = desk_data();
  const ModelConfig cfg;
  TrainConfig tc;
  tc.epochs = 60;
  tc.seed = 0;
  tc.threads = threads();
  const auto start = std::chrono::steady_clock::now();
  const TrainState st = train(tc, cfg, data, {scratch_dir("acc_desk_run"), {}});
  const double secs = elapsed(start);

  // The retained checkpoint (best validation mIoU) is the trained model;
  // the last-epoch weights are reported alongside.
  const double score = mean_test_miou(model_predictor(st.best_params, cfg), data);
  const double last_score = mean_test_miou(model_predictor(st.params, cfg), data);
  const double background = mean_test_miou(background_predictor(), data);
  const double untrained = mean_test_miou(model_predictor(init_params(cfg, mix_seed(tc.seed, 0)), cfg), data);
  const double baseline = std::max(background, untrained);
  o.detail << std::fixed << std::setprecision(4) << "test mIoU " << score << " (epoch " << st.best_epoch
           << " checkpoint; last epoch " << last_score << "), background " << background << ", untrained " << untrained
           << ", margin " << score - baseline << ", floor " << kDeskScaleFloor << ", training " << std::setprecision(0)
           << secs << "s";
  o.require(score - baseline >= 0.25, "margin >= 0.25");
  o.require(score >= kDeskScaleFloor, "regression floor");
  o.require(secs <= 1800.0, "training <= 30 min");
}

// --- 7, 8 -------------------------------------------------------------------------

struct AblationMeans {
  std::map<std::string, double> miou, identical;
  std::map<std::string, std::vector<double>> miou_per_seed, identical_per_seed;
};

const AblationMeans& ablation_means() {
  static const AblationMeans means = [] {
    const std::vector<AblationRow> full = ablation_grid();
    std::vector<AblationRow> rows;
    for (const AblationRow& r : full) {
      if (!r.use_ica) rows.push_back(r);
    }
    AblationSettings s;
    s.n_episodes = 300;
    s.identical_n = 100;
    s.eval_seed = 0;
    s.threads = threads();
    AblationMeans m;
    const fs::path dir = scratch_dir("acc_ablation");
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      TrainConfig tc;
      tc.epochs = 60;
      tc.seed = seed;
      tc.threads = threads();
      for (const AblationResult& r : ablate(ModelConfig{}, tc, desk_data(), s, rows, dir / ("seed_" + std::to_string(seed)))) {
        m.miou_per_seed[r.row.name].push_back(r.report.mean_iou);
        m.identical_per_seed[r.row.name].push_back(r.identical_iou);
      }
    }
    for (const auto& [name, v] : m.miou_per_seed) m.miou[name] = std::accumulate(v.begin(), v.end(), 0.0) / 3.0;
    for (const auto& [name, v] : m.identical_per_seed) {
      m.identical[name] = std::accumulate(v.begin(), v.end(), 0.0) / 3.0;
    }
    return m;
  }();
  return means;
}

void print_per_seed(Outcome& o, const std::map<std::string, std::vector<double>>& per_seed) {
  o.detail << " (per seed:";
  for (const auto& [name, v] : per_seed) {
    o.detail << ' ' << name << '=';
    for (std::size_t i = 0; i < v.size(); ++i) o.detail << (i ? "/" : "") << v[i];
  }
  o.detail << ')';
}

void ablation_direction(Outcome& o) {
  const AblationMeans& m = ablation_means();
  const double base = m.miou.at("baseline"), dpr = m.miou.at("dpr"), fbaf = m.miou.at("fbaf"),
               both = m.miou.at("dpr+fbaf");
  o.detail << std::fixed << std::setprecision(4) << "mean over 3 seeds: baseline " << base << ", dpr " << dpr
           << ", fbaf " << fbaf << ", dpr+fbaf " << both;
  print_per_seed(o, m.miou_per_seed);
  o.require(both >= std::max(dpr, fbaf) - 0.02, "dpr+fbaf >= max(dpr, fbaf) - 0.02");
  o.require(dpr >= base, "dpr >= baseline");
  o.require(fbaf >= base, "fbaf >= baseline");
}

void identical_gain(Outcome& o) {
  const AblationMeans& m = ablation_means();
  const double base = m.identical.at("baseline"), dpr = m.identical.at("dpr");
  o.detail << std::fixed << std::setprecision(4) << "identical-input mIoU over 3 seeds: dpr " << dpr << ", baseline "
           << base << ", gain " << dpr - base;
  print_per_seed(o, m.identical_per_seed);
  o.require(dpr - base > 0.0, "gain > 0");
}

// --- 9 ----------------------------------------------------------------------------

const std::string kTiny =
    " --input-size 32 --feature-channels 8 --fusion-channels 16 --decoder-channels 8"
    " --encoder-channels 4,8,8 --aspp-rates 1,2";
const std::string kQuickTrain = " --epochs 2 --episodes-per-epoch 4 --batch 2 --val-episodes 4";

void ica_contract(Outcome& o) {
  const float p0 = switch_prob_schedule(0, TrainConfig{}.ica_p0, TrainConfig{}.ica_half_life);
  Rng rng(9);
  int unequal = 0, fired = 0;
  for (int i = 0; i < 50; ++i) {
    Tensor img = small_data().samples()[static_cast<std::size_t>(i)].image;
    if (!ica_augment(img, 1.0f, rng)) continue;
    ++fired;
    const std::size_t n = img.size() / 3;
    for (std::size_t j = 0; j < n; ++j) unequal += (img[j] == img[n + j] && img[j] == img[2 * n + j]) ? 0 : 1;
  }

  const fs::path dir = scratch_dir("acc_ica");
  const std::string data = small_data_dir().string();
  const CliResult t = run_cli("--seed 2 train --data " + data + " --out " + dir.string() + kTiny + kQuickTrain);
  const std::string eval = " eval --data " + data + " --checkpoint " + (dir / "best.ckpt").string() + " --episodes 20 --repeats 2";
  const CliResult off = run_cli(eval);
  const CliResult on = run_cli(eval + " --ica");
  o.detail << "p(0) = " << p0 << ", " << fired << "/50 switches fired with " << unequal
           << " unequal pixels, eval stdout with and without --ica " << (on.out == off.out ? "identical" : "DIFFERENT");
  o.require(p0 == 0.25f, "switch_prob_schedule(0) = 0.25");
  o.require(fired == 50 && unequal == 0, "equal channels when the switch fires");
  o.require(t.code == 0 && off.code == 0 && on.code == 0 && !off.out.empty(), "CLI runs succeed");
  o.require(on.out == off.out, "eval bit-identical with --ica");
}

// --- 10 ---------------------------------------------------------------------------

void protocol_determinism(Outcome& o) {
  const fs::path root = scratch_dir("acc_threads");
  auto both = [&](const std::string& name, const std::function<std::string(const fs::path&)>& args) {
    bool ok = true;
    std::string out[2];
    for (int i = 0; i < 2; ++i) {
      const fs::path d = root / (name + (i ? "_t3" : "_t1"));
      const CliResult r = run_cli((i ? "--threads 3 " : "--threads 1 ") + args(d));
      ok = ok && r.code == 0;
      out[i] = r.out;
    }
    const fs::path a = root / (name + "_t1"), b = root / (name + "_t3");
    const bool same = out[0] == out[1] && (!fs::exists(a) || trees_equal(a, b));
    o.detail << name << ' ' << (ok && same ? "identical" : "DIFFERENT") << "; ";
    o.require(ok, name + " exit 0");
    o.require(same, name + " byte-identical");
  };
  both("gen-data", [](const fs::path& d) {
    return "--seed 7 gen-data --image-size 32 --samples-per-class 10 --out " + d.string();
  });
  const std::string data = (root / "gen-data_t1").string();
  both("train", [&](const fs::path& d) {
    return "--seed 1 train --data " + data + " --out " + d.string() + kTiny + kQuickTrain;
  });
  const std::string ckpt = (root / "train_t1" / "best.ckpt").string();
  both("eval", [&](const fs::path& d) {
    return "eval --data " + data + " --checkpoint " + ckpt + " --episodes 30 --repeats 2 --out " + (d.string() + ".csv");
  });
  // eval --out writes a file next to the tree; compare it directly
  o.require(slurp(root / "eval_t1.csv") == slurp(root / "eval_t3.csv") && !slurp(root / "eval_t1.csv").empty(),
            "eval report byte-identical");
  both("ablate", [&](const fs::path& d) {
    return "ablate --data " + data + kTiny + kQuickTrain + " --episodes 8 --identical-n 4 --out " + d.string();
  });
}

struct Criterion {
  int id;
  const char* title;
  void (*fn)(Outcome&);
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "gradient oracle", gradient_oracle},
      {2, "attention map invariants", attention_invariants},
      {3, "probe extraction oracle", probe_oracle},
      {4, "k-shot probe properties", kshot_properties},
      {5, "dual-branch consistency", dual_consistency},
      {6, "desk-scale training", desk_scale},
      {7, "ablation direction", ablation_direction},
      {8, "identical-input gain", identical_gain},
      {9, "ICA contract", ica_contract},
      {10, "protocol determinism", protocol_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const Criterion& c : all) {
    if (!selected.empty() && selected.count(c.id) == 0) continue;
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      c.fn(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "]";
    }
    failures += o.pass ? 0 : 1;
    std::cout << "criterion " << c.id << ": " << (o.pass ? "PASS" : "FAIL") << " — " << c.title << ": "
              << o.detail.str() << " (" << std::fixed << std::setprecision(1) << elapsed(start) << "s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
