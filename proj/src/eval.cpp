#include "simprop/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

#include "simprop/parallel.hpp"

namespace simprop {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ValidationError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  }
}

Tensor complement(const Tensor& m) {
  Tensor out = m;
  for (float& v : out.data()) v = v > 0.5f ? 0.0f : 1.0f;
  return out;
}

std::pair<std::size_t, std::size_t> distinct_pair(const std::vector<std::size_t>& pool, Rng& rng) {
  const std::size_t a = rng.below(pool.size());
  std::size_t b = rng.below(pool.size() - 1);
  if (b >= a) ++b;
  return {pool[a], pool[b]};
}

}  // namespace

Predictor model_predictor(const ModelParams& params, const ModelConfig& cfg) {
  return [&params, cfg](const Episode& e) {
    std::vector<Tensor> images, masks;
    for (const ImageSample& s : e.supports) {
      images.push_back(s.image);
      masks.push_back(s.mask);
    }
    return predict(params, cfg, e.query.image, images, masks);
  };
}

Predictor oracle_predictor() {
  return [](const Episode& e) { return e.query.mask; };
}

Predictor background_predictor() {
  return [](const Episode& e) { return Tensor(e.query.mask.shape(), 0.0f); };
}

double iou(const Tensor& pred, const Tensor& gt) {
  IouAccumulator acc;
  acc.add(pred, gt);
  return acc.value();
}

void IouAccumulator::add(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "iou");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred[i] > 0.5f, g = gt[i] > 0.5f;
    intersection += (p && g);
    union_area += (p || g);
  }
}

std::vector<Episode> sample_episodes(const Dataset& data, const std::vector<int>& classes, int k, int n,
                                     std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) out.push_back(sample_episode(data, classes, k, rng));
  return out;
}

std::vector<Tensor> run_predictions(const Predictor& predict, const std::vector<Episode>& episodes, int threads) {
  std::vector<Tensor> preds(episodes.size());
  parallel_for(episodes.size(), threads, [&](std::size_t i) { preds[i] = predict(episodes[i]); });
  return preds;
}

EvalReport score_predictions(const std::vector<Episode>& episodes, const std::vector<Tensor>& predictions,
                             const std::vector<int>& classes) {
  if (episodes.size() != predictions.size()) throw ValidationError("prediction count does not match episodes");
  std::map<int, IouAccumulator> per_class;
  double fgbg = 0.0;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const Tensor& gt = episodes[i].query.mask;
    const Tensor& pred = predictions[i];
    per_class[episodes[i].class_id].add(pred, gt);
    fgbg += 0.5 * (iou(pred, gt) + iou(complement(pred), complement(gt)));
  }
  EvalReport r;
  r.n_episodes = static_cast<int>(episodes.size());
  r.k = episodes.empty() ? 0 : static_cast<int>(episodes.front().supports.size());
  double total = 0.0;
  for (int c : classes) {
    auto it = per_class.find(c);
    if (it == per_class.end()) continue;
    r.classes.push_back(c);
    r.class_iou.push_back(it->second.value());
    total += it->second.value();
  }
  r.mean_iou = r.classes.empty() ? 0.0 : total / static_cast<double>(r.classes.size());
  r.fgbg_iou = episodes.empty() ? 0.0 : fgbg / static_cast<double>(episodes.size());
  return r;
}

EvalReport evaluate(const Predictor& predict, const Dataset& data, const std::vector<int>& classes, int k,
                    int n_episodes, std::uint64_t seed, int threads) {
  const auto episodes = sample_episodes(data, classes, k, n_episodes, seed);
  EvalReport r = score_predictions(episodes, run_predictions(predict, episodes, threads), classes);
  r.k = k;
  r.seed = seed;
  return r;
}

EvalReport identical_input_test(const Predictor& predict, const Dataset& data, const std::vector<int>& classes, int n,
                                std::uint64_t seed, int threads) {
  if (classes.empty()) throw ValidationError("identical_input_test: empty class set");
  Rng rng(seed);
  std::vector<Episode> episodes;
  for (int i = 0; i < n; ++i) {
    const int cls = classes[rng.below(classes.size())];
    const auto& pool = data.class_indices(cls);
    if (pool.empty()) throw ValidationError("class " + std::to_string(cls) + " has no samples");
    const ImageSample& s = data.samples()[pool[rng.below(pool.size())]];
    episodes.push_back(Episode{s, {s}, cls});
  }
  EvalReport r = score_predictions(episodes, run_predictions(predict, episodes, threads), classes);
  r.k = 1;
  r.seed = seed;
  return r;
}

// --- error overlap ------------------------------------------------------------------

OverlapStats error_overlap(const Tensor& pred_a, const Tensor& pred_b, const Tensor& gt) {
  OverlapAccumulator acc;
  acc.add(pred_a, pred_b, gt);
  return acc.stats();
}

void OverlapAccumulator::add(const Tensor& pred_a, const Tensor& pred_b, const Tensor& gt) {
  require_same(pred_a, gt, "error_overlap");
  require_same(pred_b, gt, "error_overlap");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool g = gt[i] > 0.5f, a = pred_a[i] > 0.5f, b = pred_b[i] > 0.5f;
    const bool fn_a = g && !a, fn_b = g && !b;
    const bool fp_a = a && !g, fp_b = b && !g;
    fn_inter_ += fn_a && fn_b;
    fn_union_ += fn_a || fn_b;
    fp_inter_ += fp_a && fp_b;
    fp_union_ += fp_a || fp_b;
  }
  iou_a_.add(pred_a, gt);
  iou_b_.add(pred_b, gt);
}

OverlapStats OverlapAccumulator::stats() const {
  OverlapStats s;
  s.fn_overlap_pct = fn_union_ > 0 ? 100.0 * fn_inter_ / fn_union_ : 0.0;
  s.fp_overlap_pct = fp_union_ > 0 ? 100.0 * fp_inter_ / fp_union_ : 0.0;
  s.tp_gap_pct = 100.0 * (iou_b_.value() - iou_a_.value());
  return s;
}

// --- similarity -------------------------------------------------------------------------

Tensor encode_image(const ModelParams& params, const ModelConfig& cfg, const Tensor& image) {
  Tape tape;
  const BoundParams p = bind(tape, params, false);
  return encode(p, cfg, tape.constant(normalize_image(image, cfg))).value();
}

SimilarityProbe similarity_probe(const Tensor& features, const Tensor& gt, const Tensor& pred) {
  require_same(gt, pred, "similarity_probe");
  Tensor error(gt.shape());
  double n_err = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool wrong = (gt[i] > 0.5f) != (pred[i] > 0.5f);
    error[i] = wrong ? 1.0f : 0.0f;
    n_err += wrong;
  }
  Tape tape;
  const Var f = tape.constant(features);
  const int h = features.dim(1), w = features.dim(2);
  SimilarityProbe p;
  p.gt_probe = masked_average(f, downsample_mask(gt, h, w)).value();
  p.error_probe = masked_average(f, downsample_mask(error, h, w)).value();
  p.error_empty = n_err == 0.0;
  return p;
}

namespace {

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

}  // namespace

double cosine(const Tensor& a, const Tensor& b) {
  require_same(a, b, "cosine");
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  // guard only degenerate (zero) vectors, so identical inputs give exactly 1
  return dot(a, b) / std::max(na * nb, 1e-12);
}

SimilarityRatio similarity_ratio_from(const std::vector<SimilarityProbe>& a, const std::vector<SimilarityProbe>& b) {
  if (a.size() != b.size()) throw ValidationError("similarity ratio: pair lists differ in length");
  std::vector<double> ratios;
  SimilarityRatio out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].error_empty || b[i].error_empty) {
      ++out.skipped;
      continue;
    }
    const double den = dot(a[i].gt_probe, b[i].gt_probe);
    if (std::abs(den) < 1e-8) {
      ++out.skipped;
      continue;
    }
    ratios.push_back(dot(a[i].error_probe, b[i].error_probe) / den);
  }
  if (ratios.empty()) throw ValidationError("similarity ratio: every pair was skipped");
  double mean = 0.0;
  for (double r : ratios) mean += r;
  mean /= static_cast<double>(ratios.size());
  double var = 0.0;
  for (double r : ratios) var += (r - mean) * (r - mean);
  out.mean = mean;
  out.stddev = std::sqrt(var / static_cast<double>(ratios.size()));
  out.used = static_cast<int>(ratios.size());
  return out;
}

SimilarityRatio map_similarity_ratio(const ModelParams& params, const ModelConfig& cfg, const Dataset& data,
                                     const std::vector<int>& classes, int n_pairs, std::uint64_t seed, int threads) {
  if (classes.empty()) throw ValidationError("map_similarity_ratio: empty class set");
  Rng rng(seed);
  std::vector<std::pair<const ImageSample*, const ImageSample*>> pairs;
  for (int i = 0; i < n_pairs; ++i) {
    const int cls = classes[rng.below(classes.size())];
    const auto& pool = data.class_indices(cls);
    if (pool.size() < 2) throw ValidationError("class " + std::to_string(cls) + " needs at least 2 samples");
    const auto [ia, ib] = distinct_pair(pool, rng);
    pairs.emplace_back(&data.samples()[ia], &data.samples()[ib]);
  }
  std::vector<SimilarityProbe> pa(pairs.size()), pb(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const ImageSample& a = *pairs[i].first;
    const ImageSample& b = *pairs[i].second;
    const std::vector<Tensor> img_b{b.image}, mask_b{b.mask}, img_a{a.image}, mask_a{a.mask};
    const Tensor pred_a = predict(params, cfg, a.image, img_b, mask_b);
    const Tensor pred_b = predict(params, cfg, b.image, img_a, mask_a);
    pa[i] = similarity_probe(encode_image(params, cfg, a.image), a.mask, pred_a);
    pb[i] = similarity_probe(encode_image(params, cfg, b.image), b.mask, pred_b);
  });
  return similarity_ratio_from(pa, pb);
}

std::vector<ClassSimilarity> fgbg_similarity_stats(const ModelParams& params, const ModelConfig& cfg,
                                                   const Dataset& data, const std::vector<int>& classes, int n_pairs,
                                                   std::uint64_t seed, int threads) {
  Rng rng(seed);
  struct Job {
    std::size_t slot;
    const ImageSample* a;
    const ImageSample* b;
  };
  std::vector<Job> jobs;
  std::vector<ClassSimilarity> out;
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    const auto& pool = data.class_indices(classes[ci]);
    if (pool.size() < 2) throw ValidationError("class " + std::to_string(classes[ci]) + " needs at least 2 samples");
    out.push_back({classes[ci], 0.0, 0.0, n_pairs});
    for (int i = 0; i < n_pairs; ++i) {
      const auto [ia, ib] = distinct_pair(pool, rng);
      jobs.push_back({ci, &data.samples()[ia], &data.samples()[ib]});
    }
  }
  std::vector<std::pair<double, double>> cos(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i) {
    auto probes = [&](const ImageSample& s) {
      Tape tape;
      const Var f = tape.constant(encode_image(params, cfg, s.image));
      const Tensor soft = downsample_mask(s.mask, f.value().dim(1), f.value().dim(2));
      const ProbePair p = extract_probes(f, soft, false);
      return std::pair{p.fg.value(), p.bg.value()};
    };
    const auto [fa, ba] = probes(*jobs[i].a);
    const auto [fb, bb] = probes(*jobs[i].b);
    cos[i] = {cosine(fa, fb), cosine(ba, bb)};
  });
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    out[jobs[i].slot].fg_cos += cos[i].first;
    out[jobs[i].slot].bg_cos += cos[i].second;
  }
  for (ClassSimilarity& c : out) {
    if (c.pairs > 0) {
      c.fg_cos /= c.pairs;
      c.bg_cos /= c.pairs;
    }
  }
  return out;
}

std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

void write_eval_csv(std::ostream& out, const std::vector<EvalReport>& reports) {
  std::vector<int> classes;
  if (!reports.empty()) classes = reports.front().classes;
  out << "seed,k,n_episodes,mean_iou,fgbg_iou";
  for (int c : classes) out << ",class_" << c << "_iou";
  out << '\n';
  double mean = 0.0, fgbg = 0.0;
  std::vector<double> per(classes.size(), 0.0);
  for (const EvalReport& r : reports) {
    out << r.seed << ',' << r.k << ',' << r.n_episodes << ',' << format_fixed(r.mean_iou) << ','
        << format_fixed(r.fgbg_iou);
    for (std::size_t i = 0; i < classes.size(); ++i) {
      const double v = i < r.class_iou.size() ? r.class_iou[i] : 0.0;
      per[i] += v;
      out << ',' << format_fixed(v);
    }
    out << '\n';
    mean += r.mean_iou;
    fgbg += r.fgbg_iou;
  }
  if (reports.size() > 1) {
    const double n = static_cast<double>(reports.size());
    out << "mean," << reports.front().k << ',' << reports.front().n_episodes << ',' << format_fixed(mean / n) << ','
        << format_fixed(fgbg / n);
    for (double v : per) out << ',' << format_fixed(v / n);
    out << '\n';
  }
}

}  // namespace simprop
