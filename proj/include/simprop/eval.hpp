#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "simprop/data.hpp"
#include "simprop/model.hpp"

namespace simprop {

/// Returns a binary H x W mask for the episode's query.
using Predictor = std::function<Tensor(const Episode&)>;

Predictor model_predictor(const ModelParams& params, const ModelConfig& cfg);
/// Debug predictor that returns the ground-truth query mask.
Predictor oracle_predictor();
/// Predicts background everywhere.
Predictor background_predictor();

/// |pred & gt| / |pred | gt|; 1 when both are empty.
double iou(const Tensor& pred, const Tensor& gt);

/// Intersections and unions summed over many masks before dividing.
struct IouAccumulator {
  double intersection = 0.0;
  double union_area = 0.0;

  void add(const Tensor& pred, const Tensor& gt);
  double value() const { return union_area > 0.0 ? intersection / union_area : 1.0; }
};

struct EvalReport {
  std::vector<int> classes;
  std::vector<double> class_iou;
  double mean_iou = 0.0;
  /// Class-agnostic mean over episodes of (IoU_fg + IoU_bg) / 2.
  double fgbg_iou = 0.0;
  int n_episodes = 0;
  int k = 1;
  std::uint64_t seed = 0;
};

std::vector<Episode> sample_episodes(const Dataset& data, const std::vector<int>& classes, int k, int n,
                                     std::uint64_t seed);

/// Runs `predict` on every episode (in parallel) and returns predictions in
/// episode order.
std::vector<Tensor> run_predictions(const Predictor& predict, const std::vector<Episode>& episodes, int threads);

/// Per-class accumulated IoU, mean over `classes`, and the FG-BG metric.
EvalReport score_predictions(const std::vector<Episode>& episodes, const std::vector<Tensor>& predictions,
                             const std::vector<int>& classes);

/// Episode seed of evaluation repeat r; repeat 0 uses `seed` itself.
inline std::uint64_t repeat_seed(std::uint64_t seed, int r) {
  return r == 0 ? seed : mix_seed(seed, 1000 + static_cast<std::uint64_t>(r));
}

EvalReport evaluate(const Predictor& predict, const Dataset& data, const std::vector<int>& classes, int k,
                    int n_episodes, std::uint64_t seed, int threads);

/// Support := query (image and mask) for n sampled images.
EvalReport identical_input_test(const Predictor& predict, const Dataset& data, const std::vector<int>& classes, int n,
                                std::uint64_t seed, int threads);

// --- error overlap ----------------------------------------------------------------

struct OverlapStats {
  double fn_overlap_pct = 0.0;
  double fp_overlap_pct = 0.0;
  /// 100 * (IoU of reference b - IoU of method a).
  double tp_gap_pct = 0.0;
};

/// Single-mask version.
OverlapStats error_overlap(const Tensor& pred_a, const Tensor& pred_b, const Tensor& gt);

/// Dataset-level version: error-set intersections and unions and IoU terms are
/// summed over all masks before forming ratios.
class OverlapAccumulator {
 public:
  void add(const Tensor& pred_a, const Tensor& pred_b, const Tensor& gt);
  OverlapStats stats() const;

 private:
  double fn_inter_ = 0, fn_union_ = 0, fp_inter_ = 0, fp_union_ = 0;
  IouAccumulator iou_a_, iou_b_;
};

// --- similarity probes -----------------------------------------------------------

/// Masked-average probes over the ground-truth region and the mispredicted region.
struct SimilarityProbe {
  Tensor gt_probe;
  Tensor error_probe;
  bool error_empty = true;
};

SimilarityProbe similarity_probe(const Tensor& features, const Tensor& gt, const Tensor& pred);

/// Encoder features (C x h x w) of a raw image.
Tensor encode_image(const ModelParams& params, const ModelConfig& cfg, const Tensor& image);

struct SimilarityRatio {
  double mean = 0.0;
  double stddev = 0.0;
  int used = 0;
  int skipped = 0;
};

/// Mean and std of (Z^e(A) . Z^e(B)) / (Z^g(A) . Z^g(B)) over same-class
/// pairs, where A is predicted with B as support and vice versa.
SimilarityRatio map_similarity_ratio(const ModelParams& params, const ModelConfig& cfg, const Dataset& data,
                                     const std::vector<int>& classes, int n_pairs, std::uint64_t seed, int threads);

/// Same computation given precomputed features, masks and predictions.
SimilarityRatio similarity_ratio_from(const std::vector<SimilarityProbe>& a, const std::vector<SimilarityProbe>& b);

struct ClassSimilarity {
  int class_id = 0;
  double fg_cos = 0.0;
  double bg_cos = 0.0;
  int pairs = 0;
};

double cosine(const Tensor& a, const Tensor& b);

/// Per class, mean cosine similarity of the two images' FG probes and of
/// their BG probes, over same-class pairs.
std::vector<ClassSimilarity> fgbg_similarity_stats(const ModelParams& params, const ModelConfig& cfg,
                                                   const Dataset& data, const std::vector<int>& classes, int n_pairs,
                                                   std::uint64_t seed, int threads);

// --- reports ------------------------------------------------------------------------

void write_eval_csv(std::ostream& out, const std::vector<EvalReport>& reports);
std::string format_fixed(double v, int digits = 6);

}  // namespace simprop
