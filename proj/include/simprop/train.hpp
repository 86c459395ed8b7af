#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "simprop/data.hpp"
#include "simprop/eval.hpp"
#include "simprop/model.hpp"

namespace simprop {

struct TrainConfig {
  float lr = 2.5e-3f;
  int batch_size = 8;
  int epochs = 180;
  int episodes_per_epoch = 200;
  int val_episodes = 50;
  std::uint64_t seed = 0;
  /// Also predict the support mask (0.5/0.5 weighted loss).
  bool use_dpr = true;
  /// Channel-average the query with a decaying switch probability.
  bool use_ica = true;
  float ica_p0 = 0.25f;
  int ica_half_life = 45;
  /// Classes episodes are drawn from; empty means the manifest's train split.
  std::vector<int> classes;
  int threads = 1;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_miou = 0.0;
  float switch_prob = 0.0f;
  float lr = 0.0f;
};

struct TrainState {
  ModelParams params;
  ModelParams best_params;
  int epoch = 0;
  int best_epoch = -1;
  double best_val_miou = -1.0;
  std::vector<EpochMetrics> log;
};

/// Where train() writes its artifacts; empty dir means in-memory only.
struct TrainOutput {
  std::filesystem::path dir;
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// 0.5 * CE(query) + 0.5 * CE(support) with DPr, otherwise CE(query).
Var loss_dual(const DualPrediction& pred, const Tensor& gt_query, const Tensor& gt_support, bool use_dpr);

/// Episode with normalized (and possibly channel-averaged) images.
struct PreparedEpisode {
  Tensor query;
  Tensor query_mask;
  std::vector<Tensor> supports;
  std::vector<Tensor> support_masks;
};

PreparedEpisode prepare_episode(const Episode& e, const ModelConfig& cfg);

struct EpisodeGradient {
  ModelParams grads;
  double loss = 0.0;
};

EpisodeGradient episode_gradient(const ModelParams& params, const ModelConfig& cfg, const PreparedEpisode& e,
                                 bool use_dpr);

/// Loss only (no gradient).
double episode_loss(const ModelParams& params, const ModelConfig& cfg, const PreparedEpisode& e, bool use_dpr);

/// Mean of per-episode gradients, reduced in episode order.
EpisodeGradient batch_gradient(const ModelParams& params, const ModelConfig& cfg,
                               const std::vector<PreparedEpisode>& batch, bool use_dpr, int threads);

TrainState train(const TrainConfig& train_cfg, const ModelConfig& model_cfg, const Dataset& data,
                 const TrainOutput& output = {});

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& log);

// --- ablation ---------------------------------------------------------------------

struct AblationRow {
  std::string name;
  bool use_dpr = false;
  bool use_fbaf = false;
  bool use_ica = false;
};

/// Baseline, DPr, FBAF, DPr+FBAF, and the full model (DPr+FBAF+ICA).
std::vector<AblationRow> ablation_grid();

struct AblationSettings {
  std::vector<int> test_classes;
  int n_episodes = 300;
  /// Samples for the support == query protocol.
  int identical_n = 100;
  std::uint64_t eval_seed = 0;
  int threads = 1;
};

struct AblationResult {
  AblationRow row;
  EvalReport report;
  double identical_iou = 0.0;
  double best_val_miou = 0.0;
};

/// Trains one model per row with the shared train seed, evaluating all rows on
/// the same test episodes. A non-empty dir gets one subdirectory per row.
std::vector<AblationResult> ablate(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Dataset& data,
                                   const AblationSettings& settings, const std::vector<AblationRow>& grid,
                                   const std::filesystem::path& dir = {});

void write_ablation_csv(std::ostream& out, const std::vector<AblationResult>& results);

}  // namespace simprop
