#include "simprop/train.hpp"

#include <cmath>
#include <fstream>
#include <ostream>

#include "simprop/checkpoint.hpp"
#include "simprop/parallel.hpp"

namespace simprop {

namespace fs = std::filesystem;

namespace {

// Independent RNG streams derived from the run seed.
enum Stream : std::uint64_t { kInit = 0, kEpisodes = 1, kValidation = 2, kIca = 3 };

void accumulate_into(ModelParams& acc, const ModelParams& g) {
  std::vector<const Tensor*> src;
  visit_params(g, [&](const std::string&, const Tensor& t) { src.push_back(&t); });
  std::size_t i = 0;
  visit_params(acc, [&](const std::string&, Tensor& t) {
    const Tensor& s = *src[i++];
    for (std::size_t j = 0; j < t.size(); ++j) t[j] += s[j];
  });
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0.0f) || !std::isfinite(lr)) throw ValidationError("lr must be finite and >= 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (episodes_per_epoch < 1) throw ValidationError("episodes_per_epoch must be >= 1");
  if (val_episodes < 1) throw ValidationError("val_episodes must be >= 1");
  if (ica_p0 < 0.0f || ica_p0 > 1.0f) throw ValidationError("ica_p0 must be in [0, 1]");
  if (ica_half_life < 1) throw ValidationError("ica_half_life must be >= 1");
}

Var loss_dual(const DualPrediction& pred, const Tensor& gt_query, const Tensor& gt_support, bool use_dpr) {
  const Var ce_q = softmax_cross_entropy(pred.query_logits, gt_query);
  if (!use_dpr) return ce_q;
  const Var ce_s = softmax_cross_entropy(pred.support_logits, gt_support);
  return add(affine(ce_q, 0.5f, 0.0f), affine(ce_s, 0.5f, 0.0f));
}

PreparedEpisode prepare_episode(const Episode& e, const ModelConfig& cfg) {
  PreparedEpisode p;
  p.query = normalize_image(e.query.image, cfg);
  p.query_mask = e.query.mask;
  for (const ImageSample& s : e.supports) {
    p.supports.push_back(normalize_image(s.image, cfg));
    p.support_masks.push_back(s.mask);
  }
  return p;
}

namespace {

// Builds the loss graph; the support branch is skipped without DPr since it
// cannot affect the loss.
Var build_loss(Tape& tape, const BoundParams& p, const ModelConfig& cfg, const PreparedEpisode& e, bool use_dpr) {
  const Var q = tape.constant(e.query);
  std::vector<Var> sups;
  for (const Tensor& s : e.supports) sups.push_back(tape.constant(s));
  if (!use_dpr) return softmax_cross_entropy(forward_query(p, cfg, q, sups, e.support_masks), e.query_mask);
  const DualPrediction pred = forward_dual(p, cfg, q, sups, e.support_masks);
  return loss_dual(pred, e.query_mask, e.support_masks.front(), true);
}

}  // namespace

EpisodeGradient episode_gradient(const ModelParams& params, const ModelConfig& cfg, const PreparedEpisode& e,
                                 bool use_dpr) {
  Tape tape;
  const BoundParams p = bind(tape, params, true);
  const Var loss = build_loss(tape, p, cfg, e, use_dpr);
  tape.backward(loss);
  return {collect_grads(tape, p), loss.value()[0]};
}

double episode_loss(const ModelParams& params, const ModelConfig& cfg, const PreparedEpisode& e, bool use_dpr) {
  Tape tape;
  const BoundParams p = bind(tape, params, false);
  return build_loss(tape, p, cfg, e, use_dpr).value()[0];
}

EpisodeGradient batch_gradient(const ModelParams& params, const ModelConfig& cfg,
                               const std::vector<PreparedEpisode>& batch, bool use_dpr, int threads) {
  if (batch.empty()) throw ValidationError("batch_gradient: empty batch");
  std::vector<EpisodeGradient> parts(batch.size());
  parallel_for(batch.size(), threads,
               [&](std::size_t i) { parts[i] = episode_gradient(params, cfg, batch[i], use_dpr); });
  EpisodeGradient out{std::move(parts.front().grads), parts.front().loss};
  for (std::size_t i = 1; i < parts.size(); ++i) {
    accumulate_into(out.grads, parts[i].grads);
    out.loss += parts[i].loss;
  }
  const float inv = 1.0f / static_cast<float>(batch.size());
  visit_params(out.grads, [&](const std::string&, Tensor& t) {
    for (float& v : t.data()) v *= inv;
  });
  out.loss /= static_cast<double>(batch.size());
  return out;
}

void write_metrics_csv(const fs::path& path, const std::vector<EpochMetrics>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "epoch,train_loss,val_miou,switch_prob,lr\n";
  for (const EpochMetrics& m : log) {
    out << m.epoch << ',' << format_fixed(m.train_loss) << ',' << format_fixed(m.val_miou) << ','
        << format_fixed(m.switch_prob) << ',' << format_fixed(m.lr) << '\n';
  }
}

TrainState train(const TrainConfig& train_cfg, const ModelConfig& model_cfg, const Dataset& data,
                 const TrainOutput& output) {
  train_cfg.validate();
  model_cfg.validate();
  if (data.image_size() != model_cfg.input_size) {
    throw ValidationError("dataset image size " + std::to_string(data.image_size()) + " does not match input_size " +
                          std::to_string(model_cfg.input_size));
  }
  const std::vector<int> classes =
      train_cfg.classes.empty() ? data.manifest().config().train_classes : train_cfg.classes;
  if (classes.empty()) throw ValidationError("no training classes");
  if (!output.dir.empty()) fs::create_directories(output.dir);

  TrainState state;
  state.params = init_params(model_cfg, mix_seed(train_cfg.seed, kInit));
  state.best_params = state.params;

  Rng episode_rng(mix_seed(train_cfg.seed, kEpisodes));
  Rng ica_rng(mix_seed(train_cfg.seed, kIca));
  const auto val_set = sample_episodes(data, classes, 1, train_cfg.val_episodes, mix_seed(train_cfg.seed, kValidation));

  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    const float switch_prob =
        train_cfg.use_ica ? switch_prob_schedule(epoch, train_cfg.ica_p0, train_cfg.ica_half_life) : 0.0f;
    double loss_sum = 0.0;
    int done = 0;
    while (done < train_cfg.episodes_per_epoch) {
      const int n = std::min(train_cfg.batch_size, train_cfg.episodes_per_epoch - done);
      std::vector<PreparedEpisode> batch;
      for (int i = 0; i < n; ++i) {
        PreparedEpisode e = prepare_episode(sample_episode(data, classes, 1, episode_rng), model_cfg);
        if (train_cfg.use_ica) ica_augment(e.query, switch_prob, ica_rng);
        batch.push_back(std::move(e));
      }
      const EpisodeGradient g = batch_gradient(state.params, model_cfg, batch, train_cfg.use_dpr, train_cfg.threads);
      if (!std::isfinite(g.loss)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", episode " + std::to_string(done) +
                           " (lr " + format_fixed(train_cfg.lr) + "); training diverged");
      }
      sgd_step(state.params, g.grads, train_cfg.lr);
      loss_sum += g.loss * n;
      done += n;
    }

    const EvalReport val = score_predictions(
        val_set, run_predictions(model_predictor(state.params, model_cfg), val_set, train_cfg.threads), classes);
    EpochMetrics m{epoch, loss_sum / train_cfg.episodes_per_epoch, val.mean_iou, switch_prob, train_cfg.lr};
    state.log.push_back(m);
    state.epoch = epoch + 1;
    if (val.mean_iou > state.best_val_miou) {
      state.best_val_miou = val.mean_iou;
      state.best_epoch = epoch;
      state.best_params = state.params;
      if (!output.dir.empty()) save_checkpoint(output.dir / "best.ckpt", state.best_params, model_cfg);
    }
    if (!output.dir.empty()) write_metrics_csv(output.dir / "metrics.csv", state.log);
    if (output.on_epoch) output.on_epoch(m);
  }
  if (!output.dir.empty()) save_checkpoint(output.dir / "last.ckpt", state.params, model_cfg);
  return state;
}

}  // namespace simprop

namespace simprop {

std::vector<AblationRow> ablation_grid() {
  return {
      {"baseline", false, false, false},
      {"dpr", true, false, false},
      {"fbaf", false, true, false},
      {"dpr+fbaf", true, true, false},
      {"dpr+fbaf+ica", true, true, true},
  };
}

std::vector<AblationResult> ablate(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Dataset& data,
                                   const AblationSettings& settings, const std::vector<AblationRow>& grid,
                                   const fs::path& dir) {
  if (grid.empty()) throw ValidationError("ablate: empty flag grid");
  const std::vector<int> test_classes =
      settings.test_classes.empty() ? data.manifest().config().test_classes : settings.test_classes;
  if (test_classes.empty()) throw ValidationError("ablate: no test classes");
  // Shared across rows so every model sees the same episodes.
  const auto episodes = sample_episodes(data, test_classes, 1, settings.n_episodes, settings.eval_seed);

  std::vector<AblationResult> results;
  for (const AblationRow& row : grid) {
    ModelConfig mc = model_cfg;
    mc.use_fbaf = row.use_fbaf;
    TrainConfig tc = train_cfg;
    tc.use_dpr = row.use_dpr;
    tc.use_ica = row.use_ica;
    TrainOutput out;
    if (!dir.empty()) out.dir = dir / row.name;
    const TrainState state = train(tc, mc, data, out);
    const Predictor predictor = model_predictor(state.best_params, mc);
    AblationResult r;
    r.row = row;
    r.report = score_predictions(episodes, run_predictions(predictor, episodes, settings.threads), test_classes);
    r.report.seed = settings.eval_seed;
    r.identical_iou =
        identical_input_test(predictor, data, test_classes, settings.identical_n, settings.eval_seed, settings.threads)
            .mean_iou;
    r.best_val_miou = state.best_val_miou;
    results.push_back(std::move(r));
  }
  return results;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationResult>& results) {
  out << "row,use_dpr,use_fbaf,use_ica,mean_iou,fgbg_iou,identical_iou,best_val_miou\n";
  for (const AblationResult& r : results) {
    out << r.row.name << ',' << r.row.use_dpr << ',' << r.row.use_fbaf << ',' << r.row.use_ica << ','
        << format_fixed(r.report.mean_iou) << ',' << format_fixed(r.report.fgbg_iou) << ','
        << format_fixed(r.identical_iou) << ',' << format_fixed(r.best_val_miou) << '\n';
  }
}

}  // namespace simprop
