#include "simprop/grad_suite.hpp"

#include <chrono>

#include "simprop/parallel.hpp"
#include "simprop/rng.hpp"

namespace simprop {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Magnitudes in [min_abs, 1] with random sign, so finite differences never straddle a kink or a pole.
Tensor away_from_zero(Shape shape, Rng& rng, double min_abs) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) {
    const double m = rng.uniform(min_abs, 1.0);
    v = static_cast<float>(rng.bernoulli(0.5) ? m : -m);
  }
  return t;
}

Tensor random_mask(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
  return t;
}

// Weights a tensor-valued op elementwise; the checked scalar is the sum.
Var project(Tape& tape, const Var& out, const Tensor& weights) { return mul(out, tape.constant(weights)); }

}  // namespace

std::vector<GradCase> op_grad_cases(std::uint64_t seed, float tolerance) {
  Rng rng(mix_seed(seed, 17));
  GradCheckOptions opts;
  opts.tolerance = tolerance;
  opts.seed = seed;
  std::vector<GradCase> cases;
  // Central differences are exact (up to rounding) for functions at most
  // quadratic in the perturbed element, so those ops take a large step that
  // drowns float32 rounding. Smooth nonlinear ops use a middle step with
  // Richardson extrapolation; ReLU inputs stay farther than the step from 0.
  constexpr float kExactStep = 0.5f;
  constexpr float kSmoothStep = 3e-2f;
  auto add_case = [&](std::string name, ScalarGraph g, std::vector<Tensor> inputs, float step) {
    GradCheckOptions o = opts;
    o.step = step;
    o.richardson = step == kSmoothStep;
    cases.push_back({std::move(name), std::move(g), std::move(inputs), o});
  };

  {
    const Tensor w = random_tensor({4, 6, 6}, rng);
    add_case(
        "conv2d",
        [w](Tape& t, std::span<const Var> in) {
          return project(t, conv2d(in[0], in[1], in[2], {.stride = 1, .dilation = 1, .padding = 1}), w);
        },
        {random_tensor({3, 6, 6}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({3, 4, 4}, rng);
    add_case(
        "conv2d_stride2",
        [w](Tape& t, std::span<const Var> in) {
          return project(t, conv2d(in[0], in[1], in[2], {.stride = 2, .dilation = 1, .padding = 1}), w);
        },
        {random_tensor({2, 7, 7}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({3, 7, 7}, rng);
    add_case(
        "conv2d_dilated",
        [w](Tape& t, std::span<const Var> in) {
          return project(t, conv2d(in[0], in[1], std::nullopt, {.stride = 1, .dilation = 2, .padding = 2}), w);
        },
        {random_tensor({2, 7, 7}, rng), random_tensor({3, 2, 3, 3}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({3, 5, 5}, rng);
    add_case(
        "relu", [w](Tape& t, std::span<const Var> in) { return project(t, relu(in[0]), w); },
        {away_from_zero({3, 5, 5}, rng, 0.05)}, kSmoothStep);
  }
  {
    const Tensor w = random_tensor({3, 4, 3}, rng);
    add_case(
        "avg_pool", [w](Tape& t, std::span<const Var> in) { return project(t, avg_pool(in[0], 2), w); },
        {random_tensor({3, 8, 6}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({4}, rng);
    add_case(
        "global_avg_pool", [w](Tape& t, std::span<const Var> in) { return project(t, global_avg_pool(in[0]), w); },
        {random_tensor({4, 5, 3}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({2, 8, 7}, rng);
    add_case(
        "bilinear_upsample",
        [w](Tape& t, std::span<const Var> in) { return project(t, bilinear_resize(in[0], 8, 7), w); },
        {random_tensor({2, 3, 4}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({2, 3, 4}, rng);
    add_case(
        "bilinear_downsample",
        [w](Tape& t, std::span<const Var> in) { return project(t, bilinear_resize(in[0], 3, 4), w); },
        {random_tensor({2, 7, 6}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({6, 4, 5}, rng);
    add_case(
        "concat_channels",
        [w](Tape& t, std::span<const Var> in) { return project(t, concat_channels({in[0], in[1], in[2]}), w); },
        {random_tensor({2, 4, 5}, rng), random_tensor({3}, rng), random_tensor({1, 4, 5}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({3, 5, 4}, rng);
    add_case(
        "instance_norm",
        [w](Tape& t, std::span<const Var> in) { return project(t, instance_norm(in[0], in[1], in[2]), w); },
        {random_tensor({3, 5, 4}, rng), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)}, kSmoothStep);
  }
  {
    const Tensor w = random_tensor({5, 6}, rng);
    add_case(
        "cosine_sim_map",
        [w](Tape& t, std::span<const Var> in) { return project(t, cosine_sim_map(in[0], in[1]), w); },
        {random_tensor({8, 5, 6}, rng), random_tensor({8}, rng)}, kSmoothStep);
  }
  {
    const Tensor target = random_mask({6, 5}, rng);
    add_case(
        "softmax_cross_entropy",
        [target](Tape&, std::span<const Var> in) { return softmax_cross_entropy(in[0], target); },
        {random_tensor({2, 6, 5}, rng, -2.0, 2.0)}, kSmoothStep);
  }
  for (const bool raw : {false, true}) {
    const Tensor weights = random_tensor({4, 5}, rng, 0.0, 1.0);
    const Tensor w = random_tensor({3}, rng);
    add_case(
        raw ? "masked_average_raw" : "masked_average",
        [w, weights, raw](Tape& t, std::span<const Var> in) {
          return project(t, masked_average(in[0], weights, 1e-6f, raw), w);
        },
        {random_tensor({3, 4, 5}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({5}, rng);
    add_case(
        "mean_of", [w](Tape& t, std::span<const Var> in) { return project(t, mean_of({in[0], in[1], in[2]}), w); },
        {random_tensor({5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({3, 4}, rng);
    add_case(
        "add_sub_mul",
        [w](Tape& t, std::span<const Var> in) { return project(t, mul(add(in[0], in[1]), sub(in[0], in[2])), w); },
        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, kExactStep);
  }
  {
    const Tensor w = random_tensor({3, 4}, rng);
    add_case(
        "div", [w](Tape& t, std::span<const Var> in) { return project(t, div(in[0], in[1]), w); },
        {random_tensor({3, 4}, rng), away_from_zero({3, 4}, rng, 0.5)}, kSmoothStep);
  }
  {
    const Tensor w = random_tensor({4, 3}, rng);
    add_case(
        "affine", [w](Tape& t, std::span<const Var> in) { return project(t, affine(in[0], -1.7f, 0.3f), w); },
        {random_tensor({4, 3}, rng)}, kExactStep);
  }
  {
    // A^f + A^b == 1, so the two maps need different weights for a nonzero gradient.
    const Tensor wf = random_tensor({3, 3}, rng);
    const Tensor wb = random_tensor({3, 3}, rng);
    add_case(
        "attention_maps",
        [wf, wb](Tape& t, std::span<const Var> in) {
          const AttentionPair a = attention_maps(in[0], {in[1], in[2]});
          return add(project(t, a.fg, wf), project(t, a.bg, wb));
        },
        {random_tensor({4, 3, 3}, rng), random_tensor({4}, rng), random_tensor({4}, rng)}, kSmoothStep);
  }
  return cases;
}

ModelConfig grad_check_model_config(int input_size) {
  ModelConfig c;
  c.input_size = input_size;
  c.feature_channels = 8;
  c.fusion_channels = 16;
  c.decoder_channels = 8;
  c.encoder_channels = {4, 8, 8};
  c.aspp_rates = {1, 2};
  return c;
}

std::vector<Tensor> flatten_params(const ModelParams& params) {
  std::vector<Tensor> out;
  visit_params(params, [&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

BoundParams bound_from(const ModelParams& like, std::span<const Var> vars) {
  BoundParams b;
  b.encoder.resize(like.encoder.size());
  b.fusion.resize(like.fusion.size());
  b.fusion_norm.resize(like.fusion_norm.size());
  b.aspp.resize(like.aspp.size());
  std::size_t i = 0;
  visit_params(b, [&](const std::string&, Var& v) {
    if (i >= vars.size()) throw ValidationError("bound_from: too few variables");
    v = vars[i++];
  });
  if (i != vars.size()) throw ValidationError("bound_from: too many variables");
  return b;
}

GradCase end_to_end_grad_case(const ModelConfig& cfg, std::uint64_t seed, float tolerance, std::size_t max_samples,
                              float step) {
  cfg.validate();
  Rng rng(mix_seed(seed, 29));
  const int s = cfg.input_size;
  const ModelParams params = init_params(cfg, mix_seed(seed, 31));
  // Blocky masks aligned with the feature grid keep both regions non-empty.
  auto blob_mask = [&](int x0, int y0, int w, int h) {
    Tensor m({s, s});
    for (int y = y0; y < y0 + h; ++y) {
      for (int x = x0; x < x0 + w; ++x) m[static_cast<std::size_t>(y) * s + x] = 1.0f;
    }
    return m;
  };
  const Tensor query = normalize_image(random_tensor({3, s, s}, rng, 0.0, 1.0), cfg);
  const Tensor support = normalize_image(random_tensor({3, s, s}, rng, 0.0, 1.0), cfg);
  const Tensor query_mask = blob_mask(s / 4, s / 8, s / 2, s / 2);
  const Tensor support_mask = blob_mask(s / 8, s / 4, s / 2, 3 * s / 8);

  ScalarGraph graph = [=](Tape& tape, std::span<const Var> in) {
    const BoundParams p = bound_from(params, in);
    const Var q = tape.constant(query);
    const std::vector<Var> sups{tape.constant(support)};
    const std::vector<Tensor> masks{support_mask};
    const DualPrediction pred = forward_dual(p, cfg, q, sups, masks);
    // Per-pixel terms of 0.5 * CE(query) + 0.5 * CE(support); the checker sums them.
    const float scale = 0.5f / static_cast<float>(query_mask.size());
    const Var ce_q = cross_entropy_map(pred.query_logits, query_mask);
    const Var ce_s = cross_entropy_map(pred.support_logits, support_mask);
    return add(affine(ce_q, scale, 0.0f), affine(ce_s, scale, 0.0f));
  };
  GradCheckOptions opts;
  opts.tolerance = tolerance;
  opts.max_samples = max_samples;
  opts.step = step;
  opts.seed = seed;
  return {"end_to_end_dual_loss", std::move(graph), flatten_params(params), opts};
}

std::vector<GradCaseResult> run_grad_cases(const std::vector<GradCase>& cases, int threads) {
  std::vector<GradCaseResult> results(cases.size());
  parallel_for(cases.size(), threads, [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    results[i].name = cases[i].name;
    results[i].tolerance = cases[i].options.tolerance;
    results[i].report = grad_check(cases[i].graph, cases[i].inputs, cases[i].options);
    results[i].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  });
  return results;
}

}  // namespace simprop
