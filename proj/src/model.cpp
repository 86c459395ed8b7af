#include "simprop/model.hpp"

#include <algorithm>
#include <cmath>

#include "simprop/rng.hpp"

namespace simprop {

namespace {

constexpr float kNormEps = 1e-5f;
constexpr float kCosEps = 1e-6f;
constexpr float kProbeEps = 1e-6f;
constexpr float kAttnEps = 1e-8f;

// max(x, floor) elementwise. Used instead of x + floor for the attention
// denominator: an additive guard leaves A^f + A^b visibly short of 1 where
// both similarity maps are tiny.
Var floor_at(const Var& x, float floor) {
  Tensor v = x.value();
  for (float& e : v.data()) e = std::max(e, floor);
  return x.tape().record(std::move(v), {x}, [x, floor](Tape& t, const Tensor& gout) {
    Tensor g = gout;
    const Tensor& in = t.value(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = in[i] > floor ? g[i] : 0.0f;
    t.accumulate(x, g);
  });
}

ConvParams<Tensor> conv_shape(int c_out, int c_in, int k) {
  return {Tensor({c_out, c_in, k, k}), Tensor({c_out})};
}

}  // namespace

void ModelConfig::validate() const {
  if (input_size <= 0 || input_size % kFeatureStride != 0) {
    throw ValidationError("input_size must be a positive multiple of " + std::to_string(kFeatureStride));
  }
  if (feature_channels < 1 || decoder_channels < 1) throw ValidationError("channel counts must be positive");
  if (fusion_channels != 2 * feature_channels) {
    throw ValidationError("fusion_channels must equal 2 * feature_channels (" + std::to_string(2 * feature_channels) +
                          ")");
  }
  if (encoder_channels.size() != 3) throw ValidationError("encoder_channels must list exactly 3 widths");
  for (int c : encoder_channels) {
    if (c < 1) throw ValidationError("encoder_channels must be positive");
  }
  if (aspp_rates.empty()) throw ValidationError("aspp_rates must be nonempty");
  for (std::size_t i = 0; i < aspp_rates.size(); ++i) {
    if (aspp_rates[i] < 1 || (i > 0 && aspp_rates[i] <= aspp_rates[i - 1])) {
      throw ValidationError("aspp_rates must be positive and strictly increasing");
    }
  }
  if (!(input_std > 0.0f)) throw ValidationError("input_std must be positive");
}

ModelParams zeros_like_config(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  int c_in = 3;
  for (int c : cfg.encoder_channels) {
    p.encoder.push_back(conv_shape(c, c_in, 3));
    c_in = c;
  }
  p.encoder.push_back(conv_shape(cfg.feature_channels, c_in, 3));

  const int width = cfg.fusion_channels;
  p.fusion.push_back(Tensor({width, width, 3, 3}));
  p.fusion.push_back(Tensor({width, cfg.use_fbaf ? width + 2 : width, 3, 3}));
  p.fusion.push_back(Tensor({width, width, 3, 3}));
  for (int i = 0; i < 3; ++i) p.fusion_norm.push_back({Tensor({width}, 1.0f), Tensor({width}, 0.0f)});

  for (std::size_t i = 0; i < cfg.aspp_rates.size(); ++i) {
    p.aspp.push_back(conv_shape(cfg.decoder_channels, width, 3));
  }
  p.head_hidden = conv_shape(cfg.decoder_channels, cfg.decoder_channels, 3);
  p.head_out = conv_shape(2, cfg.decoder_channels, 1);
  return p;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = zeros_like_config(cfg);
  Rng rng(seed);
  visit_params(p, [&](const std::string&, Tensor& t) {
    if (t.rank() != 4) return;
    // He-uniform: keeps activation scale through the ReLU stacks.
    const double bound = std::sqrt(6.0 / (static_cast<double>(t.dim(1)) * t.dim(2) * t.dim(3)));
    for (float& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  });
  return p;
}

void validate_params(const ModelParams& params, const ModelConfig& cfg) {
  const ModelParams expected = zeros_like_config(cfg);
  std::vector<std::pair<std::string, Shape>> want;
  visit_params(expected, [&](const std::string& name, const Tensor& t) { want.emplace_back(name, t.shape()); });
  std::size_t i = 0;
  visit_params(params, [&](const std::string& name, const Tensor& t) {
    if (i >= want.size() || want[i].first != name) throw ValidationError("unexpected parameter " + name);
    if (t.shape() != want[i].second) {
      throw ValidationError("parameter " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                            shape_str(want[i].second));
    }
    if (!t.all_finite()) throw NumericError("parameter " + name + " contains non-finite values");
    ++i;
  });
  if (i != want.size()) throw ValidationError("parameter count does not match the model configuration");
}

std::size_t param_count(const ModelParams& params) {
  std::size_t n = 0;
  visit_params(params, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

BoundParams bind(Tape& tape, const ModelParams& params, bool trainable) {
  auto leaf = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  auto conv = [&](const ConvParams<Tensor>& c) { return ConvParams<Var>{leaf(c.weight), leaf(c.bias)}; };
  BoundParams b;
  for (const auto& c : params.encoder) b.encoder.push_back(conv(c));
  for (const auto& w : params.fusion) b.fusion.push_back(leaf(w));
  for (const auto& n : params.fusion_norm) b.fusion_norm.push_back({leaf(n.gamma), leaf(n.beta)});
  for (const auto& c : params.aspp) b.aspp.push_back(conv(c));
  b.head_hidden = conv(params.head_hidden);
  b.head_out = conv(params.head_out);
  return b;
}

ModelParams collect_grads(Tape& tape, const BoundParams& bound) {
  auto conv = [&](const ConvParams<Var>& c) {
    return ConvParams<Tensor>{tape.grad(c.weight), tape.grad(c.bias)};
  };
  ModelParams g;
  for (const auto& c : bound.encoder) g.encoder.push_back(conv(c));
  for (const auto& w : bound.fusion) g.fusion.push_back(tape.grad(w));
  for (const auto& n : bound.fusion_norm) g.fusion_norm.push_back({tape.grad(n.gamma), tape.grad(n.beta)});
  for (const auto& c : bound.aspp) g.aspp.push_back(conv(c));
  g.head_hidden = conv(bound.head_hidden);
  g.head_out = conv(bound.head_out);
  return g;
}

void sgd_step(ModelParams& params, const ModelParams& grads, float lr) {
  std::vector<const Tensor*> gs;
  visit_params(grads, [&](const std::string&, const Tensor& t) { gs.push_back(&t); });
  std::size_t i = 0;
  visit_params(params, [&](const std::string& name, Tensor& p) {
    if (i >= gs.size() || !p.same_shape(*gs[i])) throw ValidationError("sgd_step: gradient shape mismatch at " + name);
    const Tensor& g = *gs[i++];
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
  });
  if (i != gs.size()) throw ValidationError("sgd_step: gradient tree has extra tensors");
}

// --- forward ---------------------------------------------------------------------

Tensor normalize_image(const Tensor& image, const ModelConfig& cfg) {
  require_rank(image, 3, "image");
  if (image.dim(0) != 3) throw ValidationError("image must have 3 channels");
  Tensor out = image;
  const float inv = 1.0f / cfg.input_std;
  for (float& v : out.data()) v = (v - cfg.input_mean) * inv;
  return out;
}

Var encode(const BoundParams& p, const ModelConfig& cfg, const Var& image) {
  const Tensor& img = image.value();
  require_rank(img, 3, "encode input");
  if (img.dim(1) % ModelConfig::kFeatureStride != 0 || img.dim(2) % ModelConfig::kFeatureStride != 0) {
    throw ValidationError("encode: image size " + shape_str(img.shape()) + " is not divisible by 8");
  }
  (void)cfg;
  Var x = image;
  for (std::size_t i = 0; i + 1 < p.encoder.size(); ++i) {
    x = relu(conv2d(x, p.encoder[i].weight, p.encoder[i].bias, {.stride = 1, .dilation = 1, .padding = 1}));
    x = avg_pool(x, 2);
  }
  const auto& last = p.encoder.back();
  return relu(conv2d(x, last.weight, last.bias, {.stride = 1, .dilation = 2, .padding = 2}));
}

Tensor downsample_mask(const Tensor& mask, int h, int w) {
  require_rank(mask, 2, "mask");
  const int H = mask.dim(0), W = mask.dim(1);
  if (h < 1 || w < 1 || H % h != 0 || W % w != 0) {
    throw ValidationError("downsample_mask: " + shape_str(mask.shape()) + " is not a multiple of " +
                          std::to_string(h) + "x" + std::to_string(w));
  }
  const int by = H / h, bx = W / w;
  Tensor out({h, w});
  const double inv = 1.0 / (static_cast<double>(by) * bx);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int dy = 0; dy < by; ++dy) {
        for (int dx = 0; dx < bx; ++dx) {
          s += mask[static_cast<std::size_t>(y * by + dy) * W + x * bx + dx];
        }
      }
      out[static_cast<std::size_t>(y) * w + x] = static_cast<float>(s * inv);
    }
  }
  return out;
}

ProbePair extract_probes(const Var& features, const Tensor& soft_mask, bool raw) {
  Tensor inverse = soft_mask;
  for (float& v : inverse.data()) v = 1.0f - v;
  return {masked_average(features, soft_mask, kProbeEps, raw), masked_average(features, inverse, kProbeEps, raw)};
}

ProbePair kshot_probes(const std::vector<ProbePair>& probes) {
  if (probes.empty()) throw ValidationError("kshot_probes: empty probe list");
  if (probes.size() == 1) return probes.front();
  std::vector<Var> fg, bg;
  for (const ProbePair& p : probes) {
    fg.push_back(p.fg);
    bg.push_back(p.bg);
  }
  return {mean_of(fg), mean_of(bg)};
}

AttentionPair attention_maps(const Var& features, const ProbePair& probes) {
  const Var cf = affine(cosine_sim_map(features, probes.fg, kCosEps), 0.5f, 0.5f);
  const Var cb = affine(cosine_sim_map(features, probes.bg, kCosEps), 0.5f, 0.5f);
  const Var denom = floor_at(add(cf, cb), kAttnEps);
  return {div(cf, denom), div(cb, denom)};
}

Var fuse(const BoundParams& p, const ModelConfig& cfg, const Var& features, const Var& probe_fg,
         const AttentionPair& attn) {
  const Conv2dOptions same{.stride = 1, .dilation = 1, .padding = 1};
  auto block = [&](const Var& conv_in, const Var& residual, std::size_t i) {
    const Var c = conv2d(conv_in, p.fusion.at(i), std::nullopt, same);
    return instance_norm(add(c, residual), p.fusion_norm.at(i).gamma, p.fusion_norm.at(i).beta, kNormEps);
  };
  const Var g0 = concat_channels({features, probe_fg});
  if (g0.value().dim(0) != cfg.fusion_channels) {
    throw ValidationError("fuse: features plus probe give " + std::to_string(g0.value().dim(0)) +
                          " channels, configured fusion width is " + std::to_string(cfg.fusion_channels));
  }
  const Var g1 = block(g0, g0, 0);
  Var g2;
  if (cfg.use_fbaf) {
    const Shape map_shape{1, attn.fg.value().dim(0), attn.fg.value().dim(1)};
    Tape& tape = features.tape();
    // h x w maps are reshaped to 1 x h x w channels
    auto as_channel = [&](const Var& m) {
      return tape.record(m.value().reshaped(map_shape), {m},
                         [m](Tape& t, const Tensor& gout) { t.accumulate(m, gout.reshaped(t.value(m).shape())); });
    };
    g2 = block(concat_channels({g1, as_channel(attn.fg), as_channel(attn.bg)}), g1, 1);
  } else {
    g2 = block(g1, g1, 1);
  }
  return block(g2, g2, 2);
}

Var decode(const BoundParams& p, const ModelConfig& cfg, const Var& fused, int out_h, int out_w) {
  Var aspp;
  for (std::size_t i = 0; i < p.aspp.size(); ++i) {
    const int rate = cfg.aspp_rates.at(i);
    const Var branch =
        conv2d(fused, p.aspp[i].weight, p.aspp[i].bias, {.stride = 1, .dilation = rate, .padding = rate});
    aspp = aspp.valid() ? add(aspp, branch) : branch;
  }
  Var x = relu(aspp);
  x = relu(conv2d(x, p.head_hidden.weight, p.head_hidden.bias, {.stride = 1, .dilation = 1, .padding = 1}));
  x = conv2d(x, p.head_out.weight, p.head_out.bias, {});
  return bilinear_resize(x, out_h, out_w);
}

namespace {

struct SupportEncoding {
  std::vector<Var> features;
  ProbePair probes;
};

SupportEncoding encode_supports(const BoundParams& p, const ModelConfig& cfg, std::span<const Var> support_images,
                                std::span<const Tensor> support_masks) {
  if (support_images.empty()) throw ValidationError("at least one support pair is required");
  if (support_images.size() != support_masks.size()) {
    throw ValidationError("support image and mask counts differ");
  }
  SupportEncoding enc;
  std::vector<ProbePair> probes;
  for (std::size_t i = 0; i < support_images.size(); ++i) {
    const Var f = encode(p, cfg, support_images[i]);
    const Tensor soft = downsample_mask(support_masks[i], f.value().dim(1), f.value().dim(2));
    probes.push_back(extract_probes(f, soft, cfg.map_raw));
    enc.features.push_back(f);
  }
  enc.probes = kshot_probes(probes);
  return enc;
}

Var query_branch(const BoundParams& p, const ModelConfig& cfg, const Var& query_image, const ProbePair& probes) {
  const Var fq = encode(p, cfg, query_image);
  const AttentionPair attn = attention_maps(fq, probes);
  const Var g = fuse(p, cfg, fq, probes.fg, attn);
  return decode(p, cfg, g, query_image.value().dim(1), query_image.value().dim(2));
}

}  // namespace

DualPrediction forward_dual(const BoundParams& p, const ModelConfig& cfg, const Var& query_image,
                            std::span<const Var> support_images, std::span<const Tensor> support_masks) {
  const SupportEncoding sup = encode_supports(p, cfg, support_images, support_masks);
  for (const Var& s : support_images) {
    if (s.value().shape() != query_image.value().shape()) throw ValidationError("all images must share one size");
  }
  DualPrediction out;
  out.query_logits = query_branch(p, cfg, query_image, sup.probes);
  const Var& fs = sup.features.front();
  const AttentionPair attn = attention_maps(fs, sup.probes);
  const Var gs = fuse(p, cfg, fs, sup.probes.fg, attn);
  out.support_logits = decode(p, cfg, gs, query_image.value().dim(1), query_image.value().dim(2));
  return out;
}

Var forward_query(const BoundParams& p, const ModelConfig& cfg, const Var& query_image,
                  std::span<const Var> support_images, std::span<const Tensor> support_masks) {
  const SupportEncoding sup = encode_supports(p, cfg, support_images, support_masks);
  return query_branch(p, cfg, query_image, sup.probes);
}

Tensor logits_to_mask(const Tensor& logits) {
  require_rank(logits, 3, "logits");
  if (logits.dim(0) != 2) throw ValidationError("logits must have 2 channels");
  const int h = logits.dim(1), w = logits.dim(2);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  Tensor mask({h, w});
  for (std::size_t i = 0; i < n; ++i) mask[i] = logits[n + i] > logits[i] ? 1.0f : 0.0f;
  return mask;
}

Tensor predict(const ModelParams& params, const ModelConfig& cfg, const Tensor& query_image,
               std::span<const Tensor> support_images, std::span<const Tensor> support_masks) {
  Tape tape;
  const BoundParams p = bind(tape, params, false);
  const Var q = tape.constant(normalize_image(query_image, cfg));
  std::vector<Var> sups;
  for (const Tensor& s : support_images) sups.push_back(tape.constant(normalize_image(s, cfg)));
  const Var logits = forward_query(p, cfg, q, sups, support_masks);
  return logits_to_mask(logits.value());
}

}  // namespace simprop
