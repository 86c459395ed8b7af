#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "simprop/autograd.hpp"

namespace simprop {

/// Architecture hyper-parameters. Everything here changes parameter shapes or
/// the forward computation, so it is stored in checkpoint headers.
struct ModelConfig {
  static constexpr int kFeatureStride = 8;

  int input_size = 64;
  int feature_channels = 32;
  /// Width of the fused features. The residual additions in the fusion block
  /// require it to equal 2 * feature_channels (features concatenated with the
  /// foreground probe).
  int fusion_channels = 64;
  int decoder_channels = 64;
  /// Widths of the three stride-2 encoder blocks; a fourth, dilated block
  /// produces feature_channels.
  std::vector<int> encoder_channels{16, 32, 32};
  std::vector<int> aspp_rates{1, 2, 4, 8};
  /// Concatenate the FG/BG attention maps inside the fusion block.
  bool use_fbaf = true;
  /// Use the literal area-scaled probe (mean of F*M over all positions)
  /// instead of the mask-normalized weighted mean.
  bool map_raw = false;
  float input_mean = 0.5f;
  float input_std = 0.25f;

  int feature_size() const { return input_size / kFeatureStride; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct ConvParams {
  T weight;
  T bias;
};

template <class T>
struct NormParams {
  T gamma;
  T beta;
};

/// All trainable weights, in canonical (checkpoint) order.
template <class T>
struct ParamTree {
  std::vector<ConvParams<T>> encoder;
  /// Bias-free: every fusion conv feeds an instance norm, which cancels a bias.
  std::vector<T> fusion;
  std::vector<NormParams<T>> fusion_norm;
  std::vector<ConvParams<T>> aspp;
  ConvParams<T> head_hidden;
  ConvParams<T> head_out;
};

using ModelParams = ParamTree<Tensor>;
using BoundParams = ParamTree<Var>;

/// Calls fn(name, member) for every parameter in canonical order.
template <class Tree, class Fn>
void visit_params(Tree& tree, Fn&& fn) {
  auto conv = [&](std::string_view group, std::size_t i, auto& c) {
    const std::string prefix = std::string(group) + "." + std::to_string(i) + ".";
    fn(prefix + "weight", c.weight);
    fn(prefix + "bias", c.bias);
  };
  for (std::size_t i = 0; i < tree.encoder.size(); ++i) conv("encoder", i, tree.encoder[i]);
  for (std::size_t i = 0; i < tree.fusion.size(); ++i) fn("fusion." + std::to_string(i) + ".weight", tree.fusion[i]);
  for (std::size_t i = 0; i < tree.fusion_norm.size(); ++i) {
    const std::string prefix = "fusion_norm." + std::to_string(i) + ".";
    fn(prefix + "gamma", tree.fusion_norm[i].gamma);
    fn(prefix + "beta", tree.fusion_norm[i].beta);
  }
  for (std::size_t i = 0; i < tree.aspp.size(); ++i) conv("aspp", i, tree.aspp[i]);
  conv("head", 0, tree.head_hidden);
  conv("head", 1, tree.head_out);
}

/// Same tree layout with the expected shape of every tensor, zero-filled.
ModelParams zeros_like_config(const ModelConfig& cfg);
/// Uniform(-b, b) conv weights with b = sqrt(6 / (C_in * k * k)), zero
/// biases, unit gamma, zero beta.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);
/// Throws ValidationError if any tensor's shape does not match `cfg` or is
/// non-finite.
void validate_params(const ModelParams& params, const ModelConfig& cfg);
std::size_t param_count(const ModelParams& params);

BoundParams bind(Tape& tape, const ModelParams& params, bool trainable);
/// Gradients of the bound leaves, in the same layout.
ModelParams collect_grads(Tape& tape, const BoundParams& bound);

/// p <- p - lr * g for every element.
void sgd_step(ModelParams& params, const ModelParams& grads, float lr);

// --- forward graph -------------------------------------------------------------

struct ProbePair {
  Var fg;
  Var bg;
};

struct AttentionPair {
  Var fg;
  Var bg;
};

struct DualPrediction {
  Var query_logits;
  Var support_logits;
};

/// (image - mean) / std, channelwise identical.
Tensor normalize_image(const Tensor& image, const ModelConfig& cfg);

/// Shared encoder: 3 x H x W normalized image -> C x H/8 x W/8.
Var encode(const BoundParams& p, const ModelConfig& cfg, const Var& image);

/// Block-average pooling of a binary H x W mask down to h x w.
Tensor downsample_mask(const Tensor& mask, int h, int w);

/// Foreground/background masked average pooling of support features.
ProbePair extract_probes(const Var& features, const Tensor& soft_mask, bool raw = false);

/// Elementwise mean of the probes of several supports.
ProbePair kshot_probes(const std::vector<ProbePair>& probes);

/// A^f, A^b from the normalized pair of (1 + cossim) / 2 maps.
AttentionPair attention_maps(const Var& features, const ProbePair& probes);

/// Residual instance-normalized fusion of features, foreground probe and
/// (with use_fbaf) both attention maps.
Var fuse(const BoundParams& p, const ModelConfig& cfg, const Var& features, const Var& probe_fg,
         const AttentionPair& attn);

/// ASPP + two convs, then bilinear upsampling to out_h x out_w. Returns
/// 2-channel logits; channel 1 is foreground.
Var decode(const BoundParams& p, const ModelConfig& cfg, const Var& fused, int out_h, int out_w);

/// Support and query logits for one episode. Probes are averaged over all
/// supports; the support branch is computed for the first support.
DualPrediction forward_dual(const BoundParams& p, const ModelConfig& cfg, const Var& query_image,
                            std::span<const Var> support_images, std::span<const Tensor> support_masks);

/// Query branch only (inference path).
Var forward_query(const BoundParams& p, const ModelConfig& cfg, const Var& query_image,
                  std::span<const Var> support_images, std::span<const Tensor> support_masks);

/// Per-pixel argmax over the 2 logit channels; ties go to background.
Tensor logits_to_mask(const Tensor& logits);

/// Binary query mask from raw [0,1] images.
Tensor predict(const ModelParams& params, const ModelConfig& cfg, const Tensor& query_image,
               std::span<const Tensor> support_images, std::span<const Tensor> support_masks);

}  // namespace simprop
