#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "conceptvae/config.hpp"

namespace cvae {

enum class NormKind {
  instance,  // per sample and channel, over the spatial dims
  pixel,     // per location, over the channels (no spatial mixing)
};

struct NormStats {
  torch::Tensor mean;
  torch::Tensor var;
};

/// Affine normalization layer. The pixel flavor is used on every path that
/// decodes the latent grid so that a decoded location only sees its neighborhood.
class Norm2dImpl : public torch::nn::Module {
 public:
  Norm2dImpl(std::int64_t channels, NormKind kind, double eps = 1e-5);

  torch::Tensor forward(const torch::Tensor& x);
  NormStats stats(const torch::Tensor& x) const;
  torch::Tensor apply(const torch::Tensor& x, const NormStats& s) const;

  NormKind kind() const { return kind_; }

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  NormKind kind_;
  double eps_;
};
TORCH_MODULE(Norm2d);

/// Per-channel standardization over (B, H, W) without affine parameters.
/// Training mode uses batch statistics and tracks running statistics; eval
/// mode uses the running statistics.
class ChannelStandardizeImpl : public torch::nn::Module {
 public:
  explicit ChannelStandardizeImpl(std::int64_t channels, double momentum = 0.1, double eps = 1e-8);

  torch::Tensor forward(const torch::Tensor& x);
  NormStats stats(const torch::Tensor& x) const;
  torch::Tensor apply(const torch::Tensor& x, const NormStats& s) const;

  /// EMA mirrors normalize with batch statistics but never touch their buffers.
  bool track_running_stats = true;

  torch::Tensor running_mean;
  torch::Tensor running_var;

 private:
  double momentum_;
  double eps_;
};
TORCH_MODULE(ChannelStandardize);

/// Three 3x3 convolutions (strides 2, 1, 1) around one 2x2 max-pool: 4x output
/// stride and a 17 px field of view.
class EncoderStemImpl : public torch::nn::Module {
 public:
  explicit EncoderStemImpl(const ModelConfig& cfg);

  torch::Tensor forward(const torch::Tensor& img);
  torch::Tensor forward_pre_norm(const torch::Tensor& img);

  /// Runs `img` with every normalization statistic taken from `reference`.
  /// The stem then acts as a purely local operator on `img`, which is what
  /// receptive-field measurements need.
  torch::Tensor forward_with_reference_stats(const torch::Tensor& img, const torch::Tensor& reference);

  static constexpr std::int64_t kReceptiveField = 17;
  static constexpr std::int64_t kStride = 4;

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  Norm2d norm1{nullptr}, norm2{nullptr};
  ChannelStandardize out_norm{nullptr};

 private:
  void check_input(const torch::Tensor& img) const;
  double slope_;
};
TORCH_MODULE(EncoderStem);

/// x + conv_b(act(norm_b(conv_a(act(norm_a(x)))))).
class ResidualLayerImpl : public torch::nn::Module {
 public:
  ResidualLayerImpl(std::int64_t channels, std::int64_t kernel_a, std::int64_t kernel_b, NormKind norm, double slope);

  torch::Tensor forward(const torch::Tensor& x);
  /// The residual branch alone, without the identity term.
  torch::Tensor branch(const torch::Tensor& x);

  Norm2d norm_a{nullptr}, norm_b{nullptr};
  torch::nn::Conv2d conv_a{nullptr}, conv_b{nullptr};

 private:
  double slope_;
};
TORCH_MODULE(ResidualLayer);

/// Two stride-2 3x3 transposed convolutions from the 4x-stride stem features back
/// to pixels, with 1x1 convolutions and per-location normalization between them.
/// No skip connections.
class ImageDecoderImpl : public torch::nn::Module {
 public:
  explicit ImageDecoderImpl(const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& features);

  torch::nn::ConvTranspose2d up1{nullptr}, up2{nullptr};
  torch::nn::Conv2d mix1{nullptr}, mix2{nullptr}, out{nullptr};
  Norm2d norm1{nullptr}, norm2{nullptr}, norm3{nullptr};

 private:
  std::int64_t channels_;
  double slope_;
};
TORCH_MODULE(ImageDecoder);

/// Residual encoder from the (stop-gradient) stem features to the 16x-stride grid.
/// Three stages of 3, 5 and 5 residual layers separated by max-pool + norm.
class EncoderMiddleImpl : public torch::nn::Module {
 public:
  static constexpr std::array<std::int64_t, 3> kStageDepths{3, 5, 5};

  explicit EncoderMiddleImpl(const ModelConfig& cfg);

  /// Detaches its input: no gradient reaches the stem through this block.
  torch::Tensor forward(const torch::Tensor& stem_features);

  std::vector<std::int64_t> stage_widths() const { return widths_; }

  /// Field of view of one output location, in input pixels (stem included).
  static std::int64_t receptive_field_px();

  std::vector<torch::nn::Conv2d> projections;
  std::vector<std::vector<ResidualLayer>> stages;
  std::vector<Norm2d> transitions;

 private:
  std::vector<std::int64_t> widths_;
  double slope_;
};
TORCH_MODULE(EncoderMiddle);

/// Concept classification head: a single 1x1 convolution to C logits.
class ConceptHeadImpl : public torch::nn::Module {
 public:
  explicit ConceptHeadImpl(const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& middle);

  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(ConceptHead);

/// Learned (C, E) matrix; row 0 embeds the background concept.
class ConceptEmbeddingImpl : public torch::nn::Module {
 public:
  explicit ConceptEmbeddingImpl(const ModelConfig& cfg);
  /// (B, C, h, w) one-hot (or soft) assignment -> (B, E, h, w).
  torch::Tensor forward(const torch::Tensor& onehot);

  torch::Tensor matrix;
};
TORCH_MODULE(ConceptEmbedding);

/// conv1x1 -> LeakyReLU -> conv1x1 over concat(middle, concepts).
class ConceptStylizerImpl : public torch::nn::Module {
 public:
  explicit ConceptStylizerImpl(const ModelConfig& cfg);
  torch::Tensor forward(const torch::Tensor& middle, const torch::Tensor& concepts);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};

 private:
  double slope_;
};
TORCH_MODULE(ConceptStylizer);

/// Latent grid -> stem-shaped features. Two residual stages whose joint field of
/// view is exactly k x k grid cells, then two stride-2 transposed convolutions.
class FeatureDecoderImpl : public torch::nn::Module {
 public:
  explicit FeatureDecoderImpl(const ModelConfig& cfg);

  torch::Tensor forward(const torch::Tensor& latent);
  torch::Tensor forward_pre_upsample(const torch::Tensor& latent);
  torch::Tensor upsample(const torch::Tensor& grid_features);

  /// Kernel sizes of the two stages for a k x k neighborhood.
  static std::pair<std::int64_t, std::int64_t> stage_kernels(std::int64_t neighborhood);

  torch::nn::Conv2d in_proj{nullptr};
  ResidualLayer stage1{nullptr}, stage2{nullptr};
  Norm2d norm1{nullptr}, norm2{nullptr};
  torch::nn::ConvTranspose2d up1{nullptr}, up2{nullptr};

 private:
  std::int64_t latent_channels_;
  double slope_;
};
TORCH_MODULE(FeatureDecoder);

// ---------------------------------------------------------------------------
// Concept discretization (Gumbel-Softmax with hard sampling and pass-through).

struct ConceptSample {
  torch::Tensor probs;    // p(c)|I, (B, C, h, w)
  torch::Tensor sampled;  // p_samp(c), Gumbel-perturbed tempered softmax
  torch::Tensor indices;  // (B, h, w) int64, argmax of p_samp
  torch::Tensor onehot;   // forward value exactly one-hot, gradient of p_samp
};

/// Pins the hard assignment so that a finite-difference probe sees the same
/// surrogate the pass-through gradient differentiates:
/// onehot = onehot(indices) + p_samp - anchor.
struct FrozenAssignment {
  torch::Tensor indices;
  torch::Tensor anchor;
};

/// Uniform noise strictly inside (0, 1), deterministic in `seed`.
torch::Tensor gumbel_uniform_noise(torch::IntArrayRef shape, std::uint64_t seed,
                                   torch::ScalarType dtype = torch::kFloat32);

ConceptSample discretize_concepts(const torch::Tensor& logits, double temperature, const torch::Tensor& uniform_noise,
                                  const FrozenAssignment* frozen = nullptr);

ConceptSample discretize_concepts(ConceptHeadImpl& head, const torch::Tensor& middle, double temperature,
                                  std::uint64_t seed);

// ---------------------------------------------------------------------------

/// The trainable network. The EMA mirrors live in EmaMirror.
class ConceptVAEImpl : public torch::nn::Module {
 public:
  explicit ConceptVAEImpl(const ModelConfig& cfg);

  const ModelConfig& config() const { return config_; }

  /// Concept embeddings and styles concatenated along channels.
  static torch::Tensor latent(const torch::Tensor& concepts, const torch::Tensor& style);

  EncoderStem stem{nullptr};
  ImageDecoder image_decoder{nullptr};
  EncoderMiddle middle{nullptr};
  ConceptHead head{nullptr};
  ConceptEmbedding embedding{nullptr};
  ConceptStylizer stylizer{nullptr};
  FeatureDecoder feature_decoder{nullptr};

 private:
  ModelConfig config_;
};
TORCH_MODULE(ConceptVAE);

/// Exponential-moving-average copies of the stem, middle, concept head and
/// image decoder. Parameters never require gradients.
class EmaMirrorImpl : public torch::nn::Module {
 public:
  explicit EmaMirrorImpl(const ModelConfig& cfg);

  void copy_from(ConceptVAEImpl& online);
  void update_from(ConceptVAEImpl& online, double decay);

  /// Parameters followed by buffers, in registration order.
  std::vector<torch::Tensor> state_tensors();

  EncoderStem stem{nullptr};
  EncoderMiddle middle{nullptr};
  ConceptHead head{nullptr};
  ImageDecoder image_decoder{nullptr};
};
TORCH_MODULE(EmaMirror);

/// The online counterparts of the mirrored blocks, in the same order as
/// EmaMirrorImpl::state_tensors().
std::vector<torch::Tensor> mirrored_state_tensors(ConceptVAEImpl& online);

/// ema <- decay * ema + (1 - decay) * online, elementwise and in place.
void ema_update(const std::vector<torch::Tensor>& online, const std::vector<torch::Tensor>& ema, double decay);

/// Named parameters and buffers of a module in a stable order, buffers last.
std::vector<std::pair<std::string, torch::Tensor>> named_state(torch::nn::Module& module);

}  // namespace cvae
