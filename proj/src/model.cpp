#include "conceptvae/model.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include "conceptvae/errors.hpp"

namespace cvae {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2));
}

nn::ConvTranspose2d upconv(std::int64_t in, std::int64_t out) {
  return nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 3).stride(2).padding(1).output_padding(1));
}

torch::Tensor act(const torch::Tensor& x, double slope) { return torch::leaky_relu(x, slope); }

torch::Tensor pool(const torch::Tensor& x) { return torch::max_pool2d(x, {2, 2}, {2, 2}); }

torch::Tensor per_channel(const torch::Tensor& v) { return v.view({1, -1, 1, 1}); }

}  // namespace

// ---------------------------------------------------------------------------

Norm2dImpl::Norm2dImpl(std::int64_t channels, NormKind kind, double eps) : kind_(kind), eps_(eps) {
  weight = register_parameter("weight", torch::ones({channels}));
  bias = register_parameter("bias", torch::zeros({channels}));
}

NormStats Norm2dImpl::stats(const torch::Tensor& x) const {
  const std::vector<std::int64_t> dims = kind_ == NormKind::instance ? std::vector<std::int64_t>{2, 3}
                                                                     : std::vector<std::int64_t>{1};
  auto mean = x.mean(dims, /*keepdim=*/true);
  auto var = (x - mean).square().mean(dims, /*keepdim=*/true);
  return {mean, var};
}

torch::Tensor Norm2dImpl::apply(const torch::Tensor& x, const NormStats& s) const {
  return (x - s.mean) * torch::rsqrt(s.var + eps_) * per_channel(weight) + per_channel(bias);
}

torch::Tensor Norm2dImpl::forward(const torch::Tensor& x) {
  // Fused kernels; `stats`/`apply` spell out the same arithmetic for callers
  // that need to reuse statistics.
  if (kind_ == NormKind::instance)
    return torch::instance_norm(x, weight, bias, {}, {}, /*use_input_stats=*/true, 0.0, eps_, false);
  return torch::layer_norm(x.permute({0, 2, 3, 1}), {x.size(1)}, weight, bias, eps_).permute({0, 3, 1, 2});
}

// ---------------------------------------------------------------------------

ChannelStandardizeImpl::ChannelStandardizeImpl(std::int64_t channels, double momentum, double eps)
    : momentum_(momentum), eps_(eps) {
  running_mean = register_buffer("running_mean", torch::zeros({channels}));
  running_var = register_buffer("running_var", torch::ones({channels}));
}

NormStats ChannelStandardizeImpl::stats(const torch::Tensor& x) const {
  if (!is_training()) return {per_channel(running_mean), per_channel(running_var)};
  auto mean = x.mean({0, 2, 3}, /*keepdim=*/true);
  auto var = (x - mean).square().mean({0, 2, 3}, /*keepdim=*/true);
  return {mean, var};
}

torch::Tensor ChannelStandardizeImpl::apply(const torch::Tensor& x, const NormStats& s) const {
  return (x - s.mean) * torch::rsqrt(s.var + eps_);
}

torch::Tensor ChannelStandardizeImpl::forward(const torch::Tensor& x) {
  auto s = stats(x);
  if (is_training() && track_running_stats) {
    torch::NoGradGuard no_grad;
    running_mean.mul_(1 - momentum_).add_(s.mean.detach().flatten(), momentum_);
    running_var.mul_(1 - momentum_).add_(s.var.detach().flatten(), momentum_);
  }
  return apply(x, s);
}

// ---------------------------------------------------------------------------

EncoderStemImpl::EncoderStemImpl(const ModelConfig& cfg) : slope_(cfg.leaky_slope) {
  const auto c = cfg.stem_channels;
  conv1 = register_module("conv1", conv(1, c, 3, 2));
  norm1 = register_module("norm1", Norm2d(c, NormKind::instance));
  conv2 = register_module("conv2", conv(c, c, 3));
  norm2 = register_module("norm2", Norm2d(c, NormKind::instance));
  conv3 = register_module("conv3", conv(c, c, 3));
  out_norm = register_module("out_norm", ChannelStandardize(c));
}

void EncoderStemImpl::check_input(const torch::Tensor& img) const {
  if (img.dim() != 4 || img.size(1) != 1) throw ShapeError("encoder stem expects a (B, 1, H, W) image batch");
  if (img.size(2) % kStride != 0 || img.size(3) % kStride != 0)
    throw ConfigError("encoder stem input dims must be divisible by 4, got " + std::to_string(img.size(2)) + "x" +
                      std::to_string(img.size(3)));
}

torch::Tensor EncoderStemImpl::forward_pre_norm(const torch::Tensor& img) {
  check_input(img);
  auto x = act(norm1(conv1(img)), slope_);
  x = act(norm2(pool(conv2(x))), slope_);
  return conv3(x);
}

torch::Tensor EncoderStemImpl::forward(const torch::Tensor& img) { return out_norm(forward_pre_norm(img)); }

torch::Tensor EncoderStemImpl::forward_with_reference_stats(const torch::Tensor& img, const torch::Tensor& reference) {
  check_input(img);
  if (!img.sizes().equals(reference.sizes())) throw ShapeError("reference batch must match the input shape");
  auto x = conv1(img);
  auto r = conv1(reference);
  auto s = norm1->stats(r);
  x = act(norm1->apply(x, s), slope_);
  r = act(norm1->apply(r, s), slope_);
  x = pool(conv2(x));
  r = pool(conv2(r));
  s = norm2->stats(r);
  x = act(norm2->apply(x, s), slope_);
  r = act(norm2->apply(r, s), slope_);
  x = conv3(x);
  r = conv3(r);
  return out_norm->apply(x, out_norm->stats(r));
}

// ---------------------------------------------------------------------------

ResidualLayerImpl::ResidualLayerImpl(std::int64_t channels, std::int64_t kernel_a, std::int64_t kernel_b,
                                     NormKind norm, double slope)
    : slope_(slope) {
  norm_a = register_module("norm_a", Norm2d(channels, norm));
  conv_a = register_module("conv_a", conv(channels, channels, kernel_a));
  norm_b = register_module("norm_b", Norm2d(channels, norm));
  conv_b = register_module("conv_b", conv(channels, channels, kernel_b));
}

torch::Tensor ResidualLayerImpl::branch(const torch::Tensor& x) {
  auto y = conv_a(act(norm_a(x), slope_));
  return conv_b(act(norm_b(y), slope_));
}

torch::Tensor ResidualLayerImpl::forward(const torch::Tensor& x) { return x + branch(x); }

// ---------------------------------------------------------------------------

ImageDecoderImpl::ImageDecoderImpl(const ModelConfig& cfg) : channels_(cfg.stem_channels), slope_(cfg.leaky_slope) {
  const auto c = cfg.stem_channels;
  const auto half = std::max<std::int64_t>(c / 2, 1);
  up1 = register_module("up1", upconv(c, c));
  norm1 = register_module("norm1", Norm2d(c, NormKind::pixel));
  mix1 = register_module("mix1", conv(c, c, 1));
  norm2 = register_module("norm2", Norm2d(c, NormKind::pixel));
  mix2 = register_module("mix2", conv(c, c, 1));
  norm3 = register_module("norm3", Norm2d(c, NormKind::pixel));
  up2 = register_module("up2", upconv(c, half));
  out = register_module("out", conv(half, 1, 1));
}

torch::Tensor ImageDecoderImpl::forward(const torch::Tensor& features) {
  if (features.dim() != 4 || features.size(1) != channels_)
    throw ShapeError("image decoder expects (B, " + std::to_string(channels_) + ", H/4, W/4) features");
  auto x = up1(act(features, slope_));
  x = mix1(act(norm1(x), slope_));
  x = mix2(act(norm2(x), slope_));
  x = up2(act(norm3(x), slope_));
  return out(act(x, slope_));
}

// ---------------------------------------------------------------------------

EncoderMiddleImpl::EncoderMiddleImpl(const ModelConfig& cfg) : slope_(cfg.leaky_slope) {
  const auto m = cfg.middle_channels;
  widths_ = {m / 4, m / 2, m};
  std::int64_t in = cfg.stem_channels;
  for (std::size_t s = 0; s < kStageDepths.size(); ++s) {
    const auto w = widths_[s];
    if (s > 0)
      transitions.push_back(register_module("transition" + std::to_string(s), Norm2d(in, NormKind::instance)));
    projections.push_back(register_module("proj" + std::to_string(s), conv(in, w, 1)));
    std::vector<ResidualLayer> layers;
    for (std::int64_t l = 0; l < kStageDepths[s]; ++l)
      layers.push_back(register_module("stage" + std::to_string(s) + "_" + std::to_string(l),
                                       ResidualLayer(w, 3, 3, NormKind::instance, slope_)));
    stages.push_back(std::move(layers));
    in = w;
  }
}

torch::Tensor EncoderMiddleImpl::forward(const torch::Tensor& stem_features) {
  auto x = act(stem_features.detach(), slope_);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (s > 0) x = transitions[s - 1](pool(x));
    x = projections[s](x);
    for (auto& layer : stages[s]) x = layer(x);
  }
  return x;
}

std::int64_t EncoderMiddleImpl::receptive_field_px() {
  std::int64_t field = EncoderStemImpl::kReceptiveField;
  std::int64_t jump = EncoderStemImpl::kStride;
  for (std::size_t s = 0; s < kStageDepths.size(); ++s) {
    if (s > 0) {
      field += jump;  // 2x2 max-pool
      jump *= 2;
    }
    field += kStageDepths[s] * 2 * 2 * jump;  // two 3x3 convs per residual layer
  }
  return field;
}

// ---------------------------------------------------------------------------

ConceptHeadImpl::ConceptHeadImpl(const ModelConfig& cfg) {
  conv = register_module("conv", cvae::conv(cfg.middle_channels, cfg.num_concepts, 1));
}

torch::Tensor ConceptHeadImpl::forward(const torch::Tensor& middle) { return conv(middle); }

ConceptEmbeddingImpl::ConceptEmbeddingImpl(const ModelConfig& cfg) {
  matrix = register_parameter("matrix", torch::randn({cfg.num_concepts, cfg.concept_embed_dim}));
}

torch::Tensor ConceptEmbeddingImpl::forward(const torch::Tensor& onehot) {
  if (onehot.dim() != 4 || onehot.size(1) != matrix.size(0))
    throw ShapeError("concept embedding expects a (B, C, h, w) assignment with C = " + std::to_string(matrix.size(0)));
  return torch::einsum("bchw,ce->behw", {onehot, matrix});
}

ConceptStylizerImpl::ConceptStylizerImpl(const ModelConfig& cfg) : slope_(cfg.leaky_slope) {
  conv1 = register_module("conv1", conv(cfg.middle_channels + cfg.concept_embed_dim, cfg.stylizer_hidden, 1));
  conv2 = register_module("conv2", conv(cfg.stylizer_hidden, cfg.num_styles, 1));
}

torch::Tensor ConceptStylizerImpl::forward(const torch::Tensor& middle, const torch::Tensor& concepts) {
  if (middle.size(0) != concepts.size(0) || middle.size(2) != concepts.size(2) || middle.size(3) != concepts.size(3))
    throw ShapeError("stylizer inputs must share batch and spatial dims");
  return conv2(act(conv1(torch::cat({middle, concepts}, 1)), slope_));
}

// ---------------------------------------------------------------------------

std::pair<std::int64_t, std::int64_t> FeatureDecoderImpl::stage_kernels(std::int64_t neighborhood) {
  const auto growth = neighborhood - 1;  // total growth in cells, split over two stages
  return {1 + 2 * ((growth + 3) / 4), 1 + 2 * (growth / 4)};
}

FeatureDecoderImpl::FeatureDecoderImpl(const ModelConfig& cfg)
    : latent_channels_(cfg.latent_channels()), slope_(cfg.leaky_slope) {
  const auto f = cfg.decoder_channels;
  const auto [ka, kb] = stage_kernels(cfg.neighborhood);
  in_proj = register_module("in_proj", conv(latent_channels_, f, 1));
  stage1 = register_module("stage1", ResidualLayer(f, ka, 1, NormKind::pixel, slope_));
  stage2 = register_module("stage2", ResidualLayer(f, kb, 1, NormKind::pixel, slope_));
  norm1 = register_module("norm1", Norm2d(f, NormKind::pixel));
  up1 = register_module("up1", upconv(f, f / 2));
  norm2 = register_module("norm2", Norm2d(f / 2, NormKind::pixel));
  up2 = register_module("up2", upconv(f / 2, cfg.stem_channels));
}

torch::Tensor FeatureDecoderImpl::forward_pre_upsample(const torch::Tensor& latent) {
  if (latent.dim() != 4 || latent.size(1) != latent_channels_)
    throw ShapeError("feature decoder expects (B, " + std::to_string(latent_channels_) + ", h, w) latents");
  return stage2(stage1(in_proj(latent)));
}

torch::Tensor FeatureDecoderImpl::upsample(const torch::Tensor& grid_features) {
  auto x = up1(act(norm1(grid_features), slope_));
  return up2(act(norm2(x), slope_));
}

torch::Tensor FeatureDecoderImpl::forward(const torch::Tensor& latent) {
  return upsample(forward_pre_upsample(latent));
}

// ---------------------------------------------------------------------------

torch::Tensor gumbel_uniform_noise(torch::IntArrayRef shape, std::uint64_t seed, torch::ScalarType dtype) {
  auto gen = at::detail::createCPUGenerator(seed);
  auto u = torch::rand(shape, gen, torch::TensorOptions().dtype(dtype));
  const double eps = dtype == torch::kFloat64 ? 1e-12 : 1e-6;
  return u.clamp(eps, 1.0 - eps);
}

ConceptSample discretize_concepts(const torch::Tensor& logits, double temperature, const torch::Tensor& uniform_noise,
                                  const FrozenAssignment* frozen) {
  if (!(temperature > 0)) throw DomainError("Gumbel temperature must be > 0");
  if (logits.dim() != 4) throw ShapeError("concept logits must be (B, C, h, w)");
  if (!uniform_noise.sizes().equals(logits.sizes())) throw ShapeError("Gumbel noise must match the logits shape");

  ConceptSample out;
  out.probs = torch::softmax(logits, 1);
  const auto perturbed = torch::log_softmax(logits, 1) - torch::log(-torch::log(uniform_noise));
  out.sampled = torch::softmax(perturbed / temperature, 1);

  torch::Tensor anchor;
  if (frozen != nullptr) {
    out.indices = frozen->indices;
    anchor = frozen->anchor;
  } else {
    out.indices = perturbed.detach().argmax(1);
    anchor = out.sampled.detach();
  }
  const auto hard =
      F::one_hot(out.indices, logits.size(1)).permute({0, 3, 1, 2}).to(logits.scalar_type()).contiguous();
  // Forward value is `hard` exactly (p_samp - anchor == 0); the gradient is that of p_samp.
  out.onehot = hard + (out.sampled - anchor);
  return out;
}

ConceptSample discretize_concepts(ConceptHeadImpl& head, const torch::Tensor& middle, double temperature,
                                  std::uint64_t seed) {
  auto logits = head.forward(middle);
  auto noise = gumbel_uniform_noise(logits.sizes(), seed, logits.scalar_type());
  return discretize_concepts(logits, temperature, noise);
}

// ---------------------------------------------------------------------------

ConceptVAEImpl::ConceptVAEImpl(const ModelConfig& cfg) : config_(cfg) {
  config_.validate();
  stem = register_module("stem", EncoderStem(cfg));
  image_decoder = register_module("image_decoder", ImageDecoder(cfg));
  middle = register_module("middle", EncoderMiddle(cfg));
  head = register_module("head", ConceptHead(cfg));
  embedding = register_module("embedding", ConceptEmbedding(cfg));
  stylizer = register_module("stylizer", ConceptStylizer(cfg));
  feature_decoder = register_module("feature_decoder", FeatureDecoder(cfg));
}

torch::Tensor ConceptVAEImpl::latent(const torch::Tensor& concepts, const torch::Tensor& style) {
  return torch::cat({concepts, style}, 1);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<torch::Tensor> block_state(nn::Module& m) {
  auto out = m.parameters();
  for (auto& b : m.buffers()) out.push_back(b);
  return out;
}

}  // namespace

EmaMirrorImpl::EmaMirrorImpl(const ModelConfig& cfg) {
  stem = register_module("stem", EncoderStem(cfg));
  middle = register_module("middle", EncoderMiddle(cfg));
  head = register_module("head", ConceptHead(cfg));
  image_decoder = register_module("image_decoder", ImageDecoder(cfg));
  stem->out_norm->track_running_stats = false;
  for (auto& p : parameters()) p.set_requires_grad(false);
}

std::vector<torch::Tensor> EmaMirrorImpl::state_tensors() {
  std::vector<torch::Tensor> out;
  for (nn::Module* m : std::initializer_list<nn::Module*>{stem.get(), middle.get(), head.get(), image_decoder.get()}) {
    auto s = block_state(*m);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

std::vector<torch::Tensor> mirrored_state_tensors(ConceptVAEImpl& online) {
  std::vector<torch::Tensor> out;
  for (nn::Module* m : std::initializer_list<nn::Module*>{online.stem.get(), online.middle.get(), online.head.get(),
                                                          online.image_decoder.get()}) {
    auto s = block_state(*m);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

void EmaMirrorImpl::copy_from(ConceptVAEImpl& online) { update_from(online, 0.0); }

void EmaMirrorImpl::update_from(ConceptVAEImpl& online, double decay) {
  ema_update(mirrored_state_tensors(online), state_tensors(), decay);
}

void ema_update(const std::vector<torch::Tensor>& online, const std::vector<torch::Tensor>& ema, double decay) {
  if (online.size() != ema.size())
    throw ShapeError("EMA update: parameter lists differ in length (" + std::to_string(online.size()) + " vs " +
                     std::to_string(ema.size()) + ")");
  for (std::size_t i = 0; i < online.size(); ++i)
    if (!online[i].sizes().equals(ema[i].sizes()))
      throw ShapeError("EMA update: tensor " + std::to_string(i) + " has mismatched shape");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < online.size(); ++i) {
    auto e = ema[i];
    e.mul_(decay).add_(online[i].detach().to(e.scalar_type()), 1.0 - decay);
  }
}

std::vector<std::pair<std::string, torch::Tensor>> named_state(nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : module.named_parameters(/*recurse=*/true)) out.emplace_back(item.key(), item.value());
  for (const auto& item : module.named_buffers(/*recurse=*/true)) out.emplace_back(item.key(), item.value());
  return out;
}

}  // namespace cvae
