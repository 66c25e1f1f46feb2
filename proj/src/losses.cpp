#include "conceptvae/losses.hpp"

#include <cmath>
#include <string>

#include "conceptvae/errors.hpp"
#include "conceptvae/log.hpp"

namespace cvae {

namespace F = torch::nn::functional;

ConceptPrior ConceptPrior::standard(std::int64_t num_concepts, torch::ScalarType dtype) {
  if (num_concepts < 2) throw ConfigError("concept prior needs at least two concepts");
  auto opts = torch::TensorOptions().dtype(dtype);
  ConceptPrior prior;
  prior.cone = torch::full({num_concepts}, 1.0 / static_cast<double>(num_concepts - 1), opts);
  prior.cone[0] = 0.0;
  prior.background = torch::zeros({num_concepts}, opts);
  prior.background[0] = 1.0;
  return prior;
}

torch::Tensor kl_divergence(const torch::Tensor& p, const torch::Tensor& q, std::int64_t dim) {
  return (p * (torch::log(p.clamp_min(kProbFloor)) - torch::log(q.clamp_min(kProbFloor)))).sum(dim);
}

torch::Tensor loss_img(const torch::Tensor& recon, const torch::Tensor& target) {
  if (!recon.sizes().equals(target.sizes())) throw ShapeError("loss_img: reconstruction and target shapes differ");
  return (recon - target).square().mean();
}

torch::Tensor loss_feat(const torch::Tensor& recon, const torch::Tensor& target) {
  if (!recon.sizes().equals(target.sizes())) throw ShapeError("loss_feat: reconstruction and target shapes differ");
  return (recon - target.detach()).square().mean();
}

torch::Tensor loss_style(const torch::Tensor& style) {
  if (style.dim() != 4) throw ShapeError("loss_style expects a (B, S, h, w) style grid");
  const auto s = style.size(1);
  const auto flat = style.transpose(0, 1).reshape({s, -1});
  const auto n = flat.size(1);
  if (n <= s)
    throw ShapeError("loss_style: covariance is degenerate with " + std::to_string(n) + " samples for " +
                     std::to_string(s) + " style channels");
  const auto mean = flat.mean(1, /*keepdim=*/true);
  const auto centered = flat - mean;
  const auto cov = centered.matmul(centered.t()) / static_cast<double>(n);
  const auto eye = torch::eye(s, style.options());
  return mean.square().sum() + (cov - eye).square().sum();
}

torch::Tensor loss_concept_consistency(const torch::Tensor& probs, const torch::Tensor& probs_ema,
                                       const std::vector<ConsistencyPair>& pairs) {
  if (probs.dim() != 4 || probs_ema.dim() != 4 || probs.size(1) != probs_ema.size(1))
    throw ShapeError("loss_concept_consistency expects two (B, C, h, w) probability grids");
  if (pairs.empty()) throw ShapeError("loss_concept_consistency needs at least one pair");
  const auto gh = probs.size(2), gw = probs.size(3);
  const auto eh = probs_ema.size(2), ew = probs_ema.size(3);
  std::vector<std::int64_t> b, i, j, b2, i2, j2;
  for (const auto& p : pairs) {
    const bool ok = p.sample >= 0 && p.sample < probs.size(0) && p.sample < probs_ema.size(0) && p.i >= 0 &&
                    p.i < gh && p.j >= 0 && p.j < gw && p.i2 >= 0 && p.i2 < eh && p.j2 >= 0 && p.j2 < ew;
    if (!ok) throw IndexError("loss_concept_consistency: pair out of grid bounds");
    b.push_back(p.sample);
    i.push_back(p.i);
    j.push_back(p.j);
    i2.push_back(p.i2);
    j2.push_back(p.j2);
  }
  auto idx = [](const std::vector<std::int64_t>& v) { return torch::tensor(v, torch::kInt64); };
  // (P, C) rows gathered with advanced indexing on dims 0, 2, 3.
  using torch::indexing::Slice;
  const auto p = probs.permute({0, 2, 3, 1}).index({idx(b), idx(i), idx(j)});
  const auto q = probs_ema.detach().permute({0, 2, 3, 1}).index({idx(b), idx(i2), idx(j2)});
  return (-(q * torch::log(p.clamp_min(kProbFloor))).sum(1)).mean();
}

namespace {

void check_grid(const torch::Tensor& probs, const torch::Tensor& cone_grid, const char* who) {
  if (probs.dim() != 4 || cone_grid.dim() != 3 || cone_grid.size(0) != probs.size(0) ||
      cone_grid.size(1) != probs.size(2) || cone_grid.size(2) != probs.size(3))
    throw ShapeError(std::string(who) + ": cone grid must be (B, h, w) matching the concept grid");
}

}  // namespace

ConceptPrevalence concept_prevalence(const torch::Tensor& probs, const torch::Tensor& cone_grid) {
  check_grid(probs, cone_grid, "concept_prevalence");
  const auto cone = cone_grid.to(probs.scalar_type()).unsqueeze(1);
  const auto bg = 1.0 - cone;
  ConceptPrevalence out;
  const double n_cone = cone.sum().item<double>();
  const double n_bg = bg.sum().item<double>();
  if (n_cone > 0) out.cone = (probs * cone).sum({0, 2, 3}) / n_cone;
  if (n_bg > 0) out.background = (probs * bg).sum({0, 2, 3}) / n_bg;
  return out;
}

torch::Tensor loss_prior(const torch::Tensor& probs, const torch::Tensor& cone_grid, const ConceptPrior& prior,
                         const std::array<double, 4>& alpha) {
  check_grid(probs, cone_grid, "loss_prior");
  const auto c = probs.size(1);
  if (prior.cone.numel() != c || prior.background.numel() != c)
    throw ShapeError("loss_prior: prior length differs from the number of concepts");
  const auto cone = cone_grid.to(probs.scalar_type());
  const auto bg = 1.0 - cone;
  const double n_cone = cone.sum().item<double>();
  const double n_bg = bg.sum().item<double>();

  const auto p0_cone = prior.cone.to(probs.options()).view({1, c, 1, 1});
  const auto p0_bg = prior.background.to(probs.options()).view({1, c, 1, 1});
  const auto prevalence = concept_prevalence(probs, cone_grid);

  auto loss = torch::zeros({}, probs.options());
  if (n_cone > 0) {
    loss = loss + alpha[0] / n_cone * (kl_divergence(probs, p0_cone, 1) * cone).sum();
    loss = loss + alpha[2] * kl_divergence(prevalence.cone, prior.cone.to(probs.options()), 0);
  } else {
    log::warn("loss_prior: batch has no cone cells, skipping the cone terms");
  }
  if (n_bg > 0) {
    loss = loss + alpha[1] / n_bg * (kl_divergence(probs, p0_bg, 1) * bg).sum();
    loss = loss + alpha[3] * kl_divergence(prevalence.background, prior.background.to(probs.options()), 0);
  } else {
    log::warn("loss_prior: batch has no background cells, skipping the background terms");
  }
  return loss;
}

torch::Tensor loss_cluster(const torch::Tensor& onehot, const torch::Tensor& cone_grid) {
  check_grid(onehot, cone_grid, "loss_cluster");
  const auto cone = cone_grid.to(onehot.scalar_type());
  const auto c = static_cast<double>(onehot.size(1));
  using torch::indexing::Slice;

  const auto dh = onehot.index({Slice(), Slice(), Slice(1), Slice()}) -
                  onehot.index({Slice(), Slice(), Slice(0, -1), Slice()});
  const auto dw = onehot.index({Slice(), Slice(), Slice(), Slice(1)}) -
                  onehot.index({Slice(), Slice(), Slice(), Slice(0, -1)});
  const auto vh = cone.index({Slice(), Slice(1), Slice()}) * cone.index({Slice(), Slice(0, -1), Slice()});
  const auto vw = cone.index({Slice(), Slice(), Slice(1)}) * cone.index({Slice(), Slice(), Slice(0, -1)});

  const double count = vh.sum().item<double>() + vw.sum().item<double>();
  if (count == 0) return torch::zeros({}, onehot.options()) * onehot.sum();
  const auto sum = (dh.square().sum(1) * vh).sum() + (dw.square().sum(1) * vw).sum();
  return sum / (c * count);
}

torch::Tensor gaussian_blur(const torch::Tensor& images, double sigma, std::int64_t kernel_size) {
  if (sigma <= 0) return images;
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("blur kernel size must be odd and positive");
  if (images.dim() != 4) throw ShapeError("gaussian_blur expects (B, C, H, W)");
  const auto half = kernel_size / 2;
  auto x = torch::arange(-half, half + 1, images.options());
  auto k = torch::exp(-x.square() / (2 * sigma * sigma));
  k = k / k.sum();
  const auto ch = images.size(1);
  const auto kh = k.view({1, 1, kernel_size, 1}).repeat({ch, 1, 1, 1});
  const auto kw = k.view({1, 1, 1, kernel_size}).repeat({ch, 1, 1, 1});
  auto out = F::pad(images, F::PadFuncOptions({half, half, half, half}).mode(torch::kReplicate));
  out = F::conv2d(out, kh, F::Conv2dFuncOptions().groups(ch));
  return F::conv2d(out, kw, F::Conv2dFuncOptions().groups(ch));
}

std::pair<torch::Tensor, LossBreakdown> total_loss(const LossTerms& terms, const LossWeights& weights) {
  LossBreakdown breakdown;
  torch::Tensor total;
  for (std::size_t t = 0; t < terms.size(); ++t) {
    if (!terms[t].defined()) throw ShapeError("total_loss: term '" + std::string(kLossTermNames[t]) + "' missing");
    const double value = terms[t].item<double>();
    if (!std::isfinite(value)) throw NonFiniteLossError(std::string(kLossTermNames[t]), value);
    breakdown.terms[t] = value;
    auto weighted = terms[t] * weights.beta[t];
    total = total.defined() ? total + weighted : weighted;
  }
  breakdown.total = total.item<double>();
  return {total, breakdown};
}

}  // namespace cvae
