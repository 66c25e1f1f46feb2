#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "conceptvae/config.hpp"

namespace cvae {

inline constexpr double kProbFloor = 1e-8;

/// Location-level priors: inside the cone uniform over concepts 1..C-1 (no
/// mass on the background concept), outside the cone all mass on concept 0.
struct ConceptPrior {
  torch::Tensor cone;        // (C)
  torch::Tensor background;  // (C)

  static ConceptPrior standard(std::int64_t num_concepts, torch::ScalarType dtype = torch::kFloat32);
};

/// Batch-averaged concept distributions inside and outside the cone.
struct ConceptPrevalence {
  torch::Tensor cone;        // (C), undefined when the batch has no cone cell
  torch::Tensor background;  // (C), undefined when the batch has no background cell
};

/// One correspondence per sample: grid cell (i, j) of the original view and
/// (i2, j2) of the augmented view.
struct ConsistencyPair {
  std::int64_t sample = 0;
  std::int64_t i = 0, j = 0;
  std::int64_t i2 = 0, j2 = 0;
};

/// KL(p || q) along `dim`, natural log, both arguments floored at kProbFloor inside the log.
torch::Tensor kl_divergence(const torch::Tensor& p, const torch::Tensor& q, std::int64_t dim);

torch::Tensor loss_img(const torch::Tensor& recon, const torch::Tensor& target);

/// MSE against a target that never receives gradient.
torch::Tensor loss_feat(const torch::Tensor& recon, const torch::Tensor& target);

/// ||row mean||^2 + ||Cov - I||_F^2 of the (S, B*h*w) flattened style matrix
/// (population covariance).
torch::Tensor loss_style(const torch::Tensor& style);

/// Mean over pairs of -sum_c p_ema(c) ln p(c); p_ema is detached.
torch::Tensor loss_concept_consistency(const torch::Tensor& probs, const torch::Tensor& probs_ema,
                                       const std::vector<ConsistencyPair>& pairs);

ConceptPrevalence concept_prevalence(const torch::Tensor& probs, const torch::Tensor& cone_grid);

/// Location-level plus image-level KL priors. `cone_grid` is (B, h, w) binary.
/// alpha = (cone location, background location, cone prevalence, background prevalence).
torch::Tensor loss_prior(const torch::Tensor& probs, const torch::Tensor& cone_grid, const ConceptPrior& prior,
                         const std::array<double, 4>& alpha);

/// Mean squared first difference of the one-hot grid along height and width,
/// averaged over channels and over difference positions whose endpoints are
/// both in the cone.
torch::Tensor loss_cluster(const torch::Tensor& onehot, const torch::Tensor& cone_grid);

/// Separable Gaussian blur with replicate padding; sigma == 0 returns the input.
torch::Tensor gaussian_blur(const torch::Tensor& images, double sigma, std::int64_t kernel_size);

inline constexpr std::array<std::string_view, 9> kLossTermNames{
    "img",   "img_latent",          "img_concept_blur", "feat_latent", "feat_concept_blur",
    "style", "concept_consistency", "prior",            "cluster"};

/// The nine weighted terms, in the order of the total objective.
using LossTerms = std::array<torch::Tensor, 9>;

struct LossBreakdown {
  std::array<double, 9> terms{};
  double total = 0;
};

/// sum_i beta_i * term_i. Throws NonFiniteLossError naming the first non-finite term.
std::pair<torch::Tensor, LossBreakdown> total_loss(const LossTerms& terms, const LossWeights& weights);

}  // namespace cvae
