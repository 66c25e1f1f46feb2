#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "conceptvae/model.hpp"
#include "conceptvae/synth.hpp"

namespace cvae {

// ---------------------------------------------------------------------------
// Frozen latents

/// Everything the probes read from a frozen checkpoint, per frame.
struct LatentFeatures {
  torch::Tensor probs;     // (N, C, h, w)
  torch::Tensor indices;   // (N, h, w) greedy concepts
  torch::Tensor concepts;  // (N, E, h, w) embeddings of the greedy concepts
  torch::Tensor styles;    // (N, S, h, w) styles the stylizer assigns to them
  torch::Tensor cone;      // (N, h, w) float {0, 1}
};

/// Eval mode, no gradient: the model is only read.
LatentFeatures extract_latents(ConceptVAEImpl& model, const LoadedSplit& data, std::int64_t batch_size = 32);

// ---------------------------------------------------------------------------
// Linear probe: one k x k convolution followed by a channel softmax (or sigmoid).

enum class ProbeInput { concept_only, style_only, concept_and_style };
std::string to_string(ProbeInput m);
ProbeInput probe_input_from_string(const std::string& s);

torch::Tensor probe_input(const LatentFeatures& f, ProbeInput mode);

struct LinearProbe {
  torch::Tensor weight;  // (K, in_channels * k * k), channel-major then kernel row, column
  torch::Tensor bias;    // (K)
  std::int64_t kernel_size = 1;

  static LinearProbe zeros(std::int64_t outputs, std::int64_t in_channels, std::int64_t kernel_size);
};

/// W_k applied to every zero-padded k x k window, plus bias. (B, K, h, w).
torch::Tensor linear_probe_logits(const torch::Tensor& input, const LinearProbe& probe);
/// Channel softmax of the logits.
torch::Tensor linear_probe_forward(const torch::Tensor& input, const LinearProbe& probe);

/// 1 - 2 sum(p t) / sum(p^2 + t^2) over space, averaged over channels and batch.
/// A channel where both p and t are all zero contributes 0.
torch::Tensor dice_loss(const torch::Tensor& p, const torch::Tensor& t);

/// (N, 5, H, W) chamber masks -> (N, 6, h, w) area-downsampled targets;
/// channel 0 is background (1 - covered fraction), 1..5 the chambers.
torch::Tensor segmentation_targets(const torch::Tensor& chamber_masks);

struct ProbeTraining {
  std::int64_t iterations = 2000;
  double learning_rate = 1e-2;
  std::int64_t batch_size = 32;  // frames per Adam step
  std::uint64_t seed = 0;
};

struct SegmentationProbeResult {
  LinearProbe probe;
  double train_loss = 0;
  double test_loss = 0;
};

/// Adam on the Dice loss; only the probe weights are optimized.
SegmentationProbeResult fit_segmentation_probe(const torch::Tensor& train_in, const torch::Tensor& train_targets,
                                               const torch::Tensor& test_in, const torch::Tensor& test_targets,
                                               std::int64_t kernel_size, const ProbeTraining& opts);

inline constexpr std::array<std::int64_t, 5> kProbeKernels{1, 3, 5, 7, 9};
inline constexpr std::array<ProbeInput, 3> kProbeInputs{ProbeInput::concept_only, ProbeInput::style_only,
                                                        ProbeInput::concept_and_style};

/// Test Dice loss per (input mode, kernel size).
using SegmentationSweep = std::map<std::pair<ProbeInput, std::int64_t>, double>;

SegmentationSweep segmentation_sweep(const LatentFeatures& train, const torch::Tensor& train_masks,
                                     const LatentFeatures& test, const torch::Tensor& test_masks,
                                     const ProbeTraining& opts);
nlohmann::json to_json(const SegmentationSweep& sweep);
std::string format_table(const SegmentationSweep& sweep);

// ---------------------------------------------------------------------------
// Linear normalizing flow: y = A x + b, ln p(x) = ln N(y; 0, I) + ln|det A|.

struct FlowParams {
  torch::Tensor A;  // (D, D) float64
  torch::Tensor b;  // (D) float64
};

/// Throws DomainError when |det A| < 1e-12.
double flow_logprob(const torch::Tensor& x, const FlowParams& params);
/// Row-wise ln p for (N, D).
torch::Tensor flow_logprob_batch(const torch::Tensor& x, const FlowParams& params);

struct FlowFitOptions {
  double ridge = 1e-3;  // added to the covariance, relative to its mean eigenvalue
  double step = 0.5;
  std::int64_t max_iterations = 2000;
  double tolerance = 1e-9;
  double divergence_bound = 1e5;  // |mean ln p| beyond this aborts
};

/// Maximum likelihood by natural-gradient ascent. The objective depends on the
/// data only through its mean and covariance, so each step costs O(D^3)
/// independent of N. Throws DivergenceError when the likelihood runs away
/// (degenerate data).
FlowParams fit_flow(const torch::Tensor& descriptors, const FlowFitOptions& opts = {});

/// Mean ln p over the rows of `x`.
double flow_mean_logprob(const torch::Tensor& x, const FlowParams& params);

void save_flow(const std::string& path, const FlowParams& params);
FlowParams load_flow(const std::string& path);

/// Descriptors of every interior key point whose center cell is in the cone.
torch::Tensor in_cone_descriptors(const torch::Tensor& probs, const torch::Tensor& cone);

/// Mean flow log-probability over the in-cone interior key points of one
/// (C, h, w) grid. Throws ShapeError when no such key point exists.
double ood_score_image(const torch::Tensor& probs, const torch::Tensor& cone, const FlowParams& params);

/// Mann-Whitney U / (n_pos * n_neg), ties counted 1/2.
double auroc(const std::vector<double>& positives, const std::vector<double>& negatives);

struct OodResult {
  double auroc = 0;
  std::vector<double> in_distribution;  // image scores
  std::vector<double> out_of_distribution;
};

/// Scores images of both splits with a fitted flow. In-distribution images are
/// the positives: their scores should be higher.
OodResult evaluate_ood(const LatentFeatures& in_dist, const LatentFeatures& ood, const FlowParams& flow);
nlohmann::json to_json(const OodResult& r);

// ---------------------------------------------------------------------------
// Detection probe: objectness + valve state per grid cell.

inline constexpr double kDefaultOverlapThreshold = 0.25;

struct DetectionTargets {
  torch::Tensor objectness;  // (N, h, w) float {0, 1}
  torch::Tensor open;        // (N, h, w) float {0, 1}, meaningful where objectness = 1
};

/// A cell is an object cell when the box covers more than `threshold` of its area.
DetectionTargets detection_targets(const std::vector<ManifestRecord>& records, std::int64_t grid_h, std::int64_t grid_w,
                                   double threshold = kDefaultOverlapThreshold);

/// Area under the precision-recall curve, all-points interpolation. Tied scores
/// form a single threshold. Throws DomainError without positives.
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

struct DetectionMetrics {
  double objectness_ap = 0;
  double open_ap = 0;    // among object cells
  double closed_ap = 0;  // among object cells
  double mean_ap = 0;
};

/// `probs` (N, 3, h, w): objectness, open, closed.
DetectionMetrics detection_metrics(const torch::Tensor& probs, const DetectionTargets& targets);

struct DetectionProbeResult {
  LinearProbe probe;
  DetectionMetrics metrics;
};

/// Input: 5x5 window of concept probabilities plus styles of the greedy concepts.
torch::Tensor detection_input(const LatentFeatures& f);

/// Balanced binary cross-entropy on objectness everywhere and on the state
/// channels at object cells. Throws DomainError when the training set has no
/// object cells.
DetectionProbeResult fit_detection_probe(const torch::Tensor& train_in, const DetectionTargets& train_targets,
                                         const torch::Tensor& test_in, const DetectionTargets& test_targets,
                                         const ProbeTraining& opts);

/// Splits frames by acquisition (sorted ids, first half trains the probe).
std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> split_by_acquisition(
    const std::vector<ManifestRecord>& records);

nlohmann::json to_json(const DetectionMetrics& m);

/// Rows of a LatentFeatures / target tensor subset.
LatentFeatures select_rows(const LatentFeatures& f, const std::vector<std::int64_t>& rows);
DetectionTargets select_rows(const DetectionTargets& t, const std::vector<std::int64_t>& rows);

}  // namespace cvae
