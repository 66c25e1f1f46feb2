#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "conceptvae/checkpoint.hpp"
#include "conceptvae/config.hpp"
#include "conceptvae/losses.hpp"
#include "conceptvae/model.hpp"
#include "conceptvae/synth.hpp"

namespace cvae {

/// Everything random about one step, drawn up front so that the loss is a pure
/// function of the parameters (gradient checks rely on this).
struct StepInputs {
  torch::Tensor images;     // (B, 1, H, W)
  torch::Tensor blurred;    // target of the style-free reconstructions
  torch::Tensor cone_grid;  // (B, h, w)
  torch::Tensor augmented;  // (B, 1, H, W), input of the EMA branch
  std::vector<ConsistencyPair> pairs;
  torch::Tensor gumbel_noise;  // (B, C, h, w) uniform in (0, 1)
};

StepInputs prepare_step_inputs(const torch::Tensor& images, const torch::Tensor& cone_masks, const ModelConfig& model,
                               const TrainConfig& train, std::uint64_t seed);

/// Intermediate tensors of a forward pass.
struct ForwardTrace {
  torch::Tensor stem, recon, middle, logits;
  ConceptSample sample;
  torch::Tensor concepts, style;
  torch::Tensor feat_latent, feat_concept;  // feature-decoder outputs with and without style
  torch::Tensor probs_ema;
};

/// The nine terms in objective order. Online blocks receive gradients, EMA blocks never do.
LossTerms compute_loss_terms(ConceptVAEImpl& model, EmaMirrorImpl& ema, const StepInputs& in, const TrainConfig& cfg,
                             double temperature, const FrozenAssignment* frozen = nullptr,
                             ForwardTrace* trace = nullptr);

/// Linear anneal from the model temperature to train.gumbel_temperature_final.
double gumbel_temperature_at(const ModelConfig& model, const TrainConfig& train, std::int64_t step);

/// Rows of the dataset used at `step` (sampled without replacement).
std::vector<std::int64_t> batch_rows(std::uint64_t seed, std::int64_t step, std::int64_t dataset_size,
                                     std::int64_t batch_size);

class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg);
  /// Resumes model, EMA, optimizer moments and step counter.
  Trainer(const Checkpoint& ckpt, const TrainConfig& train_cfg);

  /// One optimization step on the given batch; random draws derive from (seed, step).
  LossBreakdown step(const torch::Tensor& images, const torch::Tensor& cone_masks);
  LossBreakdown step(const StepInputs& inputs);

  Checkpoint snapshot(const nlohmann::json& metadata = nlohmann::json::object()) const;

  std::int64_t steps_done() const { return step_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  const TrainConfig& train_config() const { return train_cfg_; }
  ConceptVAE& model() { return model_; }
  EmaMirror& ema() { return ema_; }
  torch::optim::AdamW& optimizer() { return *optimizer_; }

 private:
  void make_optimizer();
  void restore_optimizer(const NamedTensors& state);

  ModelConfig model_cfg_;
  TrainConfig train_cfg_;
  ConceptVAE model_{nullptr};
  EmaMirror ema_{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  ConceptPrior prior_;
  std::int64_t step_ = 0;
};

struct TrainRunOptions {
  std::string out_dir;                     // checkpoints and train_log.jsonl go here
  std::optional<std::string> resume_from;  // checkpoint path
  std::int64_t stop_after = -1;            // stop early at this step (simulated interrupt)
  std::function<void(std::int64_t, const LossBreakdown&)> on_step;
};

/// Loops train steps over `data`, checkpointing every train.checkpoint_every steps and
/// at the end (final.ckpt). Returns the final checkpoint.
Checkpoint train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const LoadedSplit& data,
                 const TrainRunOptions& opts);

/// Training metadata stored with every checkpoint (receptive fields, versions).
nlohmann::json checkpoint_metadata(const ModelConfig& cfg);

/// Sets the stem's running statistics from `batches` batches of `data` (used for
/// randomly initialized baselines, whose running statistics were never trained).
void calibrate_normalization(ConceptVAEImpl& model, const LoadedSplit& data, std::int64_t batches,
                             std::int64_t batch_size, std::uint64_t seed);

/// A freshly initialized checkpoint with calibrated normalization statistics.
Checkpoint random_init_checkpoint(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                  const LoadedSplit& data);

}  // namespace cvae
