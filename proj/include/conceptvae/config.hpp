#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <json.hpp>

namespace cvae {

/// Network topology and latent-space sizes.
///
/// Image dims must be divisible by 16 (the latent grid stride). Concept 0 is
/// reserved for the background outside the acquisition cone.
struct ModelConfig {
  std::int64_t image_height = 128;
  std::int64_t image_width = 160;
  std::int64_t num_concepts = 16;
  std::int64_t num_styles = 8;
  std::int64_t concept_embed_dim = 32;
  std::int64_t stem_channels = 32;
  std::int64_t middle_channels = 128;
  std::int64_t neighborhood = 5;  // feature-decoder field of view, in grid cells
  std::int64_t stylizer_hidden = 64;
  std::int64_t decoder_channels = 64;
  double gumbel_temperature = 1.0;
  double ema_decay = 0.999;
  double leaky_slope = 0.01;

  void validate() const;

  std::int64_t grid_height() const { return image_height / 16; }
  std::int64_t grid_width() const { return image_width / 16; }
  std::int64_t latent_channels() const { return concept_embed_dim + num_styles; }
};

/// Weights of the nine loss terms (beta) and of the four prior sub-terms (alpha).
struct LossWeights {
  std::array<double, 9> beta{1, 1, 1, 1, 1, 1, 1, 1, 1};
  std::array<double, 4> alpha{1, 1, 1, 1};

  void validate() const;
};

/// Sampling ranges of the stochastic augmentation. Angles in degrees, translation
/// as a fraction of the image size, zoom/gamma as ratios, blur sigma in pixels.
struct AugmentRanges {
  double rotation_deg = 15.0;
  double translation_frac = 0.10;
  double shear_deg = 8.0;
  double zoom_min = 0.9;
  double zoom_max = 1.1;
  double gamma_min = 0.7;
  double gamma_max = 1.4;
  double blur_sigma_max = 1.5;

  static AugmentRanges identity();
  void validate() const;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 5e-3;
  std::int64_t batch_size = 16;
  std::int64_t max_steps = 3000;
  std::int64_t checkpoint_every = 500;
  double ema_decay = 0.999;
  // Gumbel temperature is linearly annealed from the model's value to this one
  // over max_steps. Equal values disable annealing.
  double gumbel_temperature_final = 1.0;
  double blur_sigma = 4.0;  // target blur for the style-free reconstructions
  std::int64_t blur_kernel = 21;
  LossWeights loss_weights;
  AugmentRanges augment;
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::int64_t log_every = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const AugmentRanges& a);
void from_json(const nlohmann::json& j, AugmentRanges& a);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Synthetic dataset sizes (frames per split) and seed.
struct DataConfig {
  std::int64_t train = 2000;
  std::int64_t retrieval_test = 200;
  std::int64_t probe_test = 200;
  std::int64_t plax = 200;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Settings shared by the evaluation protocols.
struct EvalConfig {
  std::int64_t retrieval_k = 5;
  std::int64_t probe_iterations = 2000;
  double probe_learning_rate = 1e-2;
  std::int64_t probe_batch_size = 32;
  std::uint64_t probe_seed = 0;
  std::int64_t probe_train_frames = 600;  // frames of the train split the probes fit on
  double overlap_threshold = 0.25;        // detection: box share of a cell's area
  double flow_ridge = 1e-3;
  std::int64_t flow_fit_frames = 600;     // train-split frames the flow is fitted on

  void validate() const;
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

/// Top-level configuration file: {"model": {...}, "train": {...}, "data": {...},
/// "eval": {...}}. Missing keys keep defaults; unknown keys are rejected.
struct ConfigFile {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
};

ConfigFile load_config_file(const std::string& path);
void save_config_file(const std::string& path, const ConfigFile& cfg);

}  // namespace cvae
