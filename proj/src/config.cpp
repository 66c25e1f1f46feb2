#include "conceptvae/config.hpp"

#include <fstream>

#include "conceptvae/errors.hpp"

namespace cvae {

namespace {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

/// Every key of `j` must exist in `reference` (the serialized defaults), recursively.
void check_known_keys(const nlohmann::json& j, const nlohmann::json& reference, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = reference.find(key);
    if (it == reference.end()) throw ConfigError("unknown config key " + where + "." + key);
    if (it->is_object()) check_known_keys(value, *it, where + "." + key);
  }
}

}  // namespace

void DataConfig::validate() const {
  if (train < 0 || retrieval_test < 0 || probe_test < 0 || plax < 0) throw ConfigError("split sizes must be >= 0");
  if (retrieval_test % 2 != 0 || plax % 2 != 0)
    throw ConfigError("retrieval_test and plax hold ED/ES pairs and must be even");
}

void EvalConfig::validate() const {
  if (retrieval_k < 1) throw ConfigError("retrieval_k must be >= 1");
  if (probe_iterations < 1 || probe_batch_size < 1) throw ConfigError("probe iterations and batch size must be >= 1");
  if (!(probe_learning_rate > 0)) throw ConfigError("probe_learning_rate must be > 0");
  if (probe_train_frames < 1 || flow_fit_frames < 1) throw ConfigError("frame counts must be >= 1");
  if (!(overlap_threshold >= 0 && overlap_threshold < 1)) throw ConfigError("overlap_threshold must lie in [0, 1)");
  if (flow_ridge < 0) throw ConfigError("flow_ridge must be >= 0");
}

void ModelConfig::validate() const {
  if (image_height <= 0 || image_width <= 0 || image_height % 16 != 0 || image_width % 16 != 0)
    throw ConfigError("image dims must be positive multiples of 16, got " + std::to_string(image_height) + "x" +
                      std::to_string(image_width));
  if (num_concepts < 2) throw ConfigError("num_concepts must be >= 2 (concept 0 is the background)");
  if (num_styles < 1 || concept_embed_dim < 1) throw ConfigError("num_styles and concept_embed_dim must be >= 1");
  if (stem_channels < 2 || middle_channels < 4 || middle_channels % 4 != 0)
    throw ConfigError("stem_channels must be >= 2 and middle_channels a positive multiple of 4");
  if (neighborhood < 1 || neighborhood % 2 == 0) throw ConfigError("neighborhood must be odd and >= 1");
  if (stylizer_hidden < 1 || decoder_channels < 2) throw ConfigError("hidden widths must be positive");
  if (!(gumbel_temperature > 0)) throw ConfigError("gumbel_temperature must be > 0");
  if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("ema_decay must lie in (0, 1)");
  if (leaky_slope < 0) throw ConfigError("leaky_slope must be >= 0");
}

void LossWeights::validate() const {
  for (double b : beta)
    if (!(b >= 0)) throw ConfigError("loss weights beta must be >= 0");
  for (double a : alpha)
    if (!(a >= 0)) throw ConfigError("loss weights alpha must be >= 0");
}

AugmentRanges AugmentRanges::identity() {
  AugmentRanges r;
  r.rotation_deg = 0;
  r.translation_frac = 0;
  r.shear_deg = 0;
  r.zoom_min = r.zoom_max = 1;
  r.gamma_min = r.gamma_max = 1;
  r.blur_sigma_max = 0;
  return r;
}

void AugmentRanges::validate() const {
  if (rotation_deg < 0 || rotation_deg > 180) throw ConfigError("rotation_deg must lie in [0, 180]");
  if (translation_frac < 0 || translation_frac > 0.5) throw ConfigError("translation_frac must lie in [0, 0.5]");
  if (shear_deg < 0 || shear_deg > 45) throw ConfigError("shear_deg must lie in [0, 45]");
  if (!(zoom_min > 0) || zoom_min > zoom_max) throw ConfigError("zoom range must satisfy 0 < min <= max");
  if (!(gamma_min > 0) || gamma_min > gamma_max) throw ConfigError("gamma range must satisfy 0 < min <= max");
  if (blur_sigma_max < 0) throw ConfigError("blur_sigma_max must be >= 0");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("ema_decay must lie in (0, 1)");
  if (!(gumbel_temperature_final > 0)) throw ConfigError("gumbel_temperature_final must be > 0");
  if (blur_sigma < 0 || blur_kernel < 1 || blur_kernel % 2 == 0)
    throw ConfigError("blur_sigma must be >= 0 and blur_kernel odd");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  loss_weights.validate();
  augment.validate();
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_height", c.image_height},
                     {"image_width", c.image_width},
                     {"num_concepts", c.num_concepts},
                     {"num_styles", c.num_styles},
                     {"concept_embed_dim", c.concept_embed_dim},
                     {"stem_channels", c.stem_channels},
                     {"middle_channels", c.middle_channels},
                     {"neighborhood", c.neighborhood},
                     {"stylizer_hidden", c.stylizer_hidden},
                     {"decoder_channels", c.decoder_channels},
                     {"gumbel_temperature", c.gumbel_temperature},
                     {"ema_decay", c.ema_decay},
                     {"leaky_slope", c.leaky_slope}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  read_opt(j, "image_height", c.image_height);
  read_opt(j, "image_width", c.image_width);
  read_opt(j, "num_concepts", c.num_concepts);
  read_opt(j, "num_styles", c.num_styles);
  read_opt(j, "concept_embed_dim", c.concept_embed_dim);
  read_opt(j, "stem_channels", c.stem_channels);
  read_opt(j, "middle_channels", c.middle_channels);
  read_opt(j, "neighborhood", c.neighborhood);
  read_opt(j, "stylizer_hidden", c.stylizer_hidden);
  read_opt(j, "decoder_channels", c.decoder_channels);
  read_opt(j, "gumbel_temperature", c.gumbel_temperature);
  read_opt(j, "ema_decay", c.ema_decay);
  read_opt(j, "leaky_slope", c.leaky_slope);
}

void to_json(nlohmann::json& j, const LossWeights& w) { j = nlohmann::json{{"beta", w.beta}, {"alpha", w.alpha}}; }

void from_json(const nlohmann::json& j, LossWeights& w) {
  read_opt(j, "beta", w.beta);
  read_opt(j, "alpha", w.alpha);
}

void to_json(nlohmann::json& j, const AugmentRanges& a) {
  j = nlohmann::json{{"rotation_deg", a.rotation_deg},     {"translation_frac", a.translation_frac},
                     {"shear_deg", a.shear_deg},           {"zoom_min", a.zoom_min},
                     {"zoom_max", a.zoom_max},             {"gamma_min", a.gamma_min},
                     {"gamma_max", a.gamma_max},           {"blur_sigma_max", a.blur_sigma_max}};
}

void from_json(const nlohmann::json& j, AugmentRanges& a) {
  read_opt(j, "rotation_deg", a.rotation_deg);
  read_opt(j, "translation_frac", a.translation_frac);
  read_opt(j, "shear_deg", a.shear_deg);
  read_opt(j, "zoom_min", a.zoom_min);
  read_opt(j, "zoom_max", a.zoom_max);
  read_opt(j, "gamma_min", a.gamma_min);
  read_opt(j, "gamma_max", a.gamma_max);
  read_opt(j, "blur_sigma_max", a.blur_sigma_max);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"max_steps", c.max_steps},
                     {"checkpoint_every", c.checkpoint_every},
                     {"ema_decay", c.ema_decay},
                     {"gumbel_temperature_final", c.gumbel_temperature_final},
                     {"blur_sigma", c.blur_sigma},
                     {"blur_kernel", c.blur_kernel},
                     {"loss_weights", c.loss_weights},
                     {"augment", c.augment},
                     {"seed", c.seed},
                     {"deterministic", c.deterministic},
                     {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "max_steps", c.max_steps);
  read_opt(j, "checkpoint_every", c.checkpoint_every);
  read_opt(j, "ema_decay", c.ema_decay);
  read_opt(j, "gumbel_temperature_final", c.gumbel_temperature_final);
  read_opt(j, "blur_sigma", c.blur_sigma);
  read_opt(j, "blur_kernel", c.blur_kernel);
  read_opt(j, "loss_weights", c.loss_weights);
  read_opt(j, "augment", c.augment);
  read_opt(j, "seed", c.seed);
  read_opt(j, "deterministic", c.deterministic);
  read_opt(j, "log_every", c.log_every);
}

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = nlohmann::json{{"train", c.train},
                     {"retrieval_test", c.retrieval_test},
                     {"probe_test", c.probe_test},
                     {"plax", c.plax},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  read_opt(j, "train", c.train);
  read_opt(j, "retrieval_test", c.retrieval_test);
  read_opt(j, "probe_test", c.probe_test);
  read_opt(j, "plax", c.plax);
  read_opt(j, "seed", c.seed);
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json{{"retrieval_k", c.retrieval_k},
                     {"probe_iterations", c.probe_iterations},
                     {"probe_learning_rate", c.probe_learning_rate},
                     {"probe_batch_size", c.probe_batch_size},
                     {"probe_seed", c.probe_seed},
                     {"probe_train_frames", c.probe_train_frames},
                     {"overlap_threshold", c.overlap_threshold},
                     {"flow_ridge", c.flow_ridge},
                     {"flow_fit_frames", c.flow_fit_frames}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  read_opt(j, "retrieval_k", c.retrieval_k);
  read_opt(j, "probe_iterations", c.probe_iterations);
  read_opt(j, "probe_learning_rate", c.probe_learning_rate);
  read_opt(j, "probe_batch_size", c.probe_batch_size);
  read_opt(j, "probe_seed", c.probe_seed);
  read_opt(j, "probe_train_frames", c.probe_train_frames);
  read_opt(j, "overlap_threshold", c.overlap_threshold);
  read_opt(j, "flow_ridge", c.flow_ridge);
  read_opt(j, "flow_fit_frames", c.flow_fit_frames);
}

ConfigFile load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + path + ": " + e.what());
  }
  ConfigFile cfg;
  check_known_keys(j, nlohmann::json{{"model", cfg.model}, {"train", cfg.train}, {"data", cfg.data}, {"eval", cfg.eval}},
                   "config");
  try {
    if (j.contains("model")) cfg.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) cfg.train = j.at("train").get<TrainConfig>();
    if (j.contains("data")) cfg.data = j.at("data").get<DataConfig>();
    if (j.contains("eval")) cfg.eval = j.at("eval").get<EvalConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid value in config file " + path + ": " + e.what());
  }
  cfg.model.validate();
  cfg.train.validate();
  cfg.data.validate();
  cfg.eval.validate();
  return cfg;
}

void save_config_file(const std::string& path, const ConfigFile& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file: " + path);
  out << nlohmann::json{{"model", cfg.model}, {"train", cfg.train}, {"data", cfg.data}, {"eval", cfg.eval}}.dump(2)
      << '\n';
}

}  // namespace cvae
