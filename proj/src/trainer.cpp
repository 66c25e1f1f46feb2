#include "conceptvae/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "conceptvae/augment.hpp"
#include "conceptvae/errors.hpp"
#include "conceptvae/log.hpp"
#include "conceptvae/rng.hpp"

namespace cvae {

namespace fs = std::filesystem;

StepInputs prepare_step_inputs(const torch::Tensor& images, const torch::Tensor& cone_masks, const ModelConfig& model,
                               const TrainConfig& train, std::uint64_t seed) {
  if (images.dim() != 4 || images.size(1) != 1 || !images.sizes().equals(cone_masks.sizes()))
    throw ShapeError("training batch must be (B, 1, H, W) images with matching cone masks");
  if (images.size(2) != model.image_height || images.size(3) != model.image_width)
    throw ShapeError("training images are " + std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)) +
                     " but the model expects " + std::to_string(model.image_height) + "x" +
                     std::to_string(model.image_width));
  StepInputs in;
  in.images = images;
  const auto cones = cone_masks.to(images.scalar_type());
  in.blurred = gaussian_blur(images, train.blur_sigma, train.blur_kernel) * cones;
  in.cone_grid = cone_mask_grid(cones);

  const auto aug = augment(images.to(torch::kFloat32), cones.to(torch::kFloat32), derive_seed(seed, {2}), train.augment);
  in.augmented = aug.pixels.to(images.scalar_type());
  for (std::size_t b = 0; b < aug.records.size(); ++b) {
    const auto& r = aug.records[b];
    const auto [i, j] = anchor_to_grid(r.anchor_x, r.anchor_y, model.image_height, model.image_width);
    const auto [i2, j2] = anchor_to_grid(r.anchor_out_x, r.anchor_out_y, model.image_height, model.image_width);
    in.pairs.push_back({static_cast<std::int64_t>(b), i, j, i2, j2});
  }
  in.gumbel_noise = gumbel_uniform_noise({images.size(0), model.num_concepts, model.grid_height(), model.grid_width()},
                                         derive_seed(seed, {1}), images.scalar_type());
  return in;
}

LossTerms compute_loss_terms(ConceptVAEImpl& model, EmaMirrorImpl& ema, const StepInputs& in, const TrainConfig& cfg,
                             double temperature, const FrozenAssignment* frozen, ForwardTrace* trace) {
  ForwardTrace local;
  ForwardTrace& t = trace != nullptr ? *trace : local;
  LossTerms terms;

  // Online stem and image decoder: the only consumers of the pixel-level loss.
  t.stem = model.stem->forward(in.images);
  t.recon = model.image_decoder->forward(t.stem);
  terms[0] = loss_img(t.recon, in.images);

  // Concept path on stop-gradient stem features.
  t.middle = model.middle->forward(t.stem);
  t.logits = model.head->forward(t.middle);
  t.sample = discretize_concepts(t.logits, temperature, in.gumbel_noise, frozen);
  t.concepts = model.embedding->forward(t.sample.onehot);
  t.style = model.stylizer->forward(t.middle, t.concepts);
  t.feat_latent = model.feature_decoder->forward(ConceptVAEImpl::latent(t.concepts, t.style));
  t.feat_concept = model.feature_decoder->forward(ConceptVAEImpl::latent(t.concepts, torch::zeros_like(t.style)));

  torch::Tensor target_feat, target_blur_feat;
  {
    torch::NoGradGuard no_grad;
    target_feat = ema.stem->forward(in.images);
    target_blur_feat = ema.stem->forward(in.blurred);
    t.probs_ema = torch::softmax(ema.head->forward(ema.middle->forward(ema.stem->forward(in.augmented))), 1);
  }
  terms[1] = loss_img(ema.image_decoder->forward(t.feat_latent), in.images);
  terms[2] = loss_img(ema.image_decoder->forward(t.feat_concept), in.blurred);
  terms[3] = loss_feat(t.feat_latent, target_feat);
  terms[4] = loss_feat(t.feat_concept, target_blur_feat);
  terms[5] = loss_style(t.style);
  terms[6] = loss_concept_consistency(t.sample.probs, t.probs_ema, in.pairs);
  const auto prior = ConceptPrior::standard(model.config().num_concepts, t.sample.probs.scalar_type());
  terms[7] = loss_prior(t.sample.probs, in.cone_grid, prior, cfg.loss_weights.alpha);
  terms[8] = loss_cluster(t.sample.onehot, in.cone_grid);
  return terms;
}

double gumbel_temperature_at(const ModelConfig& model, const TrainConfig& train, std::int64_t step) {
  if (train.max_steps <= 0) return model.gumbel_temperature;
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(train.max_steps), 0.0, 1.0);
  return model.gumbel_temperature + frac * (train.gumbel_temperature_final - model.gumbel_temperature);
}

std::vector<std::int64_t> batch_rows(std::uint64_t seed, std::int64_t step, std::int64_t dataset_size,
                                     std::int64_t batch_size) {
  if (dataset_size <= 0) throw ConfigError("training split is empty");
  std::vector<std::int64_t> rows(static_cast<std::size_t>(dataset_size));
  std::iota(rows.begin(), rows.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(step), 3}));
  const auto take = std::min(batch_size, dataset_size);
  for (std::int64_t k = 0; k < take; ++k) {
    std::uniform_int_distribution<std::int64_t> pick(k, dataset_size - 1);
    std::swap(rows[k], rows[pick(rng)]);
  }
  rows.resize(static_cast<std::size_t>(take));
  return rows;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg)
    : model_cfg_(model_cfg), train_cfg_(train_cfg) {
  model_cfg_.validate();
  train_cfg_.validate();
  torch::manual_seed(train_cfg_.seed);
  model_ = ConceptVAE(model_cfg_);
  ema_ = EmaMirror(model_cfg_);
  ema_->copy_from(*model_);
  make_optimizer();
}

Trainer::Trainer(const Checkpoint& ckpt, const TrainConfig& train_cfg)
    : model_cfg_(ckpt.model_config), train_cfg_(train_cfg), model_(ckpt.model), ema_(ckpt.ema), step_(ckpt.step) {
  train_cfg_.validate();
  make_optimizer();
  restore_optimizer(ckpt.optimizer_state);
}

void Trainer::make_optimizer() {
  torch::optim::AdamWOptions opts(train_cfg_.learning_rate);
  opts.weight_decay(train_cfg_.weight_decay).betas({0.9, 0.999}).eps(1e-8);
  optimizer_ = std::make_unique<torch::optim::AdamW>(model_->parameters(), opts);
}

void Trainer::restore_optimizer(const NamedTensors& state) {
  if (state.empty()) return;
  std::map<std::string, torch::Tensor> lookup(state.begin(), state.end());
  for (const auto& item : model_->named_parameters()) {
    const auto& name = item.key();
    auto avg = lookup.find("optim/exp_avg/" + name);
    auto sq = lookup.find("optim/exp_avg_sq/" + name);
    auto st = lookup.find("optim/step/" + name);
    if (avg == lookup.end() || sq == lookup.end() || st == lookup.end()) continue;
    auto s = std::make_unique<torch::optim::AdamWParamState>();
    s->step(static_cast<std::int64_t>(st->second.item<float>()));
    s->exp_avg(avg->second.clone());
    s->exp_avg_sq(sq->second.clone());
    optimizer_->state()[item.value().unsafeGetTensorImpl()] = std::move(s);
  }
}

LossBreakdown Trainer::step(const torch::Tensor& images, const torch::Tensor& cone_masks) {
  return step(prepare_step_inputs(images, cone_masks, model_cfg_, train_cfg_,
                                  derive_seed(train_cfg_.seed, {static_cast<std::uint64_t>(step_)})));
}

LossBreakdown Trainer::step(const StepInputs& inputs) {
  model_->train();
  ema_->train();
  optimizer_->zero_grad();
  const double temperature = gumbel_temperature_at(model_cfg_, train_cfg_, step_);
  const auto terms = compute_loss_terms(*model_, *ema_, inputs, train_cfg_, temperature);
  auto [total, breakdown] = total_loss(terms, train_cfg_.loss_weights);
  total.backward();
  // Parameters outside the graph still get decoupled weight decay.
  for (auto& p : model_->parameters())
    if (!p.grad().defined()) p.mutable_grad() = torch::zeros_like(p);
  optimizer_->step();
  ema_->update_from(*model_, train_cfg_.ema_decay);
  ++step_;
  return breakdown;
}

Checkpoint Trainer::snapshot(const nlohmann::json& metadata) const {
  Checkpoint c;
  c.model_config = model_cfg_;
  c.train_config = train_cfg_;
  c.step = step_;
  c.metadata = checkpoint_metadata(model_cfg_);
  for (const auto& [k, v] : metadata.items()) c.metadata[k] = v;
  c.model = model_;
  c.ema = ema_;
  for (const auto& item : model_->named_parameters()) {
    const auto& st = optimizer_->state();
    auto it = st.find(item.value().unsafeGetTensorImpl());
    if (it == st.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    c.optimizer_state.emplace_back("optim/exp_avg/" + item.key(), s.exp_avg());
    c.optimizer_state.emplace_back("optim/exp_avg_sq/" + item.key(), s.exp_avg_sq());
    c.optimizer_state.emplace_back("optim/step/" + item.key(),
                                   torch::full({1}, static_cast<float>(s.step()), torch::kFloat32));
  }
  return c;
}

nlohmann::json checkpoint_metadata(const ModelConfig& cfg) {
  const auto [ka, kb] = FeatureDecoderImpl::stage_kernels(cfg.neighborhood);
  return {{"stem_receptive_field_px", EncoderStemImpl::kReceptiveField},
          {"middle_receptive_field_px", EncoderMiddleImpl::receptive_field_px()},
          {"grid_stride_px", 16},
          {"feature_decoder_kernels", {ka, kb}},
          {"middle_stage_widths", {cfg.middle_channels / 4, cfg.middle_channels / 2, cfg.middle_channels}}};
}

namespace {

std::string checkpoint_name(std::int64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "step_%06lld.ckpt", static_cast<long long>(step));
  return buf;
}

void trim_log(const fs::path& path, std::int64_t last_step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (nlohmann::json::parse(line).at("step").get<std::int64_t>() <= last_step) keep.push_back(line);
    } catch (const nlohmann::json::exception&) {
      break;  // torn final line of an interrupted run
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

Checkpoint train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const LoadedSplit& data,
                 const TrainRunOptions& opts) {
  if (train_cfg.deterministic) torch::set_num_threads(1);
  if (opts.out_dir.empty()) throw ConfigError("train needs an output directory");
  std::error_code ec;
  fs::create_directories(opts.out_dir, ec);
  if (ec) throw IoError("cannot create " + opts.out_dir + ": " + ec.message());

  std::unique_ptr<Trainer> trainer;
  const fs::path log_path = fs::path(opts.out_dir) / "train_log.jsonl";
  if (opts.resume_from) {
    auto ckpt = load_checkpoint(*opts.resume_from);
    trainer = std::make_unique<Trainer>(ckpt, train_cfg);
    trim_log(log_path, ckpt.step);
    log::info("resuming from step " + std::to_string(ckpt.step));
  } else {
    trainer = std::make_unique<Trainer>(model_cfg, train_cfg);
    std::ofstream(log_path, std::ios::trunc);
  }
  const auto& mcfg = trainer->model_config();
  if (data.pixels.size(2) != mcfg.image_height || data.pixels.size(3) != mcfg.image_width)
    throw ConfigError("dataset images do not match the model image size");

  std::ofstream log_out(log_path, std::ios::app);
  bool interrupted = false;
  while (trainer->steps_done() < train_cfg.max_steps) {
    if (opts.stop_after >= 0 && trainer->steps_done() >= opts.stop_after) {
      interrupted = true;
      break;
    }
    const auto step = trainer->steps_done();
    const auto rows = batch_rows(train_cfg.seed, step, data.size(), train_cfg.batch_size);
    const auto t0 = std::chrono::steady_clock::now();
    const auto b = trainer->step(data.pixel_batch(rows), data.cone_batch(rows));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (train_cfg.log_every > 0 && (step % train_cfg.log_every == 0 || step + 1 == train_cfg.max_steps)) {
      nlohmann::json row{{"step", step + 1}};
      for (std::size_t k = 0; k < kLossTermNames.size(); ++k) row[std::string(kLossTermNames[k])] = b.terms[k];
      row["total"] = b.total;
      row["temperature"] = gumbel_temperature_at(mcfg, train_cfg, step);
      row["seconds"] = secs;
      log_out << row.dump() << '\n';
      log_out.flush();
    }
    if (opts.on_step) opts.on_step(step + 1, b);
    if (train_cfg.checkpoint_every > 0 && trainer->steps_done() % train_cfg.checkpoint_every == 0)
      save_checkpoint((fs::path(opts.out_dir) / checkpoint_name(trainer->steps_done())).string(), trainer->snapshot());
  }
  auto final_ckpt = trainer->snapshot();
  save_checkpoint((fs::path(opts.out_dir) / (interrupted ? "latest.ckpt" : "final.ckpt")).string(), final_ckpt);
  return final_ckpt;
}

void calibrate_normalization(ConceptVAEImpl& model, const LoadedSplit& data, std::int64_t batches,
                             std::int64_t batch_size, std::uint64_t seed) {
  if (batches <= 0) throw ConfigError("calibration needs at least one batch");
  torch::NoGradGuard no_grad;
  model.train();
  auto& norm = *model.stem->out_norm;
  torch::Tensor mean_sum, var_sum;
  for (std::int64_t k = 0; k < batches; ++k) {
    const auto rows = batch_rows(derive_seed(seed, {0xCA1}), k, data.size(), batch_size);
    const auto pre = model.stem->forward_pre_norm(data.pixel_batch(rows));
    const auto s = norm.stats(pre);
    mean_sum = mean_sum.defined() ? mean_sum + s.mean.flatten() : s.mean.flatten();
    var_sum = var_sum.defined() ? var_sum + s.var.flatten() : s.var.flatten();
  }
  norm.running_mean.copy_(mean_sum / static_cast<double>(batches));
  norm.running_var.copy_(var_sum / static_cast<double>(batches));
}

Checkpoint random_init_checkpoint(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                  const LoadedSplit& data) {
  Trainer trainer(model_cfg, train_cfg);
  calibrate_normalization(*trainer.model(), data, 8, train_cfg.batch_size, train_cfg.seed);
  trainer.ema()->copy_from(*trainer.model());
  return trainer.snapshot({{"baseline", "random_init"}});
}

}  // namespace cvae
