// conceptvae command line: dataset generation, training, evaluation, latent
// editing and the HTTP service.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "conceptvae/checkpoint.hpp"
#include "conceptvae/config.hpp"
#include "conceptvae/errors.hpp"
#include "conceptvae/image_io.hpp"
#include "conceptvae/inference.hpp"
#include "conceptvae/latent_edit.hpp"
#include "conceptvae/log.hpp"
#include "conceptvae/probes.hpp"
#include "conceptvae/retrieval.hpp"
#include "conceptvae/service.hpp"
#include "conceptvae/synth.hpp"
#include "conceptvae/trainer.hpp"

namespace fs = std::filesystem;
using namespace cvae;

namespace {

/// Thrown for problems the user can fix by changing the invocation (exit 1).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string out;
  std::string log_level = "info";
};

struct ModelSource {
  std::string ckpt;
  bool random_init = false;
};

ConfigFile load_config(const Common& c) {
  ConfigFile cfg;
  if (!c.config.empty()) cfg = load_config_file(c.config);
  return cfg;
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) throw UsageError("--out is required");
  fs::create_directories(dir);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

/// Trained checkpoint, or a calibrated random initialization when --random-init.
Checkpoint obtain_model(const ModelSource& src, const ConfigFile& cfg, const std::string& data_dir) {
  if (src.random_init) {
    if (data_dir.empty()) throw UsageError("--random-init needs --data (normalization is calibrated on the train split)");
    auto mcfg = cfg.model;
    if (!src.ckpt.empty()) mcfg = load_checkpoint(src.ckpt).model_config;
    return random_init_checkpoint(mcfg, cfg.train, load_split(data_dir, "train"));
  }
  if (src.ckpt.empty()) throw UsageError("--ckpt is required (or --random-init)");
  return load_checkpoint(src.ckpt);
}

torch::Tensor load_image(const std::string& path, const ModelConfig& mcfg) {
  auto img = read_png(path);
  if (img.channels != 1) throw UsageError(path + ": expected an 8-bit grayscale PNG");
  if (img.height != mcfg.image_height || img.width != mcfg.image_width)
    throw UsageError(path + " is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     ", the model expects " + std::to_string(mcfg.image_height) + "x" +
                     std::to_string(mcfg.image_width));
  return gray8_to_tensor(img).unsqueeze(0);
}

nlohmann::json grid_json(const torch::Tensor& g) {
  const auto t = g.to(torch::kInt64).contiguous();
  nlohmann::json rows = nlohmann::json::array();
  for (std::int64_t i = 0; i < t.size(0); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::int64_t j = 0; j < t.size(1); ++j) row.push_back(t[i][j].item<std::int64_t>());
    rows.push_back(row);
  }
  return rows;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "output directory");
  app->add_option("--log-level", c.log_level, "debug|info|warn|error|off");
}

void add_model_source(CLI::App* app, ModelSource& m) {
  app->add_option("--ckpt", m.ckpt, "checkpoint file")->check(CLI::ExistingFile);
  app->add_flag("--random-init", m.random_init, "evaluate a randomly initialized model instead");
}

log::Level parse_level(const std::string& s) {
  if (s == "debug") return log::Level::debug;
  if (s == "info") return log::Level::info;
  if (s == "warn") return log::Level::warn;
  if (s == "error") return log::Level::error;
  if (s == "off") return log::Level::off;
  throw UsageError("unknown log level '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ConceptVAE: discrete concept / continuous style autoencoder for ultrasound-like images"};
  app.require_subcommand(1);
  Common common;
  ModelSource source;
  std::string data_dir;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, common);
  std::optional<std::int64_t> n_train, n_retrieval, n_probe, n_plax;
  std::optional<std::uint64_t> data_seed;
  gen->add_option("--train", n_train, "train frames");
  gen->add_option("--retrieval", n_retrieval, "retrieval-test frames (ED/ES pairs)");
  gen->add_option("--probe", n_probe, "probe-test frames");
  gen->add_option("--plax", n_plax, "PLAX frames (ED/ES pairs)");
  gen->add_option("--seed", data_seed, "dataset seed");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, common);
  tr->add_option("--data", data_dir, "dataset directory")->required();
  std::optional<std::int64_t> max_steps, batch_size, ckpt_every;
  std::optional<std::uint64_t> train_seed;
  std::optional<double> lr;
  std::string resume;
  tr->add_option("--max-steps", max_steps);
  tr->add_option("--batch-size", batch_size);
  tr->add_option("--checkpoint-every", ckpt_every);
  tr->add_option("--seed", train_seed);
  tr->add_option("--lr", lr);
  tr->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);

  // evaluations
  auto* er = app.add_subcommand("eval-retrieval", "landmark retrieval mAP");
  auto* es = app.add_subcommand("eval-segmentation", "linear segmentation probe sweep");
  auto* eo = app.add_subcommand("eval-ood", "linear-flow near-OOD AuROC");
  auto* ed = app.add_subcommand("eval-detection", "valve detection probe");
  for (auto* sub : {er, es, eo, ed}) {
    add_common(sub, common);
    add_model_source(sub, source);
    sub->add_option("--data", data_dir, "dataset directory")->required();
  }
  std::optional<std::int64_t> probe_iterations;
  es->add_option("--iterations", probe_iterations, "probe optimization steps");
  ed->add_option("--iterations", probe_iterations, "probe optimization steps");
  std::optional<double> overlap;
  ed->add_option("--threshold", overlap, "cell overlap ratio for objectness");
  std::string flow_path;
  bool fit_flow_flag = false;
  eo->add_option("--flow", flow_path, "fitted flow file");
  eo->add_flag("--fit", fit_flow_flag, "fit the flow on the train split (saved to <out>/flow.bin)");

  // latent editing
  std::string image_path, script_path;
  double beta = 0;
  std::uint64_t noise_seed = 0;
  auto* rc = app.add_subcommand("render-concepts", "concept-map overlay PNG");
  auto* ec = app.add_subcommand("edit", "apply an edit script and reconstruct");
  auto* gs = app.add_subcommand("generate-style", "style-noise generation");
  for (auto* sub : {rc, ec, gs}) {
    add_common(sub, common);
    sub->add_option("--ckpt", source.ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    sub->add_option("--image", image_path, "grayscale PNG")->required()->check(CLI::ExistingFile);
  }
  ec->add_option("--script", script_path, "edit script")->required()->check(CLI::ExistingFile);
  gs->add_option("--beta", beta, "noise level")->required()->check(CLI::NonNegativeNumber);
  gs->add_option("--seed", noise_seed, "noise seed");

  // service
  auto* sv = app.add_subcommand("serve", "HTTP API");
  add_common(sv, common);
  sv->add_option("--ckpt", source.ckpt, "checkpoint file")->check(CLI::ExistingFile);
  sv->add_option("--data", data_dir, "dataset directory")->required();
  std::string host = "127.0.0.1";
  int port = 8080;
  sv->add_option("--host", host);
  sv->add_option("--port", port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_parse = app.exit(e);
    return rc_parse == 0 ? 0 : 1;
  }

  try {
    log::set_level(parse_level(common.log_level));
    auto cfg = load_config(common);

    if (gen->parsed()) {
      ensure_dir(common.out);
      if (n_train) cfg.data.train = *n_train;
      if (n_retrieval) cfg.data.retrieval_test = *n_retrieval;
      if (n_probe) cfg.data.probe_test = *n_probe;
      if (n_plax) cfg.data.plax = *n_plax;
      if (data_seed) cfg.data.seed = *data_seed;
      cfg.data.validate();
      DatasetSpec spec;
      spec.height = cfg.model.image_height;
      spec.width = cfg.model.image_width;
      spec.train = cfg.data.train;
      spec.retrieval_test = cfg.data.retrieval_test;
      spec.probe_test = cfg.data.probe_test;
      spec.plax = cfg.data.plax;
      spec.seed = cfg.data.seed;
      const auto records = generate_dataset(spec, common.out);
      log::info("wrote " + std::to_string(records.size()) + " frames to " + common.out);
      return 0;
    }

    if (tr->parsed()) {
      ensure_dir(common.out);
      if (max_steps) cfg.train.max_steps = *max_steps;
      if (batch_size) cfg.train.batch_size = *batch_size;
      if (ckpt_every) cfg.train.checkpoint_every = *ckpt_every;
      if (train_seed) cfg.train.seed = *train_seed;
      if (lr) cfg.train.learning_rate = *lr;
      cfg.train.validate();
      save_config_file((fs::path(common.out) / "config.json").string(), cfg);
      TrainRunOptions opts;
      opts.out_dir = common.out;
      if (!resume.empty()) opts.resume_from = resume;
      const auto ckpt = train(cfg.model, cfg.train, load_split(data_dir, "train"), opts);
      log::info("training finished at step " + std::to_string(ckpt.step));
      return 0;
    }

    if (er->parsed()) {
      ensure_dir(common.out);
      auto ckpt = obtain_model(source, cfg, data_dir);
      const auto r = evaluate_retrieval(*ckpt.model, load_split(data_dir, "retrieval"), cfg.eval.retrieval_k);
      const auto table = format_table(r);
      std::cout << table;
      write_text(fs::path(common.out) / "retrieval.txt", table);
      write_json(fs::path(common.out) / "retrieval.json", to_json(r));
      return 0;
    }

    if (es->parsed()) {
      ensure_dir(common.out);
      if (probe_iterations) cfg.eval.probe_iterations = *probe_iterations;
      cfg.eval.validate();
      auto ckpt = obtain_model(source, cfg, data_dir);
      const auto train_split = load_split(data_dir, "train").head(cfg.eval.probe_train_frames);
      const auto test_split = load_split(data_dir, "probe");
      ProbeTraining pt{cfg.eval.probe_iterations, cfg.eval.probe_learning_rate, cfg.eval.probe_batch_size,
                       cfg.eval.probe_seed};
      const auto sweep = segmentation_sweep(extract_latents(*ckpt.model, train_split), train_split.chamber_masks,
                                            extract_latents(*ckpt.model, test_split), test_split.chamber_masks, pt);
      const auto table = format_table(sweep);
      std::cout << "test Dice loss\n" << table;
      write_text(fs::path(common.out) / "segmentation.txt", table);
      write_json(fs::path(common.out) / "segmentation.json", to_json(sweep));
      return 0;
    }

    if (eo->parsed()) {
      if (flow_path.empty() && !fit_flow_flag) throw UsageError("eval-ood needs --flow <file> or --fit");
      ensure_dir(common.out);
      auto ckpt = obtain_model(source, cfg, data_dir);
      FlowParams flow;
      if (fit_flow_flag) {
        const auto fit_split = load_split(data_dir, "train").head(cfg.eval.flow_fit_frames);
        const auto f = extract_latents(*ckpt.model, fit_split);
        std::vector<torch::Tensor> rows;
        for (std::int64_t n = 0; n < f.probs.size(0); ++n) rows.push_back(in_cone_descriptors(f.probs[n], f.cone[n]));
        FlowFitOptions fo;
        fo.ridge = cfg.eval.flow_ridge;
        flow = fit_flow(torch::cat(rows), fo);
        save_flow((fs::path(common.out) / "flow.bin").string(), flow);
      } else {
        flow = load_flow(flow_path);
      }
      const auto r = evaluate_ood(extract_latents(*ckpt.model, load_split(data_dir, "probe")),
                                  extract_latents(*ckpt.model, load_split(data_dir, "plax")), flow);
      std::cout << "AuROC (in-distribution vs PLAX) " << r.auroc << '\n';
      write_json(fs::path(common.out) / "ood.json", to_json(r));
      return 0;
    }

    if (ed->parsed()) {
      ensure_dir(common.out);
      if (probe_iterations) cfg.eval.probe_iterations = *probe_iterations;
      if (overlap) cfg.eval.overlap_threshold = *overlap;
      cfg.eval.validate();
      auto ckpt = obtain_model(source, cfg, data_dir);
      const auto plax = load_split(data_dir, "plax");
      const auto f = extract_latents(*ckpt.model, plax);
      const auto targets =
          detection_targets(plax.records, f.probs.size(2), f.probs.size(3), cfg.eval.overlap_threshold);
      const auto [train_rows, test_rows] = split_by_acquisition(plax.records);
      const auto input = detection_input(f);
      const auto idx_tr = torch::tensor(train_rows, torch::kInt64), idx_te = torch::tensor(test_rows, torch::kInt64);
      ProbeTraining pt{cfg.eval.probe_iterations, cfg.eval.probe_learning_rate, cfg.eval.probe_batch_size,
                       cfg.eval.probe_seed};
      const auto r = fit_detection_probe(input.index_select(0, idx_tr), select_rows(targets, train_rows),
                                         input.index_select(0, idx_te), select_rows(targets, test_rows), pt);
      const auto j = to_json(r.metrics);
      std::cout << j.dump(2) << '\n';
      write_json(fs::path(common.out) / "detection.json", j);
      return 0;
    }

    if (rc->parsed() || ec->parsed() || gs->parsed()) {
      ensure_dir(common.out);
      auto ckpt = load_checkpoint(source.ckpt);
      auto& model = *ckpt.model;
      const auto img = load_image(image_path, ckpt.model_config);
      const auto enc = encode(model, img);
      const auto map = greedy_concept_map(enc.probs);
      const auto stem = fs::path(image_path).stem().string();
      if (rc->parsed()) {
        const auto overlay =
            render_concept_overlay(img[0], map.indices[0], map.confidence[0], ckpt.model_config.num_concepts);
        const auto path = fs::path(common.out) / (stem + "_concepts.png");
        write_png(path.string(), overlay);
        write_json(fs::path(common.out) / (stem + "_concepts.json"), {{"concept_map", grid_json(map.indices[0])}});
        log::info("wrote " + path.string());
      } else if (ec->parsed()) {
        std::ifstream in(script_path);
        std::stringstream text;
        text << in.rdbuf();
        const auto e = parse_edit_script(text.str());
        const auto edited = apply_edit(map.indices, e, ckpt.model_config.num_concepts);
        torch::Tensor out;
        if (e.zero_style) {
          out = reconstruct_from_map(model, *ckpt.ema, edited, true);
        } else {
          auto style = styles_for_map(model, edited, enc.middle);
          if (e.noise_beta > 0) style = style_noise(style, e.noise_beta, e.noise_seed);
          out = reconstruct_from_latent(model, *ckpt.ema, edited, style);
        }
        write_png((fs::path(common.out) / (stem + "_edited.png")).string(), tensor_to_gray8(out[0]));
        write_json(fs::path(common.out) / (stem + "_edited.json"),
                   {{"original_map", grid_json(map.indices[0])}, {"edited_map", grid_json(edited[0])}});
      } else {
        const auto r = style_noise_generate(model, *ckpt.ema, img, beta, noise_seed);
        std::ostringstream name;
        name << stem << "_style_b" << beta << "_s" << noise_seed << ".png";
        write_png((fs::path(common.out) / name.str()).string(), tensor_to_gray8(r.image[0]));
      }
      return 0;
    }

    if (sv->parsed()) {
      std::optional<Checkpoint> ckpt;
      if (!source.ckpt.empty()) ckpt = load_checkpoint(source.ckpt);
      ServiceOptions so;
      so.data_dir = data_dir;
      Service service(std::move(ckpt), so);
      run_server(service, host, port);
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return 2;
  }
  std::cerr << app.help();
  return 1;
}
