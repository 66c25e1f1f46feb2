#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "conceptvae/checkpoint.hpp"
#include "conceptvae/errors.hpp"
#include "conceptvae/image_io.hpp"
#include "conceptvae/trainer.hpp"
#include "helpers.hpp"

using namespace cvae;
using namespace cvae::testing;
namespace fs = std::filesystem;

namespace {

bool same_state(const torch::nn::Module& a, const torch::nn::Module& b) {
  const auto sa = named_state(const_cast<torch::nn::Module&>(a)), sb = named_state(const_cast<torch::nn::Module&>(b));
  if (sa.size() != sb.size()) return false;
  for (std::size_t k = 0; k < sa.size(); ++k)
    if (sa[k].first != sb[k].first || !bit_equal(sa[k].second, sb[k].second)) return false;
  return true;
}

bool same_optimizer(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k)
    if (a[k].first != b[k].first || !bit_equal(a[k].second, b[k].second)) return false;
  return true;
}

std::vector<nlohmann::json> read_log(const std::string& path, bool drop_timing = true) {
  std::vector<nlohmann::json> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (drop_timing) j.erase("seconds");
    rows.push_back(j);
  }
  return rows;
}

const LoadedSplit& tiny_train_split() {
  static const LoadedSplit s = load_split(tiny_dataset(), "train");
  return s;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("batch_rows draws distinct in-range rows deterministically") {
  const auto a = batch_rows(3, 17, 40, 16);
  CHECK(a == batch_rows(3, 17, 40, 16));
  CHECK(a != batch_rows(3, 18, 40, 16));
  CHECK(std::set<std::int64_t>(a.begin(), a.end()).size() == 16);
  for (auto r : a) {
    CHECK(r >= 0);
    CHECK(r < 40);
  }
  const auto all = batch_rows(0, 0, 5, 16);
  CHECK(std::set<std::int64_t>(all.begin(), all.end()) == std::set<std::int64_t>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS(batch_rows(0, 0, 0, 4), ConfigError);
}

TEST_CASE("the Gumbel temperature anneals linearly") {
  auto m = tiny_model();
  m.gumbel_temperature = 1.0;
  auto t = tiny_train();
  t.max_steps = 100;
  t.gumbel_temperature_final = 0.5;
  CHECK(gumbel_temperature_at(m, t, 0) == 1.0);
  CHECK(gumbel_temperature_at(m, t, 50) == doctest::Approx(0.75));
  CHECK(gumbel_temperature_at(m, t, 100) == 0.5);
  t.gumbel_temperature_final = 1.0;
  CHECK(gumbel_temperature_at(m, t, 37) == 1.0);
}

TEST_CASE("two trainers with the same seed stay bit-identical") {
  const auto& data = tiny_train_split();
  Trainer a(tiny_model(), tiny_train()), b(tiny_model(), tiny_train());
  for (std::int64_t s = 0; s < 3; ++s) {
    const auto rows = batch_rows(0, s, data.size(), 4);
    const auto la = a.step(data.pixel_batch(rows), data.cone_batch(rows));
    const auto lb = b.step(data.pixel_batch(rows), data.cone_batch(rows));
    CHECK(la.terms == lb.terms);
    CHECK(std::isfinite(la.total));
  }
  CHECK(same_state(*a.model(), *b.model()));
  CHECK(same_state(*a.ema(), *b.ema()));
  CHECK(a.steps_done() == 3);
}

TEST_CASE("with every weight at zero a step only applies weight decay") {
  const auto& data = tiny_train_split();
  auto t = tiny_train();
  t.loss_weights.beta.fill(0.0);
  t.learning_rate = 1e-2;
  t.weight_decay = 0.1;
  Trainer tr(tiny_model(), t);
  std::vector<torch::Tensor> before;
  for (const auto& p : tr.model()->parameters()) before.push_back(p.detach().clone());
  const auto rows = batch_rows(0, 0, data.size(), 4);
  const auto b = tr.step(data.pixel_batch(rows), data.cone_batch(rows));
  CHECK(b.total == 0.0);
  const auto params = tr.model()->parameters();
  double worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k)
    worst = std::max(worst, max_abs_diff(params[k], before[k] * (1.0 - 1e-2 * 0.1)));
  CHECK(worst < 1e-7);
}

TEST_CASE("terms other than the pixel reconstruction never reach the stem or the image decoder") {
  const auto& data = tiny_train_split();
  auto t = tiny_train();
  t.loss_weights.beta = {0, 1, 1, 1, 1, 1, 1, 1, 1};
  Trainer tr(tiny_model(), t);
  const auto rows = batch_rows(0, 0, data.size(), 4);
  const auto in = prepare_step_inputs(data.pixel_batch(rows), data.cone_batch(rows), tr.model_config(), t, 9);
  auto& model = *tr.model();
  model.zero_grad();
  const auto terms = compute_loss_terms(model, *tr.ema(), in, t, 1.0);
  auto [total, br] = total_loss(terms, t.loss_weights);
  total.backward();
  for (auto* block : std::vector<torch::nn::Module*>{model.stem.get(), model.image_decoder.get()})
    for (const auto& p : block->parameters())
      CHECK((!p.grad().defined() || p.grad().abs().max().item<double>() == 0.0));
  bool middle_moved = false;
  for (const auto& p : model.middle->parameters())
    middle_moved = middle_moved || (p.grad().defined() && p.grad().abs().max().item<double>() > 0);
  CHECK(middle_moved);
}

TEST_CASE("training step inputs reject mismatched batches") {
  const auto m = tiny_model();
  const auto t = tiny_train();
  CHECK_THROWS_AS(prepare_step_inputs(torch::rand({2, 1, 80, 96}), torch::ones({2, 1, 80, 80}), m, t, 0), ShapeError);
  CHECK_THROWS_AS(prepare_step_inputs(torch::rand({2, 1, 64, 96}), torch::ones({2, 1, 64, 96}), m, t, 0), ShapeError);
  const auto in = prepare_step_inputs(torch::rand({2, 1, 80, 96}), torch::ones({2, 1, 80, 96}), m, t, 0);
  CHECK(in.gumbel_noise.sizes() == torch::IntArrayRef({2, 6, 5, 6}));
  CHECK(in.pairs.size() == 2);
  CHECK(in.cone_grid.sizes() == torch::IntArrayRef({2, 5, 6}));
}

TEST_CASE("train writes one log row per step with every term") {
  TempDir dir("trainlog");
  auto t = tiny_train();
  t.max_steps = 3;
  TrainRunOptions opts;
  opts.out_dir = dir.str();
  std::int64_t callbacks = 0;
  opts.on_step = [&](std::int64_t, const LossBreakdown&) { ++callbacks; };
  const auto ckpt = train(tiny_model(), t, tiny_train_split(), opts);
  CHECK(ckpt.step == 3);
  CHECK(callbacks == 3);
  CHECK(fs::exists(dir.path() / "final.ckpt"));
  const auto rows = read_log(dir / "train_log.jsonl", false);
  REQUIRE(rows.size() == 3);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    CHECK(rows[k].at("step").get<std::int64_t>() == static_cast<std::int64_t>(k + 1));
    for (const auto& name : kLossTermNames) CHECK(rows[k].contains(std::string(name)));
    CHECK(rows[k].contains("total"));
    CHECK(rows[k].contains("seconds"));
  }
}

TEST_CASE("max_steps = 0 produces the initial checkpoint") {
  TempDir dir("train0");
  auto t = tiny_train();
  t.max_steps = 0;
  TrainRunOptions opts;
  opts.out_dir = dir.str();
  const auto ckpt = train(tiny_model(), t, tiny_train_split(), opts);
  CHECK(ckpt.step == 0);
  CHECK(fs::exists(dir.path() / "final.ckpt"));
  CHECK(read_log(dir / "train_log.jsonl").empty());
  CHECK(same_state(*ckpt.model->middle, *ckpt.ema->middle));
}

TEST_CASE("a dataset at the wrong image size is rejected") {
  TempDir dir("trainbad");
  auto m = tiny_model();
  m.image_height = 96;
  TrainRunOptions opts;
  opts.out_dir = dir.str();
  CHECK_THROWS_AS(train(m, tiny_train(), tiny_train_split(), opts), ConfigError);
}

TEST_CASE("calibrated normalization matches the data statistics") {
  const auto& data = tiny_train_split();
  const auto ckpt = random_init_checkpoint(tiny_model(), tiny_train(), data);
  const auto& norm = *ckpt.model->stem->out_norm;
  CHECK(norm.running_mean.abs().sum().item<double>() > 0);
  CHECK(!bit_equal(norm.running_var, torch::ones_like(norm.running_var)));
  CHECK(ckpt.metadata.at("baseline") == "random_init");
  CHECK(ckpt.step == 0);
}

}  // TEST_SUITE

TEST_SUITE("checkpoint") {

TEST_CASE("save and load round-trip bit-exactly") {
  TempDir dir("ckpt");
  auto t = tiny_train();
  t.max_steps = 2;
  TrainRunOptions opts;
  opts.out_dir = dir.str();
  const auto ckpt = train(tiny_model(), t, tiny_train_split(), opts);
  const auto back = load_checkpoint(dir / "final.ckpt");
  CHECK(back.step == 2);
  CHECK(same_state(*ckpt.model, *back.model));
  CHECK(same_state(*ckpt.ema, *back.ema));
  CHECK(!ckpt.optimizer_state.empty());
  CHECK(same_optimizer(ckpt.optimizer_state, back.optimizer_state));
  CHECK(nlohmann::json(back.model_config) == nlohmann::json(ckpt.model_config));
  CHECK(nlohmann::json(back.train_config) == nlohmann::json(ckpt.train_config));
  CHECK(back.metadata == ckpt.metadata);
  CHECK(back.metadata.at("stem_receptive_field_px") == 17);

  // Saving the loaded copy reproduces the file byte for byte.
  save_checkpoint(dir / "again.ckpt", back);
  CHECK(read_file_bytes(dir / "again.ckpt") == read_file_bytes(dir / "final.ckpt"));
}

TEST_CASE("resuming an interrupted run equals the uninterrupted run") {
  TempDir full("full"), part("part");
  auto t = tiny_train();
  t.max_steps = 6;
  t.checkpoint_every = 3;
  TrainRunOptions a;
  a.out_dir = full.str();
  const auto straight = train(tiny_model(), t, tiny_train_split(), a);

  TrainRunOptions b;
  b.out_dir = part.str();
  b.stop_after = 4;
  train(tiny_model(), t, tiny_train_split(), b);
  CHECK(fs::exists(part.path() / "latest.ckpt"));
  CHECK(!fs::exists(part.path() / "final.ckpt"));
  b.stop_after = -1;
  b.resume_from = part / "step_000003.ckpt";
  const auto resumed = train(tiny_model(), t, tiny_train_split(), b);

  CHECK(resumed.step == 6);
  CHECK(same_state(*straight.model, *resumed.model));
  CHECK(same_state(*straight.ema, *resumed.ema));
  CHECK(same_optimizer(straight.optimizer_state, resumed.optimizer_state));
  CHECK(read_file_bytes(full / "final.ckpt") == read_file_bytes(part / "final.ckpt"));
  CHECK(read_log(full / "train_log.jsonl") == read_log(part / "train_log.jsonl"));
}

TEST_CASE("damaged files are rejected") {
  TempDir dir("ckbad");
  write_file_bytes(dir / "junk.ckpt", {'n', 'o', 'p', 'e', 0, 0, 0, 0, 1});
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);

  Trainer tr(tiny_model(), tiny_train());
  save_checkpoint(dir / "ok.ckpt", tr.snapshot());
  auto bytes = read_file_bytes(dir / "ok.ckpt");
  bytes.resize(bytes.size() / 2);
  write_file_bytes(dir / "cut.ckpt", bytes);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), IoError);
}

TEST_CASE("tensor containers keep names, shapes and values") {
  TempDir dir("container");
  NamedTensors ts{{"a", torch::arange(6, torch::kFloat32).view({2, 3})}, {"b/c", torch::full({1}, -2.5f)}};
  write_tensor_container(dir / "x.bin", {{"k", 1}}, ts);
  const auto [header, back] = read_tensor_container(dir / "x.bin");
  CHECK(header.at("k") == 1);
  REQUIRE(back.size() == 2);
  CHECK(back[1].first == "b/c");
  CHECK(bit_equal(back[0].second, ts[0].second));
  CHECK(bit_equal(back[1].second, ts[1].second));
}

}  // TEST_SUITE
