#include <doctest.h>

#include <filesystem>
#include <set>

#include "conceptvae/errors.hpp"
#include "conceptvae/image_io.hpp"
#include "conceptvae/synth.hpp"
#include "helpers.hpp"

using namespace cvae;
using namespace cvae::testing;
using torch::indexing::Slice;
namespace fs = std::filesystem;

namespace {

SynthSample make(View v, std::uint64_t seed, Phase phase = Phase::ED) {
  AcquisitionSpec acq;
  acq.view = v;
  acq.seed = seed;
  acq.acquisition_id = "acq";
  return generate_sample(acq, phase, 128, 160);
}

}  // namespace

TEST_SUITE("synth") {

TEST_CASE("a custom A4C split yields the requested frames with all four chambers") {
  TempDir dir("synth");
  DatasetSpec spec;
  spec.custom[View::A4C] = 2;
  const auto records = generate_dataset(spec, dir.str());
  REQUIRE(records.size() == 2);
  const auto split = load_split(dir.str(), "custom-A4C");
  REQUIRE(split.size() == 2);
  for (std::int64_t n = 0; n < 2; ++n) {
    for (int c : {kLV, kRV, kLA, kRA}) CHECK(split.chamber_masks[n][c].sum().item<std::int64_t>() > 0);
    CHECK(split.chamber_masks[n][kLVSax].sum().item<std::int64_t>() == 0);
  }
  CHECK(split.records[0].acquisition_id == split.records[1].acquisition_id);
  CHECK(split.records[0].phase == Phase::ED);
  CHECK(split.records[1].phase == Phase::ES);
}

TEST_CASE("the same seed writes byte-identical files") {
  TempDir a("synth_a"), b("synth_b");
  DatasetSpec spec;
  spec.height = 64;
  spec.width = 80;
  spec.train = 4;
  spec.retrieval_test = 2;
  spec.probe_test = 2;
  spec.plax = 2;
  spec.seed = 99;
  generate_dataset(spec, a.str());
  generate_dataset(spec, b.str());
  std::set<std::string> names;
  for (const auto& e : fs::recursive_directory_iterator(a.path()))
    if (e.is_regular_file()) names.insert(fs::relative(e.path(), a.path()).string());
  CHECK(names.size() == 1 + 3 * 10);
  for (const auto& n : names) CHECK(read_file_bytes(a / n) == read_file_bytes(b / n));

  spec.seed = 100;
  TempDir c("synth_c");
  generate_dataset(spec, c.str());
  CHECK(read_file_bytes(a / "images/train-00000-ED.png") != read_file_bytes(c / "images/train-00000-ED.png"));
}

TEST_CASE("walls are brighter than pools by at least 0.2 on average") {
  double wall_sum = 0, pool_sum = 0, wall_n = 0, pool_n = 0;
  const View views[] = {View::A2C, View::A3C, View::A4C, View::SAX};
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto smp = make(views[s % 4], 1000 + s);
    const auto cone = smp.cone_mask[0] > 0.5;
    const auto wall = (smp.wall_mask[0] > 0.5) & cone;
    const auto pool = (smp.chamber_masks.sum(0) > 0.5) & cone & ~wall;
    wall_sum += smp.pixels[0].masked_select(wall).sum().item<double>();
    wall_n += static_cast<double>(wall.sum().item<std::int64_t>());
    pool_sum += smp.pixels[0].masked_select(pool).sum().item<double>();
    pool_n += static_cast<double>(pool.sum().item<std::int64_t>());
  }
  REQUIRE(wall_n > 0);
  REQUIRE(pool_n > 0);
  CHECK(wall_sum / wall_n - pool_sum / pool_n >= 0.2);
}

TEST_CASE("chamber masks and landmarks lie inside the cone; PLAX carries a box instead") {
  for (View v : {View::A2C, View::A3C, View::A4C}) {
    const auto smp = make(v, 77);
    REQUIRE(smp.landmarks.has_value());
    CHECK(!smp.valve_box.has_value());
    const auto outside = (smp.chamber_masks.sum(0) > 0) & (smp.cone_mask[0] < 0.5);
    CHECK(outside.sum().item<std::int64_t>() == 0);
    const auto chambers = smp.chamber_masks.sum(0, true).gt(0).to(torch::kFloat32).unsqueeze(0);
    // One pixel of slack for "on the boundary".
    const auto near = torch::max_pool2d(chambers, {3, 3}, {1, 1}, {1, 1})[0][0];
    for (const auto& p : *smp.landmarks) {
      const auto x = static_cast<std::int64_t>(std::lround(p.x)), y = static_cast<std::int64_t>(std::lround(p.y));
      CHECK(smp.cone_mask[0][y][x].item<float>() == 1.0f);
      CHECK(near[y][x].item<float>() == 1.0f);
    }
  }
  const auto plax = make(View::PLAX, 78);
  REQUIRE(plax.valve_box.has_value());
  CHECK(!plax.landmarks.has_value());
  const auto& b = *plax.valve_box;
  for (double fx : {0.0, 1.0})
    for (double fy : {0.0, 1.0}) {
      const auto x = static_cast<std::int64_t>(b.x + fx * (b.w - 1)), y = static_cast<std::int64_t>(b.y + fy * (b.h - 1));
      CHECK(plax.cone_mask[0][y][x].item<float>() == 1.0f);
    }
}

TEST_CASE("ES chambers shrink by the acquisition's area factor") {
  for (std::uint64_t s = 0; s < 6; ++s) {
    const double f = es_area_factor(500 + s);
    CHECK(f >= 0.65);
    CHECK(f <= 0.85);
    const auto ed = make(View::A4C, 500 + s, Phase::ED);
    const auto es = make(View::A4C, 500 + s, Phase::ES);
    const double ratio = es.chamber_masks.sum().item<double>() / ed.chamber_masks.sum().item<double>();
    CHECK(ratio >= 0.6);
    CHECK(ratio <= 0.9);
  }
}

TEST_CASE("cone_mask_grid thresholds at half a cell") {
  CHECK(bit_equal(cone_mask_grid(torch::ones({1, 32, 48})), torch::ones({2, 3})));
  CHECK(bit_equal(cone_mask_grid(torch::zeros({32, 48})), torch::zeros({2, 3})));
  auto m = torch::zeros({2, 1, 32, 32});
  m.index_put_({0, 0, Slice(0, 8), Slice(0, 16)}, 1.0);  // exactly 128 of 256 px
  m.index_put_({1, 0, Slice(0, 8), Slice(0, 16)}, 1.0);
  m[1][0][7][15] = 0;  // 127 px
  const auto g = cone_mask_grid(m);
  CHECK(g.sizes() == torch::IntArrayRef({2, 2, 2}));
  CHECK(g[0][0][0].item<float>() == 1.0f);
  CHECK(g[1][0][0].item<float>() == 0.0f);
  CHECK_THROWS_AS(cone_mask_grid(torch::ones({1, 1, 1, 30, 32})), ShapeError);
  CHECK_THROWS_AS(cone_mask_grid(torch::ones({30, 32})), ConfigError);
}

TEST_CASE("manifest records round-trip through JSON and the standard splits load") {
  const auto& dir = tiny_dataset();
  const auto records = read_manifest(dir);
  CHECK(records.size() == 16 + 8 + 8 + 8);
  for (const auto& r : records) {
    const auto back = nlohmann::json(r).get<ManifestRecord>();
    CHECK(back.id == r.id);
    CHECK(back.view == r.view);
    CHECK(back.phase == r.phase);
    CHECK(back.landmarks.has_value() == r.landmarks.has_value());
    CHECK(back.valve_box.has_value() == r.valve_box.has_value());
    CHECK((r.split == "plax") == (r.view == View::PLAX));
    CHECK((r.view == View::PLAX) == r.valve_box.has_value());
  }
  const auto retrieval = load_split(dir, "retrieval");
  CHECK(retrieval.size() == 8);
  CHECK(retrieval.pixels.sizes() == torch::IntArrayRef({8, 1, 80, 96}));
  CHECK(retrieval.chamber_masks.sizes() == torch::IntArrayRef({8, 5, 80, 96}));
  CHECK(retrieval.head(3).size() == 3);
  CHECK(retrieval.head(30).size() == 8);
  const auto frame = load_frame(dir, retrieval.records[2]);
  CHECK(max_abs_diff(frame.pixels, retrieval.pixel_batch({2})[0]) == 0.0);
  CHECK_THROWS_AS(load_split(dir, "nope"), IoError);
  CHECK_THROWS_AS(read_manifest("/nonexistent/dir"), IoError);
}

TEST_CASE("enum strings") {
  for (View v : {View::A2C, View::A3C, View::A4C, View::SAX, View::PLAX}) CHECK(view_from_string(to_string(v)) == v);
  CHECK(phase_from_string("ES") == Phase::ES);
  CHECK(valve_state_from_string("open") == ValveState::open);
  CHECK_THROWS_AS(view_from_string("A5C"), ConfigError);
  CHECK_THROWS_AS(phase_from_string("mid"), ConfigError);
  CHECK_THROWS_AS(valve_state_from_string("ajar"), ConfigError);
}

TEST_CASE("negative counts are rejected") {
  TempDir dir("synth_neg");
  DatasetSpec spec;
  spec.train = -1;
  CHECK_THROWS_AS(generate_dataset(spec, dir.str()), ConfigError);
}

}  // TEST_SUITE
