#include <doctest.h>

#include <set>

#include "conceptvae/errors.hpp"
#include "conceptvae/latent_edit.hpp"
#include "helpers.hpp"

using namespace cvae;
using namespace cvae::testing;

namespace {

struct Pair {
  ConceptVAE model{nullptr};
  EmaMirror ema{nullptr};
};

Pair make_pair(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  Pair p{ConceptVAE(cfg), EmaMirror(cfg)};
  p.ema->copy_from(*p.model);
  p.model->eval();
  p.ema->eval();
  return p;
}

}  // namespace

TEST_SUITE("latent_edit") {

TEST_CASE("greedy maps: one-hot input, ties go to the lowest index") {
  const auto idx = torch::tensor({{{0, 3}, {2, 1}}}, torch::kInt64);
  const auto m = greedy_concept_map(one_hot_map(idx, 4));
  CHECK(bit_equal(m.indices, idx));
  CHECK(m.confidence.eq(1).all().item<bool>());
  const auto tie = greedy_concept_map(torch::full({1, 4, 1, 1}, 0.25f));
  CHECK(tie.indices.item<std::int64_t>() == 0);
}

TEST_CASE("swaps and overrides") {
  const auto idx = torch::tensor({{{5, 1, 2}, {1, 5, 5}}}, torch::kInt64);
  ConceptEdit e;
  e.swaps = {{5, 1}};
  const auto swapped = apply_edit(idx, e, 8);
  CHECK(bit_equal(swapped, torch::tensor({{{1, 5, 2}, {5, 1, 1}}}, torch::kInt64)));
  CHECK(bit_equal(apply_edit(swapped, e, 8), idx));
  CHECK(bit_equal(apply_edit(idx, ConceptEdit{}, 8), idx));
  CHECK(ConceptEdit{}.empty());

  ConceptEdit o;
  o.overrides = {{1, 2, 7}};
  const auto set = apply_edit(idx, o, 8);
  CHECK(set[0][1][2].item<std::int64_t>() == 7);
  CHECK((set != idx).sum().item<std::int64_t>() == 1);

  ConceptEdit bad;
  bad.swaps = {{1, 8}};
  CHECK_THROWS_AS(apply_edit(idx, bad, 8), IndexError);
  bad.swaps.clear();
  bad.overrides = {{2, 0, 1}};
  CHECK_THROWS_AS(apply_edit(idx, bad, 8), IndexError);
  bad.overrides = {{0, 0, -1}};
  CHECK_THROWS_AS(apply_edit(idx, bad, 8), IndexError);
  CHECK_THROWS_AS(apply_edit(idx[0], ConceptEdit{}, 8), ShapeError);
}

TEST_CASE("an empty edit reconstructs exactly the unedited map") {
  auto p = make_pair(tiny_model(), 1);
  const auto img = torch::rand({1, 1, 80, 96});
  const auto enc = encode(*p.model, img);
  const auto map = greedy_concept_map(enc.probs);
  const auto edited = apply_edit(map.indices, ConceptEdit{}, 6);
  CHECK(bit_equal(reconstruct_from_map(*p.model, *p.ema, edited, false, enc.middle),
                  reconstruct_from_map(*p.model, *p.ema, map.indices, false, enc.middle)));
  CHECK(reconstruct_from_map(*p.model, *p.ema, map.indices, true).sizes() == torch::IntArrayRef({1, 1, 80, 96}));
  CHECK_THROWS_AS(reconstruct_from_map(*p.model, *p.ema, map.indices, false), ShapeError);
  CHECK_THROWS_AS(reconstruct_from_latent(*p.model, *p.ema, map.indices, torch::zeros({1, 2, 5, 6})), ShapeError);
}

TEST_CASE("style noise: beta = 0 is the identity and large beta approaches pure noise") {
  const auto x = torch::randn({2, 3, 5, 6});
  CHECK(bit_equal(style_noise(x, 0.0, 17), x));
  const auto big = style_noise(x, 1e6, 17);
  const auto noise = style_noise(torch::zeros_like(x), 1e6, 17);
  CHECK(max_abs_diff(big, noise) < 1e-5);
  CHECK(!bit_equal(style_noise(x, 0.5, 17), style_noise(x, 0.5, 18)));
  CHECK(bit_equal(style_noise(x, 0.5, 17), style_noise(x, 0.5, 17)));
  CHECK_THROWS_AS(style_noise(x, -0.1, 0), DomainError);
}

TEST_CASE("style noise preserves unit variance") {
  auto g = torch::make_generator<at::CPUGeneratorImpl>(3);
  const auto x = at::randn({1, 1, 100, 1000}, g, torch::kFloat32);
  for (double beta : {0.3, 1.0, 4.0}) {
    const auto y = style_noise(x, beta, 99);
    CHECK(y.var().item<double>() == doctest::Approx(1.0).epsilon(0.02));
  }
}

TEST_CASE("style-noise generation keeps the concept map for any beta") {
  auto p = make_pair(tiny_model(), 2);
  const auto img = torch::rand({2, 1, 80, 96});
  const auto base = style_noise_generate(*p.model, *p.ema, img, 0.0, 5);
  const auto enc = encode(*p.model, img);
  const auto map = greedy_concept_map(enc.probs);
  const auto plain = reconstruct_from_latent(*p.model, *p.ema, map.indices,
                                             styles_for_map(*p.model, map.indices, enc.middle));
  CHECK(bit_equal(base.image, plain));
  for (double beta : {0.5, 3.0, 100.0}) {
    const auto r = style_noise_generate(*p.model, *p.ema, img, beta, 5);
    CHECK(bit_equal(r.concepts.indices, base.concepts.indices));
    CHECK(!bit_equal(r.image, base.image));
  }
}

TEST_CASE("a single-cell edit only changes pixels inside its footprint") {
  auto cfg = tiny_model();
  cfg.image_height = 160;
  cfg.image_width = 192;
  auto p = make_pair(cfg, 3);
  const auto img = torch::rand({1, 1, 160, 192});
  const auto enc = encode(*p.model, img);
  const auto map = greedy_concept_map(enc.probs);
  ConceptEdit e;
  const auto cur = map.indices[0][5][6].item<std::int64_t>();
  e.overrides = {{5, 6, (cur + 1) % 6}};
  const auto edited = apply_edit(map.indices, e, 6);
  const auto box = edit_footprint(5, 6, cfg);
  CHECK(box.top == 33);
  CHECK(box.bottom == 128);
  CHECK(box.left == 49);
  CHECK(box.right == 144);
  for (bool zero_style : {true, false}) {
    const auto a = reconstruct_from_map(*p.model, *p.ema, map.indices, zero_style, enc.middle);
    const auto b = reconstruct_from_map(*p.model, *p.ema, edited, zero_style, enc.middle);
    auto outside = torch::ones({160, 192}, torch::kBool);
    outside.slice(0, box.top, box.bottom).slice(1, box.left, box.right).fill_(false);
    const auto diff = (a - b).abs()[0][0];
    CHECK(diff.masked_select(outside).max().item<float>() == 0.0f);
    CHECK(diff.max().item<float>() > 0.0f);
  }
  const auto corner = edit_footprint(0, 0, cfg);
  CHECK(corner.top == 0);
  CHECK(corner.left == 0);
  CHECK_THROWS_AS(edit_footprint(10, 0, cfg), IndexError);
}

TEST_CASE("concept statistics count islands") {
  ConceptMap m;
  m.indices = torch::tensor({{{1, 1, 2}, {0, 2, 2}, {3, 0, 1}}}, torch::kInt64);
  m.confidence = torch::full({1, 3, 3}, 0.5f);
  m.confidence[0][0][0] = 1.0f;
  const auto s = concept_stats(m, 5);
  REQUIRE(s.size() == 5);
  CHECK(s[1].cells == 3);
  CHECK(s[1].islands == 2);
  CHECK(s[1].mean_island_size == 1.5);
  CHECK(s[1].singleton_fraction == 0.5);
  CHECK(s[1].mean_confidence == doctest::Approx(2.0 / 3.0));
  CHECK(s[2].islands == 1);
  CHECK(s[2].mean_island_size == 3.0);
  CHECK(s[0].islands == 2);
  CHECK(s[0].singleton_fraction == 1.0);
  CHECK(s[3].singleton_fraction == 1.0);
  CHECK(s[4].cells == 0);
  CHECK(to_json(s).size() == 5);
  CHECK_THROWS_AS(concept_stats(m, 3), IndexError);
}

TEST_CASE("palette") {
  CHECK(concept_color(0) == std::array<std::uint8_t, 3>{128, 128, 128});
  std::set<std::array<std::uint8_t, 3>> seen;
  for (int c = 0; c < 32; ++c) seen.insert(concept_color(c));
  CHECK(seen.size() == 32);
  CHECK_THROWS_AS(concept_color(-1), IndexError);
}

TEST_CASE("overlays: size, confidence-driven opacity, labels") {
  const auto img = torch::full({1, 32, 48}, 0.5f);
  const auto idx = torch::tensor({{1, 1, 2}, {0, 3, 1}}, torch::kInt64);
  auto conf = torch::full({2, 3}, 1.0f);
  conf[0][1] = 0.25f;  // chance level for C = 4
  const auto o = render_concept_overlay(img, idx, conf, 4);
  CHECK(o.width == 48);
  CHECK(o.height == 32);
  CHECK(o.channels == 3);
  // Away from grid lines and labels (which occupy the top-left of each cell).
  const auto c1 = concept_color(1);
  for (int k = 0; k < 3; ++k) CHECK(o.at(12, 12, k) == c1[k]);  // opaque
  const double g = 128;
  for (int k = 0; k < 3; ++k)
    CHECK(o.at(12, 28, k) == static_cast<std::uint8_t>(std::lround(0.85 * g + 0.15 * c1[k])));
  CHECK(o.at(0, 5, 0) == 40);  // grid line
  bool label = false;
  for (int y = 2; y < 7; ++y)
    for (int x = 2; x < 5; ++x) label = label || (o.at(y, x, 0) == 255 && o.at(y, x, 1) == 255);
  CHECK(label);
  CHECK_THROWS_AS(render_concept_overlay(img, idx.slice(1, 0, 2), conf.slice(1, 0, 2), 4), ShapeError);
  CHECK_THROWS_AS(render_concept_overlay(img, idx, conf, 3), IndexError);
}

TEST_CASE("edit scripts") {
  const auto e = parse_edit_script("# demo\nswap 5 1\n\nset 2 3 7   # one cell\nzero_style on\nnoise 0.5 42\n");
  REQUIRE(e.swaps.size() == 1);
  CHECK(e.swaps[0] == std::pair<std::int64_t, std::int64_t>{5, 1});
  REQUIRE(e.overrides.size() == 1);
  CHECK(e.overrides[0].i == 2);
  CHECK(e.overrides[0].j == 3);
  CHECK(e.overrides[0].concept_index == 7);
  CHECK(e.zero_style);
  CHECK(e.noise_beta == 0.5);
  CHECK(e.noise_seed == 42);
  CHECK(parse_edit_script("").empty());
  CHECK_THROWS_AS(parse_edit_script("swap 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_edit_script("rotate 1 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_edit_script("zero_style maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_edit_script("noise -1 3\n"), ConfigError);
  try {
    parse_edit_script("swap 1 2\n\nset x 1 2\n");
    FAIL("no exception");
  } catch (const ConfigError& err) {
    CHECK(std::string(err.what()).find("line 3") != std::string::npos);
  }
}

}  // TEST_SUITE
