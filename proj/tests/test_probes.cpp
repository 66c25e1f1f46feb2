#include <doctest.h>

#include <cmath>
#include <random>

#include "conceptvae/checkpoint.hpp"
#include "conceptvae/errors.hpp"
#include "conceptvae/log.hpp"
#include "conceptvae/probes.hpp"
#include "conceptvae/retrieval.hpp"
#include "helpers.hpp"

using namespace cvae;
using namespace cvae::testing;
using torch::indexing::Slice;

namespace {

constexpr double kLn2Pi = 1.8378770664093453;

FlowParams flow_of(torch::Tensor a, torch::Tensor b) { return {a.to(torch::kFloat64), b.to(torch::kFloat64)}; }

double brute_auroc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double s = 0;
  for (double p : pos)
    for (double n : neg) s += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return s / static_cast<double>(pos.size() * neg.size());
}

ManifestRecord with_box(double x, double y, double w, double h, ValveState st) {
  ManifestRecord r;
  r.valve_box = ValveBox{x, y, w, h, st};
  return r;
}

}  // namespace

TEST_SUITE("probes") {

TEST_CASE("zero probe weights give uniform class probabilities") {
  const auto p = linear_probe_forward(torch::rand({2, 5, 4, 6}), LinearProbe::zeros(6, 5, 3));
  CHECK(p.sizes() == torch::IntArrayRef({2, 6, 4, 6}));
  CHECK(p.sub(1.0 / 6).abs().max().item<double>() < 1e-7);
  CHECK_THROWS_AS(LinearProbe::zeros(6, 5, 4), ConfigError);
}

TEST_CASE("k = 1 is a per-location linear map") {
  torch::manual_seed(1);
  auto probe = LinearProbe::zeros(3, 4, 1);
  probe.weight = torch::randn({3, 4});
  probe.bias = torch::randn({3});
  const auto x = torch::randn({2, 4, 3, 5});
  const auto want = torch::einsum("kc,bchw->bkhw", {probe.weight, x}) + probe.bias.view({1, 3, 1, 1});
  CHECK(max_abs_diff(linear_probe_logits(x, probe), want) < 1e-5);
}

TEST_CASE("k = 3 equals an explicit sliding-window product") {
  torch::manual_seed(2);
  const std::int64_t C = 2, K = 3, h = 4, w = 5;
  auto probe = LinearProbe::zeros(K, C, 3);
  probe.weight = torch::randn({K, C * 9}, torch::kFloat64);
  probe.bias = torch::randn({K}, torch::kFloat64);
  const auto x = torch::randn({1, C, h, w}, torch::kFloat64);
  const auto got = linear_probe_logits(x, probe);
  auto xa = x.accessor<double, 4>();
  auto wa = probe.weight.accessor<double, 2>();
  double worst = 0;
  for (std::int64_t k = 0; k < K; ++k)
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) {
        double s = probe.bias[k].item<double>();
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t di = 0; di < 3; ++di)
            for (std::int64_t dj = 0; dj < 3; ++dj) {
              const auto y = i + di - 1, z = j + dj - 1;
              if (y < 0 || y >= h || z < 0 || z >= w) continue;  // zero padding
              s += wa[k][(c * 3 + di) * 3 + dj] * xa[0][c][y][z];
            }
        worst = std::max(worst, std::abs(s - got[0][k][i][j].item<double>()));
      }
  CHECK(worst < 1e-12);
  CHECK_THROWS_AS(linear_probe_logits(torch::rand({1, 3, h, w}), probe), ShapeError);
}

TEST_CASE("Dice loss oracles") {
  const auto t = (torch::rand({2, 3, 4, 5}) > 0.5).to(torch::kFloat32);
  CHECK(dice_loss(t, t).item<double>() == doctest::Approx(0.0).epsilon(1e-7));
  auto t2 = t.clone();
  t2.index_put_({Slice(), Slice(), 0, 0}, 1.0);  // every channel present in both
  CHECK(dice_loss(1 - t2, t2).item<double>() == doctest::Approx(1.0).epsilon(1e-7));

  torch::manual_seed(3);
  const auto p = torch::rand({2, 3, 4, 5}, torch::kFloat64);
  auto q = torch::rand({2, 3, 4, 5}, torch::kFloat64);
  q[1][2].zero_();
  auto pz = p.clone();
  pz[1][2].zero_();  // both zero in one (image, channel): contributes 0
  double sum = 0;
  for (int b = 0; b < 2; ++b)
    for (int k = 0; k < 3; ++k) {
      double num = 0, den = 0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) {
          const double a = pz[b][k][i][j].item<double>(), c = q[b][k][i][j].item<double>();
          num += 2 * a * c;
          den += a * a + c * c;
        }
      sum += den == 0 ? 0.0 : 1 - num / den;
    }
  CHECK(dice_loss(pz, q).item<double>() == doctest::Approx(sum / 6).epsilon(1e-12));
  CHECK_THROWS_AS(dice_loss(p, q.slice(3, 0, 4)), ShapeError);
}

TEST_CASE("segmentation targets are area-downsampled with a background channel") {
  auto m = torch::zeros({1, 5, 32, 32}, torch::kUInt8);
  m.index_put_({0, 0, Slice(0, 16), Slice(0, 8)}, 1);   // LV covers half of cell (0, 0)
  m.index_put_({0, 1, Slice(16, 32), Slice(16, 32)}, 1);  // RV fills cell (1, 1)
  const auto t = segmentation_targets(m);
  CHECK(t.sizes() == torch::IntArrayRef({1, 6, 2, 2}));
  CHECK(t[0][1][0][0].item<float>() == 0.5f);
  CHECK(t[0][0][0][0].item<float>() == 0.5f);
  CHECK(t[0][2][1][1].item<float>() == 1.0f);
  CHECK(t[0][0][1][1].item<float>() == 0.0f);
  CHECK(t[0][0][0][1].item<float>() == 1.0f);
}

TEST_CASE("flow closed forms") {
  const auto id = flow_of(torch::eye(2), torch::zeros({2}));
  CHECK(flow_logprob(torch::zeros({2}), id) == doctest::Approx(-kLn2Pi).epsilon(1e-12));
  CHECK(std::abs(flow_logprob(torch::zeros({2}), id) + kLn2Pi) < 1e-6);
  const auto two = flow_of(torch::full({1, 1}, 2.0), torch::zeros({1}));
  CHECK(std::abs(flow_logprob(torch::zeros({1}), two) - (-0.5 * kLn2Pi + std::log(2.0))) < 1e-6);

  // Scaling A by c shifts ln p at the preimage of y = 0 by D ln c.
  const auto a = torch::tensor({{1.3, 0.2}, {-0.4, 0.9}}, torch::kFloat64);
  const auto b = torch::tensor({0.5, -0.25}, torch::kFloat64);
  const auto x0 = -at::linalg_solve(a, b.unsqueeze(1)).squeeze(1);
  const double c = 3.0;
  const double base = flow_logprob(x0, {a, b});
  const double scaled = flow_logprob(x0, {a * c, b * c});
  CHECK(scaled - base == doctest::Approx(2 * std::log(c)).epsilon(1e-12));

  CHECK_THROWS_AS(flow_logprob(torch::zeros({2}), flow_of(torch::zeros({2, 2}), torch::zeros({2}))), DomainError);
  CHECK_THROWS_AS(flow_logprob(torch::zeros({3}), id), ShapeError);
}

TEST_CASE("the D = 1 density integrates to one") {
  const double a = 0.7, b = 0.3;
  const auto flow = flow_of(torch::full({1, 1}, a), torch::full({1}, b));
  const double mu = -b / a, sigma = 1 / a;
  const std::int64_t n = 20001;
  const auto xs = torch::linspace(mu - 10 * sigma, mu + 10 * sigma, n, torch::kFloat64).unsqueeze(1);
  const auto dens = flow_logprob_batch(xs, flow).exp();
  const double dx = 20 * sigma / static_cast<double>(n - 1);
  // Trapezoid rule.
  const double integral = (dens.sum().item<double>() - 0.5 * (dens[0].item<double>() + dens[n - 1].item<double>())) * dx;
  CHECK(std::abs(integral - 1.0) < 1e-4);
}

TEST_CASE("fitting recovers a whitening map on Gaussian data") {
  auto g = torch::make_generator<at::CPUGeneratorImpl>(5);
  const auto x = at::randn({20000, 3}, g, torch::kFloat64);
  FlowFitOptions opts;
  opts.ridge = 0;
  const auto f = fit_flow(x, opts);
  const double det = std::abs(at::linalg_det(f.A).item<double>());
  CHECK(det == doctest::Approx(1.0).epsilon(0.1));
  CHECK(max_abs_diff(torch::matmul(f.A.t(), f.A), torch::eye(3, torch::kFloat64)) < 0.1);

  const double sigma = 0.3;
  const auto mu = torch::tensor({1.0, -2.0, 0.5}, torch::kFloat64);
  const auto y = at::randn({20000, 3}, g, torch::kFloat64) * sigma + mu;
  const auto fy = fit_flow(y, opts);
  const double bound = -1.5 * (1 + std::log(2 * M_PI * sigma * sigma));
  CHECK(flow_mean_logprob(y, fy) == doctest::Approx(bound).epsilon(0.05));
  CHECK(max_abs_diff(fy.b, -torch::matmul(fy.A, y.mean(0))) < 1e-9);
}

TEST_CASE("constant descriptors abort the fit") {
  const auto x = torch::ones({100, 4}, torch::kFloat64) * 0.25;
  CHECK_THROWS_AS(fit_flow(x), DivergenceError);
  CHECK_THROWS_AS(fit_flow(torch::ones({1, 4})), ShapeError);
}

TEST_CASE("flow files round-trip") {
  TempDir dir("flow");
  const auto f = flow_of(torch::tensor({{2.0, 0.5}, {0.0, 1.0}}), torch::tensor({0.1, -0.3}));
  save_flow(dir / "f.flow", f);
  const auto back = load_flow(dir / "f.flow");
  CHECK(max_abs_diff(back.A, f.A) < 1e-7);
  CHECK(max_abs_diff(back.b, f.b) < 1e-7);
  write_tensor_container(dir / "other.bin", {{"kind", "something"}}, {});
  CHECK_THROWS_AS(load_flow(dir / "other.bin"), IoError);
}

TEST_CASE("image OOD scores") {
  const std::int64_t C = 3, h = 7, w = 8, D = 25 * C;
  auto g = torch::make_generator<at::CPUGeneratorImpl>(9);
  const auto flow = flow_of(torch::eye(D) + 0.05 * at::randn({D, D}, g, torch::kFloat64), at::randn({D}, g, torch::kFloat64));
  const auto probs = torch::softmax(at::randn({C, h, w}, g, torch::kFloat32), 0);

  auto single = torch::zeros({h, w});
  single[3][4] = 1;
  CHECK(ood_score_image(probs, single, flow) == doctest::Approx(flow_logprob(descriptor_at(probs, 3, 4), flow)).epsilon(1e-12));

  const auto uniform = torch::full({C, h, w}, 1.0f / C);
  CHECK(ood_score_image(uniform, torch::ones({h, w}), flow) ==
        doctest::Approx(flow_logprob(torch::full({D}, 1.0 / C), flow)).epsilon(1e-6));

  auto border_only = torch::zeros({h, w});
  border_only[0][0] = 1;
  CHECK_THROWS_AS(ood_score_image(probs, border_only, flow), ShapeError);
  CHECK(in_cone_descriptors(probs, torch::ones({h, w})).size(0) == (h - 4) * (w - 4));
}

TEST_CASE("AuROC") {
  CHECK(auroc({3, 4, 5}, {0, 1, 2}) == 1.0);
  CHECK(auroc({0, 1, 2}, {3, 4, 5}) == 0.0);
  CHECK(auroc({1, 3, 5, 7}, {2, 4, 6, 8}) == doctest::Approx(0.375));
  CHECK(auroc({1, 4, 5, 8}, {2, 3, 6, 7}) == 0.5);
  CHECK(auroc({1, 1}, {1, 1}) == 0.5);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::vector<double> pos, neg;
  for (int k = 0; k < 50; ++k) {
    pos.push_back(std::round(4 * (nd(rng) + 0.5)) / 4);  // coarse values force ties
    neg.push_back(std::round(4 * nd(rng)) / 4);
  }
  const double a = auroc(pos, neg);
  CHECK(a == doctest::Approx(brute_auroc(pos, neg)).epsilon(1e-12));
  std::vector<double> tp, tn;
  for (double v : pos) tp.push_back(std::exp(3 * v) - 7);
  for (double v : neg) tn.push_back(std::exp(3 * v) - 7);
  CHECK(auroc(tp, tn) == a);
  CHECK_THROWS_AS(auroc({}, {1.0}), DomainError);
}

TEST_CASE("average precision on a hand-computed ranking") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05};
  const std::vector<int> l{1, 0, 1, 1, 0, 0, 1, 0, 0, 0};
  // Recall steps at ranks 1, 3, 4, 7 with interpolated precision 1, 3/4, 3/4, 4/7.
  CHECK(average_precision(s, l) == doctest::Approx(43.0 / 56.0).epsilon(1e-12));
  CHECK(average_precision({0.5, 0.5}, {1, 0}) == 0.5);
  CHECK(average_precision({0.2, 0.9}, {1, 0}) == 0.5);
  CHECK_THROWS_AS(average_precision({0.1}, {0}), DomainError);
  CHECK_THROWS_AS(average_precision({0.1}, {0, 1}), ShapeError);
}

TEST_CASE("detection targets and an oracle detector") {
  const std::vector<ManifestRecord> recs{with_box(8, 16, 16, 16, ValveState::open),
                                         with_box(12, 16, 16, 16, ValveState::closed), ManifestRecord{}};
  const auto t = detection_targets(recs, 3, 4, 0.25);
  CHECK(t.objectness[0].sum().item<float>() == 2.0f);
  CHECK(t.objectness[0][1][0].item<float>() == 1.0f);
  CHECK(t.objectness[0][1][1].item<float>() == 1.0f);
  CHECK(t.open[0][1][0].item<float>() == 1.0f);
  // 4 px of 16 in cell (1, 0) is exactly the threshold, which does not count.
  CHECK(t.objectness[1][1][0].item<float>() == 0.0f);
  CHECK(t.objectness[1][1][1].item<float>() == 1.0f);
  CHECK(t.open[1].sum().item<float>() == 0.0f);
  CHECK(t.objectness[2].sum().item<float>() == 0.0f);

  const auto probs = torch::stack({t.objectness, t.open * t.objectness, (1 - t.open) * t.objectness}, 1);
  const auto m = detection_metrics(probs, t);
  CHECK(m.objectness_ap == 1.0);
  CHECK(m.open_ap == 1.0);
  CHECK(m.closed_ap == 1.0);
  CHECK(m.mean_ap == 1.0);
}

TEST_CASE("probe fitting leaves the backbone untouched and splits by acquisition") {
  torch::manual_seed(0);
  ConceptVAE model(tiny_model());
  std::vector<torch::Tensor> before;
  for (const auto& [n, t] : named_state(*model)) before.push_back(t.clone());

  const auto data = load_split(tiny_dataset(), "probe");
  const auto f = extract_latents(*model, data, 3);
  CHECK(f.probs.sizes() == torch::IntArrayRef({8, 6, 5, 6}));
  CHECK(f.styles.size(1) == 3);
  CHECK(probe_input(f, ProbeInput::concept_and_style).size(1) == 4 + 3);

  const auto targets = segmentation_targets(data.chamber_masks);
  ProbeTraining opts;
  opts.iterations = 20;
  opts.batch_size = 4;
  const auto r = fit_segmentation_probe(f.concepts, targets, f.concepts, targets, 3, opts);
  CHECK(std::isfinite(r.test_loss));
  CHECK(r.train_loss == r.test_loss);
  CHECK(!r.probe.weight.requires_grad());

  const auto after = named_state(*model);
  bool same = after.size() == before.size();
  for (std::size_t k = 0; same && k < after.size(); ++k) same = bit_equal(after[k].second, before[k]);
  CHECK(same);

  const auto plax = load_split(tiny_dataset(), "plax");
  const auto [train_rows, test_rows] = split_by_acquisition(plax.records);
  CHECK(train_rows.size() + test_rows.size() == 8);
  for (auto a : train_rows)
    for (auto b : test_rows) CHECK(plax.records[a].acquisition_id != plax.records[b].acquisition_id);
}

TEST_CASE("a short sweep fills every cell of the table") {
  torch::manual_seed(0);
  ConceptVAE model(tiny_model());
  const auto data = load_split(tiny_dataset(), "probe");
  const auto f = extract_latents(*model, data);
  ProbeTraining opts;
  opts.iterations = 3;
  const auto sweep = segmentation_sweep(f, data.chamber_masks, f, data.chamber_masks, opts);
  CHECK(sweep.size() == 15);
  CHECK(to_json(sweep).size() == 15);
  const auto table = format_table(sweep);
  CHECK(table.find("style_only") != std::string::npos);
  CHECK(probe_input_from_string("concept_only") == ProbeInput::concept_only);
  CHECK_THROWS_AS(probe_input_from_string("both"), ConfigError);
}

TEST_CASE("a training set without object cells is rejected") {
  const auto in = torch::rand({2, 4, 5, 6});
  DetectionTargets t{torch::zeros({2, 5, 6}), torch::zeros({2, 5, 6})};
  CHECK_THROWS_AS(fit_detection_probe(in, t, in, t, ProbeTraining{}), DomainError);
}

}  // TEST_SUITE
