#include "conceptvae/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "conceptvae/checkpoint.hpp"
#include "conceptvae/errors.hpp"
#include "conceptvae/inference.hpp"
#include "conceptvae/latent_edit.hpp"
#include "conceptvae/log.hpp"
#include "conceptvae/retrieval.hpp"

namespace cvae {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

/// Cycles through shuffled epochs of frame indices.
class FrameSampler {
 public:
  FrameSampler(std::int64_t n, std::int64_t batch, std::uint64_t seed)
      : n_(n), batch_(std::min(batch, n)), rng_(seed), order_(static_cast<std::size_t>(n)) {
    std::iota(order_.begin(), order_.end(), 0);
    pos_ = order_.size();
  }

  torch::Tensor next() {
    std::vector<std::int64_t> rows;
    rows.reserve(static_cast<std::size_t>(batch_));
    while (static_cast<std::int64_t>(rows.size()) < batch_) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      rows.push_back(order_[pos_++]);
    }
    return torch::tensor(rows, torch::kInt64);
  }

 private:
  std::int64_t n_;
  std::int64_t batch_;
  std::mt19937_64 rng_;
  std::vector<std::int64_t> order_;
  std::size_t pos_;
};

/// Probe weights far from the data support get gradients that decay into
/// subnormal floats, which slows Adam down by orders of magnitude. Flush them
/// while a probe is being fitted.
class FlushDenormalScope {
 public:
  FlushDenormalScope() { at::globalContext().setFlushDenormal(true); }
  ~FlushDenormalScope() { at::globalContext().setFlushDenormal(false); }
  FlushDenormalScope(const FlushDenormalScope&) = delete;
  FlushDenormalScope& operator=(const FlushDenormalScope&) = delete;
};

void check_probe_pair(const torch::Tensor& in, const torch::Tensor& targets) {
  if (in.dim() != 4 || targets.dim() < 3 || in.size(0) != targets.size(0) ||
      in.size(-2) != targets.size(-2) || in.size(-1) != targets.size(-1))
    throw ShapeError("probe inputs and targets disagree on frames or grid size");
}

}  // namespace

// ---------------------------------------------------------------------------

LatentFeatures extract_latents(ConceptVAEImpl& model, const LoadedSplit& data, std::int64_t batch_size) {
  std::vector<torch::Tensor> probs, indices, concepts, styles;
  torch::NoGradGuard no_grad;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::int64_t> rows;
    for (auto r = start; r < std::min(start + batch_size, data.size()); ++r) rows.push_back(r);
    const auto enc = encode(model, data.pixel_batch(rows));
    const auto map = greedy_concept_map(enc.probs);
    probs.push_back(enc.probs);
    indices.push_back(map.indices);
    concepts.push_back(model.embedding->forward(one_hot_map(map.indices, model.config().num_concepts)));
    styles.push_back(styles_for_map(model, map.indices, enc.middle));
  }
  if (probs.empty()) throw ShapeError("extract_latents: empty split");
  LatentFeatures f;
  f.probs = torch::cat(probs);
  f.indices = torch::cat(indices);
  f.concepts = torch::cat(concepts);
  f.styles = torch::cat(styles);
  f.cone = cone_mask_grid(data.cone_masks);
  return f;
}

std::string to_string(ProbeInput m) {
  switch (m) {
    case ProbeInput::concept_only: return "concept_only";
    case ProbeInput::style_only: return "style_only";
    case ProbeInput::concept_and_style: return "concept_and_style";
  }
  return "?";
}

ProbeInput probe_input_from_string(const std::string& s) {
  for (auto m : kProbeInputs)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown probe input mode '" + s + "'");
}

torch::Tensor probe_input(const LatentFeatures& f, ProbeInput mode) {
  switch (mode) {
    case ProbeInput::concept_only: return f.concepts;
    case ProbeInput::style_only: return f.styles;
    case ProbeInput::concept_and_style: return torch::cat({f.concepts, f.styles}, 1);
  }
  throw ConfigError("bad probe input mode");
}

LinearProbe LinearProbe::zeros(std::int64_t outputs, std::int64_t in_channels, std::int64_t kernel_size) {
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("probe kernel size must be odd and positive");
  return {torch::zeros({outputs, in_channels * kernel_size * kernel_size}, torch::kFloat32),
          torch::zeros({outputs}, torch::kFloat32), kernel_size};
}

torch::Tensor linear_probe_logits(const torch::Tensor& input, const LinearProbe& probe) {
  const auto k = probe.kernel_size;
  if (input.dim() != 4) throw ShapeError("probe input must be (B, channels, h, w)");
  if (probe.weight.dim() != 2 || probe.weight.size(1) != input.size(1) * k * k ||
      probe.bias.size(0) != probe.weight.size(0))
    throw ShapeError("probe weights must be (K, channels * k * k) with a (K) bias");
  if (k > 2 * std::max(input.size(2), input.size(3)) + 1) throw ShapeError("probe kernel does not fit the grid");
  const auto w = probe.weight.view({probe.weight.size(0), input.size(1), k, k});
  return torch::conv2d(input, w, probe.bias, 1, k / 2);
}

torch::Tensor linear_probe_forward(const torch::Tensor& input, const LinearProbe& probe) {
  return torch::softmax(linear_probe_logits(input, probe), 1);
}

torch::Tensor dice_loss(const torch::Tensor& p, const torch::Tensor& t) {
  if (!p.sizes().equals(t.sizes()) || p.dim() != 4) throw ShapeError("dice_loss expects equal (B, K, h, w) tensors");
  const auto num = 2 * (p * t).sum({2, 3});
  const auto den = (p.square() + t.square()).sum({2, 3});
  const auto present = den != 0;  // NaN stays NaN
  const auto safe = torch::where(present, den, torch::ones_like(den));
  return torch::where(present, 1 - num / safe, torch::zeros_like(den)).mean();
}

torch::Tensor segmentation_targets(const torch::Tensor& chamber_masks) {
  if (chamber_masks.dim() != 4) throw ShapeError("chamber masks must be (N, 5, H, W)");
  const auto chambers = torch::avg_pool2d(chamber_masks.to(torch::kFloat32), {16, 16}, {16, 16});
  const auto background = (1 - chambers.sum(1, true)).clamp(0, 1);
  return torch::cat({background, chambers}, 1);
}

SegmentationProbeResult fit_segmentation_probe(const torch::Tensor& train_in, const torch::Tensor& train_targets,
                                               const torch::Tensor& test_in, const torch::Tensor& test_targets,
                                               std::int64_t kernel_size, const ProbeTraining& opts) {
  check_probe_pair(train_in, train_targets);
  check_probe_pair(test_in, test_targets);
  FlushDenormalScope flush;
  auto probe = LinearProbe::zeros(train_targets.size(1), train_in.size(1), kernel_size);
  probe.weight.set_requires_grad(true);
  probe.bias.set_requires_grad(true);
  torch::optim::Adam adam({probe.weight, probe.bias}, torch::optim::AdamOptions(opts.learning_rate));
  FrameSampler sampler(train_in.size(0), opts.batch_size, opts.seed);
  for (std::int64_t it = 0; it < opts.iterations; ++it) {
    const auto rows = sampler.next();
    const auto loss = dice_loss(linear_probe_forward(train_in.index_select(0, rows), probe),
                                train_targets.index_select(0, rows));
    adam.zero_grad();
    loss.backward();
    adam.step();
  }
  probe.weight = probe.weight.detach();
  probe.bias = probe.bias.detach();
  torch::NoGradGuard no_grad;
  SegmentationProbeResult r;
  r.train_loss = dice_loss(linear_probe_forward(train_in, probe), train_targets).item<double>();
  r.test_loss = dice_loss(linear_probe_forward(test_in, probe), test_targets).item<double>();
  r.probe = probe;
  return r;
}

SegmentationSweep segmentation_sweep(const LatentFeatures& train, const torch::Tensor& train_masks,
                                     const LatentFeatures& test, const torch::Tensor& test_masks,
                                     const ProbeTraining& opts) {
  const auto train_t = segmentation_targets(train_masks);
  const auto test_t = segmentation_targets(test_masks);
  SegmentationSweep out;
  for (auto mode : kProbeInputs) {
    const auto tr = probe_input(train, mode);
    const auto te = probe_input(test, mode);
    for (auto k : kProbeKernels) {
      out[{mode, k}] = fit_segmentation_probe(tr, train_t, te, test_t, k, opts).test_loss;
      log::debug("segmentation probe " + to_string(mode) + " k=" + std::to_string(k) + ": " +
                 std::to_string(out[{mode, k}]));
    }
  }
  return out;
}

nlohmann::json to_json(const SegmentationSweep& sweep) {
  auto rows = nlohmann::json::array();
  for (const auto& [key, loss] : sweep)
    rows.push_back({{"input", to_string(key.first)}, {"kernel", key.second}, {"dice_loss", loss}});
  return rows;
}

std::string format_table(const SegmentationSweep& sweep) {
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-18s", "input \\ k");
  os << buf;
  for (auto k : kProbeKernels) {
    std::snprintf(buf, sizeof buf, " %7lld", static_cast<long long>(k));
    os << buf;
  }
  os << '\n';
  for (auto mode : kProbeInputs) {
    std::snprintf(buf, sizeof buf, "%-18s", to_string(mode).c_str());
    os << buf;
    for (auto k : kProbeKernels) {
      const auto it = sweep.find({mode, k});
      if (it == sweep.end()) std::snprintf(buf, sizeof buf, " %7s", "-");
      else std::snprintf(buf, sizeof buf, " %7.4f", it->second);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

torch::Tensor flow_logprob_batch(const torch::Tensor& x, const FlowParams& params) {
  const auto d = params.A.size(0);
  if (params.A.dim() != 2 || params.A.size(1) != d || params.b.numel() != d)
    throw ShapeError("flow parameters must be (D, D) and (D)");
  if (x.dim() != 2 || x.size(1) != d) throw ShapeError("flow input must be (N, D)");
  const auto [sign, logabsdet] = at::linalg_slogdet(params.A);
  const double ld = logabsdet.item<double>();
  if (!(ld >= std::log(1e-12))) throw DomainError("flow matrix is (numerically) singular");
  const auto y = torch::matmul(x.to(torch::kFloat64), params.A.t()) + params.b;
  return -0.5 * y.square().sum(1) - 0.5 * static_cast<double>(d) * kLog2Pi + ld;
}

double flow_logprob(const torch::Tensor& x, const FlowParams& params) {
  if (x.dim() != 1) throw ShapeError("flow_logprob expects a single descriptor");
  return flow_logprob_batch(x.unsqueeze(0), params).item<double>();
}

double flow_mean_logprob(const torch::Tensor& x, const FlowParams& params) {
  return flow_logprob_batch(x, params).mean().item<double>();
}

FlowParams fit_flow(const torch::Tensor& descriptors, const FlowFitOptions& opts) {
  if (descriptors.dim() != 2 || descriptors.size(0) < 2) throw ShapeError("fit_flow expects (N >= 2, D) data");
  const auto x = descriptors.to(torch::kFloat64);
  const auto n = x.size(0), d = x.size(1);
  if (n <= d) log::warn("fit_flow: " + std::to_string(n) + " samples for " + std::to_string(d) + " dimensions");
  const auto mu = x.mean(0);
  const auto xc = x - mu;
  auto cov = torch::matmul(xc.t(), xc) / static_cast<double>(n);
  const auto eye = torch::eye(d, torch::kFloat64);
  cov = cov + opts.ridge * (cov.trace() / static_cast<double>(d)) * eye;

  // With b = -A mu the mean log-likelihood is
  //   -tr(A cov A^T) / 2 - D ln(2 pi) / 2 + ln|det A|,
  // whose natural gradient is (I - A cov A^T) A. Starting from A = I / sqrt(max eig),
  // every eigen-direction grows monotonically towards cov^{-1/2}.
  const double top = at::linalg_eigvalsh(cov, "L").max().item<double>();
  auto a = top > 0 ? eye / std::sqrt(top) : eye.clone();
  double ll = 0;
  for (std::int64_t it = 0; it < opts.max_iterations; ++it) {
    const auto m = torch::matmul(torch::matmul(a, cov), a.t());
    const auto logdet = std::get<1>(at::linalg_slogdet(a)).item<double>();
    ll = -0.5 * m.trace().item<double>() - 0.5 * static_cast<double>(d) * kLog2Pi + logdet;
    if (!std::isfinite(ll) || std::fabs(ll) > opts.divergence_bound)
      throw DivergenceError("linear flow fit diverged at iteration " + std::to_string(it) +
                            " (degenerate or constant descriptors?)");
    const auto g = eye - m;
    if (g.norm().item<double>() / std::sqrt(static_cast<double>(d)) < opts.tolerance) break;
    a = a + opts.step * torch::matmul(g, a);
  }
  FlowParams p{a, -torch::matmul(a, mu)};
  log::debug("fit_flow: mean ln p on fitting data " + std::to_string(ll));
  return p;
}

void save_flow(const std::string& path, const FlowParams& params) {
  write_tensor_container(path, {{"kind", "linear_flow"}, {"dim", params.A.size(0)}},
                         {{"A", params.A}, {"b", params.b}});
}

FlowParams load_flow(const std::string& path) {
  auto [header, tensors] = read_tensor_container(path);
  if (header.value("kind", "") != "linear_flow") throw IoError(path + " is not a linear flow file");
  FlowParams p;
  for (auto& [name, t] : tensors) {
    if (name == "A") p.A = t.to(torch::kFloat64);
    else if (name == "b") p.b = t.to(torch::kFloat64);
  }
  if (!p.A.defined() || !p.b.defined()) throw IoError(path + ": missing flow tensors");
  return p;
}

torch::Tensor in_cone_descriptors(const torch::Tensor& probs, const torch::Tensor& cone) {
  const auto desc = extract_descriptors(probs);
  const auto r = kDescriptorWindow / 2;
  if (cone.dim() != 2 || cone.size(0) != probs.size(1) || cone.size(1) != probs.size(2))
    throw ShapeError("cone grid must match the probability grid");
  const auto centers = cone.slice(0, r, cone.size(0) - r).slice(1, r, cone.size(1) - r).reshape({-1}) > 0.5;
  return desc.index({centers});
}

double ood_score_image(const torch::Tensor& probs, const torch::Tensor& cone, const FlowParams& params) {
  const auto desc = in_cone_descriptors(probs, cone);
  if (desc.size(0) == 0) throw ShapeError("image has no in-cone interior key point");
  return flow_mean_logprob(desc, params);
}

double auroc(const std::vector<double>& positives, const std::vector<double>& negatives) {
  if (positives.empty() || negatives.empty()) throw DomainError("auroc needs positive and negative scores");
  struct Item {
    double score;
    bool pos;
  };
  std::vector<Item> all;
  for (double s : positives) all.push_back({s, true});
  for (double s : negatives) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  // Sum of midranks of the positives, doubled to stay integral.
  double twice_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double twice_mid = static_cast<double>(i + 1 + j);  // 2 * average of ranks i+1..j
    for (auto k = i; k < j; ++k)
      if (all[k].pos) twice_rank_sum += twice_mid;
    i = j;
  }
  const double np = static_cast<double>(positives.size());
  const double nn = static_cast<double>(negatives.size());
  const double twice_u = twice_rank_sum - np * (np + 1);
  return twice_u / (2 * np * nn);
}

OodResult evaluate_ood(const LatentFeatures& in_dist, const LatentFeatures& ood, const FlowParams& flow) {
  OodResult r;
  const auto score_all = [&flow](const LatentFeatures& f, std::vector<double>& out) {
    for (std::int64_t n = 0; n < f.probs.size(0); ++n) {
      const auto desc = in_cone_descriptors(f.probs[n], f.cone[n]);
      if (desc.size(0) == 0) {
        log::warn("ood: frame " + std::to_string(n) + " has no in-cone key point, skipped");
        continue;
      }
      out.push_back(flow_mean_logprob(desc, flow));
    }
  };
  score_all(in_dist, r.in_distribution);
  score_all(ood, r.out_of_distribution);
  r.auroc = auroc(r.in_distribution, r.out_of_distribution);
  return r;
}

nlohmann::json to_json(const OodResult& r) {
  const auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  return {{"auroc", r.auroc},
          {"in_distribution_images", r.in_distribution.size()},
          {"ood_images", r.out_of_distribution.size()},
          {"mean_score_in_distribution", mean(r.in_distribution)},
          {"mean_score_ood", mean(r.out_of_distribution)}};
}

// ---------------------------------------------------------------------------

DetectionTargets detection_targets(const std::vector<ManifestRecord>& records, std::int64_t grid_h, std::int64_t grid_w,
                                   double threshold) {
  const auto n = static_cast<std::int64_t>(records.size());
  DetectionTargets t{torch::zeros({n, grid_h, grid_w}), torch::zeros({n, grid_h, grid_w})};
  auto obj = t.objectness.accessor<float, 3>();
  auto open = t.open.accessor<float, 3>();
  for (std::int64_t k = 0; k < n; ++k) {
    const auto& box = records[static_cast<std::size_t>(k)].valve_box;
    if (!box) continue;
    for (std::int64_t i = 0; i < grid_h; ++i) {
      for (std::int64_t j = 0; j < grid_w; ++j) {
        const double ox = std::min(box->x + box->w, 16.0 * (j + 1)) - std::max(box->x, 16.0 * j);
        const double oy = std::min(box->y + box->h, 16.0 * (i + 1)) - std::max(box->y, 16.0 * i);
        if (ox <= 0 || oy <= 0 || ox * oy / 256.0 <= threshold) continue;
        obj[k][i][j] = 1;
        open[k][i][j] = box->state == ValveState::open ? 1.0f : 0.0f;
      }
    }
  }
  return t;
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  const auto positives = std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; });
  if (positives == 0) throw DomainError("average_precision needs at least one positive");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<double> recall, precision;
  double tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += labels[order[j]] != 0 ? 1 : 0;
      seen += 1;
      ++j;
    }
    recall.push_back(tp / static_cast<double>(positives));
    precision.push_back(tp / seen);
    i = j;
  }
  for (std::size_t i = precision.size() - 1; i-- > 0;) precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0, prev = 0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

DetectionMetrics detection_metrics(const torch::Tensor& probs, const DetectionTargets& targets) {
  if (probs.dim() != 4 || probs.size(1) != 3 || probs.size(0) != targets.objectness.size(0))
    throw ShapeError("detection outputs must be (N, 3, h, w)");
  const auto flat = [](const torch::Tensor& t) {
    const auto c = t.to(torch::kFloat64).contiguous().reshape({-1});
    return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
  };
  const auto obj_scores = flat(probs.select(1, 0));
  const auto open_scores = flat(probs.select(1, 1));
  const auto closed_scores = flat(probs.select(1, 2));
  const auto obj = flat(targets.objectness);
  const auto open = flat(targets.open);

  DetectionMetrics m;
  std::vector<int> obj_labels(obj.size());
  for (std::size_t i = 0; i < obj.size(); ++i) obj_labels[i] = obj[i] > 0.5;
  m.objectness_ap = average_precision(obj_scores, obj_labels);

  std::vector<double> os, cs;
  std::vector<int> ol, cl;
  for (std::size_t i = 0; i < obj.size(); ++i) {
    if (!obj_labels[i]) continue;
    os.push_back(open_scores[i]);
    cs.push_back(closed_scores[i]);
    ol.push_back(open[i] > 0.5);
    cl.push_back(open[i] <= 0.5);
  }
  const auto state_ap = [](const std::vector<double>& s, const std::vector<int>& l) {
    return std::count(l.begin(), l.end(), 1) > 0 ? average_precision(s, l) : std::nan("");
  };
  m.open_ap = state_ap(os, ol);
  m.closed_ap = state_ap(cs, cl);
  double sum = 0;
  int count = 0;
  for (double v : {m.objectness_ap, m.open_ap, m.closed_ap})
    if (std::isfinite(v)) sum += v, ++count;
  m.mean_ap = sum / count;
  return m;
}

torch::Tensor detection_input(const LatentFeatures& f) { return torch::cat({f.probs, f.styles}, 1); }

DetectionProbeResult fit_detection_probe(const torch::Tensor& train_in, const DetectionTargets& train_targets,
                                         const torch::Tensor& test_in, const DetectionTargets& test_targets,
                                         const ProbeTraining& opts) {
  check_probe_pair(train_in, train_targets.objectness);
  check_probe_pair(test_in, test_targets.objectness);
  FlushDenormalScope flush;
  const auto obj_all = train_targets.objectness;
  const double cells = static_cast<double>(obj_all.numel());
  const double n_obj = obj_all.sum().item<double>();
  if (n_obj == 0) throw DomainError("detection training set has no object cells");
  const double n_open = (train_targets.open * obj_all).sum().item<double>();

  // Balanced weights: positives and negatives each carry half of the loss.
  const auto balance = [](double pos, double total) {
    const double fp = pos / total;
    return std::pair<double, double>{fp > 0 ? 0.5 / fp : 0.0, fp < 1 ? 0.5 / (1 - fp) : 0.0};
  };
  const auto [w_obj_pos, w_obj_neg] = balance(n_obj, cells);
  const auto [w_open_pos, w_open_neg] = balance(n_open, n_obj);

  auto probe = LinearProbe::zeros(3, train_in.size(1), kDescriptorWindow);
  probe.weight.set_requires_grad(true);
  probe.bias.set_requires_grad(true);
  torch::optim::Adam adam({probe.weight, probe.bias}, torch::optim::AdamOptions(opts.learning_rate));
  FrameSampler sampler(train_in.size(0), opts.batch_size, opts.seed);
  for (std::int64_t it = 0; it < opts.iterations; ++it) {
    const auto rows = sampler.next();
    const auto logits = linear_probe_logits(train_in.index_select(0, rows), probe);
    const auto obj = train_targets.objectness.index_select(0, rows);
    const auto open = train_targets.open.index_select(0, rows);
    const auto w_obj = obj * w_obj_pos + (1 - obj) * w_obj_neg;
    auto loss = torch::binary_cross_entropy_with_logits(logits.select(1, 0), obj, w_obj, {},
                                                        at::Reduction::Sum) / static_cast<double>(obj.numel());
    const double batch_obj = obj.sum().item<double>();
    if (batch_obj > 0) {
      const auto w_state = obj * (open * w_open_pos + (1 - open) * w_open_neg);
      const auto state = torch::binary_cross_entropy_with_logits(logits.select(1, 1), open, w_state, {},
                                                                 at::Reduction::Sum) +
                         torch::binary_cross_entropy_with_logits(logits.select(1, 2), 1 - open,
                                                                 obj * ((1 - open) * w_open_pos + open * w_open_neg),
                                                                 {}, at::Reduction::Sum);
      loss = loss + state / batch_obj;
    }
    adam.zero_grad();
    loss.backward();
    adam.step();
  }
  probe.weight = probe.weight.detach();
  probe.bias = probe.bias.detach();
  torch::NoGradGuard no_grad;
  DetectionProbeResult r;
  r.metrics = detection_metrics(torch::sigmoid(linear_probe_logits(test_in, probe)), test_targets);
  r.probe = probe;
  return r;
}

std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> split_by_acquisition(
    const std::vector<ManifestRecord>& records) {
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.acquisition_id);
  std::set<std::string> train_ids;
  std::size_t k = 0;
  for (const auto& id : ids)
    if (k++ < ids.size() / 2) train_ids.insert(id);
  std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    (train_ids.count(records[i].acquisition_id) ? out.first : out.second).push_back(static_cast<std::int64_t>(i));
  return out;
}

nlohmann::json to_json(const DetectionMetrics& m) {
  const auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"objectness_ap", m.objectness_ap},
          {"open_ap", num(m.open_ap)},
          {"closed_ap", num(m.closed_ap)},
          {"mean_ap", m.mean_ap}};
}

LatentFeatures select_rows(const LatentFeatures& f, const std::vector<std::int64_t>& rows) {
  const auto idx = torch::tensor(rows, torch::kInt64);
  return {f.probs.index_select(0, idx), f.indices.index_select(0, idx), f.concepts.index_select(0, idx),
          f.styles.index_select(0, idx), f.cone.index_select(0, idx)};
}

DetectionTargets select_rows(const DetectionTargets& t, const std::vector<std::int64_t>& rows) {
  const auto idx = torch::tensor(rows, torch::kInt64);
  return {t.objectness.index_select(0, idx), t.open.index_select(0, idx)};
}

}  // namespace cvae
