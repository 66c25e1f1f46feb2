#include "conceptvae/latent_edit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "conceptvae/errors.hpp"

namespace cvae {

namespace {

void check_index_map(const torch::Tensor& indices) {
  if (indices.dim() != 3) throw ShapeError("concept index map must be (B, h, w)");
}

void check_concept(std::int64_t c, std::int64_t num_concepts) {
  if (c < 0 || c >= num_concepts)
    throw IndexError("concept " + std::to_string(c) + " outside [0, " + std::to_string(num_concepts) + ")");
}

}  // namespace

torch::Tensor apply_edit(const torch::Tensor& indices, const ConceptEdit& edit, std::int64_t num_concepts) {
  check_index_map(indices);
  auto out = indices.to(torch::kInt64).clone();
  for (const auto& [a, b] : edit.swaps) {
    check_concept(a, num_concepts);
    check_concept(b, num_concepts);
    if (a == b) continue;
    const auto is_a = out == a;
    const auto is_b = out == b;
    out.masked_fill_(is_a, b);
    out.masked_fill_(is_b, a);
  }
  const auto h = out.size(1), w = out.size(2);
  for (const auto& o : edit.overrides) {
    check_concept(o.concept_index, num_concepts);
    if (o.i < 0 || o.i >= h || o.j < 0 || o.j >= w)
      throw IndexError("cell (" + std::to_string(o.i) + ", " + std::to_string(o.j) + ") outside the " +
                       std::to_string(h) + "x" + std::to_string(w) + " grid");
    out.select(1, o.i).select(1, o.j).fill_(o.concept_index);
  }
  return out;
}

torch::Tensor styles_for_map(ConceptVAEImpl& model, const torch::Tensor& indices, const torch::Tensor& middle) {
  check_index_map(indices);
  torch::NoGradGuard no_grad;
  const auto concepts = model.embedding->forward(one_hot_map(indices, model.config().num_concepts));
  if (!middle.defined()) throw ShapeError("styles need the middle features of a source image");
  if (middle.size(0) != indices.size(0) || middle.size(2) != indices.size(1) || middle.size(3) != indices.size(2))
    throw ShapeError("middle features and concept map disagree on batch or grid size");
  return model.stylizer->forward(middle, concepts);
}

torch::Tensor reconstruct_from_latent(ConceptVAEImpl& model, EmaMirrorImpl& ema, const torch::Tensor& indices,
                                      const torch::Tensor& style) {
  check_index_map(indices);
  torch::NoGradGuard no_grad;
  const auto concepts = model.embedding->forward(one_hot_map(indices, model.config().num_concepts));
  if (!style.sizes().equals({concepts.size(0), model.config().num_styles, concepts.size(2), concepts.size(3)}))
    throw ShapeError("style grid must be (B, S, h, w) matching the concept map");
  const auto features = model.feature_decoder->forward(ConceptVAEImpl::latent(concepts, style));
  return ema.image_decoder->forward(features);
}

torch::Tensor reconstruct_from_map(ConceptVAEImpl& model, EmaMirrorImpl& ema, const torch::Tensor& indices,
                                   bool zero_style, const torch::Tensor& middle) {
  check_index_map(indices);
  const auto& cfg = model.config();
  torch::Tensor style;
  if (zero_style) {
    style = torch::zeros({indices.size(0), cfg.num_styles, indices.size(1), indices.size(2)});
  } else {
    style = styles_for_map(model, indices, middle);
  }
  return reconstruct_from_latent(model, ema, indices, style);
}

torch::Tensor style_noise(const torch::Tensor& style, double beta, std::uint64_t seed) {
  if (!(beta >= 0) || !std::isfinite(beta)) throw DomainError("style noise beta must be finite and >= 0");
  auto gen = at::detail::createCPUGenerator(seed);
  const auto n = torch::randn(style.sizes(), gen, style.options());
  return (style + beta * n) / std::sqrt(1.0 + beta * beta);
}

StyleNoiseResult style_noise_generate(ConceptVAEImpl& model, EmaMirrorImpl& ema, const torch::Tensor& images,
                                      double beta, std::uint64_t seed) {
  const auto enc = encode(model, images);
  StyleNoiseResult r;
  r.concepts = greedy_concept_map(enc.probs);
  const auto style = style_noise(styles_for_map(model, r.concepts.indices, enc.middle), beta, seed);
  r.image = reconstruct_from_latent(model, ema, r.concepts.indices, style);
  return r;
}

PixelBox edit_footprint(std::int64_t i, std::int64_t j, const ModelConfig& cfg) {
  const auto h = cfg.grid_height(), w = cfg.grid_width();
  if (i < 0 || i >= h || j < 0 || j >= w) throw IndexError("edit_footprint: cell outside the grid");
  // Grid-level reach of the two residual stages, then four stride-2 transposed
  // convolutions (k3, p1, op1), each mapping an input span [a, b] to [2a-1, 2b+1].
  // Composed: [16a-15, 16b+15]. All norms on the way are per-location.
  const auto [ka, kb] = FeatureDecoderImpl::stage_kernels(cfg.neighborhood);
  const auto r = (ka - 1) / 2 + (kb - 1) / 2;
  const auto span = [r](std::int64_t c, std::int64_t limit) {
    const auto lo = 16 * (c - r) - 15;
    const auto hi = 16 * (c + r) + 15;
    return std::pair<std::int64_t, std::int64_t>{std::max<std::int64_t>(lo, 0), std::min(hi + 1, limit)};
  };
  const auto [top, bottom] = span(i, cfg.image_height);
  const auto [left, right] = span(j, cfg.image_width);
  return {top, left, bottom, right};
}

// ---------------------------------------------------------------------------

std::vector<ConceptStat> concept_stats(const ConceptMap& map, std::int64_t num_concepts) {
  check_index_map(map.indices);
  const auto idx = map.indices.to(torch::kInt64).contiguous();
  const auto conf = map.confidence.to(torch::kFloat64).contiguous();
  const auto b = idx.size(0), h = idx.size(1), w = idx.size(2);
  const auto* ip = idx.data_ptr<std::int64_t>();
  const auto* cp = conf.data_ptr<double>();

  std::vector<ConceptStat> stats(static_cast<std::size_t>(num_concepts));
  std::vector<std::int64_t> singletons(stats.size(), 0);
  std::vector<double> conf_sum(stats.size(), 0.0);
  for (std::int64_t c = 0; c < num_concepts; ++c) stats[c].concept_index = c;

  std::vector<char> seen(static_cast<std::size_t>(h * w));
  std::vector<std::int64_t> stack;
  for (std::int64_t n = 0; n < b; ++n) {
    std::fill(seen.begin(), seen.end(), 0);
    const auto* m = ip + n * h * w;
    for (std::int64_t p = 0; p < h * w; ++p) {
      const auto c = m[p];
      check_concept(c, num_concepts);
      stats[c].cells += 1;
      conf_sum[c] += cp[n * h * w + p];
      if (seen[p]) continue;
      std::int64_t size = 0;
      stack.assign(1, p);
      seen[p] = 1;
      while (!stack.empty()) {
        const auto q = stack.back();
        stack.pop_back();
        ++size;
        const auto y = q / w, x = q % w;
        const std::int64_t nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
        for (const auto& [ny, nx] : nb) {
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const auto r = ny * w + nx;
          if (!seen[r] && m[r] == c) {
            seen[r] = 1;
            stack.push_back(r);
          }
        }
      }
      stats[c].islands += 1;
      if (size == 1) singletons[c] += 1;
    }
  }
  for (std::size_t c = 0; c < stats.size(); ++c) {
    auto& s = stats[c];
    if (s.cells == 0) continue;
    s.mean_island_size = static_cast<double>(s.cells) / static_cast<double>(s.islands);
    s.singleton_fraction = static_cast<double>(singletons[c]) / static_cast<double>(s.islands);
    s.mean_confidence = conf_sum[c] / static_cast<double>(s.cells);
  }
  return stats;
}

nlohmann::json to_json(const std::vector<ConceptStat>& stats) {
  auto arr = nlohmann::json::array();
  for (const auto& s : stats) {
    arr.push_back({{"concept", s.concept_index},
                   {"cells", s.cells},
                   {"islands", s.islands},
                   {"mean_island_size", s.mean_island_size},
                   {"singleton_fraction", s.singleton_fraction},
                   {"mean_confidence", s.mean_confidence}});
  }
  return arr;
}

// ---------------------------------------------------------------------------

std::array<std::uint8_t, 3> concept_color(std::int64_t concept_index) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 16> kPalette{{
      {128, 128, 128}, {230, 25, 75},  {60, 180, 75},  {255, 225, 25}, {0, 130, 200},   {245, 130, 48},
      {145, 30, 180},  {70, 240, 240}, {240, 50, 230}, {210, 245, 60}, {250, 190, 212}, {0, 128, 128},
      {220, 190, 255}, {170, 110, 40}, {255, 250, 200}, {128, 0, 0},
  }};
  if (concept_index < 0) throw IndexError("negative concept index");
  if (concept_index < static_cast<std::int64_t>(kPalette.size())) return kPalette[concept_index];
  // Beyond the palette: golden-angle hues.
  const double hue = std::fmod(static_cast<double>(concept_index) * 137.508, 360.0) / 60.0;
  const double x = 1.0 - std::fabs(std::fmod(hue, 2.0) - 1.0);
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hue)) {
    case 0: r = 1, g = x; break;
    case 1: r = x, g = 1; break;
    case 2: g = 1, b = x; break;
    case 3: g = x, b = 1; break;
    case 4: r = x, b = 1; break;
    default: r = 1, b = x; break;
  }
  const auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(60 + 180 * v)); };
  return {q(r), q(g), q(b)};
}

namespace {

// 3x5 digits, one row per entry, bit 2 = leftmost column.
constexpr std::uint8_t kDigits[10][5] = {
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
};

constexpr double kMinAlpha = 0.15;
constexpr double kBackgroundAlpha = 0.35;

void put_pixel(Image8& img, std::int64_t y, std::int64_t x, std::array<std::uint8_t, 3> rgb) {
  if (y < 0 || x < 0 || y >= img.height || x >= img.width) return;
  for (int k = 0; k < 3; ++k) img.data[static_cast<std::size_t>((y * img.width + x) * 3 + k)] = rgb[k];
}

void draw_number(Image8& img, std::int64_t y0, std::int64_t x0, std::int64_t value) {
  const auto text = std::to_string(value);
  std::int64_t x = x0;
  for (char ch : text) {
    const auto& glyph = kDigits[ch - '0'];
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 3; ++c)
        if (glyph[r] & (4 >> c)) put_pixel(img, y0 + r, x + c, {255, 255, 255});
    x += 4;
  }
}

}  // namespace

Image8 render_concept_overlay(const torch::Tensor& image, const torch::Tensor& indices,
                              const torch::Tensor& confidence, std::int64_t num_concepts) {
  if (image.dim() != 3 || image.size(0) != 1) throw ShapeError("overlay expects a (1, H, W) image");
  if (indices.dim() != 2 || !confidence.sizes().equals(indices.sizes()))
    throw ShapeError("overlay expects (h, w) indices and confidences");
  const auto H = image.size(1), W = image.size(2);
  const auto h = indices.size(0), w = indices.size(1);
  if (H != h * 16 || W != w * 16) throw ShapeError("concept grid does not tile the image at stride 16");

  const auto gray = image[0].clamp(0, 1).mul(255).round().to(torch::kUInt8).contiguous();
  const auto idx = indices.to(torch::kInt64).contiguous();
  const auto conf = confidence.to(torch::kFloat64).contiguous();
  const auto* gp = gray.data_ptr<std::uint8_t>();
  const auto* ip = idx.data_ptr<std::int64_t>();
  const auto* cp = conf.data_ptr<double>();

  Image8 out;
  out.width = static_cast<int>(W);
  out.height = static_cast<int>(H);
  out.channels = 3;
  out.data.resize(static_cast<std::size_t>(W * H * 3));
  const double floor_alpha = 1.0 / static_cast<double>(num_concepts);
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) {
      const auto cell = (y / 16) * w + x / 16;
      const auto c = ip[cell];
      check_concept(c, num_concepts);
      // Linear in confidence: kMinAlpha at chance level, opaque at 1. The
      // background concept stays translucent so the cone edge remains visible.
      const double t = std::clamp((cp[cell] - floor_alpha) / (1.0 - floor_alpha), 0.0, 1.0);
      double alpha = kMinAlpha + (1.0 - kMinAlpha) * t;
      if (c == 0) alpha = std::min(alpha, kBackgroundAlpha);
      const auto color = concept_color(c);
      const double g = gp[y * W + x];
      std::array<std::uint8_t, 3> px{};
      for (int k = 0; k < 3; ++k) px[k] = static_cast<std::uint8_t>(std::lround((1 - alpha) * g + alpha * color[k]));
      const bool grid_line = y % 16 == 0 || x % 16 == 0;
      if (grid_line) px = {40, 40, 40};
      put_pixel(out, y, x, px);
    }
  }
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) draw_number(out, i * 16 + 2, j * 16 + 2, ip[i * w + j]);
  return out;
}

ConceptEdit parse_edit_script(const std::string& text) {
  ConceptEdit edit;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  const auto fail = [&](const std::string& what) {
    throw ConfigError("edit script line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(lines, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream words(line);
    std::string op;
    if (!(words >> op)) continue;
    if (op == "swap") {
      std::int64_t a = 0, b = 0;
      if (!(words >> a >> b)) fail("expected 'swap <a> <b>'");
      edit.swaps.emplace_back(a, b);
    } else if (op == "set") {
      CellOverride o;
      if (!(words >> o.i >> o.j >> o.concept_index)) fail("expected 'set <row> <col> <concept>'");
      edit.overrides.push_back(o);
    } else if (op == "zero_style") {
      std::string v;
      if (!(words >> v) || (v != "on" && v != "off")) fail("expected 'zero_style on|off'");
      edit.zero_style = v == "on";
    } else if (op == "noise") {
      if (!(words >> edit.noise_beta >> edit.noise_seed)) fail("expected 'noise <beta> <seed>'");
      if (edit.noise_beta < 0) fail("noise beta must be >= 0");
    } else {
      fail("unknown command '" + op + "'");
    }
    std::string extra;
    if (words >> extra) fail("unexpected trailing '" + extra + "'");
  }
  return edit;
}

}  // namespace cvae
