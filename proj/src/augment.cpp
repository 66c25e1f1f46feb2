#include "conceptvae/augment.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "conceptvae/errors.hpp"
#include "conceptvae/log.hpp"
#include "conceptvae/losses.hpp"
#include "conceptvae/rng.hpp"

namespace cvae {

namespace {

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

}  // namespace

Affine2 Affine2::inverse() const {
  const double det = a * d - b * c;
  if (std::abs(det) < 1e-12) throw DomainError("affine map is singular");
  Affine2 inv;
  inv.a = d / det;
  inv.b = -b / det;
  inv.c = -c / det;
  inv.d = a / det;
  inv.tx = -(inv.a * tx + inv.b * ty);
  inv.ty = -(inv.c * tx + inv.d * ty);
  return inv;
}

Affine2 Affine2::operator*(const Affine2& r) const {
  Affine2 m;
  m.a = a * r.a + b * r.c;
  m.b = a * r.b + b * r.d;
  m.tx = a * r.tx + b * r.ty + tx;
  m.c = c * r.a + d * r.c;
  m.d = c * r.b + d * r.d;
  m.ty = c * r.tx + d * r.ty + ty;
  return m;
}

bool Affine2::is_identity() const { return a == 1 && b == 0 && tx == 0 && c == 0 && d == 1 && ty == 0; }

Affine2 Affine2::translation(double dx, double dy) {
  Affine2 m;
  m.tx = dx;
  m.ty = dy;
  return m;
}

Affine2 Affine2::rotation(double degrees) {
  Affine2 m;
  if (std::fmod(degrees, 90.0) == 0.0) {
    // Exact quarter turns keep integer pixel grids aligned.
    const int q = ((static_cast<int>(degrees / 90.0) % 4) + 4) % 4;
    const double cs[4] = {1, 0, -1, 0};
    const double sn[4] = {0, 1, 0, -1};
    m.a = cs[q];
    m.b = -sn[q];
    m.c = sn[q];
    m.d = cs[q];
    return m;
  }
  const double t = radians(degrees);
  m.a = std::cos(t);
  m.b = -std::sin(t);
  m.c = std::sin(t);
  m.d = std::cos(t);
  return m;
}

Affine2 Affine2::shear_x(double degrees) {
  Affine2 m;
  m.b = degrees == 0 ? 0.0 : std::tan(radians(degrees));
  return m;
}

Affine2 Affine2::scale(double s) {
  Affine2 m;
  m.a = s;
  m.d = s;
  return m;
}

Affine2 compose_affine(const AugmentParams& p, double ax, double ay) {
  const auto linear = Affine2::rotation(p.rotation_deg) * Affine2::shear_x(p.shear_deg) * Affine2::scale(p.zoom);
  if (linear.is_identity()) return Affine2::translation(p.translate_x, p.translate_y);
  return Affine2::translation(ax + p.translate_x, ay + p.translate_y) * linear * Affine2::translation(-ax, -ay);
}

torch::Tensor warp_affine(const torch::Tensor& images, const Affine2& forward_map) {
  if (images.dim() != 4) throw ShapeError("warp_affine expects (B, C, H, W)");
  auto src = images.to(torch::kFloat32).contiguous();
  if (forward_map.is_identity()) return src.clone();
  const auto inv = forward_map.inverse();
  const auto n = src.size(0) * src.size(1);
  const auto h = src.size(2), w = src.size(3);
  auto out = torch::zeros_like(src);
  const float* in = src.data_ptr<float>();
  float* dst = out.data_ptr<float>();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto [sx, sy] = inv.apply(static_cast<double>(x), static_cast<double>(y));
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const auto x0 = static_cast<std::int64_t>(fx0), y0 = static_cast<std::int64_t>(fy0);
      const double fx = sx - fx0, fy = sy - fy0;
      if (x0 < -1 || y0 < -1 || x0 >= w || y0 >= h) continue;
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const std::int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const std::int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (std::int64_t k = 0; k < n; ++k) {
        const float* plane = in + k * h * w;
        double acc = 0;
        for (int t = 0; t < 4; ++t)
          if (wts[t] != 0 && xs[t] >= 0 && xs[t] < w && ys[t] >= 0 && ys[t] < h) acc += wts[t] * plane[ys[t] * w + xs[t]];
        dst[k * h * w + y * w + x] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

std::pair<std::int64_t, std::int64_t> anchor_to_grid(double x, double y, std::int64_t height, std::int64_t width) {
  if (!(x >= 0 && y >= 0 && x < static_cast<double>(width) && y < static_cast<double>(height)))
    throw IndexError("pixel (" + std::to_string(x) + ", " + std::to_string(y) + ") outside the " +
                     std::to_string(height) + "x" + std::to_string(width) + " image");
  return {static_cast<std::int64_t>(std::floor(y / kGridStride)),
          static_cast<std::int64_t>(std::floor(x / kGridStride))};
}

AugmentedBatch apply_augmentation(const torch::Tensor& pixels, const torch::Tensor& cone_mask,
                                  const std::vector<AugmentationRecord>& records) {
  if (pixels.dim() != 4 || !pixels.sizes().equals(cone_mask.sizes()))
    throw ShapeError("augment expects (B, 1, H, W) pixels and a cone mask of the same shape");
  if (static_cast<std::int64_t>(records.size()) != pixels.size(0))
    throw ShapeError("augment needs one record per image");
  AugmentedBatch out;
  out.records = records;
  std::vector<torch::Tensor> imgs, masks;
  for (std::size_t b = 0; b < records.size(); ++b) {
    const auto& r = records[b];
    const auto map = compose_affine(r.params, r.anchor_x, r.anchor_y);
    const auto i = static_cast<std::int64_t>(b);
    auto img = warp_affine(pixels.slice(0, i, i + 1), map);
    auto mask = (warp_affine(cone_mask.slice(0, i, i + 1), map) >= 0.5f).to(torch::kFloat32);
    if (r.params.gamma != 1.0) img = img.clamp_min(0).pow(r.params.gamma);
    if (r.params.blur_sigma > 0) {
      const auto half = static_cast<std::int64_t>(std::ceil(3 * r.params.blur_sigma));
      img = gaussian_blur(img, r.params.blur_sigma, 2 * half + 1);
    }
    imgs.push_back(img * mask);
    masks.push_back(mask);
  }
  out.pixels = torch::cat(imgs, 0);
  out.cone_mask = torch::cat(masks, 0);
  return out;
}

namespace {

bool in_bordered_region(double x, double y, std::int64_t h, std::int64_t w) {
  if (!(x >= 0 && y >= 0 && x < static_cast<double>(w) && y < static_cast<double>(h))) return false;
  const auto [i, j] = anchor_to_grid(x, y, h, w);
  const auto gh = h / kGridStride, gw = w / kGridStride;
  return i >= kAnchorBorderCells && i < gh - kAnchorBorderCells && j >= kAnchorBorderCells &&
         j < gw - kAnchorBorderCells;
}

AugmentationRecord sample_record(const torch::Tensor& mask2d, std::uint64_t seed, const AugmentRanges& ranges) {
  const auto h = mask2d.size(0), w = mask2d.size(1);
  auto acc = mask2d.accessor<float, 2>();
  std::vector<std::pair<std::int64_t, std::int64_t>> candidates;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (acc[y][x] >= 0.5f && in_bordered_region(static_cast<double>(x), static_cast<double>(y), h, w))
        candidates.emplace_back(x, y);

  AugmentationRecord rec;
  if (candidates.empty()) {
    log::warn("augment: no in-cone anchor inside the bordered grid region; using the identity transform");
    rec.anchor_x = rec.anchor_out_x = static_cast<double>(w / 2);
    rec.anchor_y = rec.anchor_out_y = static_cast<double>(h / 2);
    rec.fallback = true;
    return rec;
  }

  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  for (int attempt = 0; attempt < kAugmentMaxTries; ++attempt) {
    const auto [ax, ay] = candidates[pick(rng)];
    AugmentParams p;
    p.rotation_deg = uniform(-ranges.rotation_deg, ranges.rotation_deg);
    p.translate_x = uniform(-ranges.translation_frac, ranges.translation_frac) * static_cast<double>(w);
    p.translate_y = uniform(-ranges.translation_frac, ranges.translation_frac) * static_cast<double>(h);
    p.shear_deg = uniform(-ranges.shear_deg, ranges.shear_deg);
    p.zoom = uniform(ranges.zoom_min, ranges.zoom_max);
    p.gamma = uniform(ranges.gamma_min, ranges.gamma_max);
    p.blur_sigma = uniform(0.0, ranges.blur_sigma_max);
    const auto [ox, oy] = compose_affine(p, static_cast<double>(ax), static_cast<double>(ay))
                              .apply(static_cast<double>(ax), static_cast<double>(ay));
    if (!in_bordered_region(ox, oy, h, w)) continue;
    rec.params = p;
    rec.anchor_x = static_cast<double>(ax);
    rec.anchor_y = static_cast<double>(ay);
    rec.anchor_out_x = ox;
    rec.anchor_out_y = oy;
    return rec;
  }
  log::warn("augment: " + std::to_string(kAugmentMaxTries) +
            " samples moved the anchor out of the grid interior; using the identity transform");
  const auto [ax, ay] = candidates[pick(rng)];
  rec.anchor_x = rec.anchor_out_x = static_cast<double>(ax);
  rec.anchor_y = rec.anchor_out_y = static_cast<double>(ay);
  rec.fallback = true;
  return rec;
}

}  // namespace

AugmentedBatch augment(const torch::Tensor& pixels, const torch::Tensor& cone_mask, std::uint64_t seed,
                       const AugmentRanges& ranges) {
  ranges.validate();
  if (pixels.dim() != 4 || pixels.size(1) != 1 || !pixels.sizes().equals(cone_mask.sizes()))
    throw ShapeError("augment expects (B, 1, H, W) pixels and a cone mask of the same shape");
  const auto masks = cone_mask.to(torch::kFloat32).contiguous();
  std::vector<AugmentationRecord> records;
  for (std::int64_t b = 0; b < pixels.size(0); ++b)
    records.push_back(sample_record(masks[b][0], derive_seed(seed, {static_cast<std::uint64_t>(b)}), ranges));
  return apply_augmentation(pixels, cone_mask, records);
}

}  // namespace cvae
