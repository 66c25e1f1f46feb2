#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "conceptvae/config.hpp"

namespace cvae {

/// 2x3 affine map acting on (x, y) pixel coordinates (x = column, y = row,
/// pixel centers at integers).
struct Affine2 {
  double a = 1, b = 0, tx = 0;
  double c = 0, d = 1, ty = 0;

  std::pair<double, double> apply(double x, double y) const { return {a * x + b * y + tx, c * x + d * y + ty}; }
  Affine2 inverse() const;
  /// this * rhs (rhs applied first).
  Affine2 operator*(const Affine2& rhs) const;
  bool is_identity() const;

  static Affine2 translation(double dx, double dy);
  static Affine2 rotation(double degrees);
  static Affine2 shear_x(double degrees);
  static Affine2 scale(double s);
};

struct AugmentParams {
  double rotation_deg = 0;
  double translate_x = 0;  // px
  double translate_y = 0;  // px
  double shear_deg = 0;
  double zoom = 1;
  double gamma = 1;
  double blur_sigma = 0;  // px
};

/// Geometry about the anchor p: T(p + t) R Sh Z T(-p).
Affine2 compose_affine(const AugmentParams& params, double anchor_x, double anchor_y);

struct AugmentationRecord {
  AugmentParams params;
  double anchor_x = 0, anchor_y = 0;
  double anchor_out_x = 0, anchor_out_y = 0;
  bool fallback = false;  // sampling failed and the identity transform was used
};

struct AugmentedBatch {
  torch::Tensor pixels;     // (B, 1, H, W)
  torch::Tensor cone_mask;  // (B, 1, H, W)
  std::vector<AugmentationRecord> records;
};

inline constexpr int kAugmentMaxTries = 8;
inline constexpr std::int64_t kGridStride = 16;
/// Anchors stay this many cells away from the grid edge so that a full 5x5
/// window exists around them.
inline constexpr std::int64_t kAnchorBorderCells = 2;

/// Samples parameters and an anchor per image, warps image and cone mask with the
/// same affine map (bilinear, zero fill), then applies gamma and blur inside the cone.
AugmentedBatch augment(const torch::Tensor& pixels, const torch::Tensor& cone_mask, std::uint64_t seed,
                       const AugmentRanges& ranges);

/// Deterministic single-image transform with given parameters; used by `augment`
/// and directly by tests.
AugmentedBatch apply_augmentation(const torch::Tensor& pixels, const torch::Tensor& cone_mask,
                                  const std::vector<AugmentationRecord>& records);

/// Bilinear inverse warp of a (B, C, H, W) float tensor, zero outside the source.
torch::Tensor warp_affine(const torch::Tensor& images, const Affine2& forward_map);

/// (row, col) of the 16x-stride grid cell holding pixel (x, y).
std::pair<std::int64_t, std::int64_t> anchor_to_grid(double x, double y, std::int64_t height, std::int64_t width);

}  // namespace cvae
