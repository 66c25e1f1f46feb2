#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "conceptvae/model.hpp"
#include "conceptvae/synth.hpp"

namespace cvae {

/// Side of the square concept window a descriptor covers.
inline constexpr std::int64_t kDescriptorWindow = 5;

/// Where a descriptor came from: image plus the grid cell at the window center.
struct DescriptorSource {
  std::string image_id;
  std::string acquisition_id;
  Phase phase = Phase::ED;
  std::int64_t i = 0;
  std::int64_t j = 0;
};

/// Descriptors of one (C, h, w) probability grid, one row per interior key point
/// (raster order). Row layout: entry (di * 5 + dj) * C + c holds p(c) at
/// (i - 2 + di, j - 2 + dj). Throws ShapeError when the grid is smaller than 5x5.
torch::Tensor extract_descriptors(const torch::Tensor& probs);

/// Descriptor of the window centered at (i, j); the center must be interior.
torch::Tensor descriptor_at(const torch::Tensor& probs, std::int64_t i, std::int64_t j);

/// Number of interior key points along a grid side of length n.
inline std::int64_t interior_extent(std::int64_t n) { return n - (kDescriptorWindow - 1); }

/// Nearest interior key point to a grid cell.
std::pair<std::int64_t, std::int64_t> clamp_to_interior(std::int64_t i, std::int64_t j, std::int64_t h,
                                                        std::int64_t w);

class DescriptorIndex {
 public:
  /// Adds every interior descriptor of a (C, h, w) grid.
  void add_grid(const torch::Tensor& probs, const std::string& image_id, const std::string& acquisition_id,
                Phase phase);
  void add(const torch::Tensor& descriptor, DescriptorSource source);

  std::int64_t size() const { return static_cast<std::int64_t>(sources_.size()); }
  std::int64_t dim() const { return dim_; }
  const DescriptorSource& source(std::int64_t row) const { return sources_.at(static_cast<std::size_t>(row)); }
  /// (N, D) float64; compacts pending additions on first use.
  const torch::Tensor& matrix() const;

 private:
  std::int64_t dim_ = 0;
  std::vector<DescriptorSource> sources_;
  mutable std::vector<torch::Tensor> pending_;
  mutable torch::Tensor matrix_;
};

struct Neighbor {
  std::int64_t row = 0;
  double distance = 0;
};

/// Exact Euclidean k nearest neighbors, ascending, ties by insertion order.
/// Returns min(k, N) results; throws on an empty index or a dimension mismatch.
std::vector<Neighbor> knn_search(const torch::Tensor& query, const DescriptorIndex& index, std::int64_t k);

struct LandmarkQuery {
  std::string acquisition_id;
  std::int64_t landmark = 0;  // 0..kNumLandmarks-1
  torch::Tensor descriptor;
  std::int64_t target_i = 0;  // key point of the same landmark in the ES frame
  std::int64_t target_j = 0;
};

struct RetrievalResult {
  std::array<double, kNumLandmarks> ap{};  // mean AP per landmark
  std::array<std::int64_t, kNumLandmarks> scored{};
  double mean_ap = 0;                      // macro mean over landmarks with scored queries
  std::int64_t skipped = 0;                // queries whose acquisition has no ES frame in the pool
};

/// Precision at the first hit: 1 / rank (1-based) within the top k, 0 without a hit.
/// A hit is an ES descriptor of the query's acquisition whose cell is within
/// Chebyshev distance 1 of the target cell.
RetrievalResult retrieval_map(const std::vector<LandmarkQuery>& queries, const DescriptorIndex& pool,
                              std::int64_t k = 5);

nlohmann::json to_json(const RetrievalResult& r);
/// Landmark / mAP table as aligned text.
std::string format_table(const RetrievalResult& r);

/// End to end on a split with ED/ES pairs and landmarks: ES frames form the
/// pool, every ED landmark becomes a query. Landmarks off the interior key points
/// are moved to the nearest one (their window still contains them).
RetrievalResult evaluate_retrieval(ConceptVAEImpl& model, const LoadedSplit& data, std::int64_t k = 5);

}  // namespace cvae
