#include "conceptvae/retrieval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "conceptvae/errors.hpp"
#include "conceptvae/inference.hpp"
#include "conceptvae/log.hpp"

namespace cvae {

namespace {

void check_grid(const torch::Tensor& probs) {
  if (probs.dim() != 3) throw ShapeError("descriptors expect a (C, h, w) probability grid");
  if (probs.size(1) < kDescriptorWindow || probs.size(2) < kDescriptorWindow)
    throw ShapeError("grid " + std::to_string(probs.size(1)) + "x" + std::to_string(probs.size(2)) +
                     " is smaller than the 5x5 descriptor window");
}

}  // namespace

torch::Tensor extract_descriptors(const torch::Tensor& probs) {
  check_grid(probs);
  const auto c = probs.size(0);
  const auto ni = interior_extent(probs.size(1)), nj = interior_extent(probs.size(2));
  // unfold gives (C, ni, nj, 5, 5); reorder to (ni, nj, 5, 5, C) so C varies fastest.
  const auto windows = probs.unfold(1, kDescriptorWindow, 1).unfold(2, kDescriptorWindow, 1);
  return windows.permute({1, 2, 3, 4, 0}).reshape({ni * nj, kDescriptorWindow * kDescriptorWindow * c}).contiguous();
}

torch::Tensor descriptor_at(const torch::Tensor& probs, std::int64_t i, std::int64_t j) {
  check_grid(probs);
  const auto r = kDescriptorWindow / 2;
  if (i < r || j < r || i + r >= probs.size(1) || j + r >= probs.size(2))
    throw IndexError("descriptor center (" + std::to_string(i) + ", " + std::to_string(j) + ") is not interior");
  return probs.slice(1, i - r, i + r + 1).slice(2, j - r, j + r + 1).permute({1, 2, 0}).reshape({-1}).contiguous();
}

std::pair<std::int64_t, std::int64_t> clamp_to_interior(std::int64_t i, std::int64_t j, std::int64_t h,
                                                        std::int64_t w) {
  const auto r = kDescriptorWindow / 2;
  if (h < kDescriptorWindow || w < kDescriptorWindow) throw ShapeError("grid smaller than the descriptor window");
  return {std::clamp(i, r, h - 1 - r), std::clamp(j, r, w - 1 - r)};
}

// ---------------------------------------------------------------------------

void DescriptorIndex::add_grid(const torch::Tensor& probs, const std::string& image_id,
                               const std::string& acquisition_id, Phase phase) {
  const auto d = extract_descriptors(probs);
  const auto nj = interior_extent(probs.size(2));
  const auto r = kDescriptorWindow / 2;
  if (dim_ == 0) dim_ = d.size(1);
  if (d.size(1) != dim_) throw ShapeError("descriptor length differs from the index");
  for (std::int64_t k = 0; k < d.size(0); ++k)
    sources_.push_back({image_id, acquisition_id, phase, r + k / nj, r + k % nj});
  pending_.push_back(d.to(torch::kFloat64));
}

void DescriptorIndex::add(const torch::Tensor& descriptor, DescriptorSource source) {
  if (descriptor.dim() != 1) throw ShapeError("descriptor must be a vector");
  if (dim_ == 0) dim_ = descriptor.size(0);
  if (descriptor.size(0) != dim_) throw ShapeError("descriptor length differs from the index");
  sources_.push_back(std::move(source));
  pending_.push_back(descriptor.to(torch::kFloat64).unsqueeze(0));
}

const torch::Tensor& DescriptorIndex::matrix() const {
  if (!pending_.empty()) {
    if (matrix_.defined()) pending_.insert(pending_.begin(), matrix_);
    matrix_ = torch::cat(pending_).contiguous();
    pending_.clear();
  }
  return matrix_;
}

std::vector<Neighbor> knn_search(const torch::Tensor& query, const DescriptorIndex& index, std::int64_t k) {
  if (index.size() == 0) throw ShapeError("knn_search on an empty index");
  if (query.dim() != 1 || query.size(0) != index.dim()) throw ShapeError("query length differs from the index");
  if (k <= 0) return {};
  const auto& x = index.matrix();
  const auto d2 = (x - query.to(torch::kFloat64).unsqueeze(0)).square().sum(1).contiguous();
  const auto* dp = d2.data_ptr<double>();
  const auto n = index.size();
  std::vector<std::int64_t> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), 0);
  const auto take = std::min(k, n);
  std::partial_sort(rows.begin(), rows.begin() + take, rows.end(), [dp](std::int64_t a, std::int64_t b) {
    return dp[a] < dp[b] || (dp[a] == dp[b] && a < b);
  });
  std::vector<Neighbor> out;
  out.reserve(static_cast<std::size_t>(take));
  for (std::int64_t r = 0; r < take; ++r) out.push_back({rows[r], std::sqrt(dp[rows[r]])});
  return out;
}

// ---------------------------------------------------------------------------

RetrievalResult retrieval_map(const std::vector<LandmarkQuery>& queries, const DescriptorIndex& pool, std::int64_t k) {
  std::map<std::string, bool> has_es;
  for (std::int64_t r = 0; r < pool.size(); ++r)
    if (pool.source(r).phase == Phase::ES) has_es[pool.source(r).acquisition_id] = true;

  RetrievalResult res;
  std::array<double, kNumLandmarks> sum{};
  for (const auto& q : queries) {
    if (q.landmark < 0 || q.landmark >= kNumLandmarks) throw IndexError("landmark index out of range");
    if (!has_es.count(q.acquisition_id)) {
      log::warn("retrieval: acquisition " + q.acquisition_id + " has no ES frame in the pool, query skipped");
      ++res.skipped;
      continue;
    }
    const auto hits = knn_search(q.descriptor, pool, k);
    double ap = 0;
    for (std::size_t rank = 0; rank < hits.size(); ++rank) {
      const auto& s = pool.source(hits[rank].row);
      if (s.acquisition_id == q.acquisition_id && s.phase == Phase::ES &&
          std::max(std::abs(s.i - q.target_i), std::abs(s.j - q.target_j)) <= 1) {
        ap = 1.0 / static_cast<double>(rank + 1);
        break;
      }
    }
    sum[q.landmark] += ap;
    res.scored[q.landmark] += 1;
  }
  double total = 0;
  int used = 0;
  for (int l = 0; l < kNumLandmarks; ++l) {
    if (res.scored[l] == 0) continue;
    res.ap[l] = sum[l] / static_cast<double>(res.scored[l]);
    total += res.ap[l];
    ++used;
  }
  res.mean_ap = used > 0 ? total / used : 0.0;
  return res;
}

nlohmann::json to_json(const RetrievalResult& r) {
  auto rows = nlohmann::json::array();
  for (int l = 0; l < kNumLandmarks; ++l)
    rows.push_back({{"landmark", kLandmarkNames[l]}, {"map", r.ap[l]}, {"queries", r.scored[l]}});
  return {{"landmarks", rows}, {"average", r.mean_ap}, {"skipped", r.skipped}};
}

std::string format_table(const RetrievalResult& r) {
  std::ostringstream os;
  char line[96];
  std::snprintf(line, sizeof line, "%-16s %8s %8s\n", "landmark", "mAP", "queries");
  os << line;
  for (int l = 0; l < kNumLandmarks; ++l) {
    std::snprintf(line, sizeof line, "%-16s %8.3f %8lld\n", kLandmarkNames[l], r.ap[l],
                  static_cast<long long>(r.scored[l]));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-16s %8.3f\n", "average", r.mean_ap);
  os << line;
  return os.str();
}

RetrievalResult evaluate_retrieval(ConceptVAEImpl& model, const LoadedSplit& data, std::int64_t k) {
  const auto probs = encode_split(model, data).probs;
  const auto h = probs.size(2), w = probs.size(3);

  DescriptorIndex pool;
  std::map<std::string, std::array<std::pair<std::int64_t, std::int64_t>, kNumLandmarks>> es_cells;
  for (std::int64_t n = 0; n < data.size(); ++n) {
    const auto& rec = data.records[static_cast<std::size_t>(n)];
    if (rec.phase != Phase::ES) continue;
    pool.add_grid(probs[n], rec.id, rec.acquisition_id, rec.phase);
    if (!rec.landmarks) continue;
    auto& cells = es_cells[rec.acquisition_id];
    for (int l = 0; l < kNumLandmarks; ++l) {
      const auto& p = (*rec.landmarks)[l];
      cells[l] = clamp_to_interior(static_cast<std::int64_t>(p.y) / 16, static_cast<std::int64_t>(p.x) / 16, h, w);
    }
  }
  if (pool.size() == 0) throw ShapeError("retrieval split has no ES frames");

  std::vector<LandmarkQuery> queries;
  for (std::int64_t n = 0; n < data.size(); ++n) {
    const auto& rec = data.records[static_cast<std::size_t>(n)];
    if (rec.phase != Phase::ED || !rec.landmarks) continue;
    const auto target = es_cells.find(rec.acquisition_id);
    for (int l = 0; l < kNumLandmarks; ++l) {
      const auto& p = (*rec.landmarks)[l];
      const auto [i, j] =
          clamp_to_interior(static_cast<std::int64_t>(p.y) / 16, static_cast<std::int64_t>(p.x) / 16, h, w);
      LandmarkQuery q;
      q.acquisition_id = rec.acquisition_id;
      q.landmark = l;
      q.descriptor = descriptor_at(probs[n], i, j);
      if (target != es_cells.end()) std::tie(q.target_i, q.target_j) = target->second[l];
      queries.push_back(std::move(q));
    }
  }
  return retrieval_map(queries, pool, k);
}

}  // namespace cvae
