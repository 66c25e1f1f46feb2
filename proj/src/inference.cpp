#include "conceptvae/inference.hpp"

#include <algorithm>

#include "conceptvae/errors.hpp"

namespace cvae {

Encoding encode(ConceptVAEImpl& model, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  // Only flip the mode when needed: a service shares one eval-mode model
  // between threads and must not write to it.
  const bool was_training = model.is_training();
  if (was_training) model.eval();
  Encoding e;
  e.stem = model.stem->forward(images);
  e.middle = model.middle->forward(e.stem);
  e.probs = torch::softmax(model.head->forward(e.middle), 1);
  if (was_training) model.train();
  return e;
}

Encoding encode_split(ConceptVAEImpl& model, const LoadedSplit& data, std::int64_t batch_size) {
  std::vector<torch::Tensor> stem, middle, probs;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::int64_t> rows;
    for (auto r = start; r < std::min(start + batch_size, data.size()); ++r) rows.push_back(r);
    auto e = encode(model, data.pixel_batch(rows));
    stem.push_back(e.stem);
    middle.push_back(e.middle);
    probs.push_back(e.probs);
  }
  if (probs.empty()) throw ShapeError("encode_split: empty split");
  return {torch::cat(stem), torch::cat(middle), torch::cat(probs)};
}

ConceptMap greedy_concept_map(const torch::Tensor& probs) {
  if (probs.dim() != 4) throw ShapeError("greedy_concept_map expects (B, C, h, w) probabilities");
  // torch::max does not promise which index wins a tie, so scan explicitly:
  // a later concept only replaces the current best when strictly larger.
  const auto c = probs.size(1);
  auto best = probs.select(1, 0).clone();
  auto idx = torch::zeros(best.sizes(), torch::kInt64);
  for (std::int64_t k = 1; k < c; ++k) {
    const auto cand = probs.select(1, k);
    const auto better = cand > best;
    best = torch::where(better, cand, best);
    idx = torch::where(better, torch::full_like(idx, k), idx);
  }
  return {idx, best.to(torch::kFloat32)};
}

torch::Tensor one_hot_map(const torch::Tensor& indices, std::int64_t num_concepts, torch::ScalarType dtype) {
  if (indices.dim() != 3) throw ShapeError("concept index map must be (B, h, w)");
  if (indices.numel() > 0 && (indices.min().item<std::int64_t>() < 0 ||
                              indices.max().item<std::int64_t>() >= num_concepts))
    throw IndexError("concept index out of range [0, " + std::to_string(num_concepts) + ")");
  return torch::one_hot(indices.to(torch::kInt64), num_concepts).permute({0, 3, 1, 2}).to(dtype).contiguous();
}

}  // namespace cvae
