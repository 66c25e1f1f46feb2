#pragma once

#include <torch/torch.h>

#include "conceptvae/model.hpp"
#include "conceptvae/synth.hpp"

namespace cvae {

/// Eval-mode encoder outputs for a batch of images.
struct Encoding {
  torch::Tensor stem;    // (B, stem_channels, H/4, W/4)
  torch::Tensor middle;  // (B, middle_channels, h, w)
  torch::Tensor probs;   // (B, C, h, w)
};

/// Runs the online stem, middle and concept head in eval mode (running statistics,
/// no gradient). Inference never samples: concepts are taken greedily downstream.
Encoding encode(ConceptVAEImpl& model, const torch::Tensor& images);

/// encode() over a whole split in batches, outputs concatenated.
Encoding encode_split(ConceptVAEImpl& model, const LoadedSplit& data, std::int64_t batch_size = 32);

/// Per-cell argmax (lowest index wins ties) and its probability.
struct ConceptMap {
  torch::Tensor indices;     // (B, h, w) int64
  torch::Tensor confidence;  // (B, h, w) float
};

ConceptMap greedy_concept_map(const torch::Tensor& probs);

/// (B, h, w) indices -> (B, C, h, w) one-hot in `dtype`.
torch::Tensor one_hot_map(const torch::Tensor& indices, std::int64_t num_concepts,
                          torch::ScalarType dtype = torch::kFloat32);

}  // namespace cvae
