#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "conceptvae/image_io.hpp"
#include "conceptvae/inference.hpp"
#include "conceptvae/model.hpp"

namespace cvae {

struct CellOverride {
  std::int64_t i = 0;  // grid row
  std::int64_t j = 0;  // grid column
  std::int64_t concept_index = 0;
};

struct ConceptEdit {
  std::vector<std::pair<std::int64_t, std::int64_t>> swaps;
  std::vector<CellOverride> overrides;
  bool zero_style = false;
  double noise_beta = 0.0;
  std::uint64_t noise_seed = 0;

  bool empty() const { return swaps.empty() && overrides.empty(); }
};

/// Swaps (each a <-> b, applied in order) then single-cell overrides, applied
/// to every map of the batch alike. Throws
/// IndexError for concepts outside [0, C) or cells outside the grid.
torch::Tensor apply_edit(const torch::Tensor& indices, const ConceptEdit& edit, std::int64_t num_concepts);

/// Image from a concept index map: embedding -> latent (style zeroed, or
/// recomputed by the stylizer from `middle` and the given concepts) -> feature
/// decoder -> EMA image decoder. `middle` is required unless zero_style.
torch::Tensor reconstruct_from_map(ConceptVAEImpl& model, EmaMirrorImpl& ema, const torch::Tensor& indices,
                                   bool zero_style, const torch::Tensor& middle = {});

/// Image from explicit concept indices and style grid.
torch::Tensor reconstruct_from_latent(ConceptVAEImpl& model, EmaMirrorImpl& ema, const torch::Tensor& indices,
                                      const torch::Tensor& style);

/// Styles the stylizer assigns to `indices` given middle features.
torch::Tensor styles_for_map(ConceptVAEImpl& model, const torch::Tensor& indices, const torch::Tensor& middle);

/// (x + beta * n) / sqrt(1 + beta^2) with n ~ N(0, I) drawn from `seed`.
torch::Tensor style_noise(const torch::Tensor& style, double beta, std::uint64_t seed);

struct StyleNoiseResult {
  torch::Tensor image;
  ConceptMap concepts;  // from the unmodified forward pass
};

/// Greedy concepts of `images` kept fixed; their styles perturbed by style_noise.
StyleNoiseResult style_noise_generate(ConceptVAEImpl& model, EmaMirrorImpl& ema, const torch::Tensor& images,
                                      double beta, std::uint64_t seed);

/// Pixel rows/cols [top, bottom) x [left, right) that a change at grid cell (i, j)
/// can reach through the decoders, clipped to the image.
struct PixelBox {
  std::int64_t top = 0, left = 0, bottom = 0, right = 0;
};
PixelBox edit_footprint(std::int64_t i, std::int64_t j, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Diagnostics: which concepts occur as isolated single cells ("modifier" candidates).

struct ConceptStat {
  std::int64_t concept_index = 0;
  std::int64_t cells = 0;
  std::int64_t islands = 0;          // 4-connected components
  double mean_island_size = 0;
  double singleton_fraction = 0;     // islands of exactly one cell / islands
  double mean_confidence = 0;
};

std::vector<ConceptStat> concept_stats(const ConceptMap& map, std::int64_t num_concepts);
nlohmann::json to_json(const std::vector<ConceptStat>& stats);

// ---------------------------------------------------------------------------
// Rendering and edit scripts.

/// Fixed palette; concept 0 is gray.
std::array<std::uint8_t, 3> concept_color(std::int64_t concept_index);

/// RGB overlay of one (h, w) concept map on a (1, H, W) image: color-coded cells
/// whose opacity grows linearly with confidence (minimal at chance level 1/C,
/// opaque at 1), grid lines and the concept index printed in each cell.
Image8 render_concept_overlay(const torch::Tensor& image, const torch::Tensor& indices,
                              const torch::Tensor& confidence, std::int64_t num_concepts);

/// Parses the edit script format:
///   swap <a> <b>
///   set <row> <col> <concept>
///   zero_style on|off
///   noise <beta> <seed>
/// Blank lines and text after '#' are ignored. Throws ConfigError with the line number.
ConceptEdit parse_edit_script(const std::string& text);

}  // namespace cvae
