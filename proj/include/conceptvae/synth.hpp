#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace cvae {

enum class View { A2C, A3C, A4C, SAX, PLAX };
enum class Phase { ED, ES };
enum class ValveState { closed, open };

std::string to_string(View v);
std::string to_string(Phase p);
std::string to_string(ValveState s);
View view_from_string(const std::string& s);
Phase phase_from_string(const std::string& s);
ValveState valve_state_from_string(const std::string& s);

/// Chamber mask channels, in storage order (bit i of the chamber PNG).
enum Chamber : int { kLV = 0, kRV = 1, kLA = 2, kRA = 3, kLVSax = 4 };
inline constexpr int kNumChambers = 5;

/// Landmark order: left annulus, mid-septum, apex, mid-free-wall, right annulus.
inline constexpr int kNumLandmarks = 5;
inline constexpr std::array<const char*, kNumLandmarks> kLandmarkNames{"left_annulus", "mid_septum", "apex",
                                                                       "mid_free_wall", "right_annulus"};

struct Point2 {
  double x = 0;
  double y = 0;
};

struct ValveBox {
  double x = 0, y = 0, w = 0, h = 0;  // pixels, top-left corner
  ValveState state = ValveState::closed;
};

struct SynthSample {
  torch::Tensor pixels;         // (1, H, W) float in [0, 1]
  torch::Tensor cone_mask;      // (1, H, W) {0, 1}
  torch::Tensor chamber_masks;  // (5, H, W) {0, 1}
  torch::Tensor wall_mask;      // (1, H, W) {0, 1}, bright chamber walls
  std::optional<std::array<Point2, kNumLandmarks>> landmarks;  // apical views only
  std::optional<ValveBox> valve_box;                           // PLAX only
  View view = View::A4C;
  Phase phase = Phase::ED;
  std::string acquisition_id;
};

/// Shape parameters shared by the ED and ES frames of one acquisition.
struct AcquisitionSpec {
  View view = View::A4C;
  std::uint64_t seed = 0;
  std::string acquisition_id;
};

/// Renders one frame. ED and ES frames of the same acquisition share geometry;
/// ES shrinks every chamber by a per-acquisition area factor in [0.65, 0.85].
SynthSample generate_sample(const AcquisitionSpec& acq, Phase phase, std::int64_t height, std::int64_t width);

/// Area factor used for the ES frame of an acquisition.
double es_area_factor(std::uint64_t acquisition_seed);

/// Grid cell is 1 iff at least half of its 16x16 pixels are in the cone.
/// Accepts (H, W), (1, H, W) or (B, 1, H, W); returns (h, w) or (B, h, w) float.
torch::Tensor cone_mask_grid(const torch::Tensor& mask);

// ---------------------------------------------------------------------------
// Dataset on disk: images/, masks/ and a manifest.jsonl with one record per line.

struct DatasetSpec {
  std::int64_t height = 128;
  std::int64_t width = 160;
  std::int64_t train = 2000;           // frames, apical + SAX views, ED/ES mixed
  std::int64_t retrieval_test = 200;   // frames, ED/ES pairs of apical views
  std::int64_t probe_test = 200;       // frames, apical + SAX views
  std::int64_t plax = 200;             // frames, ED/ES pairs of PLAX views
  std::uint64_t seed = 0;
  /// Per-view frame counts for a custom split named "custom"; overrides the above when non-empty.
  std::map<View, std::int64_t> custom;
};

struct ManifestRecord {
  std::string id;
  std::string split;
  std::string image;          // relative paths
  std::string cone_mask;
  std::string chamber_masks;  // bit-packed PNG, bit i = chamber i
  View view = View::A4C;
  Phase phase = Phase::ED;
  std::string acquisition_id;
  std::optional<std::array<Point2, kNumLandmarks>> landmarks;
  std::optional<ValveBox> valve_box;
};

void to_json(nlohmann::json& j, const ManifestRecord& r);
void from_json(const nlohmann::json& j, ManifestRecord& r);

/// Writes the dataset under `dir` and returns the manifest records.
std::vector<ManifestRecord> generate_dataset(const DatasetSpec& spec, const std::string& dir);

std::vector<ManifestRecord> read_manifest(const std::string& dir);

/// Frames of one split loaded into memory.
struct LoadedSplit {
  std::vector<ManifestRecord> records;
  torch::Tensor pixels;         // (N, 1, H, W) uint8
  torch::Tensor cone_masks;     // (N, 1, H, W) uint8 {0, 1}
  torch::Tensor chamber_masks;  // (N, 5, H, W) uint8 {0, 1}

  std::int64_t size() const { return static_cast<std::int64_t>(records.size()); }
  /// Float batches for the given rows.
  torch::Tensor pixel_batch(const std::vector<std::int64_t>& rows) const;
  torch::Tensor cone_batch(const std::vector<std::int64_t>& rows) const;
  /// The first `n` frames (all when n >= size()).
  LoadedSplit head(std::int64_t n) const;
};

/// Loads every record whose split is `split` (all records when empty).
LoadedSplit load_split(const std::string& dir, const std::string& split);

/// Single frame from a manifest directory.
struct LoadedFrame {
  torch::Tensor pixels;     // (1, H, W) float
  torch::Tensor cone_mask;  // (1, H, W) float
};
LoadedFrame load_frame(const std::string& dir, const ManifestRecord& rec);

}  // namespace cvae
