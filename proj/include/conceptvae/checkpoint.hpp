#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "conceptvae/config.hpp"
#include "conceptvae/model.hpp"

namespace cvae {

/// Binary container (all integers little-endian):
///   8 bytes  magic "CVAECKPT"
///   u32      format version
///   u64      header length, then that many bytes of UTF-8 JSON
///   u64      tensor count, then per tensor:
///            u32 name length, name bytes, u32 ndim, ndim x i64 dims,
///            prod(dims) x f32 values (row-major)
inline constexpr char kCheckpointMagic[8] = {'C', 'V', 'A', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

void write_tensor_container(const std::string& path, const nlohmann::json& header, const NamedTensors& tensors);
std::pair<nlohmann::json, NamedTensors> read_tensor_container(const std::string& path);

/// Model, EMA mirrors and optional optimizer moments of one training run.
struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  std::int64_t step = 0;
  nlohmann::json metadata = nlohmann::json::object();
  ConceptVAE model{nullptr};
  EmaMirror ema{nullptr};
  /// "optim/exp_avg/<param>", "optim/exp_avg_sq/<param>", "optim/step/<param>" entries.
  NamedTensors optimizer_state;
};

/// Tensors are stored under "online/<name>", "ema/<name>" and the optimizer prefixes.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Copies stored values into an existing module (names must match exactly).
void assign_named_state(torch::nn::Module& module, const NamedTensors& values, const std::string& prefix);

}  // namespace cvae
