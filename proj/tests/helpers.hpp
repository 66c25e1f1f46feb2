#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include <torch/torch.h>

#include "conceptvae/config.hpp"
#include "conceptvae/synth.hpp"

namespace cvae::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cvae_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

/// Small enough that a forward pass is a few milliseconds; 5x6 latent grid.
inline ModelConfig tiny_model() {
  ModelConfig m;
  m.image_height = 80;
  m.image_width = 96;
  m.num_concepts = 6;
  m.num_styles = 3;
  m.concept_embed_dim = 4;
  m.stem_channels = 4;
  m.middle_channels = 8;
  m.stylizer_hidden = 8;
  m.decoder_channels = 4;
  return m;
}

inline TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_size = 4;
  t.max_steps = 4;
  t.checkpoint_every = 1000;
  t.blur_kernel = 9;
  t.blur_sigma = 2.0;
  t.log_every = 1;
  return t;
}

/// A dataset at the tiny model size, generated once per process.
inline const std::string& tiny_dataset() {
  static TempDir dir("tinydata");
  static const bool made = [] {
    DatasetSpec spec;
    spec.height = 80;
    spec.width = 96;
    spec.train = 16;
    spec.retrieval_test = 8;
    spec.probe_test = 8;
    spec.plax = 8;
    spec.seed = 7;
    generate_dataset(spec, dir.str());
    return true;
  }();
  (void)made;
  static const std::string path = dir.str();
  return path;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes().equals(b.sizes()) && a.scalar_type() == b.scalar_type() && torch::equal(a, b);
}

}  // namespace cvae::testing
