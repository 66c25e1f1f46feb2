#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "conceptvae/checkpoint.hpp"
#include "conceptvae/inference.hpp"
#include "conceptvae/synth.hpp"

namespace httplib {
class Server;
}

namespace cvae {

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

struct ServiceOptions {
  std::string data_dir;           // manifest directory the image ids refer to
  std::size_t cache_capacity = 256;  // cached forward passes (oldest evicted first)
  std::string stats_split = "probe";  // images summarized by GET /concept-stats without image_id
};

/// Inference and latent editing over one frozen checkpoint. Handlers are plain
/// functions of (request JSON) -> (status, JSON) so they can be tested without a
/// socket; bind() mounts them on an httplib server.
///
/// Requests are served concurrently. The per-image forward cache is filled under
/// an exclusive lock and read under a shared one.
class Service {
 public:
  /// `ckpt` may be empty: image listing works, model endpoints answer 409.
  Service(std::optional<Checkpoint> ckpt, ServiceOptions opts);

  ApiResponse health() const;
  ApiResponse images() const;
  ApiResponse infer(const nlohmann::json& req);
  ApiResponse edit(const nlohmann::json& req);
  ApiResponse style_noise(const nlohmann::json& req);
  ApiResponse concept_stats(const std::optional<std::string>& image_id);

  /// Dispatch by method and path (used by bind() and by tests).
  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body,
                     const std::map<std::string, std::string>& query = {});

  void bind(httplib::Server& server);

  std::size_t cached_images() const;

 private:
  struct Cached {
    Encoding encoding;
    ConceptMap map;
  };

  std::shared_ptr<const Cached> forward(const std::string& image_id);
  const ManifestRecord* find_record(const std::string& image_id) const;

  std::optional<Checkpoint> ckpt_;
  ServiceOptions opts_;
  std::vector<ManifestRecord> records_;
  std::map<std::string, std::size_t> by_id_;

  mutable std::shared_mutex cache_mutex_;
  std::map<std::string, std::shared_ptr<const Cached>> cache_;
  std::vector<std::string> cache_order_;

  std::mutex stats_mutex_;
  std::optional<nlohmann::json> split_stats_;
};

/// Thrown by handlers; carries the HTTP status.
struct ApiError : std::runtime_error {
  ApiError(int status, const std::string& msg) : std::runtime_error(msg), status(status) {}
  int status;
};

/// Blocks serving on host:port until the server is stopped.
void run_server(Service& service, const std::string& host, int port);

}  // namespace cvae
