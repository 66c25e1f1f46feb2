#include "conceptvae/service.hpp"

#include <algorithm>
#include <filesystem>
#include <mutex>

#include <httplib.h>

#include "conceptvae/errors.hpp"
#include "conceptvae/image_io.hpp"
#include "conceptvae/latent_edit.hpp"
#include "conceptvae/log.hpp"

namespace cvae {

namespace {

using nlohmann::json;

json grid_to_json(const torch::Tensor& grid) {
  const auto g = grid.contiguous();
  json rows = json::array();
  if (g.scalar_type() == torch::kInt64) {
    auto a = g.accessor<std::int64_t, 2>();
    for (std::int64_t i = 0; i < g.size(0); ++i) {
      json row = json::array();
      for (std::int64_t j = 0; j < g.size(1); ++j) row.push_back(a[i][j]);
      rows.push_back(std::move(row));
    }
  } else {
    const auto f = g.to(torch::kFloat64);
    auto a = f.accessor<double, 2>();
    for (std::int64_t i = 0; i < f.size(0); ++i) {
      json row = json::array();
      for (std::int64_t j = 0; j < f.size(1); ++j) row.push_back(a[i][j]);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string png_base64(const torch::Tensor& image) {
  return base64_encode(encode_png(tensor_to_gray8(image.squeeze(0))));
}

json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  try {
    auto j = json::parse(body);
    if (!j.is_object()) throw ApiError(400, "request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ApiError(400, std::string("malformed JSON: ") + e.what());
  }
}

std::string require_image_id(const json& req) {
  if (!req.contains("image_id") || !req["image_id"].is_string()) throw ApiError(422, "image_id (string) is required");
  return req["image_id"].get<std::string>();
}

template <typename T>
T field(const json& req, const char* name, T fallback) {
  if (!req.contains(name) || req[name].is_null()) return fallback;
  try {
    return req[name].get<T>();
  } catch (const json::exception&) {
    throw ApiError(422, std::string("field '") + name + "' has the wrong type");
  }
}

ConceptEdit edit_from_json(const json& req) {
  ConceptEdit e;
  try {
    if (req.contains("swaps")) {
      for (const auto& s : req.at("swaps")) {
        if (!s.is_array() || s.size() != 2) throw ApiError(422, "each swap must be [a, b]");
        e.swaps.emplace_back(s[0].get<std::int64_t>(), s[1].get<std::int64_t>());
      }
    }
    if (req.contains("overrides")) {
      for (const auto& o : req.at("overrides")) {
        CellOverride c;
        if (o.is_array() && o.size() == 3) {
          c = {o[0].get<std::int64_t>(), o[1].get<std::int64_t>(), o[2].get<std::int64_t>()};
        } else if (o.is_object()) {
          c = {o.at("i").get<std::int64_t>(), o.at("j").get<std::int64_t>(), o.at("concept").get<std::int64_t>()};
        } else {
          throw ApiError(422, "each override must be {i, j, concept} or [i, j, concept]");
        }
        e.overrides.push_back(c);
      }
    }
  } catch (const json::exception& ex) {
    throw ApiError(422, std::string("invalid edit: ") + ex.what());
  }
  e.zero_style = field<bool>(req, "zero_style", false);
  e.noise_beta = field<double>(req, "noise_beta", 0.0);
  e.noise_seed = field<std::uint64_t>(req, "noise_seed", 0);
  if (!(e.noise_beta >= 0)) throw ApiError(422, "noise_beta must be >= 0");
  return e;
}

}  // namespace

Service::Service(std::optional<Checkpoint> ckpt, ServiceOptions opts) : ckpt_(std::move(ckpt)), opts_(std::move(opts)) {
  if (!opts_.data_dir.empty()) records_ = read_manifest(opts_.data_dir);
  for (std::size_t i = 0; i < records_.size(); ++i) by_id_[records_[i].id] = i;
  if (ckpt_) {
    // Eval mode once, up front: handlers then never write to the modules.
    ckpt_->model->eval();
    ckpt_->ema->eval();
  }
}

const ManifestRecord* Service::find_record(const std::string& image_id) const {
  const auto it = by_id_.find(image_id);
  return it == by_id_.end() ? nullptr : &records_[it->second];
}

std::size_t Service::cached_images() const {
  std::shared_lock lock(cache_mutex_);
  return cache_.size();
}

std::shared_ptr<const Service::Cached> Service::forward(const std::string& image_id) {
  if (!ckpt_) throw ApiError(409, "no checkpoint loaded");
  const auto* rec = find_record(image_id);
  if (rec == nullptr) throw ApiError(404, "unknown image '" + image_id + "'");
  {
    std::shared_lock lock(cache_mutex_);
    if (const auto it = cache_.find(image_id); it != cache_.end()) return it->second;
  }
  std::unique_lock lock(cache_mutex_);
  if (const auto it = cache_.find(image_id); it != cache_.end()) return it->second;

  const auto frame = load_frame(opts_.data_dir, *rec);
  const auto& cfg = ckpt_->model_config;
  if (frame.pixels.size(1) != cfg.image_height || frame.pixels.size(2) != cfg.image_width)
    throw ApiError(422, "image is " + std::to_string(frame.pixels.size(1)) + "x" + std::to_string(frame.pixels.size(2)) +
                            ", the checkpoint expects " + std::to_string(cfg.image_height) + "x" +
                            std::to_string(cfg.image_width));
  auto entry = std::make_shared<Cached>();
  entry->encoding = encode(*ckpt_->model, frame.pixels.unsqueeze(0));
  entry->map = greedy_concept_map(entry->encoding.probs);
  cache_[image_id] = entry;
  cache_order_.push_back(image_id);
  while (cache_order_.size() > std::max<std::size_t>(opts_.cache_capacity, 1)) {
    cache_.erase(cache_order_.front());
    cache_order_.erase(cache_order_.begin());
  }
  return entry;
}

ApiResponse Service::health() const {
  json body{{"status", "ok"}, {"checkpoint_loaded", ckpt_.has_value()}, {"images", records_.size()}};
  if (ckpt_) {
    const auto& c = ckpt_->model_config;
    body["step"] = ckpt_->step;
    body["grid_height"] = c.grid_height();
    body["grid_width"] = c.grid_width();
    body["num_concepts"] = c.num_concepts;
    body["num_styles"] = c.num_styles;
  }
  return {200, body};
}

ApiResponse Service::images() const {
  json list = json::array();
  for (const auto& r : records_)
    list.push_back({{"id", r.id},
                    {"split", r.split},
                    {"view", to_string(r.view)},
                    {"phase", to_string(r.phase)},
                    {"acquisition_id", r.acquisition_id}});
  return {200, {{"images", list}}};
}

ApiResponse Service::infer(const json& req) {
  const auto id = require_image_id(req);
  const bool with_probs = field<bool>(req, "include_probabilities", false);
  const auto f = forward(id);
  const auto& c = ckpt_->model_config;
  json body{{"image_id", id},
            {"concept_map", grid_to_json(f->map.indices[0])},
            {"confidence_map", grid_to_json(f->map.confidence[0])},
            {"grid_height", c.grid_height()},
            {"grid_width", c.grid_width()},
            {"num_concepts", c.num_concepts},
            {"num_styles", c.num_styles}};
  if (with_probs) {
    // (h, w, C): the full distribution of every cell, for hover read-outs.
    const auto p = f->encoding.probs[0].permute({1, 2, 0}).to(torch::kFloat64).contiguous();
    auto a = p.accessor<double, 3>();
    json rows = json::array();
    for (std::int64_t i = 0; i < p.size(0); ++i) {
      json row = json::array();
      for (std::int64_t j = 0; j < p.size(1); ++j) {
        json cell = json::array();
        for (std::int64_t k = 0; k < p.size(2); ++k) cell.push_back(a[i][j][k]);
        row.push_back(std::move(cell));
      }
      rows.push_back(std::move(row));
    }
    body["probabilities"] = std::move(rows);
  }
  return {200, body};
}

ApiResponse Service::edit(const json& req) {
  const auto id = require_image_id(req);
  const auto e = edit_from_json(req);
  const auto f = forward(id);
  auto& model = *ckpt_->model;
  auto& ema = *ckpt_->ema;
  torch::Tensor edited;
  try {
    edited = apply_edit(f->map.indices, e, model.config().num_concepts);
  } catch (const IndexError& ex) {
    throw ApiError(422, ex.what());
  }
  torch::Tensor image;
  if (e.zero_style) {
    image = reconstruct_from_map(model, ema, edited, true);
  } else {
    auto style = styles_for_map(model, edited, f->encoding.middle);
    if (e.noise_beta > 0) style = cvae::style_noise(style, e.noise_beta, e.noise_seed);
    image = reconstruct_from_latent(model, ema, edited, style);
  }
  return {200,
          {{"image_id", id},
           {"edited_map", grid_to_json(edited[0])},
           {"reconstruction", png_base64(image[0])},
           {"width", image.size(3)},
           {"height", image.size(2)}}};
}

ApiResponse Service::style_noise(const json& req) {
  const auto id = require_image_id(req);
  const double beta = field<double>(req, "beta", 0.0);
  const auto seed = field<std::uint64_t>(req, "seed", 0);
  if (!(beta >= 0) || !std::isfinite(beta)) throw ApiError(422, "beta must be finite and >= 0");
  const auto f = forward(id);
  auto& model = *ckpt_->model;
  const auto style = cvae::style_noise(styles_for_map(model, f->map.indices, f->encoding.middle), beta, seed);
  const auto image = reconstruct_from_latent(model, *ckpt_->ema, f->map.indices, style);
  return {200,
          {{"image_id", id},
           {"beta", beta},
           {"seed", seed},
           {"concept_map", grid_to_json(f->map.indices[0])},
           {"reconstruction", png_base64(image[0])},
           {"width", image.size(3)},
           {"height", image.size(2)}}};
}

ApiResponse Service::concept_stats(const std::optional<std::string>& image_id) {
  if (!ckpt_) throw ApiError(409, "no checkpoint loaded");
  const auto c = ckpt_->model_config.num_concepts;
  if (image_id) {
    const auto f = forward(*image_id);
    return {200, {{"scope", *image_id}, {"images", 1}, {"concepts", to_json(cvae::concept_stats(f->map, c))}}};
  }
  std::lock_guard lock(stats_mutex_);
  if (!split_stats_) {
    std::vector<torch::Tensor> idx, conf;
    for (const auto& r : records_) {
      if (r.split != opts_.stats_split) continue;
      const auto f = forward(r.id);
      idx.push_back(f->map.indices);
      conf.push_back(f->map.confidence);
    }
    if (idx.empty()) throw ApiError(404, "no images in split '" + opts_.stats_split + "'");
    const ConceptMap all{torch::cat(idx), torch::cat(conf)};
    split_stats_ = json{{"scope", opts_.stats_split},
                        {"images", idx.size()},
                        {"concepts", to_json(cvae::concept_stats(all, c))}};
  }
  return {200, *split_stats_};
}

ApiResponse Service::handle(const std::string& method, const std::string& path, const std::string& body,
                            const std::map<std::string, std::string>& query) {
  try {
    if (method == "GET" && path == "/health") return health();
    if (method == "GET" && path == "/images") return images();
    if (method == "GET" && path == "/concept-stats") {
      const auto it = query.find("image_id");
      return concept_stats(it == query.end() ? std::nullopt : std::optional<std::string>(it->second));
    }
    if (method == "POST" && path == "/infer") return infer(parse_body(body));
    if (method == "POST" && path == "/edit") return edit(parse_body(body));
    if (method == "POST" && path == "/style-noise") return style_noise(parse_body(body));
    return {404, {{"error", "no route " + method + " " + path}}};
  } catch (const ApiError& e) {
    return {e.status, {{"error", e.what()}}};
  } catch (const std::exception& e) {
    log::error(std::string("request failed: ") + e.what());
    return {500, {{"error", e.what()}}};
  }
}

void Service::bind(httplib::Server& server) {
  const auto wrap = [this](const std::string& method) {
    return [this, method](const httplib::Request& req, httplib::Response& res) {
      std::map<std::string, std::string> query;
      for (const auto& [k, v] : req.params) query[k] = v;
      const auto r = handle(method, req.path, req.body, query);
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
  };
  for (const char* p : {"/health", "/images", "/concept-stats"}) server.Get(p, wrap("GET"));
  for (const char* p : {"/infer", "/edit", "/style-noise"}) server.Post(p, wrap("POST"));
}

void run_server(Service& service, const std::string& host, int port) {
  httplib::Server server;
  service.bind(server);
  log::info("serving on http://" + host + ":" + std::to_string(port));
  if (!server.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace cvae
