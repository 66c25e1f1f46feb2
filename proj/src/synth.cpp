#include "conceptvae/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "conceptvae/errors.hpp"
#include "conceptvae/image_io.hpp"
#include "conceptvae/log.hpp"
#include "conceptvae/rng.hpp"

namespace cvae {

namespace fs = std::filesystem;

std::string to_string(View v) {
  switch (v) {
    case View::A2C: return "A2C";
    case View::A3C: return "A3C";
    case View::A4C: return "A4C";
    case View::SAX: return "SAX";
    case View::PLAX: return "PLAX";
  }
  return "?";
}

std::string to_string(Phase p) { return p == Phase::ED ? "ED" : "ES"; }
std::string to_string(ValveState s) { return s == ValveState::open ? "open" : "closed"; }

View view_from_string(const std::string& s) {
  for (View v : {View::A2C, View::A3C, View::A4C, View::SAX, View::PLAX})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown view '" + s + "'");
}

Phase phase_from_string(const std::string& s) {
  if (s == "ED") return Phase::ED;
  if (s == "ES") return Phase::ES;
  throw ConfigError("unknown phase '" + s + "'");
}

ValveState valve_state_from_string(const std::string& s) {
  if (s == "open") return ValveState::open;
  if (s == "closed") return ValveState::closed;
  throw ConfigError("unknown valve state '" + s + "'");
}

namespace {

// Geometry is sampled in pixels for the requested image size; all nominal
// positions and sizes below are fractions of (width, height).

struct Ellipse {
  double cx = 0, cy = 0;  // center
  double a = 1, b = 1;    // semi-axes along the rotated x and y directions
  double angle = 0;       // radians

  bool contains(double x, double y, double grow = 0) const {
    const double dx = x - cx, dy = y - cy;
    const double cs = std::cos(angle), sn = std::sin(angle);
    const double u = cs * dx + sn * dy;
    const double v = -sn * dx + cs * dy;
    const double ga = a + grow, gb = b + grow;
    return (u * u) / (ga * ga) + (v * v) / (gb * gb) <= 1.0;
  }

  Point2 at(double local_x, double local_y) const {
    const double cs = std::cos(angle), sn = std::sin(angle);
    return {cx + cs * local_x - sn * local_y, cy + sn * local_x + cs * local_y};
  }

  /// Uniform scaling by `s` toward a fixed point.
  Ellipse scaled_toward(const Point2& p, double s) const {
    Ellipse e = *this;
    e.cx = p.x + s * (cx - p.x);
    e.cy = p.y + s * (cy - p.y);
    e.a *= s;
    e.b *= s;
    return e;
  }
};

enum class BaseEnd { bottom, top, center, right, none };

struct Structure {
  Ellipse pool;
  double wall = 2.5;  // wall thickness in px
  int role = -1;      // chamber channel, -1 when not annotated
  BaseEnd base = BaseEnd::none;
  std::vector<int> carve;  // earlier structures whose pools are not painted inside this one's outer wall
};

struct Cone {
  double apex_x = 0, apex_y = 0;
  double radius = 0, inner = 0;
  double half_angle = 0;

  bool contains(double x, double y) const {
    const double dx = x - apex_x, dy = y - apex_y;
    const double r = std::hypot(dx, dy);
    if (r > radius || r < inner || dy <= 0) return false;
    return std::abs(std::atan2(dx, dy)) <= half_angle;
  }
};

struct Geometry {
  Cone cone;
  std::vector<Structure> structures;
  double es_factor = 0.75;
  double tissue = 0.38, wall = 0.82, pool = 0.08;
  double attenuation = 0.4;
  double speckle = 0.55;
  std::vector<Ellipse> tissue_blobs;
  std::vector<double> blob_gain;
  // PLAX valve box at ED scale.
  std::optional<ValveBox> valve;
};

Point2 base_point(const Structure& s) {
  switch (s.base) {
    case BaseEnd::bottom: return s.pool.at(0, s.pool.b);
    case BaseEnd::top: return s.pool.at(0, -s.pool.b);
    case BaseEnd::right: return s.pool.at(s.pool.a, 0);
    case BaseEnd::center: return {s.pool.cx, s.pool.cy};
    case BaseEnd::none: break;
  }
  return {s.pool.cx, s.pool.cy};
}

std::vector<Structure> phase_structures(const Geometry& g, Phase phase) {
  if (phase == Phase::ED) return g.structures;
  auto out = g.structures;
  const double s = std::sqrt(g.es_factor);
  for (auto& st : out)
    if (st.base != BaseEnd::none) st.pool = st.pool.scaled_toward(base_point(st), s);
  return out;
}

struct Nominal {
  double u, v, a, b, angle_deg;
  double wall;
  int role;
  BaseEnd base;
};

std::vector<Nominal> view_layout(View view) {
  // (u, v) center, (a, b) semi-axes as fractions of (W, H); long axes run vertically
  // for apical views and horizontally for the parasternal long axis.
  switch (view) {
    case View::A2C:
      return {{0.50, 0.43, 0.10, 0.20, 0, 2.5, kLV, BaseEnd::bottom},
              {0.50, 0.80, 0.09, 0.095, 0, 2.5, kLA, BaseEnd::top}};
    case View::A3C:
      return {{0.53, 0.43, 0.095, 0.20, 4, 2.5, kLV, BaseEnd::bottom},
              {0.57, 0.80, 0.08, 0.09, 0, 2.5, kLA, BaseEnd::top},
              {0.38, 0.68, 0.045, 0.075, 35, 2.0, -1, BaseEnd::none}};
    case View::A4C:
      return {{0.60, 0.42, 0.085, 0.19, -4, 2.5, kLV, BaseEnd::bottom},
              {0.40, 0.46, 0.07, 0.15, 6, 2.5, kRV, BaseEnd::bottom},
              {0.60, 0.79, 0.08, 0.095, 0, 2.5, kLA, BaseEnd::top},
              {0.40, 0.79, 0.075, 0.09, 0, 2.5, kRA, BaseEnd::top}};
    case View::SAX:
      return {{0.37, 0.50, 0.075, 0.15, 12, 2.0, kRV, BaseEnd::center},
              {0.56, 0.52, 0.11, 0.14, 0, 5.0, kLVSax, BaseEnd::center}};
    case View::PLAX:
      return {{0.50, 0.33, 0.15, 0.045, -6, 2.5, kRV, BaseEnd::right},
              {0.42, 0.55, 0.19, 0.09, -8, 3.0, kLV, BaseEnd::right},
              {0.72, 0.50, 0.065, 0.06, 0, 2.5, -1, BaseEnd::none},
              {0.71, 0.75, 0.09, 0.085, 0, 2.5, kLA, BaseEnd::top}};
  }
  return {};
}

bool structure_in_cone(const Cone& cone, const Structure& s) {
  const double grow = s.wall + 1.0;
  for (int k = 0; k < 72; ++k) {
    const double t = 2 * std::numbers::pi * k / 72;
    const auto p = s.pool.at((s.pool.a + grow) * std::cos(t), (s.pool.b + grow) * std::sin(t));
    if (!cone.contains(p.x, p.y)) return false;
  }
  return true;
}

bool box_in_cone(const Cone& cone, const ValveBox& b) {
  for (double fx : {0.0, 1.0})
    for (double fy : {0.0, 1.0})
      if (!cone.contains(b.x + fx * b.w, b.y + fy * b.h)) return false;
  return true;
}

Geometry sample_geometry(const AcquisitionSpec& acq, std::int64_t height, std::int64_t width, int attempt) {
  std::mt19937_64 rng(derive_seed(acq.seed, {static_cast<std::uint64_t>(attempt)}));
  auto U = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double H = static_cast<double>(height), W = static_cast<double>(width);
  const double px = H / 128.0;  // thickness scale

  Geometry g;
  g.cone.apex_x = W * (0.5 + U(-0.01, 0.01));
  g.cone.apex_y = -0.03 * H;
  g.cone.half_angle = (38.0 + U(-2.0, 2.0)) * std::numbers::pi / 180.0;
  g.cone.radius = H * U(0.93, 0.98) - g.cone.apex_y;
  g.cone.inner = 0.06 * H;
  g.es_factor = es_area_factor(acq.seed);
  g.tissue = U(0.30, 0.45);
  g.wall = U(0.75, 0.90);
  g.pool = U(0.04, 0.12);
  g.attenuation = U(0.3, 0.6);
  g.speckle = U(0.45, 0.65);

  const double rot = U(-6.0, 6.0) * std::numbers::pi / 180.0;
  const double scale = U(0.92, 1.08);
  const double du = U(-0.03, 0.03), dv = U(-0.03, 0.03);
  const double pivot_x = 0.5 * W, pivot_y = 0.55 * H;
  for (const auto& n : view_layout(acq.view)) {
    Structure s;
    double x = (n.u + du + U(-0.015, 0.015)) * W;
    double y = (n.v + dv + U(-0.015, 0.015)) * H;
    // Global rotation and scale about the image middle.
    const double rx = x - pivot_x, ry = y - pivot_y;
    x = pivot_x + scale * (std::cos(rot) * rx - std::sin(rot) * ry);
    y = pivot_y + scale * (std::sin(rot) * rx + std::cos(rot) * ry);
    s.pool.cx = x;
    s.pool.cy = y;
    s.pool.a = n.a * W * scale * U(0.92, 1.08);
    s.pool.b = n.b * H * scale * U(0.92, 1.08);
    s.pool.angle = n.angle_deg * std::numbers::pi / 180.0 + rot;
    s.wall = n.wall * px * U(0.85, 1.15);
    s.role = n.role;
    s.base = n.base;
    g.structures.push_back(s);
  }
  if (acq.view == View::SAX) g.structures[1].carve = {0};

  if (acq.view == View::PLAX) {
    // Aortic valve between the LV outflow and the aortic root.
    const auto& lv = g.structures[1].pool;
    const auto& root = g.structures[2].pool;
    const auto lv_end = lv.at(lv.a * 0.85, 0);
    const double cx = 0.5 * (lv_end.x + root.cx - root.a * 0.4);
    const double cy = 0.5 * (lv_end.y + root.cy);
    ValveBox box;
    box.w = W * U(0.14, 0.17);
    box.h = H * U(0.15, 0.18);
    box.x = cx - box.w / 2;
    box.y = cy - box.h / 2;
    g.valve = box;
    // Outflow channel joining the LV and the root.
    Structure channel;
    channel.pool.cx = cx;
    channel.pool.cy = cy;
    channel.pool.a = box.w * 0.55;
    channel.pool.b = box.h * 0.32;
    channel.pool.angle = 0;
    channel.wall = 2.0 * px;
    g.structures.push_back(channel);
  }

  const int blobs = 4;
  for (int k = 0; k < blobs; ++k) {
    Ellipse e;
    e.cx = U(0.1, 0.9) * W;
    e.cy = U(0.1, 0.9) * H;
    e.a = U(0.05, 0.15) * W;
    e.b = U(0.05, 0.15) * H;
    e.angle = U(0, std::numbers::pi);
    g.tissue_blobs.push_back(e);
    g.blob_gain.push_back(U(-0.08, 0.10));
  }
  return g;
}

bool geometry_valid(const Geometry& g) {
  for (Phase ph : {Phase::ED, Phase::ES})
    for (const auto& s : phase_structures(g, ph))
      if (!structure_in_cone(g.cone, s)) return false;
  if (g.valve && !box_in_cone(g.cone, *g.valve)) return false;
  return true;
}

Geometry acquisition_geometry(const AcquisitionSpec& acq, std::int64_t height, std::int64_t width) {
  for (int attempt = 0; attempt < 256; ++attempt) {
    auto g = sample_geometry(acq, height, width, attempt);
    if (geometry_valid(g)) return g;
  }
  throw ConfigError("synthetic generator could not fit the " + to_string(acq.view) + " layout inside the cone at " +
                    std::to_string(height) + "x" + std::to_string(width));
}

void blur_inplace(std::vector<double>& img, std::int64_t h, std::int64_t w, double sigma) {
  const int half = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * half + 1);
  double sum = 0;
  for (int i = -half; i <= half; ++i) sum += k[i + half] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  std::vector<double> tmp(img.size());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -half; i <= half; ++i) {
        const auto xx = std::clamp<std::int64_t>(x + i, 0, w - 1);
        acc += k[i + half] * img[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -half; i <= half; ++i) {
        const auto yy = std::clamp<std::int64_t>(y + i, 0, h - 1);
        acc += k[i + half] * tmp[yy * w + x];
      }
      img[y * w + x] = acc;
    }
}

void draw_segment(std::vector<double>& img, std::vector<std::uint8_t>& cone, std::int64_t h, std::int64_t w, Point2 a,
                  Point2 b, double thickness, double value) {
  const double len = std::hypot(b.x - a.x, b.y - a.y);
  const int steps = std::max(2, static_cast<int>(std::ceil(len * 2)));
  const int r = static_cast<int>(std::ceil(thickness));
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const double x = a.x + t * (b.x - a.x), y = a.y + t * (b.y - a.y);
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        const auto xi = static_cast<std::int64_t>(std::lround(x)) + dx;
        const auto yi = static_cast<std::int64_t>(std::lround(y)) + dy;
        if (xi < 0 || yi < 0 || xi >= w || yi >= h) continue;
        if (std::hypot(xi - x, yi - y) > thickness) continue;
        if (cone[yi * w + xi]) img[yi * w + xi] = value;
      }
  }
}

}  // namespace

double es_area_factor(std::uint64_t acquisition_seed) {
  std::mt19937_64 rng(derive_seed(acquisition_seed, {0xE5}));
  return std::uniform_real_distribution<double>(0.65, 0.85)(rng);
}

SynthSample generate_sample(const AcquisitionSpec& acq, Phase phase, std::int64_t height, std::int64_t width) {
  if (height <= 0 || width <= 0 || height % 16 != 0 || width % 16 != 0)
    throw ConfigError("synthetic images need positive dims divisible by 16");
  const auto g = acquisition_geometry(acq, height, width);
  const auto structures = phase_structures(g, phase);
  const auto h = height, w = width;
  const auto n = static_cast<std::size_t>(h * w);

  std::vector<std::uint8_t> cone(n, 0), walls(n, 0);
  std::vector<std::int8_t> owner(n, -1);  // structure index whose pool covers the pixel
  std::vector<double> img(n, 0.0);

  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y * w + x);
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      if (!g.cone.contains(fx, fy)) continue;
      cone[i] = 1;
      double v = g.tissue;
      for (std::size_t k = 0; k < g.tissue_blobs.size(); ++k)
        if (g.tissue_blobs[k].contains(fx, fy)) v += g.blob_gain[k];
      for (const auto& s : structures)
        if (s.pool.contains(fx, fy, s.wall)) {
          v = g.wall;
          walls[i] = 1;
        }
      for (std::size_t k = 0; k < structures.size(); ++k) {
        const auto& s = structures[k];
        if (!s.pool.contains(fx, fy)) continue;
        owner[i] = static_cast<std::int8_t>(k);
        walls[i] = 0;
        v = g.pool;
      }
      // Carved pools: a later structure's wall and pool cover the carved one.
      for (std::size_t k = 0; k < structures.size(); ++k)
        for (int c : structures[k].carve)
          if (owner[i] == c && structures[k].pool.contains(fx, fy, structures[k].wall)) {
            const bool in_pool = structures[k].pool.contains(fx, fy);
            owner[i] = in_pool ? static_cast<std::int8_t>(k) : -1;
            walls[i] = in_pool ? 0 : 1;
            v = in_pool ? g.pool : g.wall;
          }
      img[i] = v;
    }

  std::optional<ValveBox> valve;
  if (g.valve) {
    ValveBox box = *g.valve;
    box.state = phase == Phase::ED ? ValveState::closed : ValveState::open;
    const double thick = 1.2 * static_cast<double>(h) / 128.0;
    const double cx = box.x + box.w / 2, cy = box.y + box.h / 2;
    if (box.state == ValveState::closed) {
      draw_segment(img, cone, h, w, {cx, box.y + 0.12 * box.h}, {cx, box.y + 0.88 * box.h}, thick, g.wall);
    } else {
      draw_segment(img, cone, h, w, {box.x + 0.15 * box.w, box.y + 0.2 * box.h},
                   {box.x + 0.85 * box.w, box.y + 0.12 * box.h}, thick, g.wall);
      draw_segment(img, cone, h, w, {box.x + 0.15 * box.w, box.y + 0.8 * box.h},
                   {box.x + 0.85 * box.w, box.y + 0.88 * box.h}, thick, g.wall);
    }
    valve = box;
  }

  // Multiplicative Rayleigh speckle, low-passed to a ~2 px correlation length.
  std::mt19937_64 rng(derive_seed(acq.seed, {0x5eed, static_cast<std::uint64_t>(phase)}));
  std::uniform_real_distribution<double> unif(1e-12, 1.0);
  std::vector<double> speckle(n);
  for (auto& s : speckle) s = std::sqrt(-2.0 * std::log(unif(rng)));
  blur_inplace(speckle, h, w, 1.0);
  double mean = 0;
  for (double s : speckle) mean += s;
  mean /= static_cast<double>(n);

  auto pixels = torch::zeros({1, h, w});
  auto cone_t = torch::zeros({1, h, w});
  auto wall_t = torch::zeros({1, h, w});
  auto chambers = torch::zeros({kNumChambers, h, w});
  auto pa = pixels.accessor<float, 3>();
  auto ca = cone_t.accessor<float, 3>();
  auto wa = wall_t.accessor<float, 3>();
  auto cha = chambers.accessor<float, 3>();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const auto i = static_cast<std::size_t>(y * w + x);
      if (!cone[i]) continue;
      const double depth = std::hypot(x - g.cone.apex_x, y - g.cone.apex_y) / g.cone.radius;
      double v = img[i] * ((1 - g.speckle) + g.speckle * speckle[i] / mean) * std::exp(-g.attenuation * depth);
      v = std::clamp(v, 0.0, 1.0);
      pa[0][y][x] = static_cast<float>(std::round(v * 255.0) / 255.0);
      ca[0][y][x] = 1;
      wa[0][y][x] = walls[i];
      if (owner[i] >= 0 && structures[owner[i]].role >= 0) cha[structures[owner[i]].role][y][x] = 1;
    }

  SynthSample out;
  out.pixels = pixels;
  out.cone_mask = cone_t;
  out.chamber_masks = chambers;
  out.wall_mask = wall_t;
  out.view = acq.view;
  out.phase = phase;
  out.acquisition_id = acq.acquisition_id;
  out.valve_box = valve;

  if (acq.view == View::A2C || acq.view == View::A3C || acq.view == View::A4C) {
    const auto& lv = structures[0].pool;  // LV is first in every apical layout
    const double ts[kNumLandmarks] = {-0.8 * std::numbers::pi, -0.5 * std::numbers::pi, 0.0, 0.5 * std::numbers::pi,
                                      0.8 * std::numbers::pi};
    std::array<Point2, kNumLandmarks> lm{};
    for (int k = 0; k < kNumLandmarks; ++k)
      lm[k] = lv.at(0.97 * lv.a * std::sin(ts[k]), -0.97 * lv.b * std::cos(ts[k]));
    out.landmarks = lm;
  }
  return out;
}

torch::Tensor cone_mask_grid(const torch::Tensor& mask) {
  auto m = mask.to(torch::kFloat32);
  const auto in_dim = m.dim();
  if (in_dim == 2) m = m.unsqueeze(0).unsqueeze(0);
  else if (in_dim == 3) m = m.unsqueeze(0);
  else if (in_dim != 4) throw ShapeError("cone_mask_grid expects (H, W), (1, H, W) or (B, 1, H, W)");
  if (m.size(2) % 16 != 0 || m.size(3) % 16 != 0) throw ConfigError("mask dims must be divisible by 16");
  // Pixel counts are exact in float32; compare against half the cell area.
  auto counts = torch::avg_pool2d(m, {16, 16}, {16, 16}) * 256.0;
  auto grid = (counts >= 128.0).to(torch::kFloat32).squeeze(1);
  return in_dim == 4 ? grid : grid.squeeze(0);
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const ManifestRecord& r) {
  j = nlohmann::json{{"id", r.id},
                     {"split", r.split},
                     {"image", r.image},
                     {"cone_mask", r.cone_mask},
                     {"chamber_masks", r.chamber_masks},
                     {"view", to_string(r.view)},
                     {"phase", to_string(r.phase)},
                     {"acquisition_id", r.acquisition_id}};
  if (r.landmarks) {
    auto arr = nlohmann::json::array();
    for (const auto& p : *r.landmarks) arr.push_back({p.x, p.y});
    j["landmarks"] = arr;
  } else {
    j["landmarks"] = nullptr;
  }
  if (r.valve_box) {
    const auto& b = *r.valve_box;
    j["valve_box"] = {{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}, {"state", to_string(b.state)}};
  } else {
    j["valve_box"] = nullptr;
  }
}

void from_json(const nlohmann::json& j, ManifestRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.split = j.value("split", std::string());
  r.image = j.at("image").get<std::string>();
  r.cone_mask = j.at("cone_mask").get<std::string>();
  r.chamber_masks = j.value("chamber_masks", std::string());
  r.view = view_from_string(j.at("view").get<std::string>());
  r.phase = phase_from_string(j.at("phase").get<std::string>());
  r.acquisition_id = j.at("acquisition_id").get<std::string>();
  r.landmarks.reset();
  if (j.contains("landmarks") && !j["landmarks"].is_null()) {
    const auto& arr = j["landmarks"];
    if (arr.size() != kNumLandmarks) throw ConfigError("manifest record " + r.id + ": expected 5 landmarks");
    std::array<Point2, kNumLandmarks> lm{};
    for (int k = 0; k < kNumLandmarks; ++k) lm[k] = {arr[k].at(0).get<double>(), arr[k].at(1).get<double>()};
    r.landmarks = lm;
  }
  r.valve_box.reset();
  if (j.contains("valve_box") && !j["valve_box"].is_null()) {
    const auto& b = j["valve_box"];
    r.valve_box = ValveBox{b.at("x").get<double>(), b.at("y").get<double>(), b.at("w").get<double>(),
                           b.at("h").get<double>(), valve_state_from_string(b.at("state").get<std::string>())};
  }
}

namespace {

Image8 mask_to_png(const torch::Tensor& mask2d) {
  return tensor_to_gray8(mask2d);  // {0, 1} -> {0, 255}
}

Image8 chambers_to_png(const torch::Tensor& chambers) {
  auto packed = torch::zeros({chambers.size(1), chambers.size(2)}, torch::kInt32);
  for (int c = 0; c < kNumChambers; ++c) packed += (chambers[c] > 0.5f).to(torch::kInt32) * (1 << c);
  packed = packed.to(torch::kUInt8).contiguous();
  Image8 img;
  img.height = static_cast<int>(packed.size(0));
  img.width = static_cast<int>(packed.size(1));
  img.data.assign(packed.data_ptr<std::uint8_t>(), packed.data_ptr<std::uint8_t>() + packed.numel());
  return img;
}

struct SplitPlan {
  std::string name;
  std::int64_t frames;
  std::vector<View> views;  // cycled per acquisition
};

}  // namespace

std::vector<ManifestRecord> generate_dataset(const DatasetSpec& spec, const std::string& dir) {
  for (auto c : {spec.train, spec.retrieval_test, spec.probe_test, spec.plax})
    if (c < 0) throw ConfigError("dataset counts must be >= 0");
  std::vector<SplitPlan> plans;
  if (!spec.custom.empty()) {
    for (const auto& [view, count] : spec.custom) {
      if (count < 0) throw ConfigError("dataset counts must be >= 0");
      plans.push_back({"custom-" + to_string(view), count, {view}});
    }
  } else {
    const std::vector<View> pretrain{View::A2C, View::A3C, View::A4C, View::SAX};
    const std::vector<View> apical{View::A2C, View::A3C, View::A4C};
    plans = {{"train", spec.train, pretrain},
             {"retrieval", spec.retrieval_test, apical},
             {"probe", spec.probe_test, pretrain},
             {"plax", spec.plax, {View::PLAX}}};
  }

  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());

  std::vector<ManifestRecord> records;
  for (std::size_t s = 0; s < plans.size(); ++s) {
    const auto& plan = plans[s];
    const std::int64_t acquisitions = (plan.frames + 1) / 2;
    std::int64_t emitted = 0;
    for (std::int64_t k = 0; k < acquisitions; ++k) {
      AcquisitionSpec acq;
      acq.view = plan.views[static_cast<std::size_t>(k) % plan.views.size()];
      acq.seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(k)});
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%s-%05lld", plan.name.c_str(), static_cast<long long>(k));
      acq.acquisition_id = buf;
      for (Phase phase : {Phase::ED, Phase::ES}) {
        if (emitted >= plan.frames) break;
        const auto sample = generate_sample(acq, phase, spec.height, spec.width);
        ManifestRecord r;
        r.id = acq.acquisition_id + "-" + to_string(phase);
        r.split = plan.name;
        r.image = "images/" + r.id + ".png";
        r.cone_mask = "masks/" + r.id + "_cone.png";
        r.chamber_masks = "masks/" + r.id + "_chambers.png";
        r.view = acq.view;
        r.phase = phase;
        r.acquisition_id = acq.acquisition_id;
        r.landmarks = sample.landmarks;
        r.valve_box = sample.valve_box;
        write_png((fs::path(dir) / r.image).string(), tensor_to_gray8(sample.pixels));
        write_png((fs::path(dir) / r.cone_mask).string(), mask_to_png(sample.cone_mask[0]));
        write_png((fs::path(dir) / r.chamber_masks).string(), chambers_to_png(sample.chamber_masks));
        records.push_back(std::move(r));
        ++emitted;
      }
    }
  }

  std::ofstream manifest(fs::path(dir) / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw IoError("cannot write manifest in " + dir);
  for (const auto& r : records) manifest << nlohmann::json(r).dump() << '\n';
  if (!manifest) throw IoError("manifest write failed in " + dir);
  log::info("generated " + std::to_string(records.size()) + " frames under " + dir);
  return records;
}

std::vector<ManifestRecord> read_manifest(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.jsonl");
  if (!in) throw IoError("cannot open manifest in " + dir);
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<ManifestRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

namespace {

torch::Tensor gray_u8(const Image8& img) {
  if (img.channels != 1) throw IoError("expected an 8-bit grayscale PNG");
  return torch::from_blob(const_cast<std::uint8_t*>(img.data.data()), {img.height, img.width}, torch::kUInt8).clone();
}

}  // namespace

LoadedFrame load_frame(const std::string& dir, const ManifestRecord& rec) {
  LoadedFrame f;
  f.pixels = gray_u8(read_png((fs::path(dir) / rec.image).string())).unsqueeze(0).to(torch::kFloat32) / 255.0f;
  f.cone_mask = (gray_u8(read_png((fs::path(dir) / rec.cone_mask).string())).unsqueeze(0) > 127).to(torch::kFloat32);
  return f;
}

LoadedSplit load_split(const std::string& dir, const std::string& split) {
  LoadedSplit out;
  for (auto& r : read_manifest(dir))
    if (split.empty() || r.split == split) out.records.push_back(std::move(r));
  if (out.records.empty()) throw IoError("no records for split '" + split + "' in " + dir);
  std::vector<torch::Tensor> px, cones, chambers;
  for (const auto& r : out.records) {
    auto img = gray_u8(read_png((fs::path(dir) / r.image).string()));
    auto cone = (gray_u8(read_png((fs::path(dir) / r.cone_mask).string())) > 127).to(torch::kUInt8);
    torch::Tensor ch;
    if (!r.chamber_masks.empty() && fs::exists(fs::path(dir) / r.chamber_masks)) {
      auto packed = gray_u8(read_png((fs::path(dir) / r.chamber_masks).string()));
      std::vector<torch::Tensor> planes;
      for (int c = 0; c < kNumChambers; ++c) planes.push_back(packed.bitwise_and(1 << c).ne(0).to(torch::kUInt8));
      ch = torch::stack(planes);
    } else {
      ch = torch::zeros({kNumChambers, img.size(0), img.size(1)}, torch::kUInt8);
    }
    if (!px.empty() && !img.sizes().equals(px.front().sizes().slice(1)))
      throw IoError("split '" + split + "' mixes image sizes");
    px.push_back(img.unsqueeze(0));
    cones.push_back(cone.unsqueeze(0));
    chambers.push_back(ch);
  }
  out.pixels = torch::stack(px);
  out.cone_masks = torch::stack(cones);
  out.chamber_masks = torch::stack(chambers);
  return out;
}

torch::Tensor LoadedSplit::pixel_batch(const std::vector<std::int64_t>& rows) const {
  return pixels.index_select(0, torch::tensor(rows, torch::kInt64)).to(torch::kFloat32) / 255.0f;
}

torch::Tensor LoadedSplit::cone_batch(const std::vector<std::int64_t>& rows) const {
  return cone_masks.index_select(0, torch::tensor(rows, torch::kInt64)).to(torch::kFloat32);
}

LoadedSplit LoadedSplit::head(std::int64_t n) const {
  if (n >= size()) return *this;
  LoadedSplit out;
  out.records.assign(records.begin(), records.begin() + n);
  out.pixels = pixels.slice(0, 0, n);
  out.cone_masks = cone_masks.slice(0, 0, n);
  out.chamber_masks = chamber_masks.slice(0, 0, n);
  return out;
}

}  // namespace cvae
