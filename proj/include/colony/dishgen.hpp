#pragma once

// Procedural Petri-dish scenes: colony placement, RGB rendering and the
// matching four-class label mask.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "colony/evalkit.hpp"
#include "colony/mask.hpp"
#include "colony/pnm.hpp"

namespace colony {

enum class Preset { easy, realistic };

inline const char* to_string(Preset p) {
  return p == Preset::easy ? "easy" : "realistic";
}

inline Preset parse_preset(const std::string& s) {
  if (s == "easy") return Preset::easy;
  if (s == "realistic") return Preset::realistic;
  throw ConfigError("preset", "must be 'easy' or 'realistic' (got '" + s + "')");
}

/// Reference scale for radii: sizes below are in pixels of a 480x480 image.
inline constexpr double kReferenceCanvas = 480.0;

struct GeneratorParams {
  double lambda_plus = 20.357;  // mean bvg+ colonies per dish
  double lambda_minus = 4.726;  // mean bvg- colonies per dish
  double radius_min = 4.0;
  double radius_max = 12.0;
  double p_touch = 0.3;
  double noise_sigma = 4.0;  // 8-bit intensity units
  Preset preset = Preset::realistic;
  int height = 480;
  int width = 480;

  void validate() const {
    if (!(lambda_plus > 0)) throw ConfigError("lambda_plus", "must be > 0");
    if (!(lambda_minus > 0)) throw ConfigError("lambda_minus", "must be > 0");
    if (!(radius_min > 0) || !(radius_max >= radius_min)) {
      throw ConfigError("radius_min", "radius range must be positive and ordered");
    }
    if (!(p_touch >= 0 && p_touch <= 1)) throw ConfigError("p_touch", "must be in [0, 1]");
    if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma", "must be >= 0");
    if (height < 16 || width < 16) throw ConfigError("size", "canvas must be at least 16x16");
  }

  /// Radius range in canvas pixels: proportional to the reference scale,
  /// floored at [3, 6] px so colonies stay resolvable on small canvases.
  std::pair<double, double> scaled_radius_range() const {
    const double s = std::min(height, width) / kReferenceCanvas;
    return {std::max(radius_min * s, 3.0), std::max(radius_max * s, 6.0)};
  }
};

struct Colony {
  double x = 0, y = 0;  // center, pixel units (pixel centers at +0.5)
  double radius = 0;
  PixelClass kind = PixelClass::bvg_plus;
  double halo_radius = 0;  // bvg+ only; 0 for bvg-
  double jitter = 0;       // relative brightness offset
};

struct Reflection {
  double start_angle = 0;  // radians
  double span = 0;         // radians
  double radius = 0;       // distance of the arc from the dish center
  double thickness = 0;
  double brightness = 0;   // additive, 8-bit units
};

struct DishScene {
  int height = 0, width = 0;
  double dish_x = 0, dish_y = 0, dish_radius = 0;
  std::array<std::uint8_t, 3> agar_color{150, 28, 32};
  std::vector<Colony> colonies;
  std::vector<Reflection> reflections;
  std::uint64_t seed = 0;
  double noise_sigma = 0;
  int skipped = 0;  // colonies dropped after exhausting placement attempts

  std::size_t count(PixelClass kind) const {
    return static_cast<std::size_t>(std::count_if(
        colonies.begin(), colonies.end(), [&](const Colony& c) { return c.kind == kind; }));
  }
};

// Palette.
inline constexpr std::array<std::uint8_t, 3> kOutsideColor{18, 18, 22};
inline constexpr std::array<double, 3> kHaloColor{80, 12, 18};
inline constexpr std::array<double, 3> kColonyColor{226, 206, 176};

inline constexpr int kMaxPlacementAttempts = 1000;
inline constexpr double kClearance = 3.0;  // gap kept between non-touching colonies

/// splitmix64 step; used to derive independent per-item seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline DishScene sample_scene(const GeneratorParams& params, std::uint64_t seed) {
  params.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };

  DishScene scene;
  scene.height = params.height;
  scene.width = params.width;
  scene.seed = seed;
  scene.noise_sigma = params.noise_sigma;
  const double side = std::min(params.height, params.width);
  scene.dish_x = params.width / 2.0;
  scene.dish_y = params.height / 2.0;
  scene.dish_radius = 0.47 * side;
  // Colonies stay clear of the rim annulus where reflections live.
  const double placement_radius = 0.86 * scene.dish_radius;

  const int n_plus = std::poisson_distribution<int>(params.lambda_plus)(rng);
  const int n_minus = std::poisson_distribution<int>(params.lambda_minus)(rng);
  std::vector<PixelClass> kinds(n_plus, PixelClass::bvg_plus);
  kinds.insert(kinds.end(), n_minus, PixelClass::bvg_minus);
  std::shuffle(kinds.begin(), kinds.end(), rng);

  const auto [rmin, rmax] = params.scaled_radius_range();
  const double p_touch = params.preset == Preset::easy ? 0.0 : params.p_touch;

  auto inside_dish = [&](double x, double y, double extent) {
    return std::hypot(x - scene.dish_x, y - scene.dish_y) + extent <= placement_radius;
  };
  auto clear_of_others = [&](double x, double y, double r, std::size_t skip) {
    for (std::size_t j = 0; j < scene.colonies.size(); ++j) {
      if (j == skip) continue;
      const auto& o = scene.colonies[j];
      if (std::hypot(x - o.x, y - o.y) <= r + o.radius + kClearance) return false;
    }
    return true;
  };

  for (PixelClass kind : kinds) {
    Colony c;
    c.kind = kind;
    c.radius = uniform(rmin, rmax);
    c.jitter = uniform(-0.08, 0.08);
    if (kind == PixelClass::bvg_plus) c.halo_radius = c.radius * uniform(1.5, 1.9) + 1.0;
    const bool touching = !scene.colonies.empty() && unit(rng) < p_touch;
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      std::size_t partner = static_cast<std::size_t>(-1);
      if (touching) {
        partner = static_cast<std::size_t>(unit(rng) * scene.colonies.size());
        partner = std::min(partner, scene.colonies.size() - 1);
        const auto& p = scene.colonies[partner];
        const double d = uniform(0.8, 1.1) * (c.radius + p.radius);
        const double a = uniform(0.0, 2 * std::numbers::pi);
        c.x = p.x + d * std::cos(a);
        c.y = p.y + d * std::sin(a);
      } else {
        c.x = uniform(scene.dish_x - placement_radius, scene.dish_x + placement_radius);
        c.y = uniform(scene.dish_y - placement_radius, scene.dish_y + placement_radius);
      }
      placed = inside_dish(c.x, c.y, c.radius) && clear_of_others(c.x, c.y, c.radius, partner);
    }
    if (placed) {
      scene.colonies.push_back(c);
    } else {
      ++scene.skipped;
    }
  }

  if (params.preset == Preset::realistic) {
    const int n_refl = std::uniform_int_distribution<int>(2, 4)(rng);
    const double s = side / kReferenceCanvas;
    for (int i = 0; i < n_refl; ++i) {
      Reflection r;
      r.start_angle = uniform(0.0, 2 * std::numbers::pi);
      r.span = uniform(0.25, 0.8);
      r.radius = uniform(0.9, 0.97) * scene.dish_radius;
      r.thickness = std::max(1.0, uniform(1.5, 4.0) * s);
      r.brightness = uniform(110.0, 190.0);
      scene.reflections.push_back(r);
    }
  }
  return scene;
}

namespace detail {

inline double coverage(double radius, double dist) {
  return std::clamp(radius + 0.5 - dist, 0.0, 1.0);
}

inline double angle_in_arc(double angle, double start, double span) {
  const double two_pi = 2 * std::numbers::pi;
  double rel = std::fmod(angle - start, two_pi);
  if (rel < 0) rel += two_pi;
  return rel <= span ? rel : -1.0;
}

// Pixel rectangle covering a disc of `extent` around (x, y), clipped.
struct Box {
  int y0, y1, x0, x1;
};
inline Box disc_box(const DishScene& s, double x, double y, double extent) {
  return {std::max(0, static_cast<int>(std::floor(y - extent - 1))),
          std::min(s.height - 1, static_cast<int>(std::ceil(y + extent + 1))),
          std::max(0, static_cast<int>(std::floor(x - extent - 1))),
          std::min(s.width - 1, static_cast<int>(std::ceil(x + extent + 1)))};
}

inline bool in_disc(const Colony& c, int y, int x) {
  return std::hypot(x + 0.5 - c.x, y + 0.5 - c.y) <= c.radius;
}

}  // namespace detail

inline RgbImage render_image(const DishScene& scene) {
  const int h = scene.height, w = scene.width;
  std::vector<double> px(static_cast<std::size_t>(h) * w * 3);
  auto at = [&](int y, int x) { return px.data() + (static_cast<std::size_t>(y) * w + x) * 3; };

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double d = std::hypot(x + 0.5 - scene.dish_x, y + 0.5 - scene.dish_y);
      const double a = detail::coverage(scene.dish_radius, d);
      double* p = at(y, x);
      for (int k = 0; k < 3; ++k) {
        p[k] = a * scene.agar_color[k] + (1 - a) * kOutsideColor[k];
      }
    }
  }
  auto paint_disc = [&](double cx, double cy, double radius,
                        const std::array<double, 3>& color) {
    const auto b = detail::disc_box(scene, cx, cy, radius);
    for (int y = b.y0; y <= b.y1; ++y) {
      for (int x = b.x0; x <= b.x1; ++x) {
        const double a = detail::coverage(radius, std::hypot(x + 0.5 - cx, y + 0.5 - cy));
        if (a <= 0) continue;
        double* p = at(y, x);
        for (int k = 0; k < 3; ++k) p[k] = a * color[k] + (1 - a) * p[k];
      }
    }
  };
  for (const auto& c : scene.colonies) {
    if (c.kind == PixelClass::bvg_plus) paint_disc(c.x, c.y, c.halo_radius, kHaloColor);
  }
  for (const auto& c : scene.colonies) {
    std::array<double, 3> col;
    for (int k = 0; k < 3; ++k) col[k] = std::min(255.0, kColonyColor[k] * (1 + c.jitter));
    paint_disc(c.x, c.y, c.radius, col);
  }
  for (const auto& r : scene.reflections) {
    const auto b = detail::disc_box(scene, scene.dish_x, scene.dish_y, r.radius + r.thickness);
    for (int y = b.y0; y <= b.y1; ++y) {
      for (int x = b.x0; x <= b.x1; ++x) {
        const double dx = x + 0.5 - scene.dish_x, dy = y + 0.5 - scene.dish_y;
        const double radial = std::abs(std::hypot(dx, dy) - r.radius);
        if (radial > r.thickness) continue;
        const double rel = detail::angle_in_arc(std::atan2(dy, dx), r.start_angle, r.span);
        if (rel < 0) continue;
        // Bright core fading radially and towards both arc ends.
        const double along = std::sin(std::numbers::pi * rel / r.span);
        const double across = 1.0 - radial / r.thickness;
        const double add = r.brightness * along * across;
        double* p = at(y, x);
        for (int k = 0; k < 3; ++k) p[k] += add;
      }
    }
  }

  RgbImage img(h, w);
  std::mt19937_64 rng(derive_seed(scene.seed, 0xA11CEull));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double n = scene.noise_sigma > 0 ? scene.noise_sigma * noise(rng) : 0.0;
    img.data()[i] = static_cast<std::uint8_t>(std::clamp(std::lround(px[i] + n), 0L, 255L));
  }
  return img;
}

/// Colony discs labeled by kind (halos stay background). Any pixel whose 3x3
/// neighborhood touches two or more distinct discs is labeled border.
inline LabelMask render_mask(const DishScene& scene) {
  const int h = scene.height, w = scene.width;
  LabelMask mask(h, w);
  const std::size_t npx = static_cast<std::size_t>(h) * w;
  std::vector<std::uint16_t> near_count(npx, 0);
  std::vector<int> near_last(npx, -1);
  for (std::size_t i = 0; i < scene.colonies.size(); ++i) {
    const Colony& c = scene.colonies[i];
    const auto b = detail::disc_box(scene, c.x, c.y, c.radius + 1);
    for (int y = b.y0; y <= b.y1; ++y) {
      for (int x = b.x0; x <= b.x1; ++x) {
        bool near = false;
        for (int dy = -1; dy <= 1 && !near; ++dy) {
          for (int dx = -1; dx <= 1 && !near; ++dx) {
            const int yy = y + dy, xx = x + dx;
            near = yy >= 0 && yy < h && xx >= 0 && xx < w && detail::in_disc(c, yy, xx);
          }
        }
        if (!near) continue;
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        if (near_last[p] != static_cast<int>(i)) {
          near_last[p] = static_cast<int>(i);
          ++near_count[p];
        }
        if (detail::in_disc(c, y, x)) mask.data()[p] = static_cast<std::uint8_t>(c.kind);
      }
    }
  }
  for (std::size_t p = 0; p < npx; ++p) {
    if (near_count[p] >= 2) mask.data()[p] = static_cast<std::uint8_t>(PixelClass::border);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// JSON and dataset on disk

inline nlohmann::json to_json(const GeneratorParams& p) {
  return {{"lambda_plus", p.lambda_plus}, {"lambda_minus", p.lambda_minus},
          {"radius_min", p.radius_min},   {"radius_max", p.radius_max},
          {"p_touch", p.p_touch},         {"noise_sigma", p.noise_sigma},
          {"preset", to_string(p.preset)}, {"height", p.height},
          {"width", p.width}};
}

inline nlohmann::json to_json(const DishScene& s) {
  nlohmann::json j;
  j["seed"] = s.seed;
  j["canvas"] = {{"height", s.height}, {"width", s.width}};
  j["dish"] = {{"x", s.dish_x}, {"y", s.dish_y}, {"radius", s.dish_radius},
               {"agar_color", s.agar_color}};
  auto& cols = j["colonies"] = nlohmann::json::array();
  for (const auto& c : s.colonies) {
    nlohmann::json cj = {{"x", c.x}, {"y", c.y}, {"radius", c.radius},
                         {"kind", class_name(c.kind)}, {"jitter", c.jitter}};
    cj["halo_radius"] = c.kind == PixelClass::bvg_plus ? nlohmann::json(c.halo_radius)
                                                       : nlohmann::json(nullptr);
    cols.push_back(std::move(cj));
  }
  auto& refl = j["reflections"] = nlohmann::json::array();
  for (const auto& r : s.reflections) {
    refl.push_back({{"start_angle", r.start_angle}, {"span", r.span},
                    {"radius", r.radius}, {"thickness", r.thickness},
                    {"brightness", r.brightness}});
  }
  j["noise_sigma"] = s.noise_sigma;
  j["skipped"] = s.skipped;
  j["counts"] = {{"bvg+", s.count(PixelClass::bvg_plus)},
                 {"bvg-", s.count(PixelClass::bvg_minus)}};
  return j;
}

struct DatasetEntry {
  std::string id;
  std::string image, mask, scene;  // file names relative to the dataset dir
  ColonyCounts counts;             // connected components of the mask
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  GeneratorParams params;
  std::vector<DatasetEntry> entries;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["seed"] = m.seed;
  j["params"] = to_json(m.params);
  auto& imgs = j["images"] = nlohmann::json::array();
  for (const auto& e : m.entries) {
    imgs.push_back({{"id", e.id}, {"image", e.image}, {"mask", e.mask},
                    {"scene", e.scene},
                    {"counts", {{"bvg+", e.counts.bvg_plus}, {"bvg-", e.counts.bvg_minus}}}});
  }
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  const auto& p = j.at("params");
  m.params.lambda_plus = p.at("lambda_plus");
  m.params.lambda_minus = p.at("lambda_minus");
  m.params.radius_min = p.at("radius_min");
  m.params.radius_max = p.at("radius_max");
  m.params.p_touch = p.at("p_touch");
  m.params.noise_sigma = p.at("noise_sigma");
  m.params.preset = parse_preset(p.at("preset"));
  m.params.height = p.at("height");
  m.params.width = p.at("width");
  for (const auto& e : j.at("images")) {
    DatasetEntry d;
    d.id = e.at("id");
    d.image = e.at("image");
    d.mask = e.at("mask");
    d.scene = e.at("scene");
    d.counts.bvg_plus = e.at("counts").at("bvg+");
    d.counts.bvg_minus = e.at("counts").at("bvg-");
    m.entries.push_back(std::move(d));
  }
  return m;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << text;
  if (!out) throw IoError(path.string(), "write failed");
}

/// Writes image_<i>.ppm, mask_<i>.pgm, scene_<i>.json for i in [0, n) and a
/// manifest.json. Image i uses seed derive_seed(seed, i).
inline DatasetManifest generate_dataset(const GeneratorParams& params, int n,
                                        std::uint64_t seed,
                                        const std::filesystem::path& out_dir) {
  if (n < 1) throw ConfigError("n", "must be >= 1");
  params.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir.string(), "cannot create directory: " + ec.message());

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.params = params;
  for (int i = 0; i < n; ++i) {
    const DishScene scene = sample_scene(params, derive_seed(seed, static_cast<std::uint64_t>(i)));
    const RgbImage image = render_image(scene);
    const LabelMask mask = render_mask(scene);
    DatasetEntry e;
    e.id = std::to_string(i);
    e.image = "image_" + e.id + ".ppm";
    e.mask = "mask_" + e.id + ".pgm";
    e.scene = "scene_" + e.id + ".json";
    e.counts = count_colonies(mask);
    write_ppm(out_dir / e.image, image);
    write_pgm(out_dir / e.mask, mask);
    write_text_file(out_dir / e.scene, to_json(scene).dump(2) + "\n");
    manifest.entries.push_back(std::move(e));
  }
  write_text_file(out_dir / "manifest.json", to_json(manifest).dump(2) + "\n");
  return manifest;
}

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open");
  try {
    return manifest_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string(), std::string("invalid manifest: ") + e.what());
  }
}

}  // namespace colony
