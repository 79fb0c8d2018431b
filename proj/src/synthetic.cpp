#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "vdet/data.hpp"

namespace vdet {

void SyntheticSceneSpec::validate() const {
  const auto bad = [](const std::string& what) { throw std::invalid_argument("synthetic spec: " + what); };
  if (canvas_w < 32 || canvas_h < 32) bad("canvas must be at least 32x32");
  if (n_vessels.lo < 0 || n_vessels.lo > n_vessels.hi) bad("invalid n_vessels range");
  if (n_distractor_fibers.lo < 0 || n_distractor_fibers.lo > n_distractor_fibers.hi)
    bad("invalid n_distractor_fibers range");
  if (!(vessel_length.lo > 0.0) || vessel_length.lo > vessel_length.hi) bad("invalid vessel_length range");
  if (!(vessel_width.lo > 0.0) || vessel_width.lo > vessel_width.hi) bad("invalid vessel_width range");
  if (vessel_width.hi > vessel_length.lo) bad("vessel_width must not exceed vessel_length");
  if (vessel_length.hi > 0.9 * std::min(canvas_w, canvas_h)) bad("vessels do not fit on the canvas");
  if (!(noise_level >= 0.0 && noise_level <= 1.0)) bad("noise_level must lie in [0, 1]");
}

std::uint64_t scene_seed(std::uint64_t base, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(index)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

namespace {

// Distributions from <random> are implementation-defined; these helpers keep
// scenes identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(std::min<double>(std::floor(uniform() * (hi - lo + 1)), hi - lo));
  }
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

struct Canvas {
  int w, h;
  std::vector<float> v;
  float& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
};

// 4x4 supersampled coverage of an axis-aligned ellipse blended into the canvas.
void fill_ellipse(Canvas& cv, double cx, double cy, double sx, double sy, float value) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - sx)));
  const int x1 = std::min(cv.w - 1, static_cast<int>(std::ceil(cx + sx)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - sy)));
  const int y1 = std::min(cv.h - 1, static_cast<int>(std::ceil(cy + sy)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      int inside = 0;
      for (int j = 0; j < 4; ++j)
        for (int i = 0; i < 4; ++i) {
          const double px = (x + (i + 0.5) / 4.0 - cx) / sx;
          const double py = (y + (j + 0.5) / 4.0 - cy) / sy;
          inside += px * px + py * py <= 1.0;
        }
      if (inside == 0) continue;
      const float a = inside / 16.0f;
      cv.at(x, y) = cv.at(x, y) * (1.0f - a) + value * a;
    }
}

void draw_fiber(Canvas& cv, double x0, double y0, double x1, double y1, double thickness,
                float value) {
  const double dx = x1 - x0, dy = y1 - y0;
  const double len2 = std::max(dx * dx + dy * dy, 1e-12);
  const double half = thickness / 2.0;
  const int bx0 = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - half - 1)));
  const int bx1 = std::min(cv.w - 1, static_cast<int>(std::ceil(std::max(x0, x1) + half + 1)));
  const int by0 = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - half - 1)));
  const int by1 = std::min(cv.h - 1, static_cast<int>(std::ceil(std::max(y0, y1) + half + 1)));
  for (int y = by0; y <= by1; ++y)
    for (int x = bx0; x <= bx1; ++x) {
      const double px = x + 0.5 - x0, py = y + 0.5 - y0;
      const double t = std::clamp((px * dx + py * dy) / len2, 0.0, 1.0);
      const double ex = px - t * dx, ey = py - t * dy;
      const double d = std::sqrt(ex * ex + ey * ey);
      const float a = static_cast<float>(std::clamp(half + 0.5 - d, 0.0, 1.0));
      if (a > 0.0f) cv.at(x, y) = cv.at(x, y) * (1.0f - a) + value * a;
    }
}

bool overlaps(const VesselShape& a, const VesselShape& b, double margin) {
  return std::abs(a.cx - b.cx) < a.semi_x + b.semi_x + margin &&
         std::abs(a.cy - b.cy) < a.semi_y + b.semi_y + margin;
}

}  // namespace

SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Canvas cv{spec.canvas_w, spec.canvas_h, {}};
  cv.v.assign(static_cast<std::size_t>(cv.w) * cv.h, 0.0f);

  const double base = rng.uniform(0.22, 0.32);
  const double gx = rng.uniform(-0.05, 0.05);
  const double gy = rng.uniform(-0.05, 0.05);
  for (int y = 0; y < cv.h; ++y)
    for (int x = 0; x < cv.w; ++x)
      cv.at(x, y) = static_cast<float>(base + gx * x / cv.w + gy * y / cv.h);

  const int n_fibers = rng.uniform_int(spec.n_distractor_fibers.lo, spec.n_distractor_fibers.hi);
  for (int i = 0; i < n_fibers; ++i) {
    const double x0 = rng.uniform(0.0, cv.w);
    const double y0 = rng.uniform(0.0, cv.h);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double len = rng.uniform(60.0, 220.0);
    const double thickness = rng.uniform(1.5, 3.5);
    const float value = static_cast<float>(rng.uniform(0.5, 0.7));
    draw_fiber(cv, x0, y0, x0 + len * std::cos(angle), y0 + len * std::sin(angle), thickness, value);
  }

  SyntheticScene scene;
  const int n_target = rng.uniform_int(spec.n_vessels.lo, spec.n_vessels.hi);
  for (int i = 0; i < n_target; ++i) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double length = rng.uniform(spec.vessel_length.lo, spec.vessel_length.hi);
      const double width = rng.uniform(spec.vessel_width.lo, spec.vessel_width.hi);
      const bool horizontal = rng.uniform() < 0.5;
      VesselShape v{};
      v.semi_x = (horizontal ? length : width) / 2.0;
      v.semi_y = (horizontal ? width : length) / 2.0;
      v.cx = rng.uniform(v.semi_x + 1.0, cv.w - v.semi_x - 1.0);
      v.cy = rng.uniform(v.semi_y + 1.0, cv.h - v.semi_y - 1.0);
      bool clash = false;
      for (const VesselShape& o : scene.vessels) clash = clash || overlaps(v, o, 4.0);
      if (clash) continue;
      scene.vessels.push_back(v);
      break;
    }
  }

  for (const VesselShape& v : scene.vessels) {
    const float body = static_cast<float>(rng.uniform(0.72, 0.88));
    fill_ellipse(cv, v.cx, v.cy, v.semi_x, v.semi_y, body * 0.9f);
    fill_ellipse(cv, v.cx, v.cy, v.semi_x * 0.8, v.semi_y * 0.8, body);

    // Perforation plates near both ends of the long axis.
    const bool horizontal = v.semi_x >= v.semi_y;
    const double semi_long = horizontal ? v.semi_x : v.semi_y;
    const double semi_short = horizontal ? v.semi_y : v.semi_x;
    const double plate_long = std::max(1.0, 0.1 * semi_long);
    const double plate_short = 0.6 * semi_short;
    for (double side : {-1.0, 1.0}) {
      const double off = side * 0.78 * semi_long;
      const double pcx = horizontal ? v.cx + off : v.cx;
      const double pcy = horizontal ? v.cy : v.cy + off;
      fill_ellipse(cv, pcx, pcy, horizontal ? plate_long : plate_short,
                   horizontal ? plate_short : plate_long, 0.35f);
    }
    const int n_pits = rng.uniform_int(4, 12);
    for (int k = 0; k < n_pits; ++k) {
      const double a = rng.uniform(-0.6, 0.6);
      const double b = rng.uniform(-0.6, 0.6);
      const double r = rng.uniform(0.8, 1.6);
      fill_ellipse(cv, v.cx + a * v.semi_x, v.cy + b * v.semi_y, r, r, body * 0.6f);
    }
    scene.boxes.push_back({v.cx, v.cy, 2.0 * v.semi_x, 2.0 * v.semi_y, Space::kPixel});
  }

  const double sigma = 0.1 * spec.noise_level;
  const double tint[3] = {1.0, rng.uniform(0.88, 0.96), rng.uniform(0.78, 0.9)};
  scene.image = cv::Mat(cv.h, cv.w, CV_8UC3);
  for (int y = 0; y < cv.h; ++y) {
    auto* row = scene.image.ptr<std::uint8_t>(y);
    for (int x = 0; x < cv.w; ++x) {
      const double v = std::clamp(cv.at(x, y) + sigma * rng.normal(), 0.0, 1.0);
      for (int c = 0; c < 3; ++c)
        row[3 * x + c] = static_cast<std::uint8_t>(std::lround(255.0 * v * tint[c]));
    }
  }
  return scene;
}

namespace {

template <typename T>
nlohmann::json range_json(const Range<T>& r) {
  return nlohmann::json::array({r.lo, r.hi});
}

template <typename T>
Range<T> range_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("range must be [lo, hi]");
  return {j[0].get<T>(), j[1].get<T>()};
}

}  // namespace

std::string to_json(const SyntheticDatasetSpec& spec) {
  const SyntheticSceneSpec& s = spec.scene;
  nlohmann::json j = {
      {"canvas_w", s.canvas_w},
      {"canvas_h", s.canvas_h},
      {"n_vessels", range_json(s.n_vessels)},
      {"vessel_length", range_json(s.vessel_length)},
      {"vessel_width", range_json(s.vessel_width)},
      {"n_distractor_fibers", range_json(s.n_distractor_fibers)},
      {"noise_level", s.noise_level},
      {"seed", s.seed},
      {"n_images", spec.n_images},
      {"val_fraction", spec.val_fraction},
  };
  return j.dump(2) + "\n";
}

SyntheticDatasetSpec synthetic_spec_from_json(const std::string& text) {
  SyntheticDatasetSpec spec;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    SyntheticSceneSpec& s = spec.scene;
    s.canvas_w = j.value("canvas_w", s.canvas_w);
    s.canvas_h = j.value("canvas_h", s.canvas_h);
    if (j.contains("n_vessels")) s.n_vessels = range_from<int>(j["n_vessels"]);
    if (j.contains("vessel_length")) s.vessel_length = range_from<double>(j["vessel_length"]);
    if (j.contains("vessel_width")) s.vessel_width = range_from<double>(j["vessel_width"]);
    if (j.contains("n_distractor_fibers"))
      s.n_distractor_fibers = range_from<int>(j["n_distractor_fibers"]);
    s.noise_level = j.value("noise_level", s.noise_level);
    s.seed = j.value("seed", s.seed);
    spec.n_images = j.value("n_images", spec.n_images);
    spec.val_fraction = j.value("val_fraction", spec.val_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("synthetic spec: ") + e.what());
  }
  return spec;
}

void write_synthetic_dataset(const SyntheticDatasetSpec& spec, const fs::path& out) {
  spec.scene.validate();
  if (spec.n_images < 0) throw std::invalid_argument("n_images must be non-negative");
  fs::create_directories(out / "images");
  fs::create_directories(out / "labels");

  std::vector<std::string> stems;
  for (int i = 0; i < spec.n_images; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "scene_%05d", i);
    stems.emplace_back(stem);
    SyntheticSceneSpec scene_spec = spec.scene;
    scene_spec.seed = scene_seed(spec.scene.seed, i);
    const SyntheticScene scene = generate_synthetic_scene(scene_spec);
    save_image_rgb(out / "images" / (stems.back() + ".png"), scene.image);
    std::vector<Box> normalized;
    for (const Box& b : scene.boxes)
      normalized.push_back(to_normalized(b, scene.image.cols, scene.image.rows));
    write_label_file(out / "labels" / (stems.back() + ".txt"), normalized);
  }
  write_split(out, make_split(stems, spec.val_fraction, spec.scene.seed));
  std::ofstream(out / "manifest.json", std::ios::binary) << to_json(spec);
}

}  // namespace vdet
