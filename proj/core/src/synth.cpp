#include "tap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "tap/errors.hpp"

namespace tap::synth {

namespace {

constexpr std::size_t kMinVisiblePixels = 16;
constexpr int kLayoutAttempts = 200;
constexpr int kSceneAttempts = 32;

constexpr std::array<std::array<double, 3>, 6> kHues = {{
    {0.85, 0.25, 0.20},
    {0.20, 0.70, 0.30},
    {0.25, 0.35, 0.85},
    {0.90, 0.80, 0.20},
    {0.70, 0.30, 0.80},
    {0.20, 0.75, 0.80},
}};

std::vector<SynthClass> build_classes() {
  std::vector<SynthClass> out;
  for (int id = 1; id <= kNumClasses; ++id) {
    // Classes id and id + 6 share a hue and differ in shape and texture.
    out.push_back({id, static_cast<ShapeKind>(id - 1), kHues[static_cast<std::size_t>(id - 1) % kHues.size()],
                   id <= 6 ? 0.04 : 0.18});
  }
  return out;
}

}  // namespace

std::string_view to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::kDisk: return "disk";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kBar: return "bar";
    case ShapeKind::kEllipse: return "ellipse";
    case ShapeKind::kDiamond: return "diamond";
    case ShapeKind::kEll: return "L";
    case ShapeKind::kTee: return "T";
    case ShapeKind::kPlus: return "plus";
    case ShapeKind::kChevron: return "chevron";
  }
  return "?";
}

const std::vector<SynthClass>& classes() {
  static const std::vector<SynthClass> table = build_classes();
  return table;
}

const SynthClass& class_info(int class_id) {
  if (class_id < 1 || class_id > kNumClasses) {
    throw DataError("unknown synthetic class id " + std::to_string(class_id));
  }
  return classes()[static_cast<std::size_t>(class_id - 1)];
}

bool inside_shape(ShapeKind shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (shape) {
    case ShapeKind::kDisk: return u * u + v * v <= 1.0;
    case ShapeKind::kSquare: return au <= 0.75 && av <= 0.75;
    case ShapeKind::kTriangle: return v <= 0.7 && v >= -0.9 + 1.78 * au;
    case ShapeKind::kRing: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.5 * 0.5;
    }
    case ShapeKind::kCross: return (std::abs(u - v) <= 0.38 || std::abs(u + v) <= 0.38) && au <= 0.8 && av <= 0.8;
    case ShapeKind::kBar: return au <= 1.0 && av <= 0.38;
    case ShapeKind::kEllipse: return u * u + (v / 0.55) * (v / 0.55) <= 1.0;
    case ShapeKind::kDiamond: return au + av <= 1.0;
    case ShapeKind::kEll:
      return (u >= -0.8 && u <= -0.15 && av <= 0.8) || (au <= 0.8 && v >= 0.15 && v <= 0.8);
    case ShapeKind::kTee: return (au <= 0.85 && v >= -0.8 && v <= -0.2) || (au <= 0.3 && av <= 0.8);
    case ShapeKind::kPlus: return (au <= 0.3 || av <= 0.3) && au <= 0.85 && av <= 0.85;
    case ShapeKind::kChevron: return std::abs(v - (0.9 * au - 0.4)) <= 0.32 && au <= 0.85;
  }
  return false;
}

FoldSplit FoldSplit::make(int fold) {
  if (fold < 0 || fold >= kNumFolds) throw ConfigError("fold index must be in [0, 3], got " + std::to_string(fold));
  FoldSplit split;
  split.fold = fold;
  for (int id = 1; id <= kNumClasses; ++id) {
    (fold_of(id) == fold ? split.novel : split.base).push_back(id);
  }
  return split;
}

int fold_of(int class_id) { return (class_id - 1) % kNumFolds; }

double min_radius(std::size_t size) { return 0.14 * static_cast<double>(size); }

std::vector<Placement> layout(std::span<const int> class_ids, std::size_t height, std::size_t width, Rng& rng) {
  const std::size_t side = std::min(height, width);
  const double rmin = min_radius(side), rmax = 0.22 * static_cast<double>(side);
  const double needed = static_cast<double>(class_ids.size()) * std::numbers::pi * rmin * rmin;
  if (rmin < 3.5 || needed > 0.6 * static_cast<double>(height * width)) {
    throw DataError("layout: a " + std::to_string(height) + "x" + std::to_string(width) + " canvas cannot hold " +
                    std::to_string(class_ids.size()) + " objects");
  }
  std::vector<Placement> out;
  for (int id : class_ids) {
    const SynthClass& cls = class_info(id);
    bool placed = false;
    for (int attempt = 0; attempt < kLayoutAttempts && !placed; ++attempt) {
      Placement p;
      p.class_id = id;
      p.radius = rng.uniform(rmin, rmax);
      p.cx = rng.uniform(p.radius, static_cast<double>(width) - p.radius);
      p.cy = rng.uniform(p.radius, static_cast<double>(height) - p.radius);
      p.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t k = 0; k < 3; ++k) p.color[k] = std::clamp(cls.color[k] + rng.uniform(-0.08, 0.08), 0.0, 1.0);
      placed = std::all_of(out.begin(), out.end(), [&](const Placement& q) {
        return std::hypot(p.cx - q.cx, p.cy - q.cy) >= 0.9 * (p.radius + q.radius);
      });
      if (placed) out.push_back(p);
    }
    if (!placed) throw DataError("layout: no room left for class " + std::to_string(id));
  }
  return out;
}

Scene render(std::span<const Placement> placements, std::size_t height, std::size_t width, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x626B67ULL));
  const std::size_t hw = height * width;
  std::vector<double> image(3 * hw);
  std::vector<double> mask(hw, 0.0);

  // Background: tinted grey with a soft gradient and pixel noise.
  const double grey = rng.uniform(0.25, 0.75);
  std::array<double, 3> tint{};
  for (double& t : tint) t = rng.uniform(-0.1, 0.1);
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double ramp = gx * (static_cast<double>(x) / static_cast<double>(width) - 0.5) +
                          gy * (static_cast<double>(y) / static_cast<double>(height) - 0.5);
      for (std::size_t k = 0; k < 3; ++k) {
        image[k * hw + y * width + x] = grey + tint[k] + ramp + rng.uniform(-0.08, 0.08);
      }
    }
  }

  Scene scene;
  for (const Placement& p : placements) {
    const SynthClass& cls = class_info(p.class_id);
    const double c = std::cos(p.angle), s = std::sin(p.angle);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - p.cx;
        const double dy = static_cast<double>(y) + 0.5 - p.cy;
        const double u = (c * dx + s * dy) / p.radius;
        const double v = (-s * dx + c * dy) / p.radius;
        if (!inside_shape(cls.shape, u, v)) continue;
        const std::size_t i = y * width + x;
        mask[i] = static_cast<double>(p.class_id);
        for (std::size_t k = 0; k < 3; ++k) image[k * hw + i] = p.color[k] + rng.uniform(-cls.noise, cls.noise);
      }
    }
    scene.class_ids.push_back(p.class_id);
  }
  scene.image = Tensor({3, height, width}, std::move(image));
  scene.mask = Tensor({height, width}, std::move(mask));
  scene.seed = seed;
  return scene;
}

Scene render_scene(std::span<const int> class_ids, std::size_t height, std::size_t width, std::uint64_t seed) {
  for (int attempt = 0; attempt < kSceneAttempts; ++attempt) {
    Rng rng(derive_seed(seed, 0x6C61796FULL, static_cast<std::uint64_t>(attempt)));
    const auto placements = layout(class_ids, height, width, rng);
    Scene scene = render(placements, height, width, seed);
    bool visible = true;
    for (int id : class_ids) {
      const auto count = static_cast<std::size_t>(
          std::count(scene.mask.data().begin(), scene.mask.data().end(), static_cast<double>(id)));
      visible = visible && count >= kMinVisiblePixels;
    }
    if (visible) return scene;
  }
  throw DataError("render: could not produce a scene with every object visible");
}

}  // namespace tap::synth
