#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "tap/random.hpp"
#include "tap/tensor.hpp"

// Procedural stand-in for a natural-image segmentation corpus: twelve shape
// classes on textured noise, split into four folds of three.
namespace tap::synth {

inline constexpr int kNumClasses = 12;
inline constexpr int kNumFolds = 4;

enum class ShapeKind { kDisk, kSquare, kTriangle, kRing, kCross, kBar, kEllipse, kDiamond, kEll, kTee, kPlus, kChevron };

std::string_view to_string(ShapeKind s);

struct SynthClass {
  int class_id;  // 1..12; 0 is background
  ShapeKind shape;
  std::array<double, 3> color;
  double noise;  // per-pixel texture amplitude
};

const std::vector<SynthClass>& classes();
const SynthClass& class_info(int class_id);

/// Membership test in the shape's local frame, where the shape fits in the
/// unit disk.
bool inside_shape(ShapeKind shape, double u, double v);

struct FoldSplit {
  int fold = 0;
  std::vector<int> base;   // classes seen during meta-training
  std::vector<int> novel;  // held-out classes for evaluation

  static FoldSplit make(int fold);
};

/// Fold that holds `class_id` out as novel.
int fold_of(int class_id);

struct Placement {
  int class_id;
  double cx, cy;  // pixel coordinates of the centre
  double radius;
  double angle;   // radians
  std::array<double, 3> color;
};

struct Scene {
  Tensor image;  // [3 x H x W], values roughly in [0, 1]
  Tensor mask;   // [H x W], global class ids, 0 = background
  std::vector<int> class_ids;  // drawn objects in draw order
  std::uint64_t seed = 0;
};

/// Smallest object radius used for a square canvas of side `size`.
double min_radius(std::size_t size);

/// Seeded non-overlapping placement with position, scale, rotation and
/// colour jitter. Throws DataError when the canvas cannot hold the objects.
std::vector<Placement> layout(std::span<const int> class_ids, std::size_t height, std::size_t width, Rng& rng);

/// Rasterizes placements over a seeded textured background. Later
/// placements occlude earlier ones.
Scene render(std::span<const Placement> placements, std::size_t height, std::size_t width, std::uint64_t seed);

/// layout + render as one pure function of (class_ids, size, seed); every
/// object is guaranteed at least 16 visible pixels.
Scene render_scene(std::span<const int> class_ids, std::size_t height, std::size_t width, std::uint64_t seed);

}  // namespace tap::synth
