#pragma once

// Procedural shape world: labeled scenes plus a nearest-prototype segmenter.
// Everything downstream (editing, filtering, evaluation) runs on these types,
// whether the pixels come from here or from a PNG pair on disk.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "segedit/matrix.hpp"

namespace segedit {

inline constexpr std::uint8_t kIgnoreIndex = 255;

using Rgb = std::array<double, 3>;

struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;  // H x W x 3, interleaved, values in [0, 1]

  Image() = default;
  Image(int h, int w, Rgb fill = {0, 0, 0});

  std::size_t num_pixels() const { return static_cast<std::size_t>(height) * width; }
  Rgb at(int y, int x) const;
  void set(int y, int x, const Rgb& c);
  // Throws unless H, W >= 8 and every channel value lies in [0, 1].
  void validate() const;
  bool operator==(const Image&) const = default;
};

struct SegLabel {
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> classes;  // H x W; kIgnoreIndex marks excluded pixels

  SegLabel() = default;
  SegLabel(int h, int w, int k, std::uint8_t fill = 0);

  std::uint8_t at(int y, int x) const { return classes[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return classes[static_cast<std::size_t>(y) * width + x]; }
  void validate() const;
  bool operator==(const SegLabel&) const = default;
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1

  BinaryMask() = default;
  BinaryMask(int h, int w, bool fill = false);

  bool at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool b) { bits[static_cast<std::size_t>(y) * width + x] = b ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool operator==(const BinaryMask&) const = default;
};

BinaryMask class_mask(const SegLabel& label, int class_id);

enum class ShapeKind { Circle, Ellipse, Rectangle, Triangle };

std::string to_string(ShapeKind k);
ShapeKind shape_kind_from_string(const std::string& s);

// One filled shape. Extent is the half-width (rx) and half-height (ry) of the
// bounding box; circles use rx only.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::Circle;
  int class_id = 0;
  Rgb color{0, 0, 0};
  std::string color_name;
  double cx = 0, cy = 0;
  double rx = 1, ry = 1;
};

struct SceneSpec {
  int width = 64;
  int height = 64;
  int num_classes = 0;
  int background_class = 0;
  Rgb background_color{0, 0, 0};
  std::vector<ShapeSpec> shapes;  // painted in order; later shapes cover earlier ones
  std::uint64_t seed = 0;
  double noise_std = 0.0;   // optional per-pixel Gaussian noise, seeded
  bool soft_edges = false;  // antialiased colors; labels keep the hard boundary
};

struct ObjectInfo {
  int class_id = 0;
  std::array<int, 4> bbox{0, 0, 0, 0};  // x0, y0, x1, y1 (exclusive)
  double area_fraction = 0.0;
  std::string color_name;
};

struct Scene {
  std::string id;
  Image image;
  SegLabel label;
  std::vector<ObjectInfo> objects;
  std::vector<std::string> class_names;
  std::string caption;
  std::uint64_t seed = 0;
};

// Class table of the shape world: which classes are backgrounds, each class's
// canonical color and (for objects) its shape.
struct World {
  struct ClassInfo {
    std::string name;
    bool background = false;
    ShapeKind shape = ShapeKind::Circle;
    std::string color_name;  // canonical color
  };
  std::vector<ClassInfo> classes;
  std::vector<std::pair<std::string, Rgb>> palette;  // named colors usable for fills

  static World standard();
  int num_classes() const { return static_cast<int>(classes.size()); }
  std::vector<std::string> class_names() const;
  std::vector<int> background_classes() const;
  Rgb color(const std::string& name) const;
  bool has_color(const std::string& name) const;
};

struct RandomSceneOptions {
  int width = 64;
  int height = 64;
  // Probability that the salient object takes a random palette color instead
  // of its class's canonical one.
  double random_color_probability = 0.0;
  double color_jitter = 0.04;
  double second_object_probability = 0.3;
  double min_extent_fraction = 0.26;
  double max_extent_fraction = 0.36;
};

SceneSpec random_scene_spec(const World& world, std::uint64_t seed, const RandomSceneOptions& opts = {});
void validate_spec(const SceneSpec& spec);

// Pure function of the spec. Throws std::invalid_argument on an invalid spec.
Scene generate_scene(const SceneSpec& spec, const World& world);

// "a photo of a <color> <object> on the <background>", describing the last
// (topmost, salient) shape.
std::string caption_for(const SceneSpec& spec, const World& world);

// Pixel-center containment test shared by rendering and labeling.
bool shape_contains(const ShapeSpec& s, double px, double py);

class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual int num_classes() const = 0;
  // H x W x K class scores, pixel-major.
  virtual std::vector<double> scores(const Image& image) const = 0;
  virtual std::string name() const = 0;
};

class PrototypeSegmenter final : public Segmenter {
 public:
  PrototypeSegmenter(Mat prototypes, double temperature);

  int num_classes() const override { return prototypes_.rows; }
  std::vector<double> scores(const Image& image) const override;
  std::string name() const override { return "prototype"; }

  const Mat& prototypes() const { return prototypes_; }
  double temperature() const { return temperature_; }
  PrototypeSegmenter with_temperature(double t) const { return PrototypeSegmenter(prototypes_, t); }

 private:
  Mat prototypes_;  // K x 3
  double temperature_;
};

struct LabeledImage {
  const Image* image;
  const SegLabel* label;
};

PrototypeSegmenter fit_prototype_segmenter(const std::vector<LabeledImage>& dataset, double temperature = 1.0);

std::vector<double> predict_scores(const Segmenter& seg, const Image& image);
// Normalized exponentials of the scores.
std::vector<double> predict_probabilities(const Segmenter& seg, const Image& image);
SegLabel predict_label(const Segmenter& seg, const Image& image);

inline constexpr double kLossSentinel = -1.0;

// Per-pixel cross entropy -log p(label). Ignored pixels carry kLossSentinel.
std::vector<double> loss_map(const Segmenter& seg, const Image& image, const SegLabel& label);

}  // namespace segedit
