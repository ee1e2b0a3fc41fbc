#pragma once

// Object size/position edits: a rigid transform of the object's pixels, mask
// and label about its centroid, followed by inpainting of the area the object
// left behind.

#include <memory>
#include <string>

#include "json.hpp"
#include "segedit/diffusion.hpp"
#include "segedit/prompt.hpp"
#include "segedit/scenes.hpp"

namespace segedit {

struct RigidTransform {
  double ex = 1.0, ey = 1.0;  // diagonal scale
  double bx = 0.0, by = 0.0;  // translation in pixels
  double ax = 0.0, ay = 0.0;  // anchor (object centroid, pixel-center coordinates)

  // Destination pixel for source pixel (x, y): nearest pixel to the mapped center.
  std::pair<int, int> map(int x, int y) const;
  // Inverse lookup used for resampling: the source pixel whose cell holds the
  // preimage of destination (x, y)'s center.
  std::pair<int, int> source(int x, int y) const;
};

enum class GeometryKind { Size, Position };
std::string to_string(GeometryKind k);
GeometryKind geometry_kind_from_string(const std::string& s);

struct GeometryEditSpec {
  GeometryKind kind = GeometryKind::Size;
  double level = 0.2;
  std::uint64_t seed = 0;
};

// Centroid of set pixels, in pixel-center coordinates (x + 0.5, y + 0.5).
std::pair<double, double> mask_centroid(const BinaryMask& m);

struct RigidResult {
  Image image;      // I': input with object pixels copied to their destinations
  SegLabel label;   // G*: vacated pixels carry the placeholder class
  BinaryMask mask;  // M*
};

// Throws std::out_of_range if any object pixel would leave the canvas.
RigidResult apply_rigid(const Image& image, const SegLabel& label, const BinaryMask& object_mask,
                        const RigidTransform& tr, std::uint8_t placeholder);
BinaryMask transform_mask(const BinaryMask& object_mask, const RigidTransform& tr);

BinaryMask remaining_mask(const BinaryMask& M, const BinaryMask& M_star);

struct SoftMask {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // H x W in [0, 1]
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  double area() const;         // sum of values
};

// 5x5 square dilation, then a 3x3 box average (border-normalized).
SoftMask soften_mask(const BinaryMask& m);

class Inpainter {
 public:
  virtual ~Inpainter() = default;
  // Pixels with soft == 0 must come back bit-identical.
  virtual Image inpaint(const Image& image, const SoftMask& soft, const SegLabel& structure, const std::string& prompt,
                        std::uint64_t seed) const = 0;
  virtual std::string name() const = 0;
};

// Blends each masked pixel toward a per-class color of the structure label.
class PrototypeFillInpainter final : public Inpainter {
 public:
  explicit PrototypeFillInpainter(Mat class_colors);  // K x 3
  Image inpaint(const Image& image, const SoftMask& soft, const SegLabel& structure, const std::string& prompt,
                std::uint64_t seed) const override;
  std::string name() const override { return "prototype-fill"; }

 private:
  Mat colors_;
};

// Regenerates latent cells touched by the soft mask from seeded noise while
// the other cells follow the inversion trajectory of the input, then
// composites s * generated + (1 - s) * input in pixel space.
class DiffusionInpainter final : public Inpainter {
 public:
  DiffusionInpainter(const Denoiser& denoiser, const Tokenizer& tokenizer, NoiseSchedule schedule);
  Image inpaint(const Image& image, const SoftMask& soft, const SegLabel& structure, const std::string& prompt,
                std::uint64_t seed) const override;
  std::string name() const override { return "diffusion"; }

 private:
  const Denoiser& denoiser_;
  const Tokenizer& tokenizer_;
  NoiseSchedule schedule_;
};

// VLM answer to repaint_question(object_name); falls back to the background
// name when no client is given, it fails, or it answers nothing.
std::string repaint_prompt(LanguageClient* client, const std::string& object_name, const std::string& fallback);

struct GeometryResult {
  Image image;       // I*
  SegLabel label;    // G*
  BinaryMask mask;   // M*
  BinaryMask remaining;
  SoftMask soft;
  RigidTransform transform;
  double direction = 0.0;  // radians, Position edits only
  std::string prompt;
  std::uint8_t fill_class = 0;
  nlohmann::json log(const std::string& sample_id, const GeometryEditSpec& spec) const;
};

struct GeometryOptions {
  std::string object_name;
  std::vector<std::string> class_names;  // for the rule-based repaint prompt
  LanguageClient* vlm = nullptr;
  std::uint64_t inpaint_seed = 0;
};

// Throws std::runtime_error when no direction keeps the object inside the canvas.
GeometryResult edit_geometry(const Image& image, const SegLabel& label, const BinaryMask& object_mask,
                             const GeometryEditSpec& spec, const Inpainter& inpainter, const GeometryOptions& opts);

// Dominant label class in a 2-pixel ring around `region`, ignoring `exclude`
// pixels and the given class.
std::uint8_t dominant_surrounding_class(const SegLabel& label, const BinaryMask& region, const BinaryMask& exclude,
                                        int skip_class);

}  // namespace segedit
