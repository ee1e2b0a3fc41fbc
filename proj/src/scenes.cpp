#include "segedit/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "segedit/kernels.hpp"
#include "segedit/random.hpp"

namespace segedit {

Image::Image(int h, int w, Rgb fill) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3) {
  for (std::size_t p = 0; p < num_pixels(); ++p)
    for (int c = 0; c < 3; ++c) pixels[p * 3 + c] = fill[c];
}

Rgb Image::at(int y, int x) const {
  const std::size_t p = (static_cast<std::size_t>(y) * width + x) * 3;
  return {pixels[p], pixels[p + 1], pixels[p + 2]};
}

void Image::set(int y, int x, const Rgb& c) {
  const std::size_t p = (static_cast<std::size_t>(y) * width + x) * 3;
  pixels[p] = c[0];
  pixels[p + 1] = c[1];
  pixels[p + 2] = c[2];
}

void Image::validate() const {
  if (height < 8 || width < 8) throw std::invalid_argument("Image: height and width must be at least 8");
  if (pixels.size() != num_pixels() * 3) throw std::invalid_argument("Image: pixel buffer size mismatch");
  for (double v : pixels)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("Image: channel value outside [0, 1]");
}

SegLabel::SegLabel(int h, int w, int k, std::uint8_t fill)
    : height(h), width(w), num_classes(k), classes(static_cast<std::size_t>(h) * w, fill) {}

void SegLabel::validate() const {
  if (num_classes <= 0 || num_classes >= kIgnoreIndex) throw std::invalid_argument("SegLabel: bad num_classes");
  if (classes.size() != static_cast<std::size_t>(height) * width)
    throw std::invalid_argument("SegLabel: buffer size mismatch");
  for (std::uint8_t c : classes)
    if (c != kIgnoreIndex && c >= num_classes)
      throw std::invalid_argument("SegLabel: class index " + std::to_string(c) + " out of range");
}

BinaryMask::BinaryMask(int h, int w, bool fill)
    : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

BinaryMask class_mask(const SegLabel& label, int class_id) {
  BinaryMask m(label.height, label.width);
  for (std::size_t i = 0; i < label.classes.size(); ++i) m.bits[i] = label.classes[i] == class_id ? 1 : 0;
  return m;
}

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Ellipse: return "ellipse";
    case ShapeKind::Rectangle: return "rectangle";
    case ShapeKind::Triangle: return "triangle";
  }
  return "circle";
}

ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "circle") return ShapeKind::Circle;
  if (s == "ellipse") return ShapeKind::Ellipse;
  if (s == "rectangle") return ShapeKind::Rectangle;
  if (s == "triangle") return ShapeKind::Triangle;
  throw std::invalid_argument("unknown shape kind '" + s + "'");
}

World World::standard() {
  World w;
  w.classes = {
      {"sky", true, ShapeKind::Rectangle, "sky"},
      {"sand", true, ShapeKind::Rectangle, "sand"},
      {"ball", false, ShapeKind::Circle, "red"},
      {"box", false, ShapeKind::Rectangle, "brown"},
      {"kite", false, ShapeKind::Triangle, "purple"},
      {"leaf", false, ShapeKind::Ellipse, "green"},
  };
  w.palette = {
      {"red", {0.90, 0.10, 0.10}},     {"blue", {0.10, 0.20, 0.90}},    {"green", {0.10, 0.70, 0.20}},
      {"yellow", {0.95, 0.90, 0.10}},  {"white", {0.95, 0.95, 0.95}},   {"black", {0.05, 0.05, 0.05}},
      {"brown", {0.55, 0.35, 0.15}},   {"purple", {0.55, 0.15, 0.70}},  {"sky", {0.55, 0.75, 0.95}},
      {"sand", {0.85, 0.75, 0.55}},    {"wooden", {0.62, 0.42, 0.22}},  {"metallic", {0.70, 0.70, 0.75}},
      {"stone", {0.50, 0.50, 0.48}},   {"glass", {0.75, 0.90, 0.92}},   {"plastic", {0.95, 0.45, 0.60}},
  };
  return w;
}

std::vector<std::string> World::class_names() const {
  std::vector<std::string> out;
  for (const auto& c : classes) out.push_back(c.name);
  return out;
}

std::vector<int> World::background_classes() const {
  std::vector<int> out;
  for (int i = 0; i < num_classes(); ++i)
    if (classes[i].background) out.push_back(i);
  return out;
}

bool World::has_color(const std::string& name) const {
  return std::any_of(palette.begin(), palette.end(), [&](const auto& p) { return p.first == name; });
}

Rgb World::color(const std::string& name) const {
  for (const auto& [n, c] : palette)
    if (n == name) return c;
  throw std::invalid_argument("unknown palette color '" + name + "'");
}

bool shape_contains(const ShapeSpec& s, double px, double py) {
  const double dx = px - s.cx;
  const double dy = py - s.cy;
  switch (s.kind) {
    case ShapeKind::Circle: return dx * dx + dy * dy < s.rx * s.rx;
    case ShapeKind::Ellipse: return (dx / s.rx) * (dx / s.rx) + (dy / s.ry) * (dy / s.ry) < 1.0;
    case ShapeKind::Rectangle: return std::abs(dx) < s.rx && std::abs(dy) < s.ry;
    case ShapeKind::Triangle: {
      // Apex at the top, base at the bottom of the bounding box.
      if (dy <= -s.ry || dy >= s.ry) return false;
      const double half = s.rx * (dy + s.ry) / (2.0 * s.ry);
      return std::abs(dx) < half;
    }
  }
  return false;
}

void validate_spec(const SceneSpec& spec) {
  if (spec.width < 8 || spec.height < 8) throw std::invalid_argument("SceneSpec: canvas must be at least 8x8");
  if (spec.num_classes <= 0 || spec.num_classes >= kIgnoreIndex)
    throw std::invalid_argument("SceneSpec: num_classes out of range");
  if (spec.background_class < 0 || spec.background_class >= spec.num_classes)
    throw std::invalid_argument("SceneSpec: background class out of range");
  auto check_color = [](const Rgb& c) {
    for (double v : c)
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("SceneSpec: color channel outside [0, 1]");
  };
  check_color(spec.background_color);
  if (spec.noise_std < 0.0) throw std::invalid_argument("SceneSpec: negative noise");
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    const ShapeSpec& s = spec.shapes[i];
    const std::string where = "SceneSpec: shape " + std::to_string(i);
    if (s.class_id < 0 || s.class_id >= spec.num_classes) throw std::invalid_argument(where + " class id out of range");
    if (!(s.rx > 0.0) || !(s.ry > 0.0)) throw std::invalid_argument(where + " has non-positive extent");
    const double ry = s.kind == ShapeKind::Circle ? s.rx : s.ry;
    if (s.cx - s.rx < 0.0 || s.cx + s.rx > spec.width || s.cy - ry < 0.0 || s.cy + ry > spec.height)
      throw std::invalid_argument(where + " does not fit inside the canvas");
    check_color(s.color);
  }
}

std::string caption_for(const SceneSpec& spec, const World& world) {
  const std::string bg = world.classes.at(spec.background_class).name;
  if (spec.shapes.empty()) return "a photo of the " + bg;
  const ShapeSpec& s = spec.shapes.back();
  std::string subject = world.classes.at(s.class_id).name;
  std::string color = s.color_name.empty() ? "" : s.color_name + " ";
  return "a photo of a " + color + subject + " on the " + bg;
}

SceneSpec random_scene_spec(const World& world, std::uint64_t seed, const RandomSceneOptions& opts) {
  Rng rng(seed);
  SceneSpec spec;
  spec.width = opts.width;
  spec.height = opts.height;
  spec.num_classes = world.num_classes();
  spec.seed = seed;

  const std::vector<int> bgs = world.background_classes();
  std::vector<int> objects;
  for (int i = 0; i < world.num_classes(); ++i)
    if (!world.classes[i].background) objects.push_back(i);
  if (bgs.empty() || objects.empty()) throw std::invalid_argument("World needs background and object classes");

  spec.background_class = bgs[rng.integer(0, static_cast<int>(bgs.size()) - 1)];
  spec.background_color = world.color(world.classes[spec.background_class].color_name);

  auto jitter = [&](Rgb c) {
    for (double& v : c) v = std::clamp(v + rng.uniform(-opts.color_jitter, opts.color_jitter), 0.0, 1.0);
    return c;
  };

  auto make_shape = [&](int cls, double lo, double hi) {
    ShapeSpec s;
    s.class_id = cls;
    s.kind = world.classes[cls].shape;
    const double side = std::min(spec.width, spec.height);
    s.rx = rng.uniform(lo, hi) * side;
    switch (s.kind) {
      case ShapeKind::Circle: s.ry = s.rx; break;
      case ShapeKind::Ellipse: s.ry = s.rx * rng.uniform(0.65, 0.85); break;
      case ShapeKind::Rectangle: s.ry = s.rx * rng.uniform(0.7, 1.0); break;
      case ShapeKind::Triangle: s.ry = s.rx * rng.uniform(0.9, 1.0); break;
    }
    s.cx = rng.uniform(s.rx + 1.0, spec.width - s.rx - 1.0);
    s.cy = rng.uniform(s.ry + 1.0, spec.height - s.ry - 1.0);
    return s;
  };

  const int salient = objects[rng.integer(0, static_cast<int>(objects.size()) - 1)];
  ShapeSpec main = make_shape(salient, opts.min_extent_fraction, opts.max_extent_fraction);
  main.color_name = world.classes[salient].color_name;
  if (rng.bernoulli(opts.random_color_probability)) {
    std::vector<std::string> names;
    for (const auto& [n, c] : world.palette)
      if (n != world.classes[spec.background_class].color_name && n != "sky" && n != "sand") names.push_back(n);
    main.color_name = names[rng.integer(0, static_cast<int>(names.size()) - 1)];
  }
  main.color = jitter(world.color(main.color_name));

  if (rng.bernoulli(opts.second_object_probability) && objects.size() > 1) {
    int other = salient;
    while (other == salient) other = objects[rng.integer(0, static_cast<int>(objects.size()) - 1)];
    ShapeSpec small = make_shape(other, 0.07, 0.11);
    small.color_name = world.classes[other].color_name;
    small.color = jitter(world.color(small.color_name));
    // Painted first so the salient object stays whole.
    spec.shapes.push_back(small);
  }
  spec.shapes.push_back(main);
  return spec;
}

Scene generate_scene(const SceneSpec& spec, const World& world) {
  validate_spec(spec);
  const int w = spec.width;
  const int h = spec.height;
  Scene scene;
  scene.image = Image(h, w, spec.background_color);
  scene.label = SegLabel(h, w, spec.num_classes, static_cast<std::uint8_t>(spec.background_class));
  scene.class_names = world.num_classes() == spec.num_classes ? world.class_names() : std::vector<std::string>{};
  scene.seed = spec.seed;

  std::vector<int> owner(static_cast<std::size_t>(h) * w, -1);
  for (std::size_t idx = 0; idx < spec.shapes.size(); ++idx) {
    const ShapeSpec& s = spec.shapes[idx];
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const bool inside = shape_contains(s, x + 0.5, y + 0.5);
        if (spec.soft_edges) {
          int hits = 0;
          for (int sy = 0; sy < 4; ++sy)
            for (int sx = 0; sx < 4; ++sx) hits += shape_contains(s, x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0);
          if (hits > 0) {
            const double a = hits / 16.0;
            Rgb c = scene.image.at(y, x);
            for (int k = 0; k < 3; ++k) c[k] = a * s.color[k] + (1.0 - a) * c[k];
            scene.image.set(y, x, c);
          }
        } else if (inside) {
          scene.image.set(y, x, s.color);
        }
        if (inside) {
          scene.label.at(y, x) = static_cast<std::uint8_t>(s.class_id);
          owner[static_cast<std::size_t>(y) * w + x] = static_cast<int>(idx);
        }
      }
    }
  }

  if (spec.noise_std > 0.0) {
    Rng rng(derive_seed(spec.seed, "scene-noise"));
    for (double& v : scene.image.pixels) v = std::clamp(v + rng.normal(0.0, spec.noise_std), 0.0, 1.0);
  }

  for (std::size_t idx = 0; idx < spec.shapes.size(); ++idx) {
    ObjectInfo info;
    info.class_id = spec.shapes[idx].class_id;
    info.color_name = spec.shapes[idx].color_name;
    int x0 = w, y0 = h, x1 = 0, y1 = 0;
    std::size_t n = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (owner[static_cast<std::size_t>(y) * w + x] == static_cast<int>(idx)) {
          ++n;
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x + 1);
          y1 = std::max(y1, y + 1);
        }
    if (n == 0) continue;
    info.bbox = {x0, y0, x1, y1};
    info.area_fraction = static_cast<double>(n) / (static_cast<double>(w) * h);
    scene.objects.push_back(info);
  }
  if (!scene.class_names.empty()) scene.caption = caption_for(spec, world);
  return scene;
}

PrototypeSegmenter::PrototypeSegmenter(Mat prototypes, double temperature)
    : prototypes_(std::move(prototypes)), temperature_(temperature) {
  if (prototypes_.cols != 3 || prototypes_.rows <= 0) throw std::invalid_argument("PrototypeSegmenter: need K x 3");
  if (!all_finite(prototypes_)) throw std::invalid_argument("PrototypeSegmenter: non-finite prototype");
  if (!(temperature_ > 0.0)) throw std::invalid_argument("PrototypeSegmenter: temperature must be positive");
}

std::vector<double> PrototypeSegmenter::scores(const Image& image) const {
  std::vector<double> out(image.num_pixels() * prototypes_.rows);
  kernels::class_scores({image.pixels, prototypes_.v, prototypes_.rows, temperature_}, out);
  return out;
}

PrototypeSegmenter fit_prototype_segmenter(const std::vector<LabeledImage>& dataset, double temperature) {
  if (dataset.empty()) throw std::invalid_argument("fit_prototype_segmenter: empty dataset");
  const int k = dataset.front().label->num_classes;
  // Per-image partial sums, merged in dataset order.
  Mat sums(k, 3);
  std::vector<std::int64_t> counts(k, 0);
  for (const auto& item : dataset) {
    const Image& img = *item.image;
    const SegLabel& lab = *item.label;
    if (lab.num_classes != k) throw std::invalid_argument("fit_prototype_segmenter: inconsistent num_classes");
    if (img.height != lab.height || img.width != lab.width)
      throw std::invalid_argument("fit_prototype_segmenter: image/label shape mismatch");
    Mat part(k, 3);
    for (std::size_t p = 0; p < lab.classes.size(); ++p) {
      const int g = lab.classes[p];
      if (g == kIgnoreIndex) continue;
      if (g >= k) throw std::invalid_argument("fit_prototype_segmenter: label out of range");
      for (int c = 0; c < 3; ++c) part(g, c) += img.pixels[p * 3 + c];
      ++counts[g];
    }
    for (std::size_t i = 0; i < part.v.size(); ++i) sums.v[i] += part.v[i];
  }
  for (int g = 0; g < k; ++g) {
    if (counts[g] == 0)
      throw std::invalid_argument("fit_prototype_segmenter: class " + std::to_string(g) + " has no pixels");
    for (int c = 0; c < 3; ++c) sums(g, c) /= static_cast<double>(counts[g]);
  }
  return PrototypeSegmenter(std::move(sums), temperature);
}

std::vector<double> predict_scores(const Segmenter& seg, const Image& image) {
  image.validate();
  return seg.scores(image);
}

std::vector<double> predict_probabilities(const Segmenter& seg, const Image& image) {
  const std::vector<double> s = predict_scores(seg, image);
  std::vector<double> out(s.size());
  kernels::log_softmax_rows(s, seg.num_classes(), out);
  for (double& v : out) v = std::exp(v);
  return out;
}

SegLabel predict_label(const Segmenter& seg, const Image& image) {
  const int k = seg.num_classes();
  const std::vector<double> s = predict_scores(seg, image);
  SegLabel out(image.height, image.width, k);
  for (std::size_t p = 0; p < image.num_pixels(); ++p) {
    const double* row = s.data() + p * k;
    out.classes[p] = static_cast<std::uint8_t>(std::max_element(row, row + k) - row);
  }
  return out;
}

std::vector<double> loss_map(const Segmenter& seg, const Image& image, const SegLabel& label) {
  if (image.height != label.height || image.width != label.width)
    throw std::invalid_argument("loss_map: image/label shape mismatch");
  const int k = seg.num_classes();
  const std::vector<double> s = predict_scores(seg, image);
  std::vector<double> logp(s.size());
  kernels::log_softmax_rows(s, k, logp);
  std::vector<double> out(image.num_pixels());
  for (std::size_t p = 0; p < out.size(); ++p) {
    const int g = label.classes[p];
    if (g == kIgnoreIndex) {
      out[p] = kLossSentinel;
      continue;
    }
    if (g >= k) throw std::out_of_range("loss_map: label index " + std::to_string(g) + " out of range");
    out[p] = std::max(0.0, -logp[p * k + g]);
  }
  return out;
}

}  // namespace segedit
