#include "segedit/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "segedit/random.hpp"

namespace segedit {

std::pair<int, int> RigidTransform::map(int x, int y) const {
  const double cx = ax + ex * (x + 0.5 - ax) + bx;
  const double cy = ay + ey * (y + 0.5 - ay) + by;
  return {static_cast<int>(std::floor(cx)), static_cast<int>(std::floor(cy))};
}

std::string to_string(GeometryKind k) { return k == GeometryKind::Size ? "size" : "position"; }

GeometryKind geometry_kind_from_string(const std::string& s) {
  if (s == "size") return GeometryKind::Size;
  if (s == "position") return GeometryKind::Position;
  throw std::invalid_argument("unknown geometry kind '" + s + "' (expected size or position)");
}

std::pair<double, double> mask_centroid(const BinaryMask& m) {
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        sx += x + 0.5;
        sy += y + 0.5;
        ++n;
      }
  if (n == 0) throw std::invalid_argument("mask_centroid: empty mask");
  return {sx / n, sy / n};
}

std::pair<int, int> RigidTransform::source(int x, int y) const {
  const double sx = ax + (x + 0.5 - bx - ax) / ex;
  const double sy = ay + (y + 0.5 - by - ay) / ey;
  return {static_cast<int>(std::floor(sx)), static_cast<int>(std::floor(sy))};
}

namespace {

// Destination set by inverse nearest-pixel lookup. Scans every destination
// whose source could be an object pixel, on or off the canvas.
template <class F>
void for_each_destination(const BinaryMask& m, const RigidTransform& tr, F&& f) {
  if (!(tr.ex > 0) || !(tr.ey > 0)) throw std::invalid_argument("rigid transform: scale must be positive");
  int x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return;
  auto fwd = [](double a, double e, double b, double v) { return a + e * (v - a) + b; };
  const int dx0 = static_cast<int>(std::floor(fwd(tr.ax, tr.ex, tr.bx, x0))) - 2;
  const int dx1 = static_cast<int>(std::ceil(fwd(tr.ax, tr.ex, tr.bx, x1 + 1.0))) + 2;
  const int dy0 = static_cast<int>(std::floor(fwd(tr.ay, tr.ey, tr.by, y0))) - 2;
  const int dy1 = static_cast<int>(std::ceil(fwd(tr.ay, tr.ey, tr.by, y1 + 1.0))) + 2;
  for (int y = dy0; y <= dy1; ++y)
    for (int x = dx0; x <= dx1; ++x) {
      const auto [sx, sy] = tr.source(x, y);
      if (sx < 0 || sy < 0 || sx >= m.width || sy >= m.height || !m.at(sy, sx)) continue;
      if (x < 0 || y < 0 || x >= m.width || y >= m.height)
        throw std::out_of_range("apply_rigid: object pixel (" + std::to_string(sx) + ", " + std::to_string(sy) +
                                ") leaves the canvas");
      f(x, y, sx, sy);
    }
}

void check_fits(const BinaryMask& m, const RigidTransform& tr) {
  for_each_destination(m, tr, [](int, int, int, int) {});
}

bool fits(const BinaryMask& m, const RigidTransform& tr) {
  try {
    check_fits(m, tr);
    return true;
  } catch (const std::out_of_range&) {
    return false;
  }
}

}  // namespace

BinaryMask transform_mask(const BinaryMask& object_mask, const RigidTransform& tr) {
  BinaryMask out(object_mask.height, object_mask.width);
  for_each_destination(object_mask, tr, [&](int x, int y, int, int) { out.set(y, x, true); });
  return out;
}

RigidResult apply_rigid(const Image& image, const SegLabel& label, const BinaryMask& object_mask,
                        const RigidTransform& tr, std::uint8_t placeholder) {
  if (object_mask.empty()) throw std::invalid_argument("apply_rigid: empty object mask");
  if (image.height != label.height || image.width != label.width || object_mask.height != label.height ||
      object_mask.width != label.width)
    throw std::invalid_argument("apply_rigid: image/label/mask shapes differ");
  const BinaryMask m_star = transform_mask(object_mask, tr);
  RigidResult r{image, label, m_star};
  for (std::size_t i = 0; i < object_mask.bits.size(); ++i)
    if (object_mask.bits[i]) r.label.classes[i] = placeholder;
  for_each_destination(object_mask, tr, [&](int x, int y, int sx, int sy) {
    r.image.set(y, x, image.at(sy, sx));
    r.label.at(y, x) = label.at(sy, sx);
  });
  return r;
}

BinaryMask remaining_mask(const BinaryMask& M, const BinaryMask& M_star) {
  if (M.height != M_star.height || M.width != M_star.width) throw std::invalid_argument("remaining_mask: shape mismatch");
  BinaryMask out(M.height, M.width);
  for (std::size_t i = 0; i < M.bits.size(); ++i) out.bits[i] = (M.bits[i] && !M_star.bits[i]) ? 1 : 0;
  return out;
}

double SoftMask::area() const {
  double s = 0;
  for (double v : values) s += v;
  return s;
}

SoftMask soften_mask(const BinaryMask& m) {
  const int h = m.height, w = m.width;
  std::vector<double> dil(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool hit = false;
      for (int dy = -2; dy <= 2 && !hit; ++dy)
        for (int dx = -2; dx <= 2 && !hit; ++dx) {
          const int yy = y + dy, xx = x + dx;
          hit = yy >= 0 && yy < h && xx >= 0 && xx < w && m.at(yy, xx);
        }
      dil[static_cast<std::size_t>(y) * w + x] = hit ? 1.0 : 0.0;
    }
  SoftMask s{h, w, std::vector<double>(dil.size(), 0.0)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          acc += dil[static_cast<std::size_t>(yy) * w + xx];
          ++n;
        }
      s.values[static_cast<std::size_t>(y) * w + x] = acc / n;
    }
  return s;
}

// ---- inpainters ---------------------------------------------------------------

PrototypeFillInpainter::PrototypeFillInpainter(Mat class_colors) : colors_(std::move(class_colors)) {
  if (colors_.cols != 3 || colors_.rows <= 0) throw std::invalid_argument("PrototypeFillInpainter: need K x 3 colors");
}

Image PrototypeFillInpainter::inpaint(const Image& image, const SoftMask& soft, const SegLabel& structure,
                                      const std::string&, std::uint64_t) const {
  Image out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const double s = soft.at(y, x);
      if (s == 0.0) continue;
      const int g = structure.at(y, x);
      if (g == kIgnoreIndex || g >= colors_.rows) continue;
      Rgb c = image.at(y, x);
      for (int k = 0; k < 3; ++k) c[k] = s * colors_(g, k) + (1.0 - s) * c[k];
      out.set(y, x, c);
    }
  return out;
}

DiffusionInpainter::DiffusionInpainter(const Denoiser& denoiser, const Tokenizer& tokenizer, NoiseSchedule schedule)
    : denoiser_(denoiser), tokenizer_(tokenizer), schedule_(std::move(schedule)) {}

Image DiffusionInpainter::inpaint(const Image& image, const SoftMask& soft, const SegLabel& structure,
                                  const std::string& prompt, std::uint64_t seed) const {
  if (soft.height != image.height || soft.width != image.width) throw std::invalid_argument("inpaint: mask shape mismatch");
  if (soft.area() == 0.0) return image;
  const LatentShape ls = latent_shape_for(image.height, image.width);
  std::vector<char> unknown(ls.positions(), 0);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      if (soft.at(y, x) > 0.0) unknown[(y / kLatentFactor) * ls.width + x / kLatentFactor] = 1;

  const std::vector<int> tokens = tokenizer_.encode(prompt);
  const Mat S = structure_condition(structure);
  const auto traj = ddim_invert(encode_image(image), denoiser_, {tokens, &S}, schedule_);
  Rng rng(derive_seed(seed, "inpaint"));
  Latent z = traj.back();
  for (int p = 0; p < ls.positions(); ++p)
    if (unknown[p])
      for (int c = 0; c < z.cols; ++c) z(p, c) = rng.normal();
  for (int t = schedule_.T; t >= 1; --t) {
    const DenoiseOutput o = denoiser_.denoise({&z, t, tokens, &S, nullptr});
    z = ddim_step(z, o.eps, t, schedule_);
    for (int p = 0; p < ls.positions(); ++p)
      if (!unknown[p])
        for (int c = 0; c < z.cols; ++c) z(p, c) = traj[t - 1](p, c);
    if (!all_finite(z)) throw std::runtime_error("inpaint: non-finite latent at t=" + std::to_string(t));
  }
  const Image gen = decode_latent(z, ls, image.height, image.width);
  Image out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const double s = soft.at(y, x);
      if (s == 0.0) continue;
      Rgb a = gen.at(y, x), b = image.at(y, x);
      for (int k = 0; k < 3; ++k) a[k] = s * a[k] + (1.0 - s) * b[k];
      out.set(y, x, a);
    }
  return out;
}

std::string repaint_prompt(LanguageClient* client, const std::string& object_name, const std::string& fallback) {
  if (object_name.empty()) throw std::invalid_argument("repaint_prompt: empty object name");
  if (!client) return fallback;
  try {
    for (const auto& c : client->complete(repaint_question(object_name), object_name))
      if (!c.empty()) return c;
    spdlog::warn("repaint_prompt: empty answer for '{}', using '{}'", object_name, fallback);
  } catch (const BackendError& e) {
    spdlog::warn("repaint_prompt: {}; using '{}'", e.what(), fallback);
  }
  return fallback;
}

std::uint8_t dominant_surrounding_class(const SegLabel& label, const BinaryMask& region, const BinaryMask& exclude,
                                        int skip_class) {
  std::vector<long> counts(label.num_classes, 0);
  const int h = label.height, w = label.width;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (region.at(y, x) || exclude.at(y, x)) continue;
      bool near = false;
      for (int dy = -2; dy <= 2 && !near; ++dy)
        for (int dx = -2; dx <= 2 && !near; ++dx) {
          const int yy = y + dy, xx = x + dx;
          near = yy >= 0 && yy < h && xx >= 0 && xx < w && region.at(yy, xx);
        }
      if (!near) continue;
      const int g = label.at(y, x);
      if (g != kIgnoreIndex && g != skip_class && g < label.num_classes) ++counts[g];
    }
  if (std::all_of(counts.begin(), counts.end(), [](long c) { return c == 0; })) {
    // Nothing adjacent: fall back to the most common other class in the image.
    for (std::size_t i = 0; i < label.classes.size(); ++i) {
      const int g = label.classes[i];
      if (g != kIgnoreIndex && g != skip_class && g < label.num_classes) ++counts[g];
    }
  }
  return static_cast<std::uint8_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

nlohmann::json GeometryResult::log(const std::string& sample_id, const GeometryEditSpec& spec) const {
  const double total = static_cast<double>(soft.height) * soft.width;
  return {{"sample_id", sample_id},
          {"kind", to_string(spec.kind)},
          {"level", spec.level},
          {"e_x", transform.ex},
          {"e_y", transform.ey},
          {"b_x", transform.bx},
          {"b_y", transform.by},
          {"direction", direction},
          {"inpaint_area_fraction", total > 0 ? soft.area() / total : 0.0},
          {"prompt", prompt}};
}

GeometryResult edit_geometry(const Image& image, const SegLabel& label, const BinaryMask& object_mask,
                             const GeometryEditSpec& spec, const Inpainter& inpainter, const GeometryOptions& opts) {
  if (object_mask.empty()) throw std::invalid_argument("edit_geometry: empty object mask");
  if (!(spec.level > 0.0 && spec.level < 1.0)) throw std::invalid_argument("edit_geometry: level must lie in (0, 1)");
  GeometryResult g;
  const auto [cx, cy] = mask_centroid(object_mask);
  g.transform.ax = cx;
  g.transform.ay = cy;
  if (spec.kind == GeometryKind::Size) {
    g.transform.ex = g.transform.ey = 1.0 - spec.level;
    check_fits(object_mask, g.transform);
  } else {
    const double dist = spec.level * std::min(image.height, image.width);
    Rng rng(derive_seed(spec.seed, "position"));
    bool ok = false;
    for (int attempt = 0; attempt < 32 && !ok; ++attempt) {
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      g.transform.bx = dist * std::cos(angle);
      g.transform.by = dist * std::sin(angle);
      g.direction = angle;
      ok = fits(object_mask, g.transform);
    }
    if (!ok) throw std::runtime_error("edit_geometry: no direction keeps the object inside the canvas");
  }

  int object_class = -1;
  for (std::size_t i = 0; i < object_mask.bits.size() && object_class < 0; ++i)
    if (object_mask.bits[i]) object_class = label.classes[i];

  const BinaryMask m_star = transform_mask(object_mask, g.transform);
  const BinaryMask m_rem = remaining_mask(object_mask, m_star);
  g.fill_class = dominant_surrounding_class(label, object_mask, m_star, object_class);
  RigidResult r = apply_rigid(image, label, object_mask, g.transform, g.fill_class);
  g.mask = std::move(r.mask);
  g.label = std::move(r.label);
  g.remaining = m_rem;
  g.soft = soften_mask(m_rem);
  // Keep the moved object itself out of the repaint region.
  for (std::size_t i = 0; i < g.soft.values.size(); ++i)
    if (g.mask.bits[i]) g.soft.values[i] = 0.0;

  std::string fallback;
  if (g.fill_class < opts.class_names.size()) fallback = opts.class_names[g.fill_class];
  const std::string obj = opts.object_name.empty() ? std::string("object") : opts.object_name;
  g.prompt = repaint_prompt(opts.vlm, obj, fallback.empty() ? "background" : fallback);
  g.image = inpainter.inpaint(r.image, g.soft, g.label, g.prompt, opts.inpaint_seed);
  return g;
}

}  // namespace segedit
