#include "segedit/io.hpp"

#include <png.h>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace segedit::io {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

// libpng reports errors by longjmp; the message is parked here and rethrown
// as an exception once control is back in C++ frames.
thread_local char png_error_message[256];

void png_fail(png_structp png, png_const_charp msg) {
  std::snprintf(png_error_message, sizeof png_error_message, "%s", msg);
  png_longjmp(png, 1);
}
void png_warn(png_structp, png_const_charp) {}

void write_png(const fs::path& path, int width, int height, int color_type, int channels,
               const std::vector<std::uint8_t>& data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw std::runtime_error("libpng: allocation failed");
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  if (setjmp(png_jmpbuf(png))) throw std::runtime_error(path.string() + ": libpng: " + png_error_message);
  png_init_io(png, f.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or other varying chunks: identical pixels give identical bytes.
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, data.data() + static_cast<std::size_t>(y) * width * channels);
  png_write_end(png, nullptr);
}

std::vector<std::uint8_t> read_png(const fs::path& path, int& width, int& height, int want_channels) {
  FilePtr f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw std::runtime_error("libpng: allocation failed");
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  std::vector<std::uint8_t> data;
  if (setjmp(png_jmpbuf(png))) throw std::runtime_error(path.string() + ": libpng: " + png_error_message);
  png_init_io(png, f.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (want_channels == 1) {
    // Index maps must stay raw: no palette expansion into RGB.
    if (color_type != PNG_COLOR_TYPE_GRAY && color_type != PNG_COLOR_TYPE_PALETTE)
      throw std::runtime_error(path.string() + ": expected a single-channel index PNG");
    if (bit_depth < 8) png_set_packing(png);
  } else {
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (bit_depth < 8) png_set_expand(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(width) * want_channels)
    throw std::runtime_error(path.string() + ": unexpected PNG layout");
  data.resize(rowbytes * height);
  for (int y = 0; y < height; ++y) png_read_row(png, data.data() + y * rowbytes, nullptr);
  png_read_end(png, nullptr);
  return data;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_png_rgb(const fs::path& path, const Image& image) {
  std::vector<std::uint8_t> data(image.pixels.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = to_byte(image.pixels[i]);
  write_png(path, image.width, image.height, PNG_COLOR_TYPE_RGB, 3, data);
}

Image read_png_rgb(const fs::path& path) {
  int w = 0, h = 0;
  const auto data = read_png(path, w, h, 3);
  Image img(h, w);
  for (std::size_t i = 0; i < data.size(); ++i) img.pixels[i] = data[i] / 255.0;
  return img;
}

void write_png_index(const fs::path& path, const SegLabel& label) {
  write_png(path, label.width, label.height, PNG_COLOR_TYPE_GRAY, 1, label.classes);
}

SegLabel read_png_index(const fs::path& path, int num_classes) {
  int w = 0, h = 0;
  auto data = read_png(path, w, h, 1);
  SegLabel lab(h, w, num_classes);
  lab.classes = std::move(data);
  lab.validate();
  return lab;
}

void write_png_mask(const fs::path& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> data(mask.bits.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = mask.bits[i] ? 255 : 0;
  write_png(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 1, data);
}

BinaryMask read_png_mask(const fs::path& path) {
  int w = 0, h = 0;
  const auto data = read_png(path, w, h, 1);
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < data.size(); ++i) m.bits[i] = data[i] >= 128 ? 1 : 0;
  return m;
}

Image quantize(const Image& image) {
  Image out = image;
  for (double& v : out.pixels) v = to_byte(v) / 255.0;
  return out;
}

nlohmann::json scene_metadata(const Scene& scene) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : scene.objects) {
    objects.push_back({{"class", o.class_id},
                       {"bbox", {o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]}},
                       {"area_fraction", o.area_fraction},
                       {"color", o.color_name}});
  }
  return {{"id", scene.id},
          {"class_names", scene.class_names},
          {"objects", objects},
          {"caption", scene.caption},
          {"seed", scene.seed}};
}

void save_scene(const fs::path& dir, const Scene& scene) {
  if (scene.id.empty()) throw std::invalid_argument("save_scene: scene has no id");
  write_png_rgb(dir / (scene.id + ".png"), scene.image);
  write_png_index(dir / (scene.id + "_label.png"), scene.label);
  write_json(dir / (scene.id + ".json"), scene_metadata(scene));
}

Scene load_scene(const fs::path& dir, const std::string& id) {
  const nlohmann::json meta = read_json(dir / (id + ".json"));
  Scene s;
  s.id = meta.at("id").get<std::string>();
  s.class_names = meta.at("class_names").get<std::vector<std::string>>();
  s.caption = meta.value("caption", std::string{});
  s.seed = meta.value("seed", std::uint64_t{0});
  for (const auto& o : meta.at("objects")) {
    ObjectInfo info;
    info.class_id = o.at("class").get<int>();
    const auto b = o.at("bbox").get<std::vector<int>>();
    if (b.size() != 4) throw std::runtime_error("load_scene: bbox must have 4 entries");
    info.bbox = {b[0], b[1], b[2], b[3]};
    info.area_fraction = o.at("area_fraction").get<double>();
    info.color_name = o.value("color", std::string{});
    s.objects.push_back(info);
  }
  s.image = read_png_rgb(dir / (id + ".png"));
  s.label = read_png_index(dir / (id + "_label.png"), static_cast<int>(s.class_names.size()));
  if (s.label.height != s.image.height || s.label.width != s.image.width)
    throw std::runtime_error("load_scene: image/label size mismatch for " + id);
  return s;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace segedit::io
