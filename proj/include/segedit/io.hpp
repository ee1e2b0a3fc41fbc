#pragma once

// Disk formats: 8-bit RGB PNG images, 8-bit index PNG labels (255 = ignore),
// JSON sidecars, SHA-256 digests for manifests.

#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

#include "segedit/scenes.hpp"

namespace segedit::io {

namespace fs = std::filesystem;

void write_png_rgb(const fs::path& path, const Image& image);
Image read_png_rgb(const fs::path& path);
void write_png_index(const fs::path& path, const SegLabel& label);
// num_classes is not stored in the file; the caller supplies it.
SegLabel read_png_index(const fs::path& path, int num_classes);
void write_png_mask(const fs::path& path, const BinaryMask& mask);  // 0 / 255
BinaryMask read_png_mask(const fs::path& path);

// Pixel values after an 8-bit round trip.
Image quantize(const Image& image);

nlohmann::json scene_metadata(const Scene& scene);
// Writes <dir>/<id>.png, <dir>/<id>_label.png and <dir>/<id>.json.
void save_scene(const fs::path& dir, const Scene& scene);
Scene load_scene(const fs::path& dir, const std::string& id);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

std::string read_text(const fs::path& path);
// Writes atomically enough for our purposes: temp file then rename.
void write_text(const fs::path& path, std::string_view text);
void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);

}  // namespace segedit::io
