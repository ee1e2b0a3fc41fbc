#pragma once

// Two-stage noise filtering of synthesized samples: embedding-space gates per
// sample, then per-pixel masking of labels whose surrogate loss deviates from
// the class mean.

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "segedit/matrix.hpp"
#include "segedit/scenes.hpp"

namespace segedit {

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<double> embed_image(const Image& image) const = 0;  // unit length
  virtual std::vector<double> embed_text(const std::string& text) const = 0;
  virtual int dim() const = 0;
  virtual std::string name() const = 0;
};

// Image: palette histogram (nearest named color per pixel) plus a constant
// offset dimension. Text: palette words hit the matching histogram bin, other
// non-stopwords are hashed into extra dimensions. Both are rotated by a seeded
// orthogonal matrix and normalized.
class ConceptEmbedder final : public Embedder {
 public:
  ConceptEmbedder(const World& world, std::uint64_t seed, int hashed_dims = 16, double image_offset = 0.5);
  std::vector<double> embed_image(const Image& image) const override;
  std::vector<double> embed_text(const std::string& text) const override;
  int dim() const override { return dim_; }
  std::string name() const override { return "concept"; }

 private:
  std::vector<double> finish(std::vector<double> raw) const;
  std::vector<std::pair<std::string, Rgb>> palette_;
  int hashed_;
  double offset_;
  int dim_;
  Mat rotation_;
};

// Columns of a seeded Gaussian matrix, Gram-Schmidt orthonormalized.
Mat random_orthogonal(int n, std::uint64_t seed);

struct FilterThresholds {
  double min_directional = 0.2;
  double min_image_image = 0.7;
  double min_image_text = 0.2;
  double max_noisy_area_fraction = 0.10;
  double alpha = 2.0;
  void validate() const;
};
void to_json(nlohmann::json& j, const FilterThresholds& t);
void from_json(const nlohmann::json& j, FilterThresholds& t);

// Cosine between (vI - vI*) and (vT - vT*). Throws std::domain_error if either
// difference is zero.
double directional_similarity(std::span<const double> vI, std::span<const double> vI_star,
                              std::span<const double> vT, std::span<const double> vT_star);

struct SampleMetrics {
  std::optional<double> directional;  // empty when the gate is skipped or undefined
  double image_image = 0.0;
  double image_text = 0.0;
  bool accepted = false;
  std::string reason;  // first failed gate, empty when accepted
};

// check_direction = false skips the directional gate (edits that keep the text).
SampleMetrics sample_filter(const Image& I, const Image& I_star, const std::string& P, const std::string& P_star,
                            const Embedder& embedder, const FilterThresholds& th, bool check_direction = true);

struct ClassLossProfile {
  std::vector<double> mean;          // l_g
  std::vector<std::int64_t> counts;  // pixels per class
  double alpha = 2.0;
};

// Throws std::invalid_argument naming the first class with no labeled pixels,
// unless require_all is false (absent classes then keep count 0).
ClassLossProfile class_loss_profile(const std::vector<LabeledImage>& data, const Segmenter& seg,
                                    const std::vector<std::string>& class_names, double alpha = 2.0,
                                    bool require_all = true);

struct PixelFilterResult {
  SegLabel label;
  std::int64_t flagged = 0;
  std::int64_t considered = 0;
  double noisy_fraction = 0.0;
};

PixelFilterResult pixel_filter(std::span<const double> loss, const SegLabel& label, const ClassLossProfile& profile);

bool region_discard(double noisy_fraction, const FilterThresholds& th);

struct FilterRecord {
  std::string sample_id;
  std::string subset;
  SampleMetrics metrics;
  double noisy_pixel_fraction = 0.0;
  bool discarded = false;
  bool kept() const { return metrics.accepted && !discarded; }
  nlohmann::json to_json() const;
};

// One JSON object per line.
std::string to_json_lines(const std::vector<FilterRecord>& records);

}  // namespace segedit
