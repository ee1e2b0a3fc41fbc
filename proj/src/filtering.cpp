#include "segedit/filtering.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "segedit/prompt.hpp"
#include "segedit/random.hpp"

namespace segedit {

Mat random_orthogonal(int n, std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("random_orthogonal: n must be positive");
  Rng rng(derive_seed(seed, "orthogonal"));
  Mat q(n, n);
  for (auto& v : q.v) v = rng.normal();
  // Modified Gram-Schmidt over columns; a second pass tightens orthogonality.
  for (int pass = 0; pass < 2; ++pass)
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < j; ++i) {
        double d = 0;
        for (int r = 0; r < n; ++r) d += q(r, i) * q(r, j);
        for (int r = 0; r < n; ++r) q(r, j) -= d * q(r, i);
      }
      double nn = 0;
      for (int r = 0; r < n; ++r) nn += q(r, j) * q(r, j);
      nn = std::sqrt(nn);
      if (nn < 1e-12) throw std::runtime_error("random_orthogonal: degenerate draw");
      for (int r = 0; r < n; ++r) q(r, j) /= nn;
    }
  return q;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

double norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

ConceptEmbedder::ConceptEmbedder(const World& world, std::uint64_t seed, int hashed_dims, double image_offset)
    : palette_(world.palette), hashed_(hashed_dims), offset_(image_offset) {
  if (palette_.empty()) throw std::invalid_argument("ConceptEmbedder: empty palette");
  if (hashed_dims < 0) throw std::invalid_argument("ConceptEmbedder: negative hashed_dims");
  dim_ = static_cast<int>(palette_.size()) + 1 + hashed_;
  rotation_ = random_orthogonal(dim_, seed);
}

std::vector<double> ConceptEmbedder::finish(std::vector<double> raw) const {
  std::vector<double> out(dim_, 0.0);
  for (int i = 0; i < dim_; ++i)
    for (int j = 0; j < dim_; ++j) out[i] += rotation_(i, j) * raw[j];
  const double n = norm(out);
  if (n == 0.0) return out;
  for (double& x : out) x /= n;
  return out;
}

std::vector<double> ConceptEmbedder::embed_image(const Image& image) const {
  std::vector<double> raw(dim_, 0.0);
  const std::size_t n = image.pixels.size() / 3;
  if (n == 0) throw std::invalid_argument("embed_image: empty image");
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t c = 0; c < palette_.size(); ++c) {
      double d = 0;
      for (int k = 0; k < 3; ++k) {
        const double e = image.pixels[p * 3 + k] - palette_[c].second[k];
        d += e * e;
      }
      if (d < bd) bd = d, best = c;
    }
    raw[best] += 1.0 / n;
  }
  raw[palette_.size()] = offset_;
  return finish(std::move(raw));
}

std::vector<double> ConceptEmbedder::embed_text(const std::string& text) const {
  std::vector<double> raw(dim_, 0.0);
  for (const auto& w0 : split_words(lowercase(text))) {
    std::string w;
    for (char c : w0)
      if (std::isalnum(static_cast<unsigned char>(c))) w += c;
    if (w.empty() || is_stopword(w)) continue;
    auto it = std::find_if(palette_.begin(), palette_.end(), [&](const auto& p) { return p.first == w; });
    if (it != palette_.end())
      raw[it - palette_.begin()] += 1.0;
    else if (hashed_ > 0)
      raw[palette_.size() + 1 + fnv1a(w) % hashed_] += 1.0;
  }
  return finish(std::move(raw));
}

void FilterThresholds::validate() const {
  for (double v : {min_directional, min_image_image, min_image_text})
    if (!(v >= -1.0 && v <= 1.0)) throw std::invalid_argument("FilterThresholds: similarity thresholds must lie in [-1, 1]");
  if (!(max_noisy_area_fraction >= 0.0 && max_noisy_area_fraction <= 1.0))
    throw std::invalid_argument("FilterThresholds: max_noisy_area_fraction must lie in [0, 1]");
  if (!(alpha > 1.0)) throw std::invalid_argument("FilterThresholds: alpha must exceed 1");
}

void to_json(nlohmann::json& j, const FilterThresholds& t) {
  j = {{"min_directional", t.min_directional},
       {"min_image_image", t.min_image_image},
       {"min_image_text", t.min_image_text},
       {"max_noisy_area_fraction", t.max_noisy_area_fraction},
       {"alpha", t.alpha}};
}

void from_json(const nlohmann::json& j, FilterThresholds& t) {
  t = FilterThresholds{};
  t.min_directional = j.value("min_directional", t.min_directional);
  t.min_image_image = j.value("min_image_image", t.min_image_image);
  t.min_image_text = j.value("min_image_text", t.min_image_text);
  t.max_noisy_area_fraction = j.value("max_noisy_area_fraction", t.max_noisy_area_fraction);
  t.alpha = j.value("alpha", t.alpha);
  t.validate();
}

double directional_similarity(std::span<const double> vI, std::span<const double> vI_star, std::span<const double> vT,
                              std::span<const double> vT_star) {
  if (vI.size() != vI_star.size() || vT.size() != vT_star.size() || vI.size() != vT.size())
    throw std::invalid_argument("directional_similarity: dimension mismatch");
  std::vector<double> dI(vI.size()), dT(vT.size());
  for (std::size_t i = 0; i < vI.size(); ++i) {
    dI[i] = vI[i] - vI_star[i];
    dT[i] = vT[i] - vT_star[i];
  }
  const double nI = norm(dI), nT = norm(dT);
  if (nI < 1e-12) throw std::domain_error("directional_similarity: image difference is zero");
  if (nT < 1e-12) throw std::domain_error("directional_similarity: text difference is zero");
  return std::clamp(dot(dI, dT) / (nI * nT), -1.0, 1.0);
}

SampleMetrics sample_filter(const Image& I, const Image& I_star, const std::string& P, const std::string& P_star,
                            const Embedder& embedder, const FilterThresholds& th, bool check_direction) {
  SampleMetrics m;
  const auto vI = embedder.embed_image(I);
  const auto vIs = embedder.embed_image(I_star);
  const auto vTs = embedder.embed_text(P_star);
  m.image_image = dot(vI, vIs);
  m.image_text = dot(vIs, vTs);
  if (check_direction) {
    try {
      m.directional = directional_similarity(vI, vIs, embedder.embed_text(P), vTs);
    } catch (const std::domain_error& e) {
      m.reason = e.what();
      return m;
    }
    if (*m.directional < th.min_directional) {
      m.reason = "directional";
      return m;
    }
  }
  if (m.image_image < th.min_image_image) {
    m.reason = "image_image";
    return m;
  }
  if (m.image_text < th.min_image_text) {
    m.reason = "image_text";
    return m;
  }
  m.accepted = true;
  return m;
}

ClassLossProfile class_loss_profile(const std::vector<LabeledImage>& data, const Segmenter& seg,
                                    const std::vector<std::string>& class_names, double alpha, bool require_all) {
  const int k = seg.num_classes();
  const auto n = static_cast<std::int64_t>(data.size());
  std::vector<double> sums(static_cast<std::size_t>(n) * k, 0.0);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(n) * k, 0);
  std::string failure;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      const auto loss = loss_map(seg, *data[i].image, *data[i].label);
      const auto& g = data[i].label->classes;
      for (std::size_t p = 0; p < g.size(); ++p) {
        if (g[p] == kIgnoreIndex) continue;
        if (g[p] >= k) throw std::out_of_range("class_loss_profile: label class out of range");
        sums[i * k + g[p]] += loss[p];
        ++counts[i * k + g[p]];
      }
    } catch (const std::exception& e) {
#pragma omp critical
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw std::runtime_error(failure);
  ClassLossProfile prof{std::vector<double>(k, 0.0), std::vector<std::int64_t>(k, 0), alpha};
  // Sorted partial sums: the total does not depend on dataset order.
  std::vector<double> parts;
  for (int g = 0; g < k; ++g) {
    parts.clear();
    for (std::int64_t i = 0; i < n; ++i) {
      prof.counts[g] += counts[i * k + g];
      if (counts[i * k + g]) parts.push_back(sums[i * k + g]);
    }
    if (prof.counts[g] == 0) {
      if (!require_all) continue;
      const std::string nm = g < static_cast<int>(class_names.size()) ? class_names[g] : "#" + std::to_string(g);
      throw std::invalid_argument("class_loss_profile: class '" + nm + "' has no labeled pixels");
    }
    std::sort(parts.begin(), parts.end());
    double s = 0;
    for (double v : parts) s += v;
    prof.mean[g] = s / static_cast<double>(prof.counts[g]);
  }
  return prof;
}

PixelFilterResult pixel_filter(std::span<const double> loss, const SegLabel& label, const ClassLossProfile& profile) {
  if (loss.size() != label.classes.size()) throw std::invalid_argument("pixel_filter: loss/label size mismatch");
  PixelFilterResult r{label, 0, 0, 0.0};
  const double a = profile.alpha;
  for (std::size_t p = 0; p < loss.size(); ++p) {
    const int g = label.classes[p];
    if (g == kIgnoreIndex) continue;
    if (g >= static_cast<int>(profile.mean.size()) || profile.counts[g] == 0)
      throw std::invalid_argument("pixel_filter: class " + std::to_string(g) + " not in profile");
    ++r.considered;
    const double l = profile.mean[g];
    if (loss[p] > a * l || loss[p] < l / a) {
      r.label.classes[p] = kIgnoreIndex;
      ++r.flagged;
    }
  }
  r.noisy_fraction = r.considered ? static_cast<double>(r.flagged) / r.considered : 0.0;
  return r;
}

bool region_discard(double noisy_fraction, const FilterThresholds& th) {
  return noisy_fraction > th.max_noisy_area_fraction;
}

nlohmann::json FilterRecord::to_json() const {
  nlohmann::json j = {{"sample_id", sample_id},
                      {"subset", subset},
                      {"directional", metrics.directional ? nlohmann::json(*metrics.directional) : nlohmann::json()},
                      {"image_image", metrics.image_image},
                      {"image_text", metrics.image_text},
                      {"accepted", metrics.accepted},
                      {"noisy_pixel_fraction", noisy_pixel_fraction},
                      {"discarded", discarded}};
  if (!metrics.reason.empty()) j["reject_reason"] = metrics.reason;
  return j;
}

std::string to_json_lines(const std::vector<FilterRecord>& records) {
  std::string out;
  for (const auto& r : records) out += r.to_json().dump() + "\n";
  return out;
}

}  // namespace segedit
