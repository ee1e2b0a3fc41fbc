#pragma once

// Mask-guided dual-branch appearance editor. A reconstruction branch and an
// edit branch start from the same inverted noise; the edit branch borrows
// the reconstruction's features and self-attention early on, is pushed by an
// attention energy to put the edit tokens inside the object mask, and is
// blended back onto the reconstruction outside the mask after every step.

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "segedit/diffusion.hpp"
#include "segedit/prompt.hpp"

namespace segedit {

struct EditConfig {
  int T = 50;
  ScheduleKind schedule = ScheduleKind::Linear;
  double theta_f = 0.8;
  double theta_a = 0.5;
  double gamma = 0.2;
  double eta = 1.0;
  int max_guidance_iters = 10;
  std::string guidance_layer;  // empty: the denoiser's own choice
  bool exclude_special_tokens = false;

  void validate() const;
  nlohmann::json to_json() const;
  static EditConfig from_json(const nlohmann::json& j);
};

// Denoising step index k = T - t (k = 0 is the noisiest step). Injection is
// active for the first floor(theta * T) steps.
bool injection_active(int t, double theta, int T);
int injected_step_count(double theta, int T);

using FeatureMap = std::map<std::string, Mat>;
FeatureMap inject_features(const FeatureMap& recon, const FeatureMap& edit, int t, const EditConfig& cfg);
FeatureMap inject_self_attention(const FeatureMap& recon, const FeatureMap& edit, int t, const EditConfig& cfg);

// Object mask at latent resolution.
struct LatentMask {
  Mat area;    // (h*w) x 1 area fraction per cell
  Mat binary;  // (h*w) x 1, 1 where area >= 0.5
  int count = 0;
  int width = 0;  // latent width, for error messages
};
LatentMask latent_mask(const BinaryMask& mask, int factor = kLatentFactor);

// L = (1 - (1/sum M) sum_p m_p * sum_{j in S'} A_pj / sum_n A_pn)^2.
// `edit_cols` index columns of `attn`; with exclude_first the denominator
// skips column 0 (the start token). Fills dL/dA into grad when given.
double mask_energy(const Mat& attn, const std::vector<int>& edit_cols, const LatentMask& mask, bool exclude_first,
                   Mat* grad = nullptr);

struct GuidanceStep {
  int t = 0;
  double L = 0.0;
  int iters = 0;
  bool converged = false;
};

struct GuidanceContext {
  const Denoiser* denoiser = nullptr;
  std::span<const int> tokens;
  const Mat* structure = nullptr;
  std::vector<int> edit_cols;
  const LatentMask* mask = nullptr;
};

// z <- z - eta * grad L until L <= gamma or max_guidance_iters updates.
Latent guided_update(const Latent& z, int t, const GuidanceContext& ctx, const EditConfig& cfg, GuidanceStep* log);

// z' = M z_edit + (1 - M) z_recon, per latent cell. Cells with M exactly 0 or
// 1 copy the source value bit-for-bit.
Latent blend_latents(const Latent& z_edit, const Latent& z_recon, const Mat& mask);

struct AppearanceInputs {
  std::vector<int> source_tokens;
  std::vector<int> target_tokens;
  std::vector<int> edit_cols;  // columns of the target token sequence (S' shifted past <bos>)
  bool local = true;
};

AppearanceInputs appearance_inputs(const EditRequest& req, const Tokenizer& tok);

struct AppearanceResult {
  Image edited;
  Image recon;
  Latent z_edit;
  Latent z_recon;
  std::vector<GuidanceStep> steps;
  bool converged = true;
  // Edit latent equals the reconstruction outside the blend mask after every step.
  bool outside_mask_equal = true;
};

AppearanceResult edit_appearance(const Image& image, const SegLabel& label, const BinaryMask& mask,
                                 const AppearanceInputs& in, const Denoiser& denoiser, const EditConfig& cfg);

// Invert with the caption, then denoise with the same caption.
Image reconstruct(const Image& image, const SegLabel& label, std::span<const int> tokens, const Denoiser& denoiser,
                  const NoiseSchedule& schedule);

nlohmann::json appearance_log(const std::string& sample_id, const EditRequest& req, const AppearanceResult& r);

}  // namespace segedit
