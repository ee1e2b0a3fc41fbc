#pragma once

// Diffusion-time machinery: schedules, closed-form forward noising,
// deterministic DDIM stepping and inversion, the pixel-space "latent"
// codec, and the denoiser contract the editors talk to.

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "segedit/error.hpp"
#include "segedit/matrix.hpp"
#include "segedit/scenes.hpp"

namespace segedit {

// Latents are stored position-major: rows = h*w spatial cells, cols = channels.
using Latent = Mat;

enum class ScheduleKind { Linear, Cosine };
std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

struct NoiseSchedule {
  int T = 0;
  ScheduleKind kind = ScheduleKind::Linear;
  std::vector<double> alpha;      // index 1..T; alpha[0] = 1 by convention
  std::vector<double> alpha_bar;  // index 0..T; alpha_bar[0] = 1

  double abar(int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
};

// linear: the scaled-linear beta ramp of latent diffusion (1000 training
// steps, beta from 0.00085 to 0.012 on a sqrt scale), subsampled to T steps.
// cosine: abar(t) = f(t) / f(0), f(t) = cos^2(pi/2 * (t/T + s) / (1 + 2s)), s = 0.008.
// The widened denominator keeps abar(T) > 0.
NoiseSchedule make_schedule(int T = 50, ScheduleKind kind = ScheduleKind::Linear);

// sqrt(abar_t) z0 + sqrt(1 - abar_t) noise; t = 0 returns z0.
Latent forward_diffuse(const Latent& z0, int t, const Latent& noise, const NoiseSchedule& s);
// Deterministic DDIM update from t to t - 1.
Latent ddim_step(const Latent& zt, const Latent& eps, int t, const NoiseSchedule& s);
// Inverse direction, t - 1 to t, with eps evaluated at (z_{t-1}, t).
Latent ddim_invert_step(const Latent& z_prev, const Latent& eps, int t, const NoiseSchedule& s);

// ---- denoiser contract ----------------------------------------------------

struct Overrides {
  std::map<std::string, Mat> features;
  std::map<std::string, Mat> self_attn;
  bool empty() const { return features.empty() && self_attn.empty(); }
};

struct CrossAttention {
  std::vector<Mat> heads;  // each (h*w) x N, rows sum to 1
  Mat mean;                // mean over heads
};

struct DenoiseRequest {
  const Latent* z = nullptr;
  int t = 0;
  std::span<const int> tokens;
  const Mat* structure = nullptr;  // (h*w) x K soft one-hot label map, optional
  const Overrides* overrides = nullptr;
};

struct DenoiseOutput {
  Latent eps;
  std::map<std::string, Mat> features;
  std::map<std::string, Mat> self_attn;
  std::map<std::string, CrossAttention> cross_attn;
};

// Scalar function of a (h*w) x N head-averaged cross-attention map. When
// `grad` is non-null it receives dValue/dMap with the map's shape.
using AttentionObjective = std::function<double(const Mat& map, Mat* grad)>;

struct AttentionGradient {
  double value = 0.0;
  Latent grad;  // dValue/dz
  Mat map;      // the map the objective saw
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual DenoiseOutput denoise(const DenoiseRequest& req) const = 0;
  // Exact gradient of objective(cross_attn[layer].mean) with respect to z.
  virtual AttentionGradient attention_gradient(const DenoiseRequest& req, const std::string& layer,
                                               const AttentionObjective& objective) const = 0;
  virtual std::string name() const = 0;
  virtual std::string guidance_layer() const = 0;
  virtual int channels() const = 0;
};

struct SampleContext {
  std::span<const int> tokens;
  const Mat* structure = nullptr;
};

// Trajectory [z_0 ... z_T]. Throws with the step index on a non-finite latent.
std::vector<Latent> ddim_invert(const Latent& z0, const Denoiser& d, const SampleContext& ctx,
                                const NoiseSchedule& s);
// Runs T..1 and returns z_0.
Latent ddim_sample(const Latent& zT, const Denoiser& d, const SampleContext& ctx, const NoiseSchedule& s);

// ---- test double ------------------------------------------------------------

// eps = A vec(z) + b. Cross-attention at layer "up0" (one head) uses
// logits[p][n] = w(token_n) . z_p + c(token_n), with w and c drawn from a
// generator seeded by the token id.
class LinearDenoiser final : public Denoiser {
 public:
  LinearDenoiser(Mat A, Mat b, int positions, int channels, std::uint64_t attention_seed = 7);
  static LinearDenoiser zero(int positions, int channels);

  DenoiseOutput denoise(const DenoiseRequest& req) const override;
  AttentionGradient attention_gradient(const DenoiseRequest& req, const std::string& layer,
                                       const AttentionObjective& objective) const override;
  std::string name() const override { return "linear"; }
  std::string guidance_layer() const override { return "up0"; }
  int channels() const override { return channels_; }

  // Per-token attention parameters, exposed for closed-form gradient tests.
  std::vector<double> token_weight(int token) const;
  double token_bias(int token) const;
  Mat attention(const Latent& z, std::span<const int> tokens) const;

 private:
  Mat A_;  // n x n, n = positions * channels
  Mat b_;  // 1 x n
  int positions_;
  int channels_;
  std::uint64_t seed_;
};

// ---- pixel-space latent codec --------------------------------------------

inline constexpr int kLatentFactor = 4;

struct LatentShape {
  int height = 0;
  int width = 0;
  int channels = 3;
  int positions() const { return height * width; }
};

LatentShape latent_shape_for(int image_height, int image_width, int factor = kLatentFactor);
// Average-pool by `factor`, map [0,1] -> [-1,1].
Latent encode_image(const Image& image, int factor = kLatentFactor);
// Bilinear upsample (half-pixel centers) of (z + 1) / 2, clamped to [0,1].
Image decode_latent(const Latent& z, const LatentShape& shape, int image_height, int image_width);
// Area fraction of each class in each latent cell; ignored pixels count for nothing.
Mat structure_condition(const SegLabel& label, int factor = kLatentFactor);
// Area fraction of set pixels in each latent cell, as a (h*w) x 1 column.
Mat downsample_mask(const BinaryMask& mask, int factor = kLatentFactor);

}  // namespace segedit
