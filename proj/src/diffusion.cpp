#include "segedit/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "segedit/kernels.hpp"
#include "segedit/random.hpp"

namespace segedit {

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw std::invalid_argument("unknown schedule kind '" + s + "' (expected linear or cosine)");
}

NoiseSchedule make_schedule(int T, ScheduleKind kind) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1, got " + std::to_string(T));
  NoiseSchedule s;
  s.T = T;
  s.kind = kind;
  s.alpha_bar.assign(T + 1, 1.0);
  s.alpha.assign(T + 1, 1.0);
  if (kind == ScheduleKind::Linear) {
    constexpr int kTrain = 1000;
    const double lo = std::sqrt(0.00085), hi = std::sqrt(0.012);
    std::vector<double> abar(kTrain);
    double prod = 1.0;
    for (int k = 0; k < kTrain; ++k) {
      const double r = lo + (hi - lo) * k / (kTrain - 1);
      prod *= 1.0 - r * r;
      abar[k] = prod;
    }
    if (T > kTrain) throw std::invalid_argument("make_schedule: linear schedule supports T <= 1000");
    for (int t = 1; t <= T; ++t) {
      const long idx = std::lround(static_cast<double>(t) * kTrain / T) - 1;
      s.alpha_bar[t] = abar[static_cast<std::size_t>(idx)];
    }
  } else {
    constexpr double off = 0.008;
    auto f = [&](double t) {
      const double c = std::cos(std::numbers::pi / 2.0 * (t / T + off) / (1.0 + 2.0 * off));
      return c * c;
    };
    const double f0 = f(0.0);
    for (int t = 1; t <= T; ++t) s.alpha_bar[t] = f(t) / f0;
  }
  for (int t = 1; t <= T; ++t) {
    s.alpha[t] = s.alpha_bar[t] / s.alpha_bar[t - 1];
    if (!(s.alpha[t] > 0.0 && s.alpha[t] < 1.0))
      throw std::logic_error("make_schedule: alpha out of (0,1) at t=" + std::to_string(t));
  }
  return s;
}

namespace {

void check_t(int t, const NoiseSchedule& s, int lo, const char* what) {
  if (t < lo || t > s.T)
    throw std::invalid_argument(std::string(what) + ": t=" + std::to_string(t) + " outside [" + std::to_string(lo) +
                                ", " + std::to_string(s.T) + "]");
}

}  // namespace

Latent forward_diffuse(const Latent& z0, int t, const Latent& noise, const NoiseSchedule& s) {
  require_same_shape(z0, noise, "forward_diffuse");
  check_t(t, s, 0, "forward_diffuse");
  const double a = std::sqrt(s.abar(t)), b = std::sqrt(1.0 - s.abar(t));
  Latent out(z0.rows, z0.cols);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * z0.v[i] + b * noise.v[i];
  return out;
}

Latent ddim_step(const Latent& zt, const Latent& eps, int t, const NoiseSchedule& s) {
  require_same_shape(zt, eps, "ddim_step");
  check_t(t, s, 1, "ddim_step");
  const double at = s.abar(t), ap = s.abar(t - 1);
  const double sa = std::sqrt(at), sb = std::sqrt(1.0 - at);
  const double pa = std::sqrt(ap), pb = std::sqrt(1.0 - ap);
  Latent out(zt.rows, zt.cols);
  for (std::size_t i = 0; i < out.v.size(); ++i) {
    const double x0 = (zt.v[i] - sb * eps.v[i]) / sa;
    out.v[i] = pa * x0 + pb * eps.v[i];
  }
  return out;
}

Latent ddim_invert_step(const Latent& z_prev, const Latent& eps, int t, const NoiseSchedule& s) {
  require_same_shape(z_prev, eps, "ddim_invert_step");
  check_t(t, s, 1, "ddim_invert_step");
  const double at = s.abar(t), ap = s.abar(t - 1);
  const double ratio = std::sqrt(at / ap);
  const double coef = std::sqrt(at) * (std::sqrt(1.0 / at - 1.0) - std::sqrt(1.0 / ap - 1.0));
  Latent out(z_prev.rows, z_prev.cols);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = ratio * z_prev.v[i] + coef * eps.v[i];
  return out;
}

std::vector<Latent> ddim_invert(const Latent& z0, const Denoiser& d, const SampleContext& ctx,
                                const NoiseSchedule& s) {
  std::vector<Latent> traj;
  traj.reserve(s.T + 1);
  traj.push_back(z0);
  for (int t = 1; t <= s.T; ++t) {
    DenoiseRequest req{&traj.back(), t, ctx.tokens, ctx.structure, nullptr};
    const DenoiseOutput out = d.denoise(req);
    Latent next = ddim_invert_step(traj.back(), out.eps, t, s);
    if (!all_finite(next)) throw std::runtime_error("ddim_invert: non-finite latent at step " + std::to_string(t));
    traj.push_back(std::move(next));
  }
  return traj;
}

Latent ddim_sample(const Latent& zT, const Denoiser& d, const SampleContext& ctx, const NoiseSchedule& s) {
  Latent z = zT;
  for (int t = s.T; t >= 1; --t) {
    DenoiseRequest req{&z, t, ctx.tokens, ctx.structure, nullptr};
    z = ddim_step(z, d.denoise(req).eps, t, s);
    if (!all_finite(z)) throw std::runtime_error("ddim_sample: non-finite latent at step " + std::to_string(t));
  }
  return z;
}

// ---- LinearDenoiser -------------------------------------------------------

LinearDenoiser::LinearDenoiser(Mat A, Mat b, int positions, int channels, std::uint64_t attention_seed)
    : A_(std::move(A)), b_(std::move(b)), positions_(positions), channels_(channels), seed_(attention_seed) {
  const int n = positions * channels;
  if (positions <= 0 || channels <= 0) throw std::invalid_argument("LinearDenoiser: bad latent shape");
  if (A_.rows != n || A_.cols != n) throw std::invalid_argument("LinearDenoiser: A must be n x n");
  if (b_.rows != 1 || b_.cols != n) throw std::invalid_argument("LinearDenoiser: b must be 1 x n");
  if (!all_finite(A_) || !all_finite(b_)) throw std::invalid_argument("LinearDenoiser: non-finite parameters");
}

LinearDenoiser LinearDenoiser::zero(int positions, int channels) {
  const int n = positions * channels;
  return LinearDenoiser(Mat(n, n), Mat(1, n), positions, channels);
}

std::vector<double> LinearDenoiser::token_weight(int token) const {
  Rng rng(derive_seed(seed_, "linear-attn", static_cast<std::uint64_t>(token)));
  std::vector<double> w(channels_);
  for (double& x : w) x = rng.normal(0.0, 1.0);
  return w;
}

double LinearDenoiser::token_bias(int token) const {
  Rng rng(derive_seed(seed_, "linear-attn-bias", static_cast<std::uint64_t>(token)));
  return rng.normal(0.0, 0.5);
}

Mat LinearDenoiser::attention(const Latent& z, std::span<const int> tokens) const {
  const int n = static_cast<int>(tokens.size());
  if (n == 0) throw std::invalid_argument("LinearDenoiser: empty token sequence");
  Mat logits(z.rows, n);
  for (int j = 0; j < n; ++j) {
    const auto w = token_weight(tokens[j]);
    const double c = token_bias(tokens[j]);
    for (int p = 0; p < z.rows; ++p) {
      double acc = c;
      for (int k = 0; k < channels_; ++k) acc += w[k] * z(p, k);
      logits(p, j) = acc;
    }
  }
  Mat out;
  kernels::softmax_rows(logits, out);
  return out;
}

DenoiseOutput LinearDenoiser::denoise(const DenoiseRequest& req) const {
  const Latent& z = *req.z;
  if (z.rows != positions_ || z.cols != channels_) throw std::invalid_argument("LinearDenoiser: latent shape mismatch");
  DenoiseOutput out;
  out.eps = Latent(z.rows, z.cols);
  const int n = positions_ * channels_;
  for (int i = 0; i < n; ++i) {
    double acc = b_.v[i];
    const double* row = A_.v.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) acc += row[j] * z.v[j];
    out.eps.v[i] = acc;
  }
  CrossAttention ca;
  ca.heads.push_back(attention(z, req.tokens));
  ca.mean = ca.heads.front();
  out.cross_attn.emplace("up0", std::move(ca));
  return out;
}

AttentionGradient LinearDenoiser::attention_gradient(const DenoiseRequest& req, const std::string& layer,
                                                     const AttentionObjective& objective) const {
  if (layer != "up0") throw std::invalid_argument("LinearDenoiser: no cross-attention layer '" + layer + "'");
  const Latent& z = *req.z;
  AttentionGradient g;
  g.map = attention(z, req.tokens);
  Mat dmap(g.map.rows, g.map.cols);
  g.value = objective(g.map, &dmap);
  const int n = g.map.cols;
  std::vector<std::vector<double>> w(n);
  for (int j = 0; j < n; ++j) w[j] = token_weight(req.tokens[j]);
  // Softmax backward per position, then through the linear logits.
  g.grad = Latent(z.rows, z.cols);
  for (int p = 0; p < z.rows; ++p) {
    double dot = 0.0;
    for (int j = 0; j < n; ++j) dot += dmap(p, j) * g.map(p, j);
    for (int j = 0; j < n; ++j) {
      const double dlogit = g.map(p, j) * (dmap(p, j) - dot);
      for (int k = 0; k < channels_; ++k) g.grad(p, k) += dlogit * w[j][k];
    }
  }
  return g;
}

// ---- codec ------------------------------------------------------------------

LatentShape latent_shape_for(int image_height, int image_width, int factor) {
  if (factor < 1 || image_height % factor != 0 || image_width % factor != 0)
    throw std::invalid_argument("latent_shape_for: image size must be divisible by the latent factor");
  return {image_height / factor, image_width / factor, 3};
}

Latent encode_image(const Image& image, int factor) {
  const LatentShape ls = latent_shape_for(image.height, image.width, factor);
  Latent z(ls.positions(), 3);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const int p = (y / factor) * ls.width + x / factor;
      const Rgb c = image.at(y, x);
      for (int k = 0; k < 3; ++k) z(p, k) += c[k] * inv;
    }
  for (double& v : z.v) v = 2.0 * v - 1.0;
  return z;
}

Image decode_latent(const Latent& z, const LatentShape& shape, int image_height, int image_width) {
  if (z.rows != shape.positions() || z.cols != 3) throw std::invalid_argument("decode_latent: latent shape mismatch");
  Image img(image_height, image_width);
  const double sy = static_cast<double>(shape.height) / image_height;
  const double sx = static_cast<double>(shape.width) / image_width;
  for (int y = 0; y < image_height; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), shape.height - 1);
    const int y1 = std::min(y0 + 1, shape.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < image_width; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), shape.width - 1);
      const int x1 = std::min(x0 + 1, shape.width - 1);
      const double wx = fx - x0;
      Rgb c;
      for (int k = 0; k < 3; ++k) {
        const double v = (1 - wy) * ((1 - wx) * z(y0 * shape.width + x0, k) + wx * z(y0 * shape.width + x1, k)) +
                         wy * ((1 - wx) * z(y1 * shape.width + x0, k) + wx * z(y1 * shape.width + x1, k));
        c[k] = std::clamp((v + 1.0) / 2.0, 0.0, 1.0);
      }
      img.set(y, x, c);
    }
  }
  return img;
}

Mat structure_condition(const SegLabel& label, int factor) {
  const LatentShape ls = latent_shape_for(label.height, label.width, factor);
  Mat s(ls.positions(), label.num_classes);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < label.height; ++y)
    for (int x = 0; x < label.width; ++x) {
      const int g = label.at(y, x);
      if (g == kIgnoreIndex) continue;
      if (g >= label.num_classes) throw std::out_of_range("structure_condition: label out of range");
      s((y / factor) * ls.width + x / factor, g) += inv;
    }
  return s;
}

Mat downsample_mask(const BinaryMask& mask, int factor) {
  const LatentShape ls = latent_shape_for(mask.height, mask.width, factor);
  Mat m(ls.positions(), 1);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(y, x)) m((y / factor) * ls.width + x / factor, 0) += inv;
  return m;
}

}  // namespace segedit
