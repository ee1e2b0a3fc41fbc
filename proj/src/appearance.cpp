#include "segedit/appearance.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace segedit {

void EditConfig::validate() const {
  if (T < 1) throw std::invalid_argument("EditConfig: T must be >= 1");
  if (theta_f < 0 || theta_f > 1 || theta_a < 0 || theta_a > 1)
    throw std::invalid_argument("EditConfig: theta values must lie in [0, 1]");
  if (!(gamma > 0)) throw std::invalid_argument("EditConfig: gamma must be positive");
  if (eta < 0) throw std::invalid_argument("EditConfig: eta must be non-negative");
  if (max_guidance_iters < 1) throw std::invalid_argument("EditConfig: max_guidance_iters must be >= 1");
}

nlohmann::json EditConfig::to_json() const {
  return {{"T", T},
          {"schedule", to_string(schedule)},
          {"theta_f", theta_f},
          {"theta_a", theta_a},
          {"gamma", std::isinf(gamma) ? nlohmann::json("inf") : nlohmann::json(gamma)},
          {"eta", eta},
          {"max_guidance_iters", max_guidance_iters},
          {"guidance_layer", guidance_layer},
          {"exclude_special_tokens", exclude_special_tokens}};
}

EditConfig EditConfig::from_json(const nlohmann::json& j) {
  EditConfig c;
  c.T = j.value("T", c.T);
  c.schedule = schedule_kind_from_string(j.value("schedule", to_string(c.schedule)));
  c.theta_f = j.value("theta_f", c.theta_f);
  c.theta_a = j.value("theta_a", c.theta_a);
  if (j.contains("gamma"))
    c.gamma = j["gamma"].is_string() ? std::numeric_limits<double>::infinity() : j["gamma"].get<double>();
  c.eta = j.value("eta", c.eta);
  c.max_guidance_iters = j.value("max_guidance_iters", c.max_guidance_iters);
  c.guidance_layer = j.value("guidance_layer", c.guidance_layer);
  c.exclude_special_tokens = j.value("exclude_special_tokens", c.exclude_special_tokens);
  c.validate();
  return c;
}

int injected_step_count(double theta, int T) { return static_cast<int>(std::floor(theta * T + 1e-9)); }

bool injection_active(int t, double theta, int T) {
  if (t < 1 || t > T) throw std::invalid_argument("injection_active: t out of range");
  return T - t < injected_step_count(theta, T);
}

namespace {

FeatureMap inject(const FeatureMap& recon, const FeatureMap& edit, bool active, const char* what) {
  if (recon.size() != edit.size()) throw std::invalid_argument(std::string(what) + ": block sets differ");
  for (const auto& [k, m] : recon) {
    auto it = edit.find(k);
    if (it == edit.end()) throw std::invalid_argument(std::string(what) + ": missing block '" + k + "'");
    require_same_shape(m, it->second, what);
  }
  return active ? recon : edit;
}

}  // namespace

FeatureMap inject_features(const FeatureMap& recon, const FeatureMap& edit, int t, const EditConfig& cfg) {
  return inject(recon, edit, injection_active(t, cfg.theta_f, cfg.T), "inject_features");
}

FeatureMap inject_self_attention(const FeatureMap& recon, const FeatureMap& edit, int t, const EditConfig& cfg) {
  return inject(recon, edit, injection_active(t, cfg.theta_a, cfg.T), "inject_self_attention");
}

LatentMask latent_mask(const BinaryMask& mask, int factor) {
  LatentMask m;
  m.area = downsample_mask(mask, factor);
  m.binary = Mat(m.area.rows, 1);
  for (int p = 0; p < m.area.rows; ++p)
    if (m.area(p, 0) >= 0.5) {
      m.binary(p, 0) = 1.0;
      ++m.count;
    }
  m.width = mask.width / factor;
  return m;
}

double mask_energy(const Mat& attn, const std::vector<int>& edit_cols, const LatentMask& mask, bool exclude_first,
                   Mat* grad) {
  if (mask.count <= 0) throw std::invalid_argument("mask_energy: empty mask");
  if (mask.area.rows != attn.rows) throw std::invalid_argument("mask_energy: mask/attention size mismatch");
  if (edit_cols.empty()) throw std::invalid_argument("mask_energy: no edit tokens");
  const int first = exclude_first ? 1 : 0;
  for (int j : edit_cols)
    if (j < first || j >= attn.cols) throw std::out_of_range("mask_energy: edit token index out of range");
  const double inv = 1.0 / mask.count;
  std::vector<double> num(attn.rows, 0.0), den(attn.rows, 0.0);
  double inner = 0.0;
  for (int p = 0; p < attn.rows; ++p) {
    const double m = mask.area(p, 0);
    if (m == 0.0) continue;
    for (int j : edit_cols) num[p] += attn(p, j);
    for (int n = first; n < attn.cols; ++n) den[p] += attn(p, n);
    if (!(den[p] > 0.0)) {
      const int w = mask.width > 0 ? mask.width : 1;
      throw std::invalid_argument("mask_energy: zero total attention at latent cell (" + std::to_string(p / w) + ", " +
                                  std::to_string(p % w) + ")");
    }
    inner += m * num[p] / den[p];
  }
  inner *= inv;
  const double L = (1.0 - inner) * (1.0 - inner);
  if (grad) {
    *grad = Mat(attn.rows, attn.cols);
    const double outer = -2.0 * (1.0 - inner) * inv;
    std::vector<char> is_edit(attn.cols, 0);
    for (int j : edit_cols) is_edit[j] = 1;
    for (int p = 0; p < attn.rows; ++p) {
      const double m = mask.area(p, 0);
      if (m == 0.0) continue;
      const double d = den[p];
      for (int n = first; n < attn.cols; ++n)
        (*grad)(p, n) = outer * m * ((is_edit[n] ? 1.0 / d : 0.0) - num[p] / (d * d));
      // Excluded columns only enter through the numerator.
      for (int n = 0; n < first; ++n)
        if (is_edit[n]) (*grad)(p, n) = outer * m / d;
    }
  }
  return L;
}

Latent guided_update(const Latent& z, int t, const GuidanceContext& ctx, const EditConfig& cfg, GuidanceStep* log) {
  const std::string layer = cfg.guidance_layer.empty() ? ctx.denoiser->guidance_layer() : cfg.guidance_layer;
  AttentionObjective objective = [&](const Mat& map, Mat* g) {
    return mask_energy(map, ctx.edit_cols, *ctx.mask, cfg.exclude_special_tokens, g);
  };
  Latent cur = z;
  GuidanceStep st;
  st.t = t;
  for (int iter = 0;; ++iter) {
    DenoiseRequest req{&cur, t, ctx.tokens, ctx.structure, nullptr};
    const AttentionGradient g = ctx.denoiser->attention_gradient(req, layer, objective);
    st.L = g.value;
    if (g.value <= cfg.gamma) {
      st.converged = true;
      break;
    }
    if (iter == cfg.max_guidance_iters) break;
    if (!all_finite(g.grad)) throw std::runtime_error("guided_update: non-finite gradient at t=" + std::to_string(t));
    for (std::size_t i = 0; i < cur.v.size(); ++i) cur.v[i] -= cfg.eta * g.grad.v[i];
    ++st.iters;
  }
  if (cfg.eta == 0.0 && !st.converged) spdlog::warn("guided_update: eta = 0, guidance cannot make progress at t={}", t);
  if (log) *log = st;
  return cur;
}

Latent blend_latents(const Latent& z_edit, const Latent& z_recon, const Mat& mask) {
  require_same_shape(z_edit, z_recon, "blend_latents");
  const bool per_cell = mask.cols == 1 && mask.rows == z_edit.rows;
  if (!per_cell && !mask.same_shape(z_edit)) throw std::invalid_argument("blend_latents: mask shape mismatch");
  Latent out(z_edit.rows, z_edit.cols);
  for (int p = 0; p < z_edit.rows; ++p)
    for (int c = 0; c < z_edit.cols; ++c) {
      const double m = per_cell ? mask(p, 0) : mask(p, c);
      const double e = z_edit(p, c), r = z_recon(p, c);
      out(p, c) = m == 1.0 ? e : m == 0.0 ? r : r + m * (e - r);
    }
  return out;
}

AppearanceInputs appearance_inputs(const EditRequest& req, const Tokenizer& tok) {
  AppearanceInputs in;
  in.source_tokens = tok.encode_words(req.source_words);
  in.target_tokens = tok.encode_words(req.target_words);
  for (int i : req.edit_indices) in.edit_cols.push_back(i + 1);
  in.local = is_local(req.kind);
  return in;
}

AppearanceResult edit_appearance(const Image& image, const SegLabel& label, const BinaryMask& mask,
                                 const AppearanceInputs& in, const Denoiser& denoiser, const EditConfig& cfg) {
  cfg.validate();
  const NoiseSchedule sched = make_schedule(cfg.T, cfg.schedule);
  const LatentShape ls = latent_shape_for(image.height, image.width);
  const Latent z0 = encode_image(image);
  const Mat S = structure_condition(label);
  const LatentMask lm = latent_mask(mask);
  if (in.local && lm.count == 0) throw std::invalid_argument("edit_appearance: object mask vanishes at latent resolution");

  const auto traj = ddim_invert(z0, denoiser, {in.source_tokens, &S}, sched);
  Latent zr = traj.back();
  Latent ze = zr;
  AppearanceResult res;
  GuidanceContext gctx{&denoiser, in.target_tokens, &S, in.edit_cols, &lm};
  for (int t = sched.T; t >= 1; --t) {
    try {
      const DenoiseOutput outr = denoiser.denoise({&zr, t, in.source_tokens, &S, nullptr});
      if (in.local && !in.edit_cols.empty()) {  // no edit tokens: nothing to guide
        GuidanceStep st;
        ze = guided_update(ze, t, gctx, cfg, &st);
        res.steps.push_back(st);
        res.converged = res.converged && st.converged;
      }
      Overrides ov;
      if (injection_active(t, cfg.theta_f, cfg.T)) ov.features = outr.features;
      if (injection_active(t, cfg.theta_a, cfg.T)) ov.self_attn = outr.self_attn;
      const DenoiseOutput oute = denoiser.denoise({&ze, t, in.target_tokens, &S, ov.empty() ? nullptr : &ov});
      zr = ddim_step(zr, outr.eps, t, sched);
      ze = ddim_step(ze, oute.eps, t, sched);
      if (in.local) {
        ze = blend_latents(ze, zr, lm.binary);
        for (int p = 0; p < ze.rows && res.outside_mask_equal; ++p)
          if (lm.binary(p, 0) == 0.0)
            for (int c = 0; c < ze.cols; ++c)
              if (ze(p, c) != zr(p, c)) res.outside_mask_equal = false;
      }
    } catch (const BackendError&) {
      throw;
    } catch (const std::exception& e) {
      throw std::runtime_error("edit_appearance: step t=" + std::to_string(t) + ": " + e.what());
    }
    if (!all_finite(ze) || !all_finite(zr))
      throw std::runtime_error("edit_appearance: non-finite latent at t=" + std::to_string(t));
  }
  res.z_edit = ze;
  res.z_recon = zr;
  res.edited = decode_latent(ze, ls, image.height, image.width);
  res.recon = decode_latent(zr, ls, image.height, image.width);
  return res;
}

Image reconstruct(const Image& image, const SegLabel& label, std::span<const int> tokens, const Denoiser& denoiser,
                  const NoiseSchedule& schedule) {
  const LatentShape ls = latent_shape_for(image.height, image.width);
  const Mat S = structure_condition(label);
  const auto traj = ddim_invert(encode_image(image), denoiser, {tokens, &S}, schedule);
  const Latent z = ddim_sample(traj.back(), denoiser, {tokens, &S}, schedule);
  return decode_latent(z, ls, image.height, image.width);
}

nlohmann::json appearance_log(const std::string& sample_id, const EditRequest& req, const AppearanceResult& r) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.steps) steps.push_back({{"t", s.t}, {"L", s.L}, {"guidance_iters", s.iters}});
  return {{"sample_id", sample_id},
          {"attribute", to_string(req.kind)},
          {"value", req.value},
          {"P", req.source},
          {"P_star", req.target},
          {"S_prime", req.edit_indices},
          {"steps", steps},
          {"converged", r.converged},
          {"outside_mask_equal", r.outside_mask_equal}};
}

}  // namespace segedit
