#pragma once

// Small conditional denoiser standing in for a pretrained latent diffusion
// UNet. Layout, on (h*w) x C latents with hidden width d:
//
//   in    : h = silu(c_in z Win + temb Wt + S Wc + b_in)      feature "in"
//   down0 : h += softmax(h Wq (E Wk)^T / sqrt(dk)) E Wv Wo    cross-attention
//   mid   : h += softmax(h Wq (h Wk)^T / sqrt(dk)) h Wv Wo    self-attention "mid"
//   up0   : h += sum_heads softmax(...) E Wv_i Wo             cross-attention, guidance layer
//   out   : F = silu(h Wo1 + b1) Wo2 + b2
//
// with EDM-style preconditioning around F (sigma_data = 0.5): the network
// predicts a scaled x0 residual and eps is recovered from it. S is the soft
// one-hot label map (the structure branch) and E the token embedding table.

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "segedit/autodiff.hpp"
#include "segedit/diffusion.hpp"
#include "segedit/random.hpp"

namespace segedit {

struct ToyDenoiserConfig {
  int vocab_size = 0;
  int num_classes = 0;
  int hidden = 32;
  int key_dim = 16;
  int up_heads = 2;
  int T = 50;
  ScheduleKind schedule = ScheduleKind::Linear;
  double sigma_data = 0.5;
  std::uint64_t init_seed = 0;

  nlohmann::json to_json() const;
  static ToyDenoiserConfig from_json(const nlohmann::json& j);
};

struct TrainingExample {
  Image image;
  SegLabel label;
  std::vector<int> tokens;
};

struct ToyTrainOptions {
  int steps = 3000;
  int batch = 4;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int log_every = 500;
  // Optional per-draw transformation of a training example (e.g. recoloring).
  using Augment = std::function<TrainingExample(const TrainingExample&, Rng&)>;
  Augment augment;
};

struct TrainReport {
  std::vector<std::pair<int, double>> losses;  // (step, batch loss)
  double final_batch_loss = 0.0;
};

class ToyDenoiser final : public Denoiser {
 public:
  explicit ToyDenoiser(const ToyDenoiserConfig& cfg);

  DenoiseOutput denoise(const DenoiseRequest& req) const override;
  AttentionGradient attention_gradient(const DenoiseRequest& req, const std::string& layer,
                                       const AttentionObjective& objective) const override;
  std::string name() const override { return "toy"; }
  std::string guidance_layer() const override { return "up0"; }
  int channels() const override { return 3; }

  const ToyDenoiserConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const std::map<std::string, Mat>& parameters() const { return params_; }
  std::map<std::string, Mat>& parameters() { return params_; }
  std::size_t num_parameters() const;

  // Preconditioned regression loss mean((F - target)^2) for one noised example.
  double loss(const Latent& z0, const Mat& structure, std::span<const int> tokens, int t, const Latent& noise) const;

  TrainReport train(const std::vector<TrainingExample>& data, const ToyTrainOptions& opts);

  // Container: "SEGEDITCKPT1\n", u64 little-endian header length, JSON header
  // {config, tensors: [{name, rows, cols, offset}]}, then raw float64 data.
  void save(const std::filesystem::path& path) const;
  static ToyDenoiser load(const std::filesystem::path& path);

 private:
  struct Forward;
  Forward run(ad::Tape& tape, const DenoiseRequest& req, bool params_trainable, bool z_trainable) const;

  ToyDenoiserConfig cfg_;
  NoiseSchedule schedule_;
  std::map<std::string, Mat> params_;
};

// Mean loss over `draws` seeded (example, t, noise) draws.
double evaluate_loss(const ToyDenoiser& d, const std::vector<TrainingExample>& data, int draws, std::uint64_t seed);

}  // namespace segedit
