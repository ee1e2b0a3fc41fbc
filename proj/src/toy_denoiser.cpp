#include "segedit/toy_denoiser.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace segedit {

nlohmann::json ToyDenoiserConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"num_classes", num_classes}, {"hidden", hidden},
          {"key_dim", key_dim},       {"up_heads", up_heads},       {"T", T},
          {"schedule", to_string(schedule)}, {"sigma_data", sigma_data}, {"init_seed", init_seed}};
}

ToyDenoiserConfig ToyDenoiserConfig::from_json(const nlohmann::json& j) {
  ToyDenoiserConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.hidden = j.value("hidden", c.hidden);
  c.key_dim = j.value("key_dim", c.key_dim);
  c.up_heads = j.value("up_heads", c.up_heads);
  c.T = j.value("T", c.T);
  c.schedule = schedule_kind_from_string(j.value("schedule", std::string("linear")));
  c.sigma_data = j.value("sigma_data", c.sigma_data);
  c.init_seed = j.value("init_seed", c.init_seed);
  return c;
}

namespace {

constexpr int kTimeDim = 8;

Mat time_embedding(int t, int T) {
  Mat e(1, kTimeDim);
  const double u = static_cast<double>(t) / T;
  const int freqs[4] = {1, 2, 4, 8};
  for (int k = 0; k < 4; ++k) {
    e(0, k) = std::sin(std::numbers::pi * freqs[k] * u);
    e(0, 4 + k) = std::cos(std::numbers::pi * freqs[k] * u);
  }
  return e;
}

struct Precond {
  double a, s, c_in, c_skip, c_out;
};

Precond precondition(double abar, double sd) {
  Precond p;
  p.a = std::sqrt(abar);
  p.s = std::sqrt(1.0 - abar);
  const double den = p.a * p.a * sd * sd + p.s * p.s;
  p.c_in = 1.0 / std::sqrt(den);
  p.c_skip = p.a * sd * sd / den;
  p.c_out = p.s * sd / std::sqrt(den);
  return p;
}

}  // namespace

struct ToyDenoiser::Forward {
  ad::Var z, h_in, a_down, a_self, a_up_mean, F;
  std::vector<ad::Var> a_up;
  std::map<std::string, ad::Var> params;
  Precond pc{};
};

ToyDenoiser::ToyDenoiser(const ToyDenoiserConfig& cfg) : cfg_(cfg), schedule_(make_schedule(cfg.T, cfg.schedule)) {
  if (cfg.vocab_size <= 0 || cfg.num_classes <= 0) throw std::invalid_argument("ToyDenoiser: empty vocabulary or classes");
  if (cfg.hidden <= 0 || cfg.key_dim <= 0 || cfg.up_heads <= 0) throw std::invalid_argument("ToyDenoiser: bad widths");
  Rng rng(derive_seed(cfg.init_seed, "toy-init"));
  const int d = cfg.hidden, dk = cfg.key_dim;
  auto uniform = [&](const std::string& name, int rows, int cols, int fan_in) {
    Mat m(rows, cols);
    const double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& x : m.v) x = rng.uniform(-r, r);
    params_[name] = std::move(m);
  };
  Mat emb(cfg.vocab_size, d);
  for (double& x : emb.v) x = rng.normal(0.0, 0.5);
  params_["embed"] = std::move(emb);
  uniform("in.W", 3, d, 3);
  uniform("in.b", 1, d, 3);
  uniform("in.Wt", kTimeDim, d, kTimeDim);
  uniform("in.Wc", cfg.num_classes, d, cfg.num_classes);
  for (const char* blk : {"down0", "mid"}) {
    const std::string b = blk;
    uniform(b + ".q", d, dk, d);
    uniform(b + ".k", d, dk, d);
    uniform(b + ".v", d, d, d);
    uniform(b + ".o", d, d, d);
  }
  for (int i = 0; i < cfg.up_heads; ++i) {
    const std::string h = std::to_string(i);
    uniform("up0.q" + h, d, dk, d);
    uniform("up0.k" + h, d, dk, d);
    uniform("up0.v" + h, d, d, d);
  }
  uniform("up0.o", d, d, d);
  uniform("out.W1", d, d, d);
  uniform("out.b1", 1, d, d);
  uniform("out.W2", d, 3, d);
  uniform("out.b2", 1, 3, d);
}

std::size_t ToyDenoiser::num_parameters() const {
  std::size_t n = 0;
  for (const auto& [k, m] : params_) n += m.size();
  return n;
}

ToyDenoiser::Forward ToyDenoiser::run(ad::Tape& tp, const DenoiseRequest& req, bool params_trainable,
                                      bool z_trainable) const {
  const Latent& z = *req.z;
  if (z.cols != 3 || z.rows <= 0) throw std::invalid_argument("ToyDenoiser: latent must be (h*w) x 3");
  if (req.t < 1 || req.t > cfg_.T) throw std::invalid_argument("ToyDenoiser: t out of range");
  if (req.tokens.empty()) throw std::invalid_argument("ToyDenoiser: empty token sequence");
  for (int tok : req.tokens)
    if (tok < 0 || tok >= cfg_.vocab_size)
      throw std::out_of_range("ToyDenoiser: token id " + std::to_string(tok) + " outside vocabulary");

  Forward f;
  for (const auto& [name, m] : params_) f.params[name] = params_trainable ? tp.leaf(m, true) : tp.constant(m);
  auto P = [&](const std::string& n) { return f.params.at(n); };
  const int positions = z.rows;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg_.key_dim));

  f.pc = precondition(schedule_.abar(req.t), cfg_.sigma_data);
  ad::Var zv = z_trainable ? tp.leaf(z, true) : tp.constant(z);
  f.z = zv;
  Mat S = req.structure ? *req.structure : Mat(positions, cfg_.num_classes);
  if (S.rows != positions || S.cols != cfg_.num_classes)
    throw std::invalid_argument("ToyDenoiser: structure condition must be (h*w) x num_classes");

  ad::Var pre = tp.matmul(tp.scale(zv, f.pc.c_in), P("in.W"));
  pre = tp.add_row(pre, P("in.b"));
  pre = tp.add_row(pre, tp.matmul(tp.constant(time_embedding(req.t, cfg_.T)), P("in.Wt")));
  pre = tp.add(pre, tp.matmul(tp.constant(std::move(S)), P("in.Wc")));
  ad::Var h = tp.silu(pre);

  const Overrides* ov = req.overrides;
  if (ov) {
    if (auto it = ov->features.find("in"); it != ov->features.end()) {
      require_same_shape(it->second, tp.value(h), "ToyDenoiser feature override 'in'");
      h = tp.constant(it->second);
    }
  }
  f.h_in = h;

  ad::Var e = tp.gather_rows(P("embed"), req.tokens);

  // down0
  {
    ad::Var q = tp.matmul(h, P("down0.q"));
    ad::Var k = tp.matmul(e, P("down0.k"));
    f.a_down = tp.softmax_rows(tp.scale(tp.matmul_bt(q, k), inv_sqrt_dk));
    ad::Var v = tp.matmul(e, P("down0.v"));
    h = tp.add(h, tp.matmul(tp.matmul(f.a_down, v), P("down0.o")));
  }
  // mid
  {
    ad::Var q = tp.matmul(h, P("mid.q"));
    ad::Var k = tp.matmul(h, P("mid.k"));
    f.a_self = tp.softmax_rows(tp.scale(tp.matmul_bt(q, k), inv_sqrt_dk));
    if (ov) {
      if (auto it = ov->self_attn.find("mid"); it != ov->self_attn.end()) {
        require_same_shape(it->second, tp.value(f.a_self), "ToyDenoiser self-attention override 'mid'");
        f.a_self = tp.constant(it->second);
      }
    }
    ad::Var v = tp.matmul(h, P("mid.v"));
    h = tp.add(h, tp.matmul(tp.matmul(f.a_self, v), P("mid.o")));
  }
  // up0
  {
    ad::Var mixed;
    for (int i = 0; i < cfg_.up_heads; ++i) {
      const std::string s = std::to_string(i);
      ad::Var q = tp.matmul(h, P("up0.q" + s));
      ad::Var k = tp.matmul(e, P("up0.k" + s));
      ad::Var a = tp.softmax_rows(tp.scale(tp.matmul_bt(q, k), inv_sqrt_dk));
      f.a_up.push_back(a);
      ad::Var out = tp.matmul(a, tp.matmul(e, P("up0.v" + s)));
      mixed = mixed.valid() ? tp.add(mixed, out) : out;
      f.a_up_mean = f.a_up_mean.valid() ? tp.add(f.a_up_mean, a) : a;
    }
    f.a_up_mean = tp.scale(f.a_up_mean, 1.0 / cfg_.up_heads);
    h = tp.add(h, tp.matmul(mixed, P("up0.o")));
  }
  ad::Var o1 = tp.silu(tp.add_row(tp.matmul(h, P("out.W1")), P("out.b1")));
  f.F = tp.add_row(tp.matmul(o1, P("out.W2")), P("out.b2"));
  return f;
}

DenoiseOutput ToyDenoiser::denoise(const DenoiseRequest& req) const {
  ad::Tape tp;
  const Forward f = run(tp, req, false, false);
  const Latent& z = *req.z;
  const Mat& F = tp.value(f.F);
  DenoiseOutput out;
  out.eps = Latent(z.rows, z.cols);
  for (std::size_t i = 0; i < z.v.size(); ++i) {
    const double x0 = f.pc.c_skip * z.v[i] + f.pc.c_out * F.v[i];
    out.eps.v[i] = (z.v[i] - f.pc.a * x0) / f.pc.s;
  }
  out.features["in"] = tp.value(f.h_in);
  out.self_attn["mid"] = tp.value(f.a_self);
  CrossAttention down;
  down.heads.push_back(tp.value(f.a_down));
  down.mean = down.heads.front();
  out.cross_attn["down0"] = std::move(down);
  CrossAttention up;
  for (ad::Var a : f.a_up) up.heads.push_back(tp.value(a));
  up.mean = tp.value(f.a_up_mean);
  out.cross_attn["up0"] = std::move(up);
  return out;
}

AttentionGradient ToyDenoiser::attention_gradient(const DenoiseRequest& req, const std::string& layer,
                                                  const AttentionObjective& objective) const {
  if (layer != "up0" && layer != "down0")
    throw std::invalid_argument("ToyDenoiser: no cross-attention layer '" + layer + "'");
  ad::Tape tp;
  const Forward f = run(tp, req, false, true);
  const ad::Var map = layer == "up0" ? f.a_up_mean : f.a_down;
  AttentionGradient g;
  g.map = tp.value(map);
  Mat dmap(g.map.rows, g.map.cols);
  g.value = objective(g.map, &dmap);
  tp.grad(map) = dmap;
  tp.backward_seeded();
  g.grad = tp.grad(f.z);
  return g;
}

double ToyDenoiser::loss(const Latent& z0, const Mat& structure, std::span<const int> tokens, int t,
                         const Latent& noise) const {
  const Latent zt = forward_diffuse(z0, t, noise, schedule_);
  ad::Tape tp;
  DenoiseRequest req{&zt, t, tokens, &structure, nullptr};
  const Forward f = run(tp, req, false, false);
  Mat target(z0.rows, z0.cols);
  for (std::size_t i = 0; i < target.v.size(); ++i)
    target.v[i] = (z0.v[i] - f.pc.c_skip * zt.v[i]) / f.pc.c_out;
  return tp.value(tp.mse(f.F, target)).v[0];
}

TrainReport ToyDenoiser::train(const std::vector<TrainingExample>& data, const ToyTrainOptions& opts) {
  if (opts.steps < 0 || opts.batch < 1) throw std::invalid_argument("train: bad step/batch counts");
  if (opts.steps > 0 && data.empty()) throw std::invalid_argument("train: empty dataset");
  Rng rng(derive_seed(opts.seed, "toy-train"));
  std::map<std::string, Mat> m1, m2;
  for (const auto& [k, v] : params_) {
    m1[k] = Mat(v.rows, v.cols);
    m2[k] = Mat(v.rows, v.cols);
  }
  TrainReport report;
  for (int step = 1; step <= opts.steps; ++step) {
    ad::Tape tp;
    ad::Var total;
    std::map<std::string, ad::Var> pvars;
    for (int b = 0; b < opts.batch; ++b) {
      const TrainingExample& base = data[static_cast<std::size_t>(rng.integer(0, static_cast<int>(data.size()) - 1))];
      TrainingExample ex = opts.augment ? opts.augment(base, rng) : base;
      const Latent z0 = encode_image(ex.image);
      const Mat S = structure_condition(ex.label);
      const int t = rng.integer(1, cfg_.T);
      Latent noise(z0.rows, z0.cols);
      for (double& x : noise.v) x = rng.normal();
      const Latent zt = forward_diffuse(z0, t, noise, schedule_);
      DenoiseRequest req{&zt, t, ex.tokens, &S, nullptr};
      Forward f = run(tp, req, true, false);
      Mat target(z0.rows, z0.cols);
      for (std::size_t i = 0; i < target.v.size(); ++i)
        target.v[i] = (z0.v[i] - f.pc.c_skip * zt.v[i]) / f.pc.c_out;
      ad::Var l = tp.mse(f.F, target);
      total = total.valid() ? tp.add(total, l) : l;
      // Each sample gets its own parameter leaves; gradients are summed below.
      for (const auto& [k, v] : f.params) pvars[k + "#" + std::to_string(b)] = v;
    }
    total = tp.scale(total, 1.0 / opts.batch);
    const double lv = tp.value(total).v[0];
    if (!std::isfinite(lv))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) + " (lr " +
                               std::to_string(opts.lr) + ")");
    tp.backward(total);
    const double bc1 = 1.0 - std::pow(opts.beta1, step);
    const double bc2 = 1.0 - std::pow(opts.beta2, step);
    for (auto& [k, w] : params_) {
      Mat g(w.rows, w.cols);
      for (int b = 0; b < opts.batch; ++b) {
        const Mat& gb = tp.grad(pvars.at(k + "#" + std::to_string(b)));
        for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += gb.v[i];
      }
      Mat& a = m1[k];
      Mat& s = m2[k];
      for (std::size_t i = 0; i < w.v.size(); ++i) {
        a.v[i] = opts.beta1 * a.v[i] + (1.0 - opts.beta1) * g.v[i];
        s.v[i] = opts.beta2 * s.v[i] + (1.0 - opts.beta2) * g.v[i] * g.v[i];
        w.v[i] -= opts.lr * (a.v[i] / bc1) / (std::sqrt(s.v[i] / bc2) + opts.adam_eps);
      }
    }
    report.final_batch_loss = lv;
    if (opts.log_every > 0 && (step % opts.log_every == 0 || step == 1)) {
      report.losses.emplace_back(step, lv);
      spdlog::debug("toy denoiser step {} loss {:.5f}", step, lv);
    }
  }
  return report;
}

double evaluate_loss(const ToyDenoiser& d, const std::vector<TrainingExample>& data, int draws, std::uint64_t seed) {
  if (data.empty() || draws <= 0) throw std::invalid_argument("evaluate_loss: nothing to evaluate");
  Rng rng(derive_seed(seed, "toy-eval"));
  double total = 0.0;
  for (int i = 0; i < draws; ++i) {
    const TrainingExample& ex = data[static_cast<std::size_t>(rng.integer(0, static_cast<int>(data.size()) - 1))];
    const Latent z0 = encode_image(ex.image);
    const Mat S = structure_condition(ex.label);
    const int t = rng.integer(1, d.config().T);
    Latent noise(z0.rows, z0.cols);
    for (double& x : noise.v) x = rng.normal();
    total += d.loss(z0, S, ex.tokens, t, noise);
  }
  return total / draws;
}

// ---- checkpoint container ----------------------------------------------------

namespace {
constexpr char kMagic[] = "SEGEDITCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;
}  // namespace

void ToyDenoiser::save(const std::filesystem::path& path) const {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : params_) {
    tensors.push_back({{"name", name}, {"rows", m.rows}, {"cols", m.cols}, {"offset", offset}});
    offset += m.size();
  }
  const std::string header = nlohmann::json{{"config", cfg_.to_json()}, {"tensors", tensors}}.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, kMagicLen);
  const std::uint64_t len = header.size();
  unsigned char lenbytes[8];
  for (int i = 0; i < 8; ++i) lenbytes[i] = static_cast<unsigned char>(len >> (8 * i));
  out.write(reinterpret_cast<const char*>(lenbytes), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, m] : params_)
    out.write(reinterpret_cast<const char*>(m.v.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write on checkpoint " + path.string());
}

ToyDenoiser ToyDenoiser::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw std::runtime_error(path.string() + ": not a segedit checkpoint");
  unsigned char lenbytes[8];
  in.read(reinterpret_cast<char*>(lenbytes), 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lenbytes[i]) << (8 * i);
  if (!in || len > (1u << 26)) throw std::runtime_error(path.string() + ": corrupt checkpoint header");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  const nlohmann::json j = nlohmann::json::parse(header);
  ToyDenoiser d(ToyDenoiserConfig::from_json(j.at("config")));
  std::vector<double> blob;
  {
    const auto here = in.tellg();
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg() - here);
    in.seekg(here);
    if (bytes % sizeof(double) != 0) throw std::runtime_error(path.string() + ": truncated tensor data");
    blob.resize(bytes / sizeof(double));
    in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
  }
  std::size_t loaded = 0;
  for (const auto& t : j.at("tensors")) {
    const std::string name = t.at("name");
    auto it = d.params_.find(name);
    if (it == d.params_.end()) throw std::runtime_error(path.string() + ": unexpected tensor '" + name + "'");
    const int rows = t.at("rows"), cols = t.at("cols");
    const std::uint64_t off = t.at("offset");
    if (rows != it->second.rows || cols != it->second.cols)
      throw std::runtime_error(path.string() + ": shape mismatch for tensor '" + name + "'");
    if (off + it->second.size() > blob.size()) throw std::runtime_error(path.string() + ": truncated tensor data");
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(off),
              blob.begin() + static_cast<std::ptrdiff_t>(off + it->second.size()), it->second.v.begin());
    ++loaded;
  }
  if (loaded != d.params_.size()) throw std::runtime_error(path.string() + ": missing tensors");
  return d;
}

}  // namespace segedit
