#include "segedit/bench.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "segedit/error.hpp"
#include "segedit/io.hpp"
#include "segedit/kernels.hpp"
#include "segedit/random.hpp"

namespace segedit {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- variations -------------------------------------------------------------------

Variation parse_variation(const std::string& s0) {
  const std::string s = lowercase(s0);
  if (s.empty()) throw std::invalid_argument("empty variation name");
  const auto plus = s.find('+');
  if (plus != std::string::npos) {
    const Variation a = parse_variation(s.substr(0, plus));
    const Variation g = parse_variation(s.substr(plus + 1));
    if (a.kind != Variation::Kind::Appearance || g.kind != Variation::Kind::Geometry)
      throw std::invalid_argument("combined variation must be <appearance>+<geometry>: '" + s0 + "'");
    Variation v = a;
    v.kind = Variation::Kind::Combined;
    v.geometry = g.geometry;
    v.level = g.level;
    v.name = s;
    return v;
  }
  Variation v;
  v.name = s;
  const auto us = s.find('_');
  if (us == std::string::npos) {
    v.kind = Variation::Kind::Appearance;
    v.attribute = attribute_kind_from_string(s);
    return v;
  }
  v.kind = Variation::Kind::Geometry;
  v.geometry = geometry_kind_from_string(s.substr(0, us));
  std::size_t used = 0;
  const std::string lv = s.substr(us + 1);
  try {
    v.level = std::stod(lv, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != lv.size() || !(v.level > 0.0 && v.level < 1.0))
    throw std::invalid_argument("geometry level must be a number in (0, 1): '" + s0 + "'");
  return v;
}

namespace {

std::string kind_name(Variation::Kind k) {
  switch (k) {
    case Variation::Kind::Appearance: return "appearance";
    case Variation::Kind::Geometry: return "geometry";
    case Variation::Kind::Combined: return "combined";
  }
  return "?";
}

}  // namespace

// ---- config ---------------------------------------------------------------------

json BenchConfig::to_json() const {
  json j;
  j["name"] = name;
  j["num_scenes"] = num_scenes;
  j["seed"] = seed;
  j["scenes"] = {{"width", scenes.width},
                 {"height", scenes.height},
                 {"random_color_probability", scenes.random_color_probability},
                 {"color_jitter", scenes.color_jitter},
                 {"second_object_probability", scenes.second_object_probability},
                 {"min_extent_fraction", scenes.min_extent_fraction},
                 {"max_extent_fraction", scenes.max_extent_fraction}};
  j["variations"] = variations;
  j["backend"] = backend;
  j["inpainter"] = inpainter;
  j["denoiser"] = denoiser.to_json();
  j["train"] = {{"steps", train_steps}, {"batch", train_batch}, {"lr", train_lr}, {"recolor_augment", recolor_augment}};
  j["checkpoint"] = checkpoint;
  j["edit"] = edit.to_json();
  j["filter"] = filter;
  j["embedder_seed"] = embedder_seed;
  j["surrogate_temperature"] = surrogate_temperature;
  j["llm_url"] = llm_url;
  j["vlm_url"] = vlm_url;
  j["benchmark_dir"] = benchmark_dir;
  return j;
}

BenchConfig BenchConfig::from_json(const json& j) {
  static const std::vector<std::string> known{"name",      "num_scenes", "seed",     "scenes",  "variations",
                                              "backend",   "inpainter",  "denoiser", "train",   "checkpoint",
                                              "edit",      "filter",     "embedder_seed", "surrogate_temperature", "llm_url", "vlm_url",
                                              "benchmark_dir"};
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw std::invalid_argument("unknown config key '" + k + "'");
  BenchConfig c;
  c.name = j.value("name", c.name);
  c.num_scenes = j.value("num_scenes", c.num_scenes);
  c.seed = j.value("seed", c.seed);
  if (j.contains("scenes")) {
    const json& s = j["scenes"];
    c.scenes.width = s.value("width", c.scenes.width);
    c.scenes.height = s.value("height", c.scenes.height);
    c.scenes.random_color_probability = s.value("random_color_probability", c.scenes.random_color_probability);
    c.scenes.color_jitter = s.value("color_jitter", c.scenes.color_jitter);
    c.scenes.second_object_probability = s.value("second_object_probability", c.scenes.second_object_probability);
    c.scenes.min_extent_fraction = s.value("min_extent_fraction", c.scenes.min_extent_fraction);
    c.scenes.max_extent_fraction = s.value("max_extent_fraction", c.scenes.max_extent_fraction);
  }
  if (j.contains("variations")) c.variations = j["variations"].get<std::vector<std::string>>();
  c.backend = j.value("backend", c.backend);
  c.inpainter = j.value("inpainter", c.inpainter);
  if (j.contains("denoiser")) c.denoiser = ToyDenoiserConfig::from_json(j["denoiser"]);
  if (j.contains("train")) {
    const json& t = j["train"];
    c.train_steps = t.value("steps", c.train_steps);
    c.train_batch = t.value("batch", c.train_batch);
    c.train_lr = t.value("lr", c.train_lr);
    c.recolor_augment = t.value("recolor_augment", c.recolor_augment);
  }
  c.checkpoint = j.value("checkpoint", c.checkpoint);
  if (j.contains("edit")) c.edit = EditConfig::from_json(j["edit"]);
  if (j.contains("filter")) c.filter = j["filter"].get<FilterThresholds>();
  c.embedder_seed = j.value("embedder_seed", c.embedder_seed);
  c.surrogate_temperature = j.value("surrogate_temperature", c.surrogate_temperature);
  c.llm_url = j.value("llm_url", c.llm_url);
  c.vlm_url = j.value("vlm_url", c.vlm_url);
  c.benchmark_dir = j.value("benchmark_dir", c.benchmark_dir);
  c.validate();
  return c;
}

void BenchConfig::validate() const {
  if (!(surrogate_temperature > 0.0)) throw std::invalid_argument("config: surrogate_temperature must be positive");
  if (name.empty() || name.find('/') != std::string::npos) throw std::invalid_argument("config: bad benchmark name");
  if (num_scenes <= 0) throw std::invalid_argument("config: num_scenes must be positive");
  if (backend != "toy" && backend != "linear") throw std::invalid_argument("config: backend must be toy or linear");
  if (inpainter != "diffusion" && inpainter != "prototype")
    throw std::invalid_argument("config: inpainter must be diffusion or prototype");
  if (train_steps < 0 || train_batch <= 0 || !(train_lr > 0)) throw std::invalid_argument("config: bad training options");
  std::vector<std::string> seen;
  for (const auto& v : variations) {
    const std::string n = parse_variation(v).name;
    if (n == "recon" || n == "original") throw std::invalid_argument("config: reserved variation name '" + n + "'");
    if (std::find(seen.begin(), seen.end(), n) != seen.end())
      throw std::invalid_argument("config: duplicate variation '" + n + "'");
    seen.push_back(n);
  }
  edit.validate();
  filter.validate();
}

std::string BenchConfig::hash() const { return io::sha256_hex(to_json().dump()); }

// ---- selection and metrics -----------------------------------------------------------

std::vector<SalientObject> select_salient(const std::vector<Scene>& scenes, const World& world) {
  std::vector<SalientObject> out;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const SegLabel& g = scenes[i].label;
    std::vector<std::int64_t> counts(std::max(g.num_classes, world.num_classes()), 0);
    for (auto c : g.classes)
      if (c != kIgnoreIndex && c < counts.size()) ++counts[c];
    int best = -1;
    for (int c = 0; c < static_cast<int>(counts.size()); ++c) {
      if (c < world.num_classes() && world.classes[c].background) continue;
      if (counts[c] > 0 && (best < 0 || counts[c] > counts[best])) best = c;
    }
    if (best < 0) continue;
    const double frac = static_cast<double>(counts[best]) / static_cast<double>(g.classes.size());
    if (!(frac > 0.20)) continue;
    out.push_back({i, best, class_mask(g, best), frac});
  }
  return out;
}

MiouAccumulator::MiouAccumulator(int num_classes)
    : k_(num_classes), table_(static_cast<std::size_t>(num_classes) * num_classes, 0), missed_(num_classes, 0) {
  if (num_classes <= 0) throw std::invalid_argument("MiouAccumulator: num_classes must be positive");
}

void MiouAccumulator::add(const SegLabel& pred, const SegLabel& gt, const BinaryMask* eval_mask) {
  if (pred.height != gt.height || pred.width != gt.width) throw std::invalid_argument("miou: pred/gt shape mismatch");
  if (eval_mask && (eval_mask->height != gt.height || eval_mask->width != gt.width))
    throw std::invalid_argument("miou: eval mask shape mismatch");
  kernels::ConfusionArgs a;
  a.pred = pred.classes;
  a.gt = gt.classes;
  if (eval_mask) a.mask = eval_mask->bits;
  a.num_classes = k_;
  a.ignore = kIgnoreIndex;
  std::vector<std::int64_t> miss;
  const auto t = kernels::parallel::confusion(a, &miss);
  for (std::size_t i = 0; i < t.size(); ++i) table_[i] += t[i];
  for (int i = 0; i < k_; ++i) missed_[i] += miss[i];
}

void MiouAccumulator::merge(const MiouAccumulator& o) {
  if (o.k_ != k_) throw std::invalid_argument("MiouAccumulator: class count mismatch");
  for (std::size_t i = 0; i < table_.size(); ++i) table_[i] += o.table_[i];
  for (int i = 0; i < k_; ++i) missed_[i] += o.missed_[i];
}

MiouResult MiouAccumulator::result() const {
  MiouResult r;
  r.per_class.assign(k_, std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  int present = 0;
  for (int g = 0; g < k_; ++g) {
    std::int64_t row = missed_[g], col = 0;
    for (int q = 0; q < k_; ++q) {
      row += table_[static_cast<std::size_t>(g) * k_ + q];
      col += table_[static_cast<std::size_t>(q) * k_ + g];
    }
    r.pixels += row;
    if (row == 0) continue;
    const std::int64_t tp = table_[static_cast<std::size_t>(g) * k_ + g];
    const double iou = 100.0 * static_cast<double>(tp) / static_cast<double>(row + col - tp);
    r.per_class[g] = iou;
    sum += iou;
    ++present;
  }
  if (present == 0) throw std::invalid_argument("miou: no pixels counted");
  r.mean = sum / present;
  return r;
}

MiouResult miou(const SegLabel& pred, const SegLabel& gt, int num_classes, const BinaryMask* eval_mask) {
  MiouAccumulator acc(num_classes);
  acc.add(pred, gt, eval_mask);
  return acc.result();
}

double round2(double x) { return std::round(x * 100.0) / 100.0; }

RobustnessReport robustness_report(const std::map<std::string, SubsetScore>& subsets, const std::string& baseline,
                                   double baseline_miou) {
  if (subsets.empty()) throw std::invalid_argument("robustness_report: no edited subsets");
  if (!(baseline_miou > 0.0)) throw std::invalid_argument("robustness_report: baseline mIoU must be positive");
  RobustnessReport r;
  r.baseline = baseline;
  r.baseline_miou = baseline_miou;
  r.subsets = subsets;
  double s = 0;
  for (const auto& [_, v] : subsets) s += v.miou;
  r.rmiou = s / static_cast<double>(subsets.size());
  r.mr = r.rmiou / baseline_miou;
  return r;
}

namespace {

json per_class_json(const std::vector<double>& pc, const std::vector<std::string>& names) {
  json j = json::object();
  for (std::size_t g = 0; g < pc.size(); ++g) {
    const std::string n = g < names.size() ? names[g] : std::to_string(g);
    j[n] = std::isnan(pc[g]) ? json() : json(pc[g]);
  }
  return j;
}

}  // namespace

json RobustnessReport::to_json(const std::vector<std::string>& class_names) const {
  json subs = json::object();
  for (const auto& [n, s] : subsets)
    subs[n] = {{"miou", s.miou}, {"per_class", per_class_json(s.per_class, class_names)}, {"samples", s.samples}};
  return {{"model", model},       {"benchmark", benchmark},     {"baseline", baseline},
          {"baseline_miou", baseline_miou}, {"subsets", subs}, {"rmiou", rmiou},
          {"mr", mr},             {"eval_region", eval_region}, {"config_hash", config_hash}};
}

// ---- backends ---------------------------------------------------------------------

Backends BackendBundle::view() const {
  return {denoiser.get(), tokenizer.get(), inpainter.get(), embedder.get(), surrogate.get(), llm.get(), vlm.get()};
}

std::vector<Scene> generate_scenes(const BenchConfig& cfg, const World& world) {
  std::vector<Scene> out(cfg.num_scenes);
  std::string failure;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < cfg.num_scenes; ++i) {
    try {
      const SceneSpec spec = random_scene_spec(world, derive_seed(cfg.seed, "scene", i), cfg.scenes);
      out[i] = generate_scene(spec, world);
      std::ostringstream id;
      id << "scene_" << std::setw(4) << std::setfill('0') << i;
      out[i].id = id.str();
    } catch (const std::exception& e) {
#pragma omp critical
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw std::runtime_error("generate_scenes: " + failure);
  return out;
}

namespace {

bool caption_has_word(const std::vector<std::string>& words, const std::string& value) {
  // Multi-word values count as present when their first word is.
  const auto first = split_words(value);
  return !first.empty() && std::find(words.begin(), words.end(), first.front()) != words.end();
}

int subject_class(const PromptParts& parts, const World& world) {
  const std::string subj = parts.subject_text();
  for (int c = 0; c < world.num_classes(); ++c)
    if (world.classes[c].name == subj) return c;
  return -1;
}

}  // namespace

ToyTrainOptions::Augment recolor_augmenter(const World& world, const Tokenizer& tok, AttributeVocabulary vocab) {
  return [&world, &tok, vocab = std::move(vocab)](const TrainingExample& ex, Rng& rng) {
    if (!rng.bernoulli(0.5)) return ex;
    std::vector<std::string> words;
    for (std::size_t i = 1; i < ex.tokens.size(); ++i) words.push_back(tok.vocabulary()[ex.tokens[i]]);
    const PromptParts parts = decompose_caption(join_words(words));
    const int cls = subject_class(parts, world);
    const std::string col = vocab.color[rng.integer(0, static_cast<int>(vocab.color.size()) - 1)];
    if (cls < 0 || caption_has_word(words, col) || !world.has_color(col)) return ex;
    Rgb base = world.color(col);
    for (double& v : base) v = std::clamp(v + rng.uniform(-0.04, 0.04), 0.0, 1.0);
    TrainingExample out = ex;
    for (std::size_t p = 0; p < ex.label.classes.size(); ++p)
      if (ex.label.classes[p] == cls)
        for (int k = 0; k < 3; ++k) out.image.pixels[p * 3 + k] = base[k];
    out.tokens = tok.encode_words(edit_attribute(parts, AttributeKind::Color, col, vocab).target_words);
    return out;
  };
}

ToyDenoiser train_toy_denoiser(const BenchConfig& cfg, const std::vector<Scene>& scenes, const World& world,
                               const Tokenizer& tok, TrainReport* report) {
  std::vector<TrainingExample> data;
  data.reserve(scenes.size());
  for (const auto& s : scenes) data.push_back({s.image, s.label, tok.encode(s.caption)});
  ToyDenoiserConfig dc = cfg.denoiser;
  dc.vocab_size = tok.size();
  dc.num_classes = world.num_classes();
  dc.T = cfg.edit.T;
  dc.schedule = cfg.edit.schedule;
  ToyDenoiser d(dc);
  ToyTrainOptions to;
  to.steps = cfg.train_steps;
  to.batch = cfg.train_batch;
  to.lr = cfg.train_lr;
  to.seed = derive_seed(cfg.seed, "train");
  if (cfg.recolor_augment) to.augment = recolor_augmenter(world, tok);
  TrainReport r = d.train(data, to);
  if (report) *report = std::move(r);
  return d;
}

BackendBundle build_backends(const BenchConfig& cfg, const std::vector<Scene>& scenes, const World& world) {
  BackendBundle b;
  b.tokenizer = std::make_unique<Tokenizer>(Tokenizer::builtin());
  std::vector<LabeledImage> originals;
  for (const auto& s : scenes) originals.push_back({&s.image, &s.label});
  b.surrogate = std::make_unique<PrototypeSegmenter>(fit_prototype_segmenter(originals, cfg.surrogate_temperature));
  if (cfg.backend == "linear") {
    const LatentShape ls = latent_shape_for(cfg.scenes.height, cfg.scenes.width);
    b.denoiser = std::make_unique<LinearDenoiser>(LinearDenoiser::zero(ls.positions(), ls.channels));
  } else if (!cfg.checkpoint.empty()) {
    if (!fs::exists(cfg.checkpoint)) throw BackendError("denoiser checkpoint not found: " + cfg.checkpoint);
    b.denoiser = std::make_unique<ToyDenoiser>(ToyDenoiser::load(cfg.checkpoint));
  } else {
    TrainReport r;
    b.denoiser = std::make_unique<ToyDenoiser>(train_toy_denoiser(cfg, scenes, world, *b.tokenizer, &r));
    b.training = std::move(r);
  }
  if (cfg.inpainter == "diffusion")
    b.inpainter = std::make_unique<DiffusionInpainter>(*b.denoiser, *b.tokenizer,
                                                       make_schedule(cfg.edit.T, cfg.edit.schedule));
  else
    b.inpainter = std::make_unique<PrototypeFillInpainter>(b.surrogate->prototypes());
  b.embedder = std::make_unique<ConceptEmbedder>(world, cfg.embedder_seed);
  if (!cfg.llm_url.empty()) b.llm = std::make_unique<HttpLanguageClient>(HttpLanguageClient::Options{cfg.llm_url});
  if (!cfg.vlm_url.empty()) {
    HttpLanguageClient::Options o{cfg.vlm_url};
    o.path = "/v1/repaint";
    b.vlm = std::make_unique<HttpLanguageClient>(o);
  }
  return b;
}

// ---- generation ----------------------------------------------------------------------

namespace {

struct RawRecord {
  std::string subset;
  Image image;
  SegLabel label;
  BinaryMask mask;
  json meta;
};

struct SampleWork {
  std::vector<RawRecord> records;
  std::vector<json> logs;
  std::vector<json> failures;
};

double outside_leakage(const Image& a, const Image& b, const BinaryMask& mask) {
  double s = 0;
  std::int64_t n = 0;
  for (std::size_t p = 0; p < mask.bits.size(); ++p) {
    if (mask.bits[p]) continue;
    for (int k = 0; k < 3; ++k) s += std::abs(a.pixels[p * 3 + k] - b.pixels[p * 3 + k]);
    n += 3;
  }
  return n ? s / n : 0.0;
}

EditRequest choose_edit(const BenchConfig& cfg, const Backends& be, const std::string& caption, AttributeKind kind,
                        std::uint64_t seed) {
  if (be.llm) {
    const LlmEditResult r = llm_edit(*be.llm, caption, kind);
    if (!r.accepted.empty()) return r.accepted.front();
    spdlog::warn("language model gave no valid edit for '{}', falling back to rules", caption);
  }
  (void)cfg;
  const AttributeVocabulary vocab;
  const auto words = split_words(lowercase(caption));
  std::vector<std::string> options;
  for (const auto& v : vocab.values(kind))
    if (!caption_has_word(words, v)) options.push_back(v);
  if (options.empty()) throw std::runtime_error("no " + to_string(kind) + " value differs from the caption");
  Rng rng(seed);
  return edit_attribute(decompose_caption(caption), kind, options[rng.integer(0, static_cast<int>(options.size()) - 1)],
                        vocab);
}

struct AppearanceOut {
  EditRequest req;
  AppearanceResult res;
};

AppearanceOut run_appearance(const BenchConfig& cfg, const Backends& be, const Image& image, const SegLabel& label,
                             const BinaryMask& mask, const std::string& caption, AttributeKind kind,
                             std::uint64_t seed) {
  EditRequest req = choose_edit(cfg, be, caption, kind, seed);
  AppearanceResult res = edit_appearance(image, label, mask, appearance_inputs(req, *be.tokenizer), *be.denoiser, cfg.edit);
  return {std::move(req), std::move(res)};
}

void write_record_files(const fs::path& dir, const std::string& id, const Image& image, const SegLabel& label,
                        const BinaryMask& mask, const json& meta) {
  io::write_png_rgb(dir / (id + ".png"), image);
  io::write_png_index(dir / (id + "_label.png"), label);
  io::write_png_mask(dir / (id + "_mask.png"), mask);
  io::write_json(dir / (id + ".json"), meta);
}

std::string lines(const std::vector<json>& v) {
  std::string s;
  for (const auto& j : v) s += j.dump() + "\n";
  return s;
}

}  // namespace

GenerationSummary generate_benchmark(const BenchConfig& cfg, const std::vector<Scene>& scenes, const World& world,
                                     const Backends& be, const fs::path& dir) {
  if (!be.denoiser || !be.tokenizer || !be.inpainter) throw std::invalid_argument("generate_benchmark: backends not wired");
  cfg.validate();
  std::vector<Variation> plan;
  for (const auto& v : cfg.variations) plan.push_back(parse_variation(v));
  const std::vector<SalientObject> salient = select_salient(scenes, world);
  const auto class_names = world.class_names();
  const NoiseSchedule schedule = make_schedule(cfg.edit.T, cfg.edit.schedule);

  for (const char* sub : {"raw", "original", "logs"}) fs::remove_all(dir / sub);
  fs::create_directories(dir / "original");
  fs::create_directories(dir / "logs");
  fs::create_directories(dir / "raw" / "recon");
  for (const auto& v : plan) fs::create_directories(dir / "raw" / v.name);

  std::vector<SampleWork> work(salient.size());
  std::string backend_failure;
  const auto n = static_cast<std::int64_t>(salient.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    const SalientObject& so = salient[i];
    const Scene& sc = scenes[so.index];
    SampleWork& w = work[i];
    const std::string obj_name = class_names[so.class_id];
    auto fail = [&](const std::string& subset, const std::string& msg) {
      spdlog::warn("{} [{}]: {}", sc.id, subset, msg);
      w.failures.push_back({{"sample_id", sc.id}, {"subset", subset}, {"error", msg}});
    };
    try {
      Image recon;
      try {
        recon = reconstruct(sc.image, sc.label, be.tokenizer->encode(sc.caption), *be.denoiser, schedule);
        w.records.push_back({"recon", recon, sc.label, so.mask,
                             {{"sample_id", sc.id}, {"kind", "recon"}, {"P", sc.caption}, {"P_star", sc.caption}}});
      } catch (const BackendError&) {
        throw;
      } catch (const std::exception& e) {
        fail("recon", e.what());
      }
      for (const auto& v : plan) {
        try {
          const std::uint64_t vseed = derive_seed(cfg.seed, "variation:" + v.name, so.index);
          json meta = {{"sample_id", sc.id}, {"kind", kind_name(v.kind)}, {"P", sc.caption}, {"object", obj_name}};
          if (v.kind == Variation::Kind::Appearance) {
            auto out = run_appearance(cfg, be, sc.image, sc.label, so.mask, sc.caption, v.attribute, vseed);
            meta["P_star"] = out.req.target;
            meta["attribute"] = to_string(v.attribute);
            meta["value"] = out.req.value;
            meta["outside_mask_equal"] = out.res.outside_mask_equal;
            meta["converged"] = out.res.converged;
            if (!recon.pixels.empty()) meta["leakage"] = outside_leakage(out.res.edited, recon, so.mask);
            w.logs.push_back(appearance_log(sc.id, out.req, out.res));
            w.records.push_back({v.name, std::move(out.res.edited), sc.label, so.mask, std::move(meta)});
          } else {
            GeometryEditSpec gs{v.geometry, v.level, vseed};
            GeometryOptions go{obj_name, class_names, be.vlm, derive_seed(vseed, "inpaint")};
            GeometryResult g = edit_geometry(sc.image, sc.label, so.mask, gs, *be.inpainter, go);
            json glog = g.log(sc.id, gs);
            meta["geometry"] = glog;
            std::int64_t bad = 0;
            for (std::size_t p = 0; p < g.mask.bits.size(); ++p)
              if (g.mask.bits[p] && g.label.classes[p] != so.class_id) ++bad;
            meta["mask_label_consistent"] = bad == 0;
            if (v.kind == Variation::Kind::Combined) {
              auto out = run_appearance(cfg, be, g.image, g.label, g.mask, sc.caption, v.attribute, vseed);
              meta["P_star"] = out.req.target;
              meta["attribute"] = to_string(v.attribute);
              meta["value"] = out.req.value;
              meta["outside_mask_equal"] = out.res.outside_mask_equal;
              w.logs.push_back(appearance_log(sc.id, out.req, out.res));
              g.image = std::move(out.res.edited);
            } else {
              meta["P_star"] = sc.caption;
            }
            w.logs.push_back(glog);
            w.records.push_back({v.name, std::move(g.image), std::move(g.label), std::move(g.mask), std::move(meta)});
          }
        } catch (const BackendError&) {
          throw;
        } catch (const std::exception& e) {
          fail(v.name, e.what());
        }
      }
    } catch (const BackendError& e) {
#pragma omp critical
      if (backend_failure.empty()) backend_failure = e.what();
    }
  }
  if (!backend_failure.empty()) throw BackendError(backend_failure);

  // Single writer, sample order.
  GenerationSummary sum;
  json index = {{"samples", json::array()}, {"subsets", json::object()}, {"class_names", class_names}};
  index["subsets"]["recon"] = {{"kind", "recon"}, {"ids", json::array()}};
  for (const auto& v : plan) index["subsets"][v.name] = {{"kind", kind_name(v.kind)}, {"ids", json::array()}};
  std::vector<json> logs, failures;
  for (std::size_t i = 0; i < salient.size(); ++i) {
    const Scene& sc = scenes[salient[i].index];
    json meta = io::scene_metadata(sc);
    meta["salient_class"] = salient[i].class_id;
    meta["salient_area_fraction"] = salient[i].area_fraction;
    write_record_files(dir / "original", sc.id, sc.image, sc.label, salient[i].mask, meta);
    index["samples"].push_back(sc.id);
    for (const auto& r : work[i].records) {
      write_record_files(dir / "raw" / r.subset, sc.id, r.image, r.label, r.mask, r.meta);
      index["subsets"][r.subset]["ids"].push_back(sc.id);
      ++sum.generated[r.subset];
    }
    for (auto& l : work[i].logs) logs.push_back(std::move(l));
    for (auto& f : work[i].failures) failures.push_back(std::move(f));
  }
  sum.failures = static_cast<std::int64_t>(failures.size());
  io::write_json(dir / "raw" / "index.json", index);
  io::write_text(dir / "logs" / "edits.jsonl", lines(logs));
  io::write_text(dir / "logs" / "failures.jsonl", lines(failures));
  spdlog::info("generated {} salient samples ({} failures)", salient.size(), sum.failures);
  return sum;
}

// ---- filtering ---------------------------------------------------------------------

FilterSummary filter_benchmark(const BenchConfig& cfg, const Backends& backends, const fs::path& dir) {
  if (!backends.embedder) throw std::invalid_argument("filter_benchmark: no embedder");
  Backends be = backends;
  std::optional<PrototypeSegmenter> own;
  if (!be.surrogate) {
    own = fit_on_originals(dir, cfg.surrogate_temperature);
    be.surrogate = &*own;
  }
  const json index = io::read_json(dir / "raw" / "index.json");
  const auto class_names = index.at("class_names").get<std::vector<std::string>>();
  const int K = static_cast<int>(class_names.size());

  struct Item {
    std::string subset, id;
    Image image;
    SegLabel label;
    BinaryMask mask;
    json meta;
  };
  std::vector<Item> items;
  std::vector<std::string> subset_order;
  for (const auto& [name, s] : index.at("subsets").items()) subset_order.push_back(name);
  // recon first, then the plan in config order
  std::vector<std::string> ordered{"recon"};
  for (const auto& v : cfg.variations) {
    const std::string n = parse_variation(v).name;
    if (std::find(subset_order.begin(), subset_order.end(), n) != subset_order.end()) ordered.push_back(n);
  }
  for (const auto& name : subset_order)
    if (std::find(ordered.begin(), ordered.end(), name) == ordered.end()) ordered.push_back(name);
  for (const auto& name : ordered)
    for (const auto& id : index["subsets"][name]["ids"]) items.push_back({name, id.get<std::string>(), {}, {}, {}, {}});

  std::map<std::string, Image> originals;
  std::map<std::string, SegLabel> original_labels;
  for (const auto& id : index.at("samples")) {
    const std::string s = id.get<std::string>();
    originals[s] = io::read_png_rgb(dir / "original" / (s + ".png"));
    original_labels[s] = io::read_png_index(dir / "original" / (s + "_label.png"), K);
  }
  const auto ni = static_cast<std::int64_t>(items.size());
  std::string failure;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < ni; ++i) {
    try {
      Item& it = items[i];
      const fs::path base = dir / "raw" / it.subset;
      it.image = io::read_png_rgb(base / (it.id + ".png"));
      it.label = io::read_png_index(base / (it.id + "_label.png"), K);
      it.mask = io::read_png_mask(base / (it.id + "_mask.png"));
      it.meta = io::read_json(base / (it.id + ".json"));
    } catch (const std::exception& e) {
#pragma omp critical
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw std::runtime_error("filter_benchmark: " + failure);

  // per-class difficulty is measured on the real images, not the generations
  std::vector<LabeledImage> real;
  for (const auto& [id, im] : originals) real.push_back({&im, &original_labels.at(id)});
  const ClassLossProfile profile =
      real.empty() ? ClassLossProfile{std::vector<double>(K, 0.0), std::vector<std::int64_t>(K, 0), cfg.filter.alpha}
                   : class_loss_profile(real, *be.surrogate, class_names, cfg.filter.alpha, false);

  std::vector<FilterRecord> records(items.size());
  std::vector<SegLabel> filtered(items.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < ni; ++i) {
    try {
      const Item& it = items[i];
      const std::string P = it.meta.at("P"), Ps = it.meta.at("P_star");
      FilterRecord& r = records[i];
      r.sample_id = it.id;
      r.subset = it.subset;
      r.metrics = sample_filter(originals.at(it.id), it.image, P, Ps, *be.embedder, cfg.filter, P != Ps);
      const auto loss = loss_map(*be.surrogate, it.image, it.label);
      PixelFilterResult pf = pixel_filter(loss, it.label, profile);
      r.noisy_pixel_fraction = pf.noisy_fraction;
      r.discarded = region_discard(pf.noisy_fraction, cfg.filter);
      filtered[i] = std::move(pf.label);
    } catch (const std::exception& e) {
#pragma omp critical
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw std::runtime_error("filter_benchmark: " + failure);

  FilterSummary sum;
  json manifest;
  manifest["name"] = cfg.name;
  manifest["config"] = cfg.to_json();
  manifest["config_hash"] = cfg.hash();
  manifest["class_names"] = class_names;
  manifest["profile"] = {{"mean", profile.mean}, {"counts", profile.counts}, {"alpha", profile.alpha}};
  auto file_entry = [&](const fs::path& sub, const std::string& id) {
    json e = {{"id", id}};
    for (const char* suffix : {".png", "_label.png", "_mask.png", ".json"}) {
      const std::string rel = (sub / (id + suffix)).generic_string();
      e["files"][rel] = io::sha256_file(dir / rel);
    }
    return e;
  };
  manifest["original"] = json::array();
  for (const auto& id : index.at("samples")) manifest["original"].push_back(file_entry("original", id));
  manifest["subsets"] = json::object();
  for (const auto& name : ordered) {
    fs::remove_all(dir / name);
    fs::create_directories(dir / name);
    manifest["subsets"][name] = {{"kind", index["subsets"][name]["kind"]}, {"records", json::array()}};
    sum.kept[name] = 0;
    sum.rejected[name] = 0;
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Item& it = items[i];
    if (!records[i].kept()) {
      ++sum.rejected[it.subset];
      continue;
    }
    json meta = it.meta;
    meta["filter"] = records[i].to_json();
    write_record_files(dir / it.subset, it.id, it.image, filtered[i], it.mask, meta);
    manifest["subsets"][it.subset]["records"].push_back(file_entry(it.subset, it.id));
    ++sum.kept[it.subset];
  }
  io::write_text(dir / "logs" / "filter.jsonl", to_json_lines(records));
  manifest["logs"] = json::object();
  for (const char* l : {"logs/edits.jsonl", "logs/failures.jsonl", "logs/filter.jsonl"})
    if (fs::exists(dir / l)) manifest["logs"][l] = io::sha256_file(dir / l);
  io::write_json(dir / "manifest.json", manifest);
  sum.manifest_hash = manifest_hash(dir);
  for (const auto& name : ordered)
    spdlog::info("subset {}: kept {} rejected {}", name, sum.kept[name], sum.rejected[name]);
  return sum;
}

FilterSummary build_benchmark(const BenchConfig& cfg, const std::vector<Scene>& scenes, const World& world,
                              const Backends& backends, const fs::path& dir) {
  generate_benchmark(cfg, scenes, world, backends, dir);
  return filter_benchmark(cfg, backends, dir);
}

std::string manifest_hash(const fs::path& dir) { return io::sha256_file(dir / "manifest.json"); }

// ---- evaluation --------------------------------------------------------------------

PrototypeSegmenter fit_on_originals(const fs::path& dir, double temperature) {
  const json m = io::read_json(dir / "raw" / "index.json");
  const int K = static_cast<int>(m.at("class_names").size());
  std::vector<Image> images;
  std::vector<SegLabel> labels;
  for (const auto& e : m.at("samples")) {
    const std::string id = e;
    images.push_back(io::read_png_rgb(dir / "original" / (id + ".png")));
    labels.push_back(io::read_png_index(dir / "original" / (id + "_label.png"), K));
  }
  std::vector<LabeledImage> data;
  for (std::size_t i = 0; i < images.size(); ++i) data.push_back({&images[i], &labels[i]});
  return fit_prototype_segmenter(data, temperature);
}

namespace {

MiouAccumulator evaluate_subset(const Segmenter& seg, const fs::path& dir, const std::string& subset,
                                const json& records, int K, bool object_only) {
  const auto n = static_cast<std::int64_t>(records.size());
  std::vector<MiouAccumulator> parts(records.size(), MiouAccumulator(K));
  std::string failure;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      const std::string id = records[i].at("id");
      const Image img = io::read_png_rgb(dir / subset / (id + ".png"));
      const SegLabel gt = io::read_png_index(dir / subset / (id + "_label.png"), K);
      const SegLabel pred = predict_label(seg, img);
      if (object_only) {
        const BinaryMask m = io::read_png_mask(dir / subset / (id + "_mask.png"));
        parts[i].add(pred, gt, &m);
      } else {
        parts[i].add(pred, gt);
      }
    } catch (const std::exception& e) {
#pragma omp critical
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw std::runtime_error("evaluate " + subset + ": " + failure);
  MiouAccumulator acc(K);
  for (const auto& p : parts) acc.merge(p);
  return acc;
}

SubsetScore score(const MiouAccumulator& acc, const std::string& subset, std::int64_t samples) {
  if (samples == 0) throw std::runtime_error("subset '" + subset + "' is empty after filtering");
  const MiouResult r = acc.result();
  return {r.mean, r.per_class, samples};
}

}  // namespace

EvaluationResult evaluate_benchmark(const Segmenter& seg, const std::string& model, const fs::path& dir) {
  const json m = io::read_json(dir / "manifest.json");
  EvaluationResult ev;
  ev.class_names = m.at("class_names").get<std::vector<std::string>>();
  const int K = static_cast<int>(ev.class_names.size());
  if (seg.num_classes() != K) throw std::invalid_argument("evaluate_benchmark: segmenter class count mismatch");
  const std::string bench = m.at("name"), chash = m.at("config_hash");
  ev.original_full = evaluate_subset(seg, dir, "original", m.at("original"), K, false).result();
  ev.original_object = evaluate_subset(seg, dir, "original", m.at("original"), K, true).result();

  std::map<std::string, std::map<std::string, SubsetScore>> groups;
  std::optional<SubsetScore> recon;
  for (const auto& [name, s] : m.at("subsets").items()) {
    const std::string kind = s.at("kind");
    const auto& recs = s.at("records");
    const bool object_only = kind == "geometry" || kind == "combined";
    const SubsetScore sc =
        score(evaluate_subset(seg, dir, name, recs, K, object_only), name, static_cast<std::int64_t>(recs.size()));
    if (kind == "recon")
      recon = sc;
    else
      groups[kind][name] = sc;
  }
  for (const auto& [kind, subs] : groups) {
    RobustnessReport r;
    if (kind == "appearance") {
      if (!recon) throw std::runtime_error("evaluate_benchmark: appearance subsets need a recon baseline");
      r = robustness_report(subs, "recon", recon->miou);
      r.eval_region = "full";
    } else {
      r = robustness_report(subs, "original", ev.original_object.mean);
      r.eval_region = "object-only";
    }
    r.model = model;
    r.benchmark = bench;
    r.config_hash = chash;
    ev.groups[kind] = std::move(r);
  }
  if (recon && !ev.groups.count("appearance")) {
    // Recon alone still gets reported against the original.
    RobustnessReport r = robustness_report({{"recon", *recon}}, "original", ev.original_full.mean);
    r.model = model;
    r.benchmark = bench;
    r.config_hash = chash;
    ev.groups["recon"] = std::move(r);
  }
  for (const char* k : {"appearance", "geometry", "combined", "recon"})
    if (ev.groups.count(k)) {
      ev.primary = k;
      break;
    }
  if (ev.primary.empty()) throw std::runtime_error("evaluate_benchmark: no subsets to evaluate");
  ev.recon = recon;
  return ev;
}

json EvaluationResult::to_json() const {
  json j = groups.at(primary).to_json(class_names);
  j["primary_group"] = primary;
  j["reports"] = json::object();
  for (const auto& [k, r] : groups) j["reports"][k] = r.to_json(class_names);
  if (recon)
    j["recon"] = {{"miou", recon->miou}, {"per_class", per_class_json(recon->per_class, class_names)}, {"samples", recon->samples}};
  j["original"] = {{"full", {{"miou", original_full.mean}, {"per_class", per_class_json(original_full.per_class, class_names)}}},
                   {"object-only", {{"miou", original_object.mean}, {"per_class", per_class_json(original_object.per_class, class_names)}}}};
  return j;
}

std::string report_markdown(const json& report) {
  auto fmt2 = [](double v) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(2) << v;
    return o.str();
  };
  std::ostringstream md;
  md << "# Robustness report: " << report.value("benchmark", std::string("?")) << "\n\n";
  md << "Model: " << report.value("model", std::string("?")) << "  \n";
  md << "Config hash: `" << report.value("config_hash", std::string("")) << "`\n\n";
  const json reports = report.contains("reports") ? report["reports"] : json{{"primary", report}};
  for (const auto& [group, r] : reports.items()) {
    md << "## " << group << " (baseline: " << r.at("baseline").get<std::string>() << ", eval region: "
       << r.at("eval_region").get<std::string>() << ")\n\n";
    md << "| Model | " << r.at("baseline").get<std::string>();
    for (const auto& [name, _] : r.at("subsets").items()) md << " | " << name;
    md << " | RmIoU | mR |\n|---|---";
    for (std::size_t i = 0; i < r.at("subsets").size(); ++i) md << "|---";
    md << "|---|---|\n";
    md << "| " << r.at("model").get<std::string>() << " | " << fmt2(r.at("baseline_miou").get<double>());
    for (const auto& [_, s] : r.at("subsets").items()) md << " | " << fmt2(s.at("miou").get<double>());
    md << " | " << fmt2(r.at("rmiou").get<double>()) << " | " << fmt2(r.at("mr").get<double>()) << " |\n\n";
    md << "Per-class IoU:\n\n| Subset | samples";
    const auto& first = r.at("subsets").begin().value().at("per_class");
    for (const auto& [cls, _] : first.items()) md << " | " << cls;
    md << " |\n|---|---";
    for (std::size_t i = 0; i < first.size(); ++i) md << "|---";
    md << "|\n";
    for (const auto& [name, s] : r.at("subsets").items()) {
      md << "| " << name << " | " << s.value("samples", 0);
      for (const auto& [_, v] : s.at("per_class").items()) md << " | " << (v.is_null() ? std::string("-") : fmt2(v.get<double>()));
      md << " |\n";
    }
    md << "\n";
  }
  if (report.contains("original")) {
    md << "Original mIoU: full " << fmt2(report["original"]["full"]["miou"].get<double>()) << ", object-only "
       << fmt2(report["original"]["object-only"]["miou"].get<double>()) << "\n";
  }
  return md.str();
}

}  // namespace segedit
