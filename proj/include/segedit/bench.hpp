#pragma once

// Benchmark construction, filtering, evaluation and reporting.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "segedit/appearance.hpp"
#include "segedit/filtering.hpp"
#include "segedit/geometry.hpp"
#include "segedit/scenes.hpp"
#include "segedit/toy_denoiser.hpp"

namespace segedit {

// ---- configuration ---------------------------------------------------------------

struct Variation {
  enum class Kind { Appearance, Geometry, Combined };
  Kind kind = Kind::Appearance;
  AttributeKind attribute = AttributeKind::Color;  // Appearance, Combined
  GeometryKind geometry = GeometryKind::Size;      // Geometry, Combined
  double level = 0.0;
  std::string name;  // subset directory: color, size_0.2, color+size_0.2
};

// "color", "material", "weather", "style", "size_0.2", "position_0.4",
// "color+size_0.2".
Variation parse_variation(const std::string& s);

struct BenchConfig {
  std::string name = "toy";
  int num_scenes = 50;
  std::uint64_t seed = 7;
  RandomSceneOptions scenes;
  std::vector<std::string> variations{"color", "size_0.2", "size_0.4"};
  std::string backend = "toy";      // toy | linear
  std::string inpainter = "diffusion";  // diffusion | prototype
  ToyDenoiserConfig denoiser;
  int train_steps = 3000;
  int train_batch = 4;
  double train_lr = 3e-3;
  bool recolor_augment = true;
  std::string checkpoint;  // load instead of training when set
  EditConfig edit;
  FilterThresholds filter;
  std::uint64_t embedder_seed = 11;
  double surrogate_temperature = 0.3;
  std::string llm_url;  // empty: rule-based text edits
  std::string vlm_url;  // empty: background-name repaint prompt
  std::string benchmark_dir;  // bench eval input; default <out>

  nlohmann::json to_json() const;
  static BenchConfig from_json(const nlohmann::json& j);
  void validate() const;
  std::string hash() const;  // SHA-256 of the canonical JSON
};

// ---- selection and metrics -------------------------------------------------------

struct SalientObject {
  std::size_t index = 0;  // into the input dataset
  int class_id = 0;
  BinaryMask mask;
  double area_fraction = 0.0;
};

// Largest foreground class region per image; kept iff its area fraction > 0.20.
std::vector<SalientObject> select_salient(const std::vector<Scene>& scenes, const World& world);

struct MiouResult {
  std::vector<double> per_class;  // percent; NaN for classes absent from gt in the region
  double mean = 0.0;
  std::int64_t pixels = 0;
};

// Dataset-level accumulation of a confusion matrix.
class MiouAccumulator {
 public:
  explicit MiouAccumulator(int num_classes);
  void add(const SegLabel& pred, const SegLabel& gt, const BinaryMask* eval_mask = nullptr);
  void merge(const MiouAccumulator& o);
  MiouResult result() const;  // throws if nothing was counted
  const std::vector<std::int64_t>& table() const { return table_; }

 private:
  int k_;
  std::vector<std::int64_t> table_;  // gt x pred
  std::vector<std::int64_t> missed_;  // gt pixels predicted outside [0, k)
};

MiouResult miou(const SegLabel& pred, const SegLabel& gt, int num_classes, const BinaryMask* eval_mask = nullptr);

struct SubsetScore {
  double miou = 0.0;
  std::vector<double> per_class;
  std::int64_t samples = 0;
};

struct RobustnessReport {
  std::string model;
  std::string benchmark;
  std::string baseline;  // "recon" or "original"
  double baseline_miou = 0.0;
  std::map<std::string, SubsetScore> subsets;
  double rmiou = 0.0;
  double mr = 0.0;
  std::string eval_region = "full";
  std::string config_hash;
  nlohmann::json to_json(const std::vector<std::string>& class_names = {}) const;
};

// RmIoU = mean of the subset mIoUs, mR = RmIoU / baseline.
RobustnessReport robustness_report(const std::map<std::string, SubsetScore>& subsets, const std::string& baseline,
                                   double baseline_miou);
double round2(double x);

// ---- construction ---------------------------------------------------------------

struct Backends {
  const Denoiser* denoiser = nullptr;
  const Tokenizer* tokenizer = nullptr;
  const Inpainter* inpainter = nullptr;
  const Embedder* embedder = nullptr;
  const Segmenter* surrogate = nullptr;
  LanguageClient* llm = nullptr;
  LanguageClient* vlm = nullptr;
};

// Owns whatever build_backends had to create.
struct BackendBundle {
  std::unique_ptr<Tokenizer> tokenizer;
  std::unique_ptr<Denoiser> denoiser;
  std::unique_ptr<Inpainter> inpainter;
  std::unique_ptr<Embedder> embedder;
  std::unique_ptr<PrototypeSegmenter> surrogate;
  std::unique_ptr<LanguageClient> llm;
  std::unique_ptr<LanguageClient> vlm;
  std::optional<TrainReport> training;
  Backends view() const;
};

std::vector<Scene> generate_scenes(const BenchConfig& cfg, const World& world);

// With probability 0.5, recolors the caption subject's pixels to another
// palette color and rewrites the caption to match.
ToyTrainOptions::Augment recolor_augmenter(const World& world, const Tokenizer& tok, AttributeVocabulary vocab = {});

ToyDenoiser train_toy_denoiser(const BenchConfig& cfg, const std::vector<Scene>& scenes, const World& world,
                               const Tokenizer& tok, TrainReport* report = nullptr);

BackendBundle build_backends(const BenchConfig& cfg, const std::vector<Scene>& scenes, const World& world);

struct GenerationSummary {
  std::map<std::string, std::int64_t> generated;  // per subset
  std::int64_t failures = 0;
};

// Runs every planned edit on every salient sample and writes the unfiltered
// results under <dir>/raw/. Per-sample failures are logged and skipped;
// BackendError aborts.
GenerationSummary generate_benchmark(const BenchConfig& cfg, const std::vector<Scene>& scenes, const World& world,
                                     const Backends& backends, const std::filesystem::path& dir);

struct FilterSummary {
  std::map<std::string, std::int64_t> kept;
  std::map<std::string, std::int64_t> rejected;
  std::string manifest_hash;
};

// Filters <dir>/raw into the subset directories and writes manifest.json.
// Without an injected surrogate, a prototype segmenter is fit on the
// benchmark's originals.
FilterSummary filter_benchmark(const BenchConfig& cfg, const Backends& backends, const std::filesystem::path& dir);

FilterSummary build_benchmark(const BenchConfig& cfg, const std::vector<Scene>& scenes, const World& world,
                              const Backends& backends, const std::filesystem::path& dir);

std::string manifest_hash(const std::filesystem::path& dir);

// ---- evaluation -----------------------------------------------------------------

struct EvaluationResult {
  std::map<std::string, RobustnessReport> groups;  // appearance / geometry / combined
  std::string primary;
  MiouResult original_full;
  MiouResult original_object;
  std::optional<SubsetScore> recon;
  std::vector<std::string> class_names;
  nlohmann::json to_json() const;
};

// Appearance subsets: full-image eval against Recon. Geometry and combined
// subsets: object-only eval against Original restricted to its object mask.
EvaluationResult evaluate_benchmark(const Segmenter& seg, const std::string& model, const std::filesystem::path& dir);

// Fits the prototype segmenter on the benchmark's originals.
PrototypeSegmenter fit_on_originals(const std::filesystem::path& dir, double temperature = 1.0);

std::string report_markdown(const nlohmann::json& report);

}  // namespace segedit
