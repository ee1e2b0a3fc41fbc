#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "segedit/bench.hpp"
#include "segedit/cli.hpp"
#include "segedit/io.hpp"
#include "test_util.hpp"

namespace segedit {
namespace {

namespace fs = std::filesystem;

Scene labeled(int h, int w, const std::vector<std::pair<int, int>>& objects) {
  // objects: (class id, pixel count) painted row-major from the top-left
  Scene s;
  s.image = Image(h, w);
  s.label = SegLabel(h, w, World::standard().num_classes(), 0);
  int p = 0;
  for (auto [cls, n] : objects)
    for (int i = 0; i < n; ++i, ++p) s.label.classes[p] = static_cast<std::uint8_t>(cls);
  return s;
}

TEST(Salient, TwentyPercentRule) {
  const World w = World::standard();
  const std::vector<Scene> scenes{labeled(10, 10, {{2, 25}}), labeled(10, 10, {{2, 10}, {3, 8}}),
                                  labeled(10, 10, {{2, 20}}), labeled(10, 10, {{3, 15}, {4, 21}}),
                                  labeled(10, 10, {{1, 60}})};
  const auto sel = select_salient(scenes, w);
  ASSERT_EQ(sel.size(), 2u);
  EXPECT_EQ(sel[0].index, 0u);
  EXPECT_EQ(sel[0].class_id, 2);
  EXPECT_DOUBLE_EQ(sel[0].area_fraction, 0.25);
  EXPECT_EQ(sel[0].mask.count(), 25u);
  EXPECT_EQ(sel[1].index, 3u);
  EXPECT_EQ(sel[1].class_id, 4);
}

SegLabel from(int h, int w, int k, std::vector<std::uint8_t> v) {
  SegLabel l(h, w, k);
  l.classes = std::move(v);
  return l;
}

TEST(Miou, WorkedExampleAndPerfect) {
  const auto gt = from(2, 2, 2, {0, 0, 1, 1});
  const auto pred = from(2, 2, 2, {0, 1, 1, 1});
  const auto r = miou(pred, gt, 2);
  EXPECT_NEAR(r.per_class[0], 50.0, 1e-9);
  EXPECT_NEAR(r.per_class[1], 200.0 / 3, 1e-9);
  EXPECT_EQ(round2(r.mean), 58.33);
  EXPECT_EQ(miou(gt, gt, 2).mean, 100.0);
  EXPECT_THROW(miou(pred, from(2, 2, 2, {255, 255, 255, 255}), 2), std::invalid_argument);
}

// Straight per-pixel counting.
double naive_miou(const SegLabel& pred, const SegLabel& gt, int k, const BinaryMask* m) {
  std::vector<long> tp(k), fp(k), fn(k), present(k);
  for (std::size_t p = 0; p < gt.classes.size(); ++p) {
    if (gt.classes[p] == kIgnoreIndex || (m && !m->bits[p])) continue;
    const int g = gt.classes[p], q = pred.classes[p];
    present[g] = 1;
    if (g == q) {
      ++tp[g];
    } else {
      ++fn[g];
      if (q < k) ++fp[q];
    }
  }
  double s = 0;
  int n = 0;
  for (int g = 0; g < k; ++g)
    if (present[g]) {
      s += 100.0 * tp[g] / (tp[g] + fp[g] + fn[g]);
      ++n;
    }
  return s / n;
}

TEST(Miou, RandomPairsMatchNaiveOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = rng.integer(2, 8);
    const auto gt = testing::random_label(16, 16, k, rng, 0.1);
    auto pred = testing::random_label(16, 16, k, rng);
    for (std::size_t p = 0; p < pred.classes.size(); ++p)
      if (rng.bernoulli(0.5) && gt.classes[p] != kIgnoreIndex) pred.classes[p] = gt.classes[p];
    BinaryMask m(16, 16);
    for (auto& b : m.bits) b = rng.bernoulli(0.4);
    const BinaryMask* mp = trial % 2 ? &m : nullptr;
    EXPECT_DOUBLE_EQ(miou(pred, gt, k, mp).mean, naive_miou(pred, gt, k, mp)) << trial;
    const BinaryMask ones(16, 16, true);
    EXPECT_EQ(miou(pred, gt, k, nullptr).mean, miou(pred, gt, k, &ones).mean);
    // consistent relabeling
    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    SegLabel pg = gt, pp = pred;
    for (auto& c : pg.classes)
      if (c != kIgnoreIndex) c = static_cast<std::uint8_t>(perm[c]);
    for (auto& c : pp.classes) c = static_cast<std::uint8_t>(perm[c]);
    EXPECT_NEAR(miou(pp, pg, k, mp).mean, miou(pred, gt, k, mp).mean, 1e-9);
  }
}

TEST(Miou, AccumulatorMergesLikeOneBigImage) {
  Rng rng(2);
  MiouAccumulator a(4), b(4), whole(4);
  const auto g1 = testing::random_label(8, 8, 4, rng), p1 = testing::random_label(8, 8, 4, rng);
  const auto g2 = testing::random_label(8, 8, 4, rng), p2 = testing::random_label(8, 8, 4, rng);
  a.add(p1, g1);
  b.add(p2, g2);
  a.merge(b);
  whole.add(p1, g1);
  whole.add(p2, g2);
  EXPECT_EQ(a.table(), whole.table());
  EXPECT_THROW(MiouAccumulator(4).result(), std::invalid_argument);
}

std::map<std::string, SubsetScore> scores(std::vector<std::pair<std::string, double>> v) {
  std::map<std::string, SubsetScore> m;
  for (auto& [k, x] : v) m[k].miou = x;
  return m;
}

TEST(Robustness, TableRows) {
  const auto a = robustness_report(scores({{"color", 72.00}, {"material", 45.14}, {"style", 69.97}, {"weather", 63.83}}),
                                   "recon", 76.10);
  EXPECT_EQ(round2(a.mr), 0.82);
  const auto g = robustness_report(scores({{"size_0.2", 64.97}, {"size_0.4", 62.83}, {"position_0.2", 64.98},
                                           {"position_0.4", 63.67}}),
                                   "original", 67.41);
  EXPECT_EQ(round2(g.mr), 0.95);
  const auto same = robustness_report(scores({{"a", 50.0}, {"b", 50.0}}), "recon", 50.0);
  EXPECT_EQ(same.mr, 1.0);
  // mR recomputed from the stored table
  double s = 0;
  for (const auto& [k, v] : a.subsets) s += v.miou;
  EXPECT_EQ(a.rmiou, s / 4);
  EXPECT_EQ(a.mr, a.rmiou / a.baseline_miou);
  EXPECT_THROW(robustness_report({}, "recon", 50.0), std::invalid_argument);
  const auto j = a.to_json();
  for (const char* k : {"model", "benchmark", "baseline", "subsets", "rmiou", "mr", "eval_region", "config_hash"})
    EXPECT_TRUE(j.contains(k)) << k;
}

TEST(Variations, Parse) {
  auto v = parse_variation("color");
  EXPECT_EQ(v.kind, Variation::Kind::Appearance);
  EXPECT_EQ(v.attribute, AttributeKind::Color);
  v = parse_variation("position_0.4");
  EXPECT_EQ(v.kind, Variation::Kind::Geometry);
  EXPECT_EQ(v.geometry, GeometryKind::Position);
  EXPECT_DOUBLE_EQ(v.level, 0.4);
  v = parse_variation("color+size_0.2");
  EXPECT_EQ(v.kind, Variation::Kind::Combined);
  EXPECT_EQ(v.name, "color+size_0.2");
  for (const char* bad : {"size", "size_1.5", "colour", "size_0.2+color", "size_abc"})
    EXPECT_THROW(parse_variation(bad), std::invalid_argument) << bad;
}

TEST(Config, RoundTripAndUnknownKey) {
  BenchConfig c;
  c.num_scenes = 12;
  c.variations = {"color"};
  const auto back = BenchConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  auto j = c.to_json();
  j["num_scene"] = 3;
  EXPECT_THROW(BenchConfig::from_json(j), std::invalid_argument);
  c.backend = "sd";
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

BenchConfig small(std::vector<std::string> plan) {
  BenchConfig c;
  c.name = "t";
  c.num_scenes = 10;
  c.backend = "linear";
  c.variations = std::move(plan);
  return c;
}

FilterSummary build(const BenchConfig& c, const fs::path& dir) {
  const World w = World::standard();
  const auto scenes = generate_scenes(c, w);
  const auto b = build_backends(c, scenes, w);
  return build_benchmark(c, scenes, w, b.view(), dir);
}

TEST(Build, ColorPlan) {
  const auto dir = testing::scratch_dir("bench_color");
  const auto s = build(small({"color"}), dir);
  ASSERT_TRUE(s.kept.count("color"));
  ASSERT_TRUE(s.kept.count("recon"));
  EXPECT_LE(s.kept.at("color") + s.rejected.at("color"), 10);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(fs::is_directory(dir / "recon"));
  EXPECT_TRUE(fs::is_directory(dir / "color"));
  const auto idx = io::read_json(dir / "raw/index.json");
  for (const auto& id : idx["subsets"]["color"]["ids"]) {
    const auto meta = io::read_json(dir / "raw/color" / (id.get<std::string>() + ".json"));
    EXPECT_TRUE(meta["outside_mask_equal"].get<bool>()) << id;
  }
}

TEST(Build, DeterministicAndGeometryConsistent) {
  const auto c = small({"size_0.2", "size_0.4", "color+size_0.2"});
  const auto d1 = testing::scratch_dir("bench_det1"), d2 = testing::scratch_dir("bench_det2");
  const auto s1 = build(c, d1), s2 = build(c, d2);
  EXPECT_EQ(s1.manifest_hash, s2.manifest_hash);
  EXPECT_EQ(manifest_hash(d1), s1.manifest_hash);
  const auto idx = io::read_json(d1 / "raw/index.json");
  const auto names = idx["class_names"].get<std::vector<std::string>>();
  int checked = 0;
  for (const char* sub : {"size_0.2", "size_0.4", "color+size_0.2"}) {
    for (const auto& idj : idx["subsets"][sub]["ids"]) {
      const std::string id = idj;
      const fs::path base = d1 / "raw" / sub;
      const auto meta = io::read_json(base / (id + ".json"));
      EXPECT_TRUE(meta["mask_label_consistent"].get<bool>());
      const auto label = io::read_png_index(base / (id + "_label.png"), static_cast<int>(names.size()));
      const auto mask = io::read_png_mask(base / (id + "_mask.png"));
      const auto cls = std::find(names.begin(), names.end(), meta["object"].get<std::string>()) - names.begin();
      for (std::size_t p = 0; p < mask.bits.size(); ++p)
        if (mask.bits[p]) {
          ASSERT_EQ(label.classes[p], cls);
        }
      EXPECT_EQ(io::read_png_rgb(base / (id + ".png")), io::read_png_rgb(d2 / "raw" / sub / (id + ".png")));
      if (std::string(sub) == "color+size_0.2") {
        EXPECT_TRUE(meta.contains("geometry"));
        EXPECT_TRUE(meta.contains("attribute"));
      }
      ++checked;
    }
  }
  EXPECT_GT(checked, 0);
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "segedit");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

TEST(Cli, ExitCodesAndReports) {
  const auto dir = testing::scratch_dir("bench_cli");
  const auto cfg = dir / "c.json";
  auto base = small({"color", "size_0.2"});
  base.inpainter = "prototype";
  // plumbing only: keep every sample so eval has something to score
  base.filter.min_directional = base.filter.min_image_image = base.filter.min_image_text = -1.0;
  base.filter.max_noisy_area_fraction = 1.0;
  io::write_json(cfg, base.to_json());
  EXPECT_EQ(cli({"bench", "build", "--out", (dir / "b").string()}), 1);
  EXPECT_EQ(cli({"bench", "build", "--config", cfg.string(), "--frobnicate"}), 1);
  EXPECT_EQ(cli({"bench", "build", "--config", (dir / "absent.json").string(), "--out", (dir / "b").string()}), 1);
  ASSERT_EQ(cli({"bench", "build", "--config", cfg.string(), "--seed", "7", "--out", (dir / "b").string()}), 0);
  ASSERT_EQ(cli({"bench", "build", "--config", cfg.string(), "--seed", "7", "--out", (dir / "b2").string()}), 0);
  EXPECT_EQ(manifest_hash(dir / "b"), manifest_hash(dir / "b2"));
  ASSERT_EQ(cli({"bench", "eval", "--config", cfg.string(), "--bench", (dir / "b").string(), "--out",
                 (dir / "r").string()}),
            0);
  EXPECT_TRUE(fs::exists(dir / "r/report.json"));
  EXPECT_TRUE(fs::exists(dir / "r/report.md"));
  const auto rep = io::read_json(dir / "r/report.json");
  EXPECT_EQ(rep["baseline"], "recon");
  EXPECT_TRUE(rep["reports"].contains("geometry"));
  EXPECT_EQ(rep["reports"]["geometry"]["eval_region"], "object-only");

  auto c = small({"color"});
  c.llm_url = "http://127.0.0.1:9";
  io::write_json(cfg, c.to_json());
  EXPECT_EQ(cli({"bench", "build", "--config", cfg.string(), "--out", (dir / "b3").string()}), 2);
}

TEST(Cli, ScenesAndTraining) {
  const auto dir = testing::scratch_dir("cli_gen");
  auto c = small({"color"});
  c.backend = "toy";
  c.train_steps = 5;
  const auto cfg = dir / "c.json";
  io::write_json(cfg, c.to_json());
  ASSERT_EQ(cli({"scenes", "gen", "--config", cfg.string(), "--out", (dir / "s").string()}), 0);
  EXPECT_EQ(io::read_json(dir / "s/index.json")["scenes"].size(), 10u);
  ASSERT_EQ(cli({"denoiser", "train", "--config", cfg.string(), "--out", (dir / "ck").string()}), 0);
  EXPECT_TRUE(fs::exists(dir / "ck/denoiser.ckpt"));
  c.checkpoint = (dir / "absent.ckpt").string();
  io::write_json(cfg, c.to_json());
  EXPECT_EQ(cli({"bench", "build", "--config", cfg.string(), "--out", (dir / "b").string()}), 2);
}

}  // namespace
}  // namespace segedit
