#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "segedit/io.hpp"
#include "test_util.hpp"

namespace segedit {
namespace {

// Scanline rasterizer: the half-open horizontal span each shape covers at a
// pixel-center row, compared against pixel centers of that row.
std::pair<double, double> span_at(const ShapeSpec& s, double py) {
  const double dy = py - s.cy;
  double half = -1.0;
  switch (s.kind) {
    case ShapeKind::Circle:
      if (std::abs(dy) < s.rx) half = std::sqrt(s.rx * s.rx - dy * dy);
      break;
    case ShapeKind::Ellipse:
      if (std::abs(dy) < s.ry) half = s.rx * std::sqrt(1.0 - (dy / s.ry) * (dy / s.ry));
      break;
    case ShapeKind::Rectangle:
      if (std::abs(dy) < s.ry) half = s.rx;
      break;
    case ShapeKind::Triangle:
      if (dy > -s.ry && dy < s.ry) half = s.rx * (dy + s.ry) / (2.0 * s.ry);
      break;
  }
  return {s.cx - half, s.cx + half};
}

SegLabel rasterize(const SceneSpec& spec) {
  SegLabel l(spec.height, spec.width, spec.num_classes, static_cast<std::uint8_t>(spec.background_class));
  for (const auto& s : spec.shapes)
    for (int y = 0; y < spec.height; ++y) {
      const auto [lo, hi] = span_at(s, y + 0.5);
      if (!(hi > lo)) continue;
      for (int x = 0; x < spec.width; ++x)
        if (x + 0.5 > lo && x + 0.5 < hi) l.at(y, x) = static_cast<std::uint8_t>(s.class_id);
    }
  return l;
}

TEST(Scenes, SingleCircleHasTwoClasses) {
  const World w = World::standard();
  SceneSpec spec;
  spec.num_classes = w.num_classes();
  spec.background_class = 0;
  spec.background_color = w.color("sky");
  spec.shapes.push_back({ShapeKind::Circle, 2, w.color("red"), "red", 32, 32, 10, 10});
  const Scene s = generate_scene(spec, w);
  std::set<int> values(s.label.classes.begin(), s.label.classes.end());
  EXPECT_EQ(values, (std::set<int>{0, 2}));
  ASSERT_EQ(s.objects.size(), 1u);
  EXPECT_NEAR(s.objects[0].area_fraction, M_PI * 100 / 4096.0, 0.01);
}

TEST(Scenes, DeterministicGivenSeed) {
  const World w = World::standard();
  RandomSceneOptions o;
  o.second_object_probability = 1.0;
  const SceneSpec a = random_scene_spec(w, 99, o);
  SceneSpec noisy = a;
  noisy.noise_std = 0.05;
  noisy.soft_edges = true;
  EXPECT_EQ(generate_scene(noisy, w).image, generate_scene(noisy, w).image);
  EXPECT_EQ(generate_scene(a, w).label, generate_scene(random_scene_spec(w, 99, o), w).label);
  EXPECT_NE(generate_scene(a, w).image, generate_scene(random_scene_spec(w, 100, o), w).image);
}

TEST(Scenes, LabelsMatchIndependentRasterizerAndFillColors) {
  const World w = World::standard();
  RandomSceneOptions o;
  o.second_object_probability = 0.6;
  o.random_color_probability = 0.3;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SceneSpec spec = random_scene_spec(w, seed, o);
    const Scene s = generate_scene(spec, w);
    ASSERT_EQ(s.label, rasterize(spec)) << "seed " << seed;
    // Later shapes cover earlier ones, so a pixel's color is the last shape covering it.
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        Rgb want = spec.background_color;
        for (const auto& sh : spec.shapes) {
          const auto [lo, hi] = span_at(sh, y + 0.5);
          if (x + 0.5 > lo && x + 0.5 < hi) want = sh.color;
        }
        ASSERT_EQ(s.image.at(y, x), want) << "seed " << seed << " at " << x << "," << y;
      }
  }
}

TEST(Scenes, InvalidSpecRejected) {
  const World w = World::standard();
  SceneSpec spec;
  spec.num_classes = w.num_classes();
  spec.shapes.push_back({ShapeKind::Circle, 9, {1, 0, 0}, "red", 32, 32, 5, 5});
  EXPECT_THROW(generate_scene(spec, w), std::invalid_argument);
  spec.shapes[0].class_id = 2;
  spec.shapes[0].cx = 62;  // leaves the canvas
  EXPECT_THROW(generate_scene(spec, w), std::invalid_argument);
  spec.width = 4;
  EXPECT_THROW(generate_scene(spec, w), std::invalid_argument);
}

TEST(Segmenter, PrototypesAreClassMeans) {
  Image a(8, 8, {0, 0, 0}), b(8, 8, {1, 1, 1});
  SegLabel la(8, 8, 2, 0), lb(8, 8, 2, 0);
  a.set(0, 0, {1, 0, 0});
  la.at(0, 0) = 1;
  const auto seg = fit_prototype_segmenter({{&a, &la}, {&b, &lb}});
  EXPECT_EQ(seg.prototypes()(1, 0), 1.0);
  EXPECT_EQ(seg.prototypes()(1, 1), 0.0);
  // class 0: 63 black and 64 white pixels
  EXPECT_NEAR(seg.prototypes()(0, 0), 64.0 / 127.0, 1e-12);
}

TEST(Segmenter, HalfBlackHalfWhiteGivesGrey) {
  Image a(8, 8, {0, 0, 0}), b(8, 8, {1, 1, 1});
  SegLabel l(8, 8, 2, 0);
  l.at(3, 3) = 1;
  Image a2 = a, b2 = b;
  a2.set(3, 3, {0.2, 0.2, 0.2});
  b2.set(3, 3, {0.2, 0.2, 0.2});
  const auto seg = fit_prototype_segmenter({{&a2, &l}, {&b2, &l}});
  for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(seg.prototypes()(0, k), 0.5);
}

TEST(Segmenter, RandomDatasetMatchesAccumulationOracle) {
  Rng rng(5);
  std::vector<Image> ims;
  std::vector<SegLabel> ls;
  for (int i = 0; i < 6; ++i) {
    ims.push_back(testing::random_image(16, 12, rng));
    ls.push_back(testing::random_label(16, 12, 4, rng, 0.1));
  }
  std::vector<LabeledImage> d;
  for (int i = 0; i < 6; ++i) d.push_back({&ims[i], &ls[i]});
  const auto seg = fit_prototype_segmenter(d, 0.7);
  double sum[4][3] = {};
  int cnt[4] = {};
  for (int i = 0; i < 6; ++i)
    for (std::size_t p = 0; p < ls[i].classes.size(); ++p) {
      const int g = ls[i].classes[p];
      if (g == kIgnoreIndex) continue;
      ++cnt[g];
      for (int k = 0; k < 3; ++k) sum[g][k] += ims[i].pixels[p * 3 + k];
    }
  for (int g = 0; g < 4; ++g)
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(seg.prototypes()(g, k), sum[g][k] / cnt[g], 1e-6);
}

TEST(Segmenter, MissingClassNamed) {
  Image a(8, 8);
  SegLabel l(8, 8, 3, 0);
  try {
    fit_prototype_segmenter({{&a, &l}});
    FAIL() << "expected throw";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
  }
}

TEST(Segmenter, ScoresProbabilitiesAndArgmax) {
  Mat protos(2, 3);
  protos(1, 0) = 1.0;  // class 0 black, class 1 red
  const PrototypeSegmenter seg(protos, 0.5);
  Image im(8, 8);
  im.set(0, 0, {1, 0, 0});
  im.set(0, 1, {0.5, 0, 0});  // equidistant
  const auto p = predict_probabilities(seg, im);
  EXPECT_EQ(predict_label(seg, im).at(0, 0), 1);
  EXPECT_NEAR(p[1 * 2 + 0], p[1 * 2 + 1], 1e-15);
  Rng rng(6);
  const Image r = testing::random_image(9, 11, rng);
  const auto pr = predict_probabilities(seg, r);
  for (std::size_t q = 0; q < pr.size() / 2; ++q) EXPECT_NEAR(pr[2 * q] + pr[2 * q + 1], 1.0, 1e-6);
  const auto sc = predict_scores(seg, r);
  EXPECT_NEAR(sc[1], -(std::pow(r.pixels[0] - 1, 2) + std::pow(r.pixels[1], 2) + std::pow(r.pixels[2], 2)) / 0.5, 1e-12);
}

TEST(Segmenter, LossMapMatchesSoftmaxOracle) {
  Rng rng(7);
  Mat protos = testing::random_mat(5, 3, rng, 0.3);
  const PrototypeSegmenter seg(protos, 0.4);
  const Image im = testing::random_image(10, 10, rng);
  const SegLabel l = testing::random_label(10, 10, 5, rng, 0.2);
  const auto loss = loss_map(seg, im, l);
  for (std::size_t p = 0; p < l.classes.size(); ++p) {
    if (l.classes[p] == kIgnoreIndex) {
      EXPECT_EQ(loss[p], kLossSentinel);
      continue;
    }
    double z = 0, own = 0;
    for (int g = 0; g < 5; ++g) {
      double d = 0;
      for (int k = 0; k < 3; ++k) d += std::pow(im.pixels[p * 3 + k] - protos(g, k), 2);
      const double e = std::exp(-d / 0.4);
      z += e;
      if (g == l.classes[p]) own = e;
    }
    EXPECT_NEAR(loss[p], -std::log(own / z), 1e-6);
  }
}

TEST(Io, PngRoundTripsAndHashes) {
  const auto dir = testing::scratch_dir("io");
  const World w = World::standard();
  Scene s = generate_scene(random_scene_spec(w, 3), w);
  s.id = "s3";
  io::save_scene(dir, s);
  const Scene back = io::load_scene(dir, "s3");
  EXPECT_EQ(back.label, s.label);
  EXPECT_EQ(back.caption, s.caption);
  ASSERT_EQ(back.image.pixels.size(), s.image.pixels.size());
  for (std::size_t i = 0; i < s.image.pixels.size(); ++i)
    ASSERT_LE(std::abs(back.image.pixels[i] - s.image.pixels[i]), 0.5 / 255 + 1e-12);
  BinaryMask m = class_mask(s.label, s.objects.back().class_id);
  io::write_png_mask(dir / "m.png", m);
  EXPECT_EQ(io::read_png_mask(dir / "m.png"), m);
  EXPECT_EQ(io::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_THROW(io::read_png_rgb(dir / "missing.png"), std::runtime_error);
  io::write_text(dir / "bad.png", "not a png");
  EXPECT_THROW(io::read_png_rgb(dir / "bad.png"), std::runtime_error);
}

}  // namespace
}  // namespace segedit
