#include <gtest/gtest.h>

#include <cmath>

#include "segedit/geometry.hpp"
#include "segedit/toy_denoiser.hpp"
#include "test_util.hpp"

namespace segedit {
namespace {

BinaryMask block(int h, int w, int x0, int y0, int bw, int bh) {
  BinaryMask m(h, w);
  for (int y = y0; y < y0 + bh; ++y)
    for (int x = x0; x < x0 + bw; ++x) m.set(y, x, true);
  return m;
}

struct Toy {
  World world = World::standard();
  Scene scene;
  BinaryMask mask;
  int cls = 0;
  explicit Toy(std::uint64_t seed, int size = 64) {
    RandomSceneOptions o;
    o.width = o.height = size;
    o.second_object_probability = 0.5;
    scene = generate_scene(random_scene_spec(world, seed, o), world);
    cls = scene.objects.back().class_id;
    // the salient object's own pixels only
    mask = class_mask(scene.label, cls);
  }
};

Mat fill_colors(const World& w) {
  Mat c(w.num_classes(), 3);
  for (int g = 0; g < w.num_classes(); ++g) {
    const Rgb col = w.color(w.classes[g].color_name);
    for (int k = 0; k < 3; ++k) c(g, k) = col[k];
  }
  return c;
}

TEST(Rigid, IdentityIsIdentity) {
  Toy t(1);
  RigidTransform id;
  std::tie(id.ax, id.ay) = mask_centroid(t.mask);
  const auto r = apply_rigid(t.scene.image, t.scene.label, t.mask, id, 0);
  EXPECT_EQ(r.image, t.scene.image);
  EXPECT_EQ(r.label, t.scene.label);
  EXPECT_EQ(r.mask, t.mask);
}

TEST(Rigid, HalfScaleQuartersArea) {
  const BinaryMask m = block(64, 64, 12, 16, 30, 26);
  RigidTransform tr;
  tr.ex = tr.ey = 0.5;
  std::tie(tr.ax, tr.ay) = mask_centroid(m);
  const auto ms = transform_mask(m, tr);
  EXPECT_NEAR(static_cast<double>(ms.count()) / m.count(), 0.25, 0.25 * 0.05);
  const auto [cx, cy] = mask_centroid(ms);
  EXPECT_NEAR(cx, tr.ax, 1.0);
  EXPECT_NEAR(cy, tr.ay, 1.0);
}

TEST(Rigid, IntegerShiftIsExact) {
  Toy t(2);
  RigidTransform tr;
  std::tie(tr.ax, tr.ay) = mask_centroid(t.mask);
  tr.bx = 10;
  // nudge the object left first if it would leave the canvas
  const BinaryMask m = block(64, 64, 5, 20, 20, 12);
  const auto ms = transform_mask(m, tr);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) EXPECT_EQ(ms.at(y, x), x >= 10 && m.at(y, x - 10));
  EXPECT_THROW(transform_mask(block(64, 64, 50, 0, 10, 10), tr), std::out_of_range);
}

TEST(Remaining, SetDifferenceCases) {
  const BinaryMask M = block(32, 32, 4, 4, 10, 10);
  EXPECT_EQ(remaining_mask(M, block(32, 32, 20, 20, 5, 5)), M);
  EXPECT_TRUE(remaining_mask(M, M).empty());
  EXPECT_EQ(remaining_mask(M, BinaryMask(32, 32)), M);
  const auto strip = remaining_mask(M, block(32, 32, 9, 4, 10, 10));
  EXPECT_EQ(strip.count(), 50u);
  EXPECT_EQ(strip, block(32, 32, 4, 4, 5, 10));
  // monotone decreasing in M*
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    BinaryMask a(16, 16), b(16, 16), big(16, 16);
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
      a.bits[i] = rng.bernoulli(0.5);
      b.bits[i] = rng.bernoulli(0.3);
      big.bits[i] = b.bits[i] || rng.bernoulli(0.3);
    }
    const auto rb = remaining_mask(a, b), rbig = remaining_mask(a, big);
    for (std::size_t i = 0; i < a.bits.size(); ++i) EXPECT_LE(rbig.bits[i], rb.bits[i]);
  }
}

// Chebyshev-distance dilation, then mean over the in-canvas 3x3 window.
double soft_oracle(const BinaryMask& m, int y, int x) {
  auto dil = [&](int yy, int xx) {
    for (int py = 0; py < m.height; ++py)
      for (int px = 0; px < m.width; ++px)
        if (m.at(py, px) && std::abs(py - yy) <= 2 && std::abs(px - xx) <= 2) return 1.0;
    return 0.0;
  };
  double acc = 0;
  int n = 0;
  for (int yy = y - 1; yy <= y + 1; ++yy)
    for (int xx = x - 1; xx <= x + 1; ++xx)
      if (yy >= 0 && yy < m.height && xx >= 0 && xx < m.width) {
        acc += dil(yy, xx);
        ++n;
      }
  return acc / n;
}

TEST(Soften, Examples) {
  EXPECT_EQ(soften_mask(BinaryMask(12, 12)).area(), 0.0);
  const auto full = soften_mask(BinaryMask(12, 12, true));
  for (double v : full.values) EXPECT_EQ(v, 1.0);
  BinaryMask one(20, 20);
  one.set(10, 10, true);
  const auto s = soften_mask(one);
  EXPECT_EQ(s.at(10, 10), 1.0);
  EXPECT_DOUBLE_EQ(s.at(8, 8), 4.0 / 9);
  EXPECT_DOUBLE_EQ(s.at(7, 10), 3.0 / 9);
  EXPECT_EQ(s.at(6, 10), 0.0);
}

TEST(Soften, MatchesConvolutionOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    BinaryMask m(14, 11);
    for (auto& b : m.bits) b = rng.bernoulli(0.05);
    const auto s = soften_mask(m);
    for (int y = 0; y < 14; ++y)
      for (int x = 0; x < 11; ++x) EXPECT_NEAR(s.at(y, x), soft_oracle(m, y, x), 1e-15);
  }
}

struct StubVlm : LanguageClient {
  std::vector<std::string> answer;
  bool fail = false;
  std::string asked;
  std::vector<std::string> complete(const std::string& q, const std::string&) override {
    asked = q;
    if (fail) throw BackendError("down");
    return answer;
  }
};

TEST(Repaint, StubFallbackAndTemplate) {
  StubVlm v;
  v.answer = {"grass"};
  EXPECT_EQ(repaint_prompt(&v, "horse", "sky"), "grass");
  EXPECT_NE(v.asked.find("size or position of the horse"), std::string::npos);
  EXPECT_EQ(repaint_prompt(nullptr, "horse", "sky"), "sky");
  v.fail = true;
  EXPECT_EQ(repaint_prompt(&v, "horse", "sky"), "sky");
  v.fail = false;
  v.answer = {};
  EXPECT_EQ(repaint_prompt(&v, "horse", "sky"), "sky");
  EXPECT_THROW(repaint_prompt(nullptr, "", "sky"), std::invalid_argument);
}

TEST(EditGeometry, RuleBasedPromptIsBackgroundName) {
  Toy t(5);
  const PrototypeFillInpainter inp(fill_colors(t.world));
  GeometryOptions o;
  o.class_names = t.world.class_names();
  const auto g = edit_geometry(t.scene.image, t.scene.label, t.mask, {GeometryKind::Size, 0.2, 1}, inp, o);
  EXPECT_EQ(g.prompt, t.world.classes[g.fill_class].name);
  EXPECT_TRUE(t.world.classes[g.fill_class].background);
}

TEST(EditGeometry, SizeLevelScalesArea) {
  Toy t(6);
  const PrototypeFillInpainter inp(fill_colors(t.world));
  const auto g = edit_geometry(t.scene.image, t.scene.label, t.mask, {GeometryKind::Size, 0.4, 1}, inp, {});
  EXPECT_DOUBLE_EQ(g.transform.ex, 0.6);
  EXPECT_NEAR(static_cast<double>(g.mask.count()) / t.mask.count(), 0.36, 0.36 * 0.05);
}

TEST(EditGeometry, PositionLevelMovesCentroid) {
  for (std::uint64_t seed : {1, 2, 3}) {
    Toy t(seed, 256);
    const PrototypeFillInpainter inp(fill_colors(t.world));
    const auto g = edit_geometry(t.scene.image, t.scene.label, t.mask, {GeometryKind::Position, 0.2, seed}, inp, {});
    const auto [x0, y0] = mask_centroid(t.mask);
    const auto [x1, y1] = mask_centroid(g.mask);
    EXPECT_NEAR(std::hypot(x1 - x0, y1 - y0), 0.2 * 256, 2.0);
    EXPECT_EQ(g.mask.count(), t.mask.count());
  }
}

TEST(EditGeometry, NoValidDirectionThrows) {
  const BinaryMask m = block(64, 64, 2, 2, 60, 60);
  Image im(64, 64);
  SegLabel l(64, 64, 3, 0);
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i]) l.classes[i] = 2;
  const PrototypeFillInpainter inp(Mat(3, 3));
  EXPECT_THROW(edit_geometry(im, l, m, {GeometryKind::Position, 0.4, 1}, inp, {}), std::runtime_error);
  EXPECT_THROW(edit_geometry(im, l, m, {GeometryKind::Size, 1.0, 1}, inp, {}), std::invalid_argument);
}

TEST(EditGeometry, TinyLevelIsNearIdentity) {
  Toy t(7);
  const PrototypeFillInpainter inp(fill_colors(t.world));
  const auto g = edit_geometry(t.scene.image, t.scene.label, t.mask, {GeometryKind::Size, 1e-6, 1}, inp, {});
  EXPECT_EQ(g.mask, t.mask);
  EXPECT_TRUE(g.remaining.empty());
  EXPECT_EQ(g.image, t.scene.image);
}

// Transformed mask equals the transformed label's object class outside any
// other same-class region, and repainting leaves soft == 0 pixels alone.
void check_consistency(const Toy& t, const GeometryResult& g, const Image& before_inpaint) {
  const BinaryMask other = remaining_mask(class_mask(t.scene.label, t.cls), t.mask);
  std::size_t inter = 0, uni = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      if (other.at(y, x) && !g.mask.at(y, x)) continue;
      const bool a = g.mask.at(y, x), b = g.label.at(y, x) == t.cls;
      inter += a && b;
      uni += a || b;
    }
  EXPECT_EQ(inter, uni);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if (g.soft.at(y, x) == 0.0) {
        ASSERT_EQ(g.image.at(y, x), before_inpaint.at(y, x));
      }
}

struct Passthrough : Inpainter {
  Image inpaint(const Image& image, const SoftMask&, const SegLabel&, const std::string&, std::uint64_t) const override {
    return image;
  }
  std::string name() const override { return "passthrough"; }
};

TEST(EditGeometry, RandomSpecsAreConsistent) {
  const Passthrough none;
  const World w = World::standard();
  const PrototypeFillInpainter fill(fill_colors(w));
  Rng rng(8);
  int done = 0;
  for (int i = 0; i < 200; ++i) {
    Toy t(100 + i);
    const GeometryEditSpec spec{rng.bernoulli(0.5) ? GeometryKind::Size : GeometryKind::Position, rng.uniform(0.05, 0.6),
                                static_cast<std::uint64_t>(i)};
    GeometryResult raw, g;
    try {
      raw = edit_geometry(t.scene.image, t.scene.label, t.mask, spec, none, {});
    } catch (const std::runtime_error&) {
      continue;  // no room to move
    }
    g = edit_geometry(t.scene.image, t.scene.label, t.mask, spec, fill, {});
    check_consistency(t, g, raw.image);
    EXPECT_EQ(g.label, raw.label);
    // deterministic
    EXPECT_EQ(edit_geometry(t.scene.image, t.scene.label, t.mask, spec, fill, {}).image, g.image);
    ++done;
  }
  EXPECT_GT(done, 150);
}

TEST(EditGeometry, DiffusionInpainterNoTouch) {
  const World w = World::standard();
  const Tokenizer tok = Tokenizer::builtin();
  ToyDenoiserConfig c;
  c.vocab_size = tok.size();
  c.num_classes = w.num_classes();
  c.hidden = 16;
  c.key_dim = 8;
  c.T = 10;
  const ToyDenoiser d(c);
  const DiffusionInpainter inp(d, tok, make_schedule(10));
  const Passthrough none;
  for (std::uint64_t s : {11, 12, 13}) {
    Toy t(s);
    const GeometryEditSpec spec{s % 2 ? GeometryKind::Size : GeometryKind::Position, 0.2, s};
    const auto raw = edit_geometry(t.scene.image, t.scene.label, t.mask, spec, none, {});
    GeometryOptions o;
    o.inpaint_seed = 4;
    const auto g = edit_geometry(t.scene.image, t.scene.label, t.mask, spec, inp, o);
    check_consistency(t, g, raw.image);
    EXPECT_NE(g.image, raw.image);
    EXPECT_EQ(edit_geometry(t.scene.image, t.scene.label, t.mask, spec, inp, o).image, g.image);
  }
}

TEST(EditGeometry, LogFields) {
  Toy t(9);
  const PrototypeFillInpainter inp(fill_colors(t.world));
  const GeometryEditSpec spec{GeometryKind::Position, 0.2, 3};
  const auto g = edit_geometry(t.scene.image, t.scene.label, t.mask, spec, inp, {});
  const auto j = g.log("s", spec);
  for (const char* k : {"sample_id", "kind", "level", "e_x", "e_y", "b_x", "b_y", "direction", "inpaint_area_fraction", "prompt"})
    EXPECT_TRUE(j.contains(k)) << k;
}

}  // namespace
}  // namespace segedit
