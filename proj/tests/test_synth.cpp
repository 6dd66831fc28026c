#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <set>

#include "adr/physics.hpp"
#include "adr/synth.hpp"
#include "test_util.hpp"

using namespace adr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("adr_test_synth_" + name);
  fs::remove_all(p);
  return p;
}

Tensor<double> batch1(const Tensor<float>& t) {
  return reshape(t.cast<double>(), Shape{1, t.dim(0), t.dim(1), t.dim(2)});
}

}  // namespace

TEST(Synth, LinearGradientDepthEnds) {
  auto D = gen_depth(DepthKind::linear_gradient, 16, 12, 1);
  ASSERT_EQ(D.shape(), (Shape{1, 16, 12}));
  for (std::size_t x = 0; x < 12; ++x) {
    EXPECT_EQ(adr::testing::chw(D, 0, 0, x), 0.f);
    EXPECT_EQ(adr::testing::chw(D, 0, 15, x), 1.f);
  }
}

TEST(Synth, DepthKindsAreDeterministicAndInRange) {
  for (auto k : {DepthKind::linear_gradient, DepthKind::radial, DepthKind::value_noise, DepthKind::mixed}) {
    auto a = gen_depth(k, 32, 32, 42), b = gen_depth(k, 32, 32, 42);
    EXPECT_TRUE(adr::testing::bit_equal(a, b)) << to_string(k);
    for (float v : a.values()) {
      ASSERT_GE(v, 0.f);
      ASSERT_LE(v, 1.f);
    }
  }
  EXPECT_EQ(parse_depth_kind("radial"), DepthKind::radial);
  EXPECT_THROW(parse_depth_kind("spiral"), DataError);
}

TEST(Synth, ValueNoiseSpansTheUnitInterval) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto f = value_noise(64, 64, s);
    const auto v = f.values();
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    EXPECT_LE(*lo, 0.1f);
    EXPECT_GE(*hi, 0.9f);
  }
}

TEST(Synth, BeerLambertClosedForm) {
  auto t = beer_lambert_t(Tensor<float>::ones({1, 4, 4}), {1.2, 0.5, 0.4});
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_FLOAT_EQ(t[i], float(std::exp(-1.2)));
    EXPECT_FLOAT_EQ(t[16 + i], float(std::exp(-0.5)));
    EXPECT_FLOAT_EQ(t[32 + i], float(std::exp(-0.4)));
  }
  auto one = beer_lambert_t(value_noise(8, 8, 3), {0, 0, 0});
  for (float v : one.values()) EXPECT_EQ(v, 1.f);
  auto D = value_noise(16, 16, 4);
  auto tt = beer_lambert_t(D, {1.2, 0.5, 0.4});
  for (std::size_t i = 0; i < 256; ++i) EXPECT_LE(tt[i], tt[512 + i]);
}

TEST(Synth, NoDegradationIsIdentity) {
  SceneSpec spec;
  spec.noise_sigma = 0;
  spec.turbidity_strength = 0;
  spec.beta = {0, 0, 0};
  const auto J = procedural_chart(32, 32, 5);
  auto s = degrade(J, spec, 6);
  EXPECT_TRUE(adr::testing::bit_equal(s.I, J));
}

TEST(Synth, DegradeIsDeterministic) {
  const auto J = procedural_chart(32, 32, 7);
  auto a = degrade(J, SceneSpec{}, 8), b = degrade(J, SceneSpec{}, 8);
  for (auto [x, y] : {std::pair{&a.I, &b.I}, {&a.D, &b.D}, {&a.t, &b.t}, {&a.N, &b.N}, {&a.S, &b.S}}) {
    EXPECT_TRUE(adr::testing::bit_equal(*x, *y));
  }
  auto c = degrade(J, SceneSpec{}, 9);
  EXPECT_FALSE(adr::testing::bit_equal(a.I, c.I));
}

TEST(Synth, TruthFieldsMatchForwardModel) {
  const auto J = procedural_chart(32, 32, 10);
  SceneSpec spec;
  auto s = degrade(J, spec, 11);
  double worst_s = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const double t = adr::testing::chw(s.t, c, y, x), d = adr::testing::chw(s.D, 0, y, x);
        ASSERT_NEAR(t, std::exp(-spec.beta[c] * d), 1e-6);
        worst_s = std::max(worst_s, std::abs(double(adr::testing::chw(s.S, c, y, x))) - spec.turbidity_strength * (1 - t) * d);
      }
  EXPECT_LE(worst_s, 1e-7);
}

TEST(Synth, DehazeOnTruthFieldsRecoversGroundTruth) {
  SceneSpec spec;
  std::size_t checked = 0;
  double worst = 0;
  for (std::uint64_t k = 0; checked < 20 && k < 200; ++k) {
    auto s = degrade(procedural_chart(32, 32, stream_seed(99, k)), spec, stream_seed(100, k));
    if (!s.clamp_free) continue;
    ++checked;
    const auto A = Tensor<double>(Shape{1, 3}, std::vector<double>(s.A.begin(), s.A.end()));
    auto J = dehaze(batch1(s.I), batch1(s.t), A, batch1(s.N), batch1(s.S));
    worst = std::max(worst, adr::testing::max_abs_diff(J, batch1(s.J)));
  }
  EXPECT_EQ(checked, 20u);
  EXPECT_LT(worst, 1e-5);
}

TEST(Synth, RedChannelIsDimmestForMidGray) {
  auto s = degrade(Tensor<float>::full({3, 64, 64}, 0.5f), SceneSpec{}, 12);
  double m[3] = {0, 0, 0};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64 * 64; ++i) m[c] += s.I[c * 64 * 64 + i];
  EXPECT_LT(m[0], m[1]);
  EXPECT_LT(m[0], m[2]);
}

TEST(Synth, ProceduralChartRange) {
  auto J = procedural_chart(64, 64, 13);
  EXPECT_EQ(J.shape(), (Shape{3, 64, 64}));
  for (float v : J.values()) {
    ASSERT_GE(v, 0.05f);
    ASSERT_LE(v, 0.95f);
  }
}

TEST(Synth, DatasetSplitIsDisjointAndDeterministic) {
  auto a = make_dataset(20, SceneSpec{}, 16, 4);
  EXPECT_EQ(a.train.size(), 16u);
  EXPECT_EQ(a.test.size(), 4u);
  std::set<std::size_t> all(a.train_ids.begin(), a.train_ids.end());
  for (auto k : a.test_ids) EXPECT_TRUE(all.insert(k).second);
  EXPECT_EQ(all.size(), 20u);
  auto b = make_dataset(20, SceneSpec{}, 16, 4);
  EXPECT_EQ(a.test_ids, b.test_ids);
  EXPECT_TRUE(adr::testing::bit_equal(a.test[0].I, b.test[0].I));
  EXPECT_THROW(make_dataset(0, SceneSpec{}, 16, 0), DataError);
  EXPECT_THROW(make_dataset(4, SceneSpec{}, 12, 1), DataError);
}

TEST(Synth, SamplesDoNotDependOnDatasetSize) {
  auto a = make_dataset(10, SceneSpec{}, 16, 0);
  auto b = make_dataset(30, SceneSpec{}, 16, 0);
  EXPECT_TRUE(adr::testing::bit_equal(a.train[3].I, b.train[3].I));
}

TEST(Synth, ManifestHashIsReproducible) {
  const auto p1 = scratch("m1"), p2 = scratch("m2");
  const auto h1 = write_dataset(make_dataset(8, SceneSpec{}, 16, 2), p1, true);
  const auto h2 = write_dataset(make_dataset(8, SceneSpec{}, 16, 2), p2, true);
  EXPECT_EQ(h1, h2);
  EXPECT_TRUE(fs::exists(p1 / "manifest.json"));
  EXPECT_TRUE(fs::exists(p1 / "train"));
  EXPECT_TRUE(fs::exists(p1 / "test"));
  SceneSpec other;
  other.seed = 8;
  EXPECT_NE(write_dataset(make_dataset(8, other, 16, 2), scratch("m3")), h1);
  fs::remove_all(p1);
  fs::remove_all(p2);
  fs::remove_all(scratch("m3"));
}

TEST(Synth, TruthFieldsRoundTripThroughDisk) {
  const auto root = scratch("truth");
  auto ds = make_dataset(3, SceneSpec{}, 16, 1);
  write_dataset(ds, root, true);
  const auto name = sample_name(ds.train_ids[0]);
  auto t = load_field(root / "truth" / (name + "_t.f32"));
  EXPECT_TRUE(adr::testing::bit_equal(t, ds.train[0].t));
  auto J = load_image(root / "train" / (name + "_gt.ppm"));
  EXPECT_LE(adr::testing::max_abs_diff(J, ds.train[0].J), 0.5 / 255 + 1e-6);
  fs::remove_all(root);
}

TEST(Synth, SixtyFourPairsUnderFiveSeconds) {
  const auto t0 = std::chrono::steady_clock::now();
  auto ds = make_dataset(64, SceneSpec{}, 64, 16);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(ds.train.size() + ds.test.size(), 64u);
  EXPECT_LT(s, 5.0);
}

TEST(Synth, SceneSpecJson) {
  SceneSpec s;
  s.noise_sigma = 0.02;
  s.depth_kind = DepthKind::radial;
  auto back = scene_spec_from_json(to_json(s));
  EXPECT_EQ(back.noise_sigma, 0.02);
  EXPECT_EQ(back.depth_kind, DepthKind::radial);
  EXPECT_THROW(scene_spec_from_json(nlohmann::json{{"colour", 1}}), DataError);
  EXPECT_THROW(scene_spec_from_json(nlohmann::json{{"A", {0.1, 1.5, 0.2}}}), DataError);
}
