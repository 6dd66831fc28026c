#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "adr/checkpoint.hpp"
#include "adr/image_io.hpp"
#include "test_util.hpp"

using namespace adr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("adr_test_io_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(Ppm, RoundTripWithinQuantization) {
  const auto img = adr::testing::random_tensor<float>({3, 8, 16}, 1, 0, 1);
  const auto back = decode_ppm(encode_ppm(img));
  ASSERT_EQ(back.shape(), img.shape());
  EXPECT_LE(adr::testing::max_abs_diff(back, img), 0.5 / 255 + 1e-6);
  EXPECT_EQ(encode_ppm(back), encode_ppm(img));
}

TEST(Ppm, QuantizationRoundsHalfUp) {
  EXPECT_EQ(quantize(0.5), 128);
  EXPECT_EQ(quantize(0.0), 0);
  EXPECT_EQ(quantize(1.0), 255);
  EXPECT_EQ(quantize(-0.3), 0);
  EXPECT_EQ(quantize(1.7), 255);
}

TEST(Ppm, HeaderWithComments) {
  auto img = decode_ppm(bytes_of(std::string("P6\n# made by hand\n2 1\n255\n") + std::string("\xff\x00\x00\x00\x00\xff", 6)));
  ASSERT_EQ(img.shape(), (Shape{3, 1, 2}));
  EXPECT_EQ(adr::testing::chw(img, 0, 0, 0), 1.f);
  EXPECT_EQ(adr::testing::chw(img, 2, 0, 1), 1.f);
  EXPECT_EQ(adr::testing::chw(img, 1, 0, 0), 0.f);
}

TEST(Ppm, RejectsUnsupportedOrBrokenFiles) {
  EXPECT_THROW(decode_ppm(bytes_of("P5\n2 2\n255\nabcd")), DataError);
  EXPECT_THROW(decode_ppm(bytes_of("P6\n2 2\n65535\n")), DataError);
  try {
    decode_ppm(bytes_of("P6\n2 2\n255\nabc"));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos);
  }
}

TEST(Ppm, GrayMapsAreReplicated) {
  const auto g = adr::testing::random_tensor<float>({1, 4, 4}, 2, 0, 1);
  const auto rgb = decode_ppm(encode_ppm(g));
  ASSERT_EQ(rgb.shape(), (Shape{3, 4, 4}));
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(rgb[i], rgb[16 + i]);
    EXPECT_EQ(rgb[i], rgb[32 + i]);
  }
}

TEST(Images, NormalizeMinMax) {
  auto c = normalize_minmax(Tensor<float>::full({1, 4, 4}, 3.f));
  for (float v : c.values()) EXPECT_EQ(v, 0.5f);
  auto n = normalize_minmax(Tensor<float>({1, 1, 3}, {-2.f, 0.f, 2.f}));
  EXPECT_EQ(n.values(), (std::vector<float>{0.f, 0.5f, 1.f}));
}

TEST(Images, ResizeMatchesBilinearOracle) {
  // 8×8 checkerboard of 1-pixel cells doubled to 16×16 with half-pixel
  // centers: output pixel (y, x) samples source at ((y + 0.5)/2 − 0.5).
  std::vector<float> v(64);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) v[y * 8 + x] = float((x + y) % 2);
  const Tensor<float> src({1, 8, 8}, v);
  const auto out = resize_bilinear(src, 16, 16);
  auto sample = [&](double sy, double sx) {
    sy = std::clamp(sy, 0.0, 7.0);
    sx = std::clamp(sx, 0.0, 7.0);
    const auto y0 = std::size_t(sy), x0 = std::size_t(sx);
    const auto y1 = std::min<std::size_t>(y0 + 1, 7), x1 = std::min<std::size_t>(x0 + 1, 7);
    const double fy = sy - double(y0), fx = sx - double(x0);
    auto at = [&](std::size_t y, std::size_t x) { return double(v[y * 8 + x]); };
    return (at(y0, x0) * (1 - fx) + at(y0, x1) * fx) * (1 - fy) + (at(y1, x0) * (1 - fx) + at(y1, x1) * fx) * fy;
  };
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x)
      EXPECT_NEAR(adr::testing::chw(out, 0, y, x), sample((y + 0.5) / 2 - 0.5, (x + 0.5) / 2 - 0.5), 1e-6) << y << "," << x;
  EXPECT_THROW(resize_bilinear(src, 12, 16), ShapeError);
  EXPECT_TRUE(adr::testing::bit_equal(resize_bilinear(src, 8, 8), src));
}

TEST(Images, FieldRoundTrip) {
  const auto f = adr::testing::random_tensor<float>({3, 5, 7}, 3);
  const auto p = scratch("field") / "f.f32";
  save_field(f, p);
  EXPECT_TRUE(adr::testing::bit_equal(load_field(p), f));
  std::ofstream(p, std::ios::binary) << "ADRX";
  EXPECT_THROW(load_field(p), DataError);
  fs::remove_all(p.parent_path());
}

// ---------------------------------------------------------------------------
// Config

TEST(ConfigFile, DefaultsAndOverlay) {
  const Config d;
  EXPECT_EQ(d.image_size, 256u);
  EXPECT_EQ(d.batch_size, 8u);
  EXPECT_EQ(d.epochs, 100u);
  EXPECT_EQ(d.lr, 1e-4);
  auto c = parse_config(R"({"image_size": 64, "batch_size": 4, "retinex_stage": false, "lambda3": 0.0})");
  EXPECT_EQ(c.image_size, 64u);
  EXPECT_EQ(c.batch_size, 4u);
  EXPECT_FALSE(c.retinex_stage);
  EXPECT_FALSE(c.pipeline_options().retinex_stage);
  EXPECT_FALSE(c.loss_mask().retinex);
  EXPECT_EQ(c.weights.lambda3, 0.0);
}

TEST(ConfigFile, RejectsBadInput) {
  try {
    parse_config(R"({"learning_rate": 0.1})");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  EXPECT_THROW(parse_config(R"({"image_size": 60})"), DataError);
  EXPECT_THROW(parse_config(R"({"lr": -1})"), DataError);
  EXPECT_THROW(parse_config(R"({"lr_schedule": "cosine"})"), DataError);
  EXPECT_THROW(parse_config(R"({"epochs": "many"})"), DataError);
  EXPECT_THROW(parse_config("{"), DataError);
}

TEST(ConfigFile, JsonRoundTrip) {
  Config c;
  c.seed = 1234;
  c.perc_loss = false;
  c.run_log = "log.csv";
  const auto back = parse_config(to_json(c).dump());
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

Config small_config() {
  Config c;
  c.image_size = 8;
  c.batch_size = 1;
  return c;
}

}  // namespace

TEST(CheckpointFile, EncodeDecodeEncodeIsByteIdentical) {
  Pipeline<float> model(small_config().pipeline_options(), 5);
  Adam<float> opt(model.parameters());
  auto ck = make_checkpoint(TrainingState{small_config(), "rng-state", 3}, model, opt);
  const auto bytes = ck.encode();
  EXPECT_EQ(Checkpoint::decode(bytes).encode(), bytes);

  const auto p = scratch("ck") / "m.adr";
  ck.save(p);
  const auto loaded = Checkpoint::load(p);
  EXPECT_EQ(loaded.encode(), bytes);
  fs::remove_all(p.parent_path());
}

TEST(CheckpointFile, RestoreReproducesParametersAndOptimizer) {
  Pipeline<float> model(small_config().pipeline_options(), 6);
  Adam<float> opt(model.parameters());
  {
    auto out = model(adr::testing::random_tensor<float>({1, 3, 8, 8}, 7, 0, 1));
    backward(mean(out.J_enhanced));
    opt.step(model.parameters());
  }
  const auto ck = make_checkpoint(TrainingState{small_config(), "", 1}, model, opt);
  Pipeline<float> fresh(small_config().pipeline_options(), 99);
  Adam<float> fresh_opt(fresh.parameters());
  restore_checkpoint(ck, fresh, &fresh_opt);
  EXPECT_EQ(make_checkpoint(TrainingState{small_config(), "", 1}, fresh, fresh_opt).encode(), ck.encode());
  EXPECT_EQ(checkpoint_config(ck).image_size, 8u);
}

TEST(CheckpointFile, RejectsArchitectureMismatch) {
  Pipeline<float> model(small_config().pipeline_options(), 8);
  Adam<float> opt(model.parameters());
  const auto ck = make_checkpoint(TrainingState{small_config(), "", 0}, model, opt);
  auto cfg = small_config();
  cfg.retinex_stage = false;
  Pipeline<float> other(cfg.pipeline_options(), 8);
  try {
    restore_checkpoint(ck, other);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("architecture mismatch"), std::string::npos);
  }
}

TEST(CheckpointFile, RejectsCorruptBytes) {
  Pipeline<float> model(small_config().pipeline_options(), 9);
  Adam<float> opt(model.parameters());
  auto bytes = make_checkpoint(TrainingState{small_config(), "", 0}, model, opt).encode();
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(Checkpoint::decode(bad_magic), DataError);
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(Checkpoint::decode(truncated), DataError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(Checkpoint::decode(trailing), DataError);
}
