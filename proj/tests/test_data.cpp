#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"

using namespace pball;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("pball_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::optional<BoundingBox> tight_box(const Mask& m) {
  int x0 = m.width(), y0 = m.height(), x1 = -1, y1 = -1;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      if (m(y, x)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return std::nullopt;
  return BoundingBox{x0, y0, x1 + 1, y1 + 1};
}

}  // namespace

TEST(GenShapesTest, Deterministic) {
  const Dataset a = gen_shapes(30, 32, 4, 0.3, 7), b = gen_shapes(30, 32, 4, 0.3, 7);
  EXPECT_EQ(a, b);
  const fs::path d1 = temp_dir("det1"), d2 = temp_dir("det2");
  save_dataset(a, d1);
  save_dataset(b, d2);
  EXPECT_EQ(read_file(d1 / "manifest.json"), read_file(d2 / "manifest.json"));
  EXPECT_EQ(read_file(d1 / sample_file_name(3)), read_file(d2 / sample_file_name(3)));
  EXPECT_NE(gen_shapes(5, 32, 4, 0.3, 8), gen_shapes(5, 32, 4, 0.3, 7));
}

TEST(GenShapesTest, NoDistractorsWithoutDifficulty) {
  for (const auto& s : gen_shapes(50, 32, 4, 0.0, 1)) {
    EXPECT_FALSE(s.difficult);
    EXPECT_EQ(s.regions.size(), 1u);
    EXPECT_EQ(s.labels, std::vector<int>{s.label});
  }
}

TEST(GenShapesTest, BoxesAreTightAroundMasks) {
  for (const auto& s : gen_shapes(200, 40, 8, 0.5, 2)) {
    for (const auto& r : s.regions) {
      const auto t = tight_box(r.mask);
      ASSERT_TRUE(t.has_value());
      EXPECT_EQ(r.box, *t);
    }
  }
}

TEST(GenShapesTest, DifficultItemsFollowRules) {
  const Dataset d = gen_shapes(200, 32, 4, 1.0, 3);
  for (const auto& s : d) {
    ASSERT_TRUE(s.difficult);
    ASSERT_EQ(s.regions.size(), 2u);
    EXPECT_NE(s.regions[1].class_id, s.label);
    EXPECT_LT(static_cast<double>(s.class_mask(s.label).count()), 0.25 * 32 * 32);
    EXPECT_TRUE(difficult_trial(s, s.label, 0.25));
  }
}

TEST(GenShapesTest, ImagesInUnitRangeAndLabelsValid) {
  for (const auto& s : gen_shapes(60, 32, 3, 0.3, 4)) {
    EXPECT_GE(s.image.min(), 0.0);
    EXPECT_LE(s.image.max(), 1.0);
    EXPECT_GE(s.label, 0);
    EXPECT_LT(s.label, 3);
    for (int c : s.labels) EXPECT_FALSE(s.class_mask(c).empty_mask());
  }
}

TEST(GenShapesTest, RejectsBadArguments) {
  EXPECT_THROW(gen_shapes(1, 16, 4, 0, 1), ValidationError);
  EXPECT_THROW(gen_shapes(1, 32, 1, 0, 1), ValidationError);
  EXPECT_THROW(gen_shapes(1, 32, 9, 0, 1), ValidationError);
  EXPECT_THROW(gen_shapes(1, 32, 4, 1.5, 1), ValidationError);
}

TEST(PpmTest, BlackImage) {
  const std::string bytes = std::string("P6\n2 2\n255\n") + std::string(12, '\0');
  EXPECT_EQ(decode_ppm(bytes), Tensor(Shape{3, 2, 2}, 0.0));
}

TEST(PpmTest, HandWrittenRedPixel) {
  const std::string bytes = std::string("P6\n# one pixel\n1 1\n255\n") + "\xff" + std::string(2, '\0');
  EXPECT_EQ(decode_ppm(bytes), Tensor(Shape{3, 1, 1}, std::vector<double>{1, 0, 0}));
}

TEST(PpmTest, RoundTripWithinQuantisation) {
  Rng rng(5);
  Tensor img = oracle::random_tensor(rng, {3, 7, 5}, 0, 1);
  const fs::path dir = temp_dir("ppm");
  write_ppm(img, dir / "a.ppm");
  const Tensor back = read_ppm(dir / "a.ppm");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::abs(back[i] - img[i]), 1.0 / 255);
}

TEST(PpmTest, MalformedInputsRejected) {
  EXPECT_THROW(decode_ppm("P3\n1 1\n255\n"), IoError);
  EXPECT_THROW(decode_ppm("P6\n1 1\n65535\n"), IoError);
  EXPECT_THROW(decode_ppm(std::string("P6\n2 1\n255\n") + std::string(5, '\0')), IoError);
  EXPECT_THROW(decode_ppm("P6\n1"), IoError);
}

TEST(DatasetIoTest, RoundTrip) {
  const Dataset d = gen_shapes(25, 32, 4, 0.4, 9);
  const fs::path dir = temp_dir("roundtrip");
  save_dataset(d, dir);
  EXPECT_TRUE(fs::exists(dir / "samples/0000.tns"));
  EXPECT_EQ(load_dataset(dir), d);
}

TEST(DatasetIoTest, MissingTensorNamesSample) {
  const fs::path dir = temp_dir("missing");
  save_dataset(gen_shapes(5, 32, 4, 0.0, 1), dir);
  fs::remove(dir / sample_file_name(3));
  try {
    load_dataset(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("sample 3"), std::string::npos);
  }
}

TEST(DatasetIoTest, OutOfBoundsBoxRejected) {
  const fs::path dir = temp_dir("oob");
  save_dataset(gen_shapes(3, 32, 4, 0.0, 1), dir);
  json m = json::parse(read_file(dir / "manifest.json"));
  m["samples"][1]["regions"][0]["box"] = {0, 0, 40, 10};
  write_file(dir / "manifest.json", m.dump());
  EXPECT_THROW(load_dataset(dir), ValidationError);
}

TEST(DatasetIoTest, ShapeMismatchRejected) {
  const fs::path dir = temp_dir("shape");
  save_dataset(gen_shapes(3, 32, 4, 0.0, 1), dir);
  json m = json::parse(read_file(dir / "manifest.json"));
  m["samples"][0]["height"] = 31;
  write_file(dir / "manifest.json", m.dump());
  EXPECT_THROW(load_dataset(dir), IoError);
}

TEST(MaskTest, RleRoundTripAndBox) {
  Mask m(4, 5);
  m.set(1, 1);
  m.set(1, 2);
  m.set(3, 4);
  EXPECT_EQ(Mask::from_rle(4, 5, m.to_rle()), m);
  EXPECT_EQ(*m.bounding_box(), (BoundingBox{1, 1, 5, 4}));
  EXPECT_FALSE(Mask(3, 3).bounding_box().has_value());
  EXPECT_THROW(Mask::from_rle(2, 2, {3, 5}), ValidationError);
}
