#include <gtest/gtest.h>

#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "vdet/data.hpp"
#include "vdet/log.hpp"

namespace vdet {
namespace {

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Labels, ParsesWithAndWithoutClassColumn) {
  oracle::TempDir dir("labels");
  write_text(dir.path() / "a.txt", "0.5 0.5 0.2 0.1\n\n0 0.25 0.75 0.1 0.3\n");
  const auto boxes = parse_label_file(dir.path() / "a.txt");
  ASSERT_EQ(boxes.size(), 2u);
  EXPECT_DOUBLE_EQ(boxes[0].w, 0.2);
  EXPECT_DOUBLE_EQ(boxes[1].cx, 0.25);
  EXPECT_DOUBLE_EQ(boxes[1].h, 0.3);
  EXPECT_EQ(boxes[1].space, Space::kNormalized);
}

TEST(Labels, ClampsToUnitSquare) {
  oracle::TempDir dir("labels");
  write_text(dir.path() / "a.txt", "0.95 0.5 0.2 0.2\n");
  const auto boxes = parse_label_file(dir.path() / "a.txt");
  ASSERT_EQ(boxes.size(), 1u);
  const Corners c = to_corners(boxes[0]);
  EXPECT_NEAR(c.x1, 0.85, 1e-12);
  EXPECT_NEAR(c.x2, 1.0, 1e-12);
}

TEST(Labels, ErrorsNameFileAndLine) {
  oracle::TempDir dir("labels");
  const std::pair<const char*, const char*> cases[] = {
      {"0.5 0.5 0.2 0.1\n0.5 0.5 abc 0.1\n", ":2:"},
      {"0.5 0.5 0.2\n", ":1:"},
      {"0.5 0.5 0.2 0.1\n\n1 0.5 0.5 0.2 0.1\n", ":3:"},
      {"0.5 0.5 -0.2 0.1\n", ":1:"},
  };
  for (const auto& [text, where] : cases) {
    const fs::path p = dir.path() / "bad.txt";
    write_text(p, text);
    try {
      parse_label_file(p);
      FAIL() << "accepted: " << text;
    } catch (const DatasetError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("bad.txt"), std::string::npos) << msg;
      EXPECT_NE(msg.find(where), std::string::npos) << msg;
    }
  }
  EXPECT_THROW(parse_label_file(dir.path() / "missing.txt"), DatasetError);
}

TEST(Labels, WriteParseRoundTrip) {
  oracle::TempDir dir("labels");
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.1, 0.9), s(0.01, 0.15);
  std::vector<Box> boxes;
  std::vector<double> conf;
  for (int i = 0; i < 50; ++i) {
    boxes.push_back({u(rng), u(rng), s(rng), s(rng), Space::kNormalized});
    conf.push_back(u(rng));
  }
  write_label_file(dir.path() / "l.txt", boxes);
  const auto back = parse_label_file(dir.path() / "l.txt");
  ASSERT_EQ(back.size(), boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) EXPECT_NEAR(back[i].cx, boxes[i].cx, 1e-8);

  write_label_file(dir.path() / "p.txt", boxes, conf);
  const auto dets = parse_prediction_file(dir.path() / "p.txt");
  ASSERT_EQ(dets.size(), boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    EXPECT_EQ(dets[i].box.w, boxes[i].w);
    EXPECT_EQ(dets[i].confidence, conf[i]);
  }
}

TEST(Labels, PredictionConfidenceRange) {
  oracle::TempDir dir("labels");
  write_text(dir.path() / "p.txt", "0.5 0.5 0.1 0.1 1.5\n");
  EXPECT_THROW(parse_prediction_file(dir.path() / "p.txt"), DatasetError);
}

TEST(Coordinates, PixelNormalizedRoundTrip) {
  const Box n{0.25, 0.5, 0.1, 0.2, Space::kNormalized};
  const Box p = to_pixel(n, 400, 200);
  EXPECT_DOUBLE_EQ(p.cx, 100);
  EXPECT_DOUBLE_EQ(p.h, 40);
  const Box back = to_normalized(p, 400, 200);
  EXPECT_DOUBLE_EQ(back.cx, n.cx);
  EXPECT_DOUBLE_EQ(back.h, n.h);
  EXPECT_THROW(to_pixel(p, 400, 200), SpaceMismatch);
}

TEST(Letterbox, WideImagePadsVertically) {
  const cv::Mat img(100, 200, CV_8UC3, cv::Scalar(10, 20, 30));
  const std::vector<Box> boxes = {{100, 50, 20, 10, Space::kPixel}};
  const LetterboxResult r = letterbox(img, boxes, 64);
  EXPECT_EQ(r.image.cols, 64);
  EXPECT_EQ(r.image.rows, 64);
  EXPECT_DOUBLE_EQ(r.transform.pad_x, 0.0);
  EXPECT_DOUBLE_EQ(r.transform.pad_y, 16.0);
  EXPECT_EQ(r.image.at<cv::Vec3b>(0, 32), cv::Vec3b(kPadGray, kPadGray, kPadGray));
  EXPECT_EQ(r.image.at<cv::Vec3b>(32, 32), cv::Vec3b(10, 20, 30));
  ASSERT_EQ(r.boxes.size(), 1u);
  EXPECT_NEAR(r.boxes[0].cx, 32, 1e-9);
  EXPECT_NEAR(r.boxes[0].cy, 32, 1e-9);
  EXPECT_NEAR(r.boxes[0].w, 6.4, 1e-9);
}

TEST(Letterbox, InverseRoundTripWithinHalfPixel) {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> dim(40, 900);
  for (int t = 0; t < 50; ++t) {
    const int w = dim(rng), h = dim(rng);
    const cv::Mat img(h, w, CV_8UC3, cv::Scalar::all(0));
    std::vector<Box> boxes;
    for (int i = 0; i < 5; ++i) {
      Box b = oracle::random_box(rng, std::min(w, h), 30);
      boxes.push_back(b);
    }
    const LetterboxResult r = letterbox(img, boxes, 256);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const Box back = r.transform.inverse(r.boxes[i]);
      EXPECT_NEAR(back.cx, boxes[i].cx, 0.5);
      EXPECT_NEAR(back.cy, boxes[i].cy, 0.5);
      EXPECT_NEAR(back.w, boxes[i].w, 0.5);
      EXPECT_NEAR(back.h, boxes[i].h, 0.5);
    }
  }
}

Sample solid_sample(const std::string& id, int value, std::vector<Box> boxes) {
  return {id, cv::Mat(64, 64, CV_8UC3, cv::Scalar::all(value)), std::move(boxes)};
}

TEST(Mosaic, QuadrantsAndClipping) {
  const Box centre{32, 32, 10, 10, Space::kPixel};
  const std::vector<Sample> s = {solid_sample("a", 10, {centre}), solid_sample("b", 20, {centre}),
                                 solid_sample("c", 30, {centre}), solid_sample("d", 40, {centre})};
  const Sample m = mosaic_augment(s, 32, 32);
  EXPECT_EQ(m.image.at<cv::Vec3b>(5, 5)[0], 10);
  EXPECT_EQ(m.image.at<cv::Vec3b>(5, 60)[0], 20);
  EXPECT_EQ(m.image.at<cv::Vec3b>(60, 5)[0], 30);
  EXPECT_EQ(m.image.at<cv::Vec3b>(60, 60)[0], 40);
  // Each source's centre box is clipped to a 5x5 corner of its quadrant.
  ASSERT_EQ(m.boxes.size(), 4u);
  for (const Box& b : m.boxes) {
    EXPECT_NEAR(b.w, 5, 1e-9);
    EXPECT_NEAR(b.h, 5, 1e-9);
  }
}

TEST(Mosaic, DropsTinyRemnantsAndKeepsBoxesInside) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < 100; ++t) {
    std::vector<Sample> s;
    for (int k = 0; k < 4; ++k) {
      std::vector<Box> boxes;
      for (int i = 0; i < 4; ++i) boxes.push_back(oracle::random_box(rng, 64, 20));
      s.push_back(solid_sample(std::to_string(k), k, boxes));
    }
    const Sample m = mosaic_augment(s, rng);
    for (const Box& b : m.boxes) {
      EXPECT_GE(b.w * b.h, kMinMosaicArea - 1e-9);
      const Corners c = to_corners(b);
      EXPECT_GE(c.x1, -1e-9);
      EXPECT_GE(c.y1, -1e-9);
      EXPECT_LE(c.x2, 64 + 1e-9);
      EXPECT_LE(c.y2, 64 + 1e-9);
    }
  }
  const std::vector<Sample> three(3, solid_sample("x", 0, {}));
  EXPECT_THROW(mosaic_augment(three, rng), std::invalid_argument);
}

TEST(Tensor, PacksNchwInUnitRange) {
  cv::Mat img(2, 3, CV_8UC3, cv::Scalar(0, 255, 51));
  const Tensor t = to_tensor(std::vector<cv::Mat>{img});
  EXPECT_EQ(t.shape().n, 1);
  EXPECT_EQ(t.shape().c, 3);
  EXPECT_EQ(t.shape().h, 2);
  EXPECT_EQ(t.shape().w, 3);
  EXPECT_FLOAT_EQ(t.values()[0], 0.0f);
  EXPECT_FLOAT_EQ(t.values()[6], 1.0f);
  EXPECT_FLOAT_EQ(t.values()[12], 0.2f);
}

TEST(Split, DeterministicAndStable) {
  std::vector<std::string> stems;
  for (int i = 0; i < 100; ++i) stems.push_back("img" + std::to_string(i));
  const auto a = make_split(stems, 0.2, 5);
  const auto b = make_split(stems, 0.2, 5);
  EXPECT_EQ(a, b);
  int val = 0;
  for (const auto& [stem, s] : a) val += s == Split::kVal;
  EXPECT_EQ(val, 20);
  std::vector<std::string> reversed(stems.rbegin(), stems.rend());
  EXPECT_EQ(make_split(reversed, 0.2, 5), a);
  EXPECT_NE(make_split(stems, 0.2, 6), a);

  oracle::TempDir dir("split");
  write_split(dir.path(), a);
  EXPECT_EQ(read_split(dir.path()), a);
  EXPECT_TRUE(read_split(dir.path() / "nowhere").empty());
}

TEST(Dataset, LoadsSortedRecordsAndWarnsOnMissingLabels) {
  oracle::TempDir dir("dataset");
  fs::create_directories(dir.path() / "images");
  cv::Mat img(30, 40, CV_8UC3, cv::Scalar::all(90));
  save_image_rgb(dir.path() / "images" / "b.png", img);
  save_image_rgb(dir.path() / "images" / "a.png", img);
  write_text(dir.path() / "images" / "notes.md", "ignored");
  write_text(dir.path() / "labels" / "a.txt", "0.5 0.5 0.5 0.5\n");
  log::set_level(log::Level::kError);
  const auto recs = load_dataset(dir.path());
  log::set_level(log::Level::kInfo);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].stem, "a");
  EXPECT_EQ(recs[0].boxes.size(), 1u);
  EXPECT_EQ(recs[0].image_w, 40);
  EXPECT_EQ(recs[0].image_h, 30);
  EXPECT_TRUE(recs[1].boxes.empty());
  EXPECT_THROW(load_dataset(dir.path() / "absent"), DatasetError);
}

TEST(Images, LoadsGrayAndSixteenBitAsRgb) {
  oracle::TempDir dir("images");
  cv::Mat gray(4, 4, CV_8UC1, cv::Scalar(77));
  cv::imwrite((dir.path() / "g.png").string(), gray);
  cv::Mat deep(4, 4, CV_16UC3, cv::Scalar(257 * 10, 257 * 20, 257 * 30));  // BGR
  cv::imwrite((dir.path() / "d.png").string(), deep);
  const cv::Mat g = load_image_rgb(dir.path() / "g.png");
  EXPECT_EQ(g.type(), CV_8UC3);
  EXPECT_EQ(g.at<cv::Vec3b>(1, 1), cv::Vec3b(77, 77, 77));
  const cv::Mat d = load_image_rgb(dir.path() / "d.png");
  EXPECT_EQ(d.type(), CV_8UC3);
  EXPECT_EQ(d.at<cv::Vec3b>(0, 0), cv::Vec3b(30, 20, 10));
  write_text(dir.path() / "broken.png", "not an image");
  EXPECT_THROW(load_image_rgb(dir.path() / "broken.png"), DatasetError);
}

SyntheticSceneSpec small_scene(std::uint64_t seed) {
  SyntheticSceneSpec s;
  s.canvas_w = s.canvas_h = 256;
  s.seed = seed;
  return s;
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = generate_synthetic_scene(small_scene(3));
  const auto b = generate_synthetic_scene(small_scene(3));
  const auto c = generate_synthetic_scene(small_scene(4));
  EXPECT_EQ(cv::norm(a.image, b.image, cv::NORM_INF), 0.0);
  EXPECT_EQ(a.boxes, b.boxes);
  EXPECT_GT(cv::norm(a.image, c.image, cv::NORM_INF), 0.0);
}

TEST(Synthetic, BoxesTightlyBoundVessels) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto scene = generate_synthetic_scene(small_scene(seed));
    ASSERT_EQ(scene.boxes.size(), scene.vessels.size());
    EXPECT_GE(scene.boxes.size(), 2u);
    EXPECT_LE(scene.boxes.size(), 8u);
    for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
      const Box& b = scene.boxes[i];
      const VesselShape& v = scene.vessels[i];
      EXPECT_DOUBLE_EQ(b.cx, v.cx);
      EXPECT_DOUBLE_EQ(b.w, 2 * v.semi_x);
      EXPECT_DOUBLE_EQ(b.h, 2 * v.semi_y);
      // Ellipse extreme points touch the box edges.
      const Corners c = to_corners(b);
      EXPECT_NEAR(v.cx + v.semi_x, c.x2, 1e-9);
      EXPECT_NEAR(v.cy - v.semi_y, c.y1, 1e-9);
      EXPECT_GE(c.x1, 0);
      EXPECT_GE(c.y1, 0);
      EXPECT_LE(c.x2, 256);
      EXPECT_LE(c.y2, 256);
    }
  }
}

TEST(Synthetic, ZeroVesselsGivesEmptyLabels) {
  SyntheticSceneSpec s = small_scene(1);
  s.n_vessels = {0, 0};
  const auto scene = generate_synthetic_scene(s);
  EXPECT_TRUE(scene.boxes.empty());
  EXPECT_EQ(scene.image.rows, 256);
}

TEST(Synthetic, ValidationRejectsBadSpecs) {
  SyntheticSceneSpec s = small_scene(1);
  s.n_vessels = {5, 2};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_scene(1);
  s.vessel_length = {40, 400};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = small_scene(1);
  s.noise_level = 2;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Synthetic, JsonRoundTrip) {
  SyntheticDatasetSpec spec;
  spec.scene = small_scene(99);
  spec.scene.vessel_width = {10, 20};
  spec.n_images = 7;
  spec.val_fraction = 0.3;
  EXPECT_EQ(synthetic_spec_from_json(to_json(spec)), spec);
  EXPECT_THROW(synthetic_spec_from_json("{not json"), std::invalid_argument);
}

TEST(Synthetic, DatasetOnDiskIsReproducibleAndSplitIsPure) {
  SyntheticDatasetSpec spec;
  spec.scene = small_scene(21);
  spec.n_images = 10;
  spec.val_fraction = 0.3;
  oracle::TempDir a("synth"), b("synth");
  write_synthetic_dataset(spec, a.path());
  write_synthetic_dataset(spec, b.path());
  for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a.path());
    EXPECT_EQ(read_text(entry.path()), read_text(b.path() / rel)) << rel;
  }
  const auto split = read_split(a.path());
  ASSERT_EQ(split.size(), 10u);
  std::set<std::string> train, val;
  for (const auto& [stem, s] : split) (s == Split::kVal ? val : train).insert(stem);
  EXPECT_EQ(val.size(), 3u);
  for (const auto& stem : val) EXPECT_EQ(train.count(stem), 0u);
  const auto recs = load_dataset(a.path());
  ASSERT_EQ(recs.size(), 10u);
  const auto scene0 = generate_synthetic_scene([&] {
    SyntheticSceneSpec s = spec.scene;
    s.seed = scene_seed(spec.scene.seed, 0);
    return s;
  }());
  ASSERT_EQ(recs[0].boxes.size(), scene0.boxes.size());
  for (std::size_t i = 0; i < scene0.boxes.size(); ++i)
    EXPECT_NEAR(recs[0].boxes[i].cx * 256, scene0.boxes[i].cx, 1e-5);
}

}  // namespace
}  // namespace vdet
