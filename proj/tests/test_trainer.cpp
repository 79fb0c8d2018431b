#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "oracles.hpp"
#include "vdet/checkpoint.hpp"
#include "vdet/log.hpp"
#include "vdet/trainer.hpp"

namespace vdet {
namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.input_h = cfg.input_w = 64;
  cfg.backbone = BackboneId::kYolov7Tiny;
  cfg.neck_width_multiplier = 0.25;
  cfg.backbone_width_multiplier = 0.25;
  cfg.max_w_frac = cfg.max_h_frac = 0.5;
  return cfg;
}

std::vector<PreparedSample> synthetic_samples(int n, int size, std::uint64_t seed) {
  std::vector<PreparedSample> out;
  for (int i = 0; i < n; ++i) {
    SyntheticSceneSpec spec;
    spec.canvas_w = spec.canvas_h = 128;
    spec.vessel_length = {20, 40};
    spec.vessel_width = {8, 16};
    spec.n_vessels = {1, 3};
    spec.seed = seed + i;
    const SyntheticScene scene = generate_synthetic_scene(spec);
    LetterboxResult lb = letterbox(scene.image, scene.boxes, size);
    out.push_back({"s" + std::to_string(i), lb.image, lb.boxes, lb.transform, 128, 128});
  }
  return out;
}

std::vector<float> flat_params(const Model& m) {
  std::vector<float> out;
  for (const nn::Param* p : m.network().params()) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.eval_conf_sweep = {};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Optimizer, WarmupThenCosine) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.final_lr_factor = 0.01;
  const Optimizer opt(cfg, 110, 10);
  EXPECT_NEAR(opt.learning_rate(0), 0.01, 1e-12);
  EXPECT_NEAR(opt.learning_rate(9), 0.1, 1e-12);
  EXPECT_NEAR(opt.learning_rate(10), 0.1, 1e-12);
  EXPECT_NEAR(opt.learning_rate(60), 0.1 * (0.01 + 0.99 * 0.5), 1e-12);
  EXPECT_NEAR(opt.learning_rate(110), 0.001, 1e-12);
  for (long s = 11; s <= 110; ++s) EXPECT_LE(opt.learning_rate(s), opt.learning_rate(s - 1));
}

TEST(Optimizer, MomentumAndDecayUpdate) {
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.1;
  Model model(tiny_model(), 1);
  std::vector<nn::Param*> params = model.network().params();
  for (nn::Param* p : params) std::fill(p->grad.begin(), p->grad.end(), 1.0f);
  const std::vector<float> w0 = flat_params(model);
  Optimizer opt(cfg, 100, 0);
  opt.step(model.network(), 0);
  const std::vector<float> w1 = flat_params(model);
  std::size_t k = 0;
  for (const nn::Param* p : params) {
    const double wd = p->decay ? 0.1 : 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i, ++k) {
      const double v = 1.0 + wd * w0[k];
      EXPECT_NEAR(w1[k], w0[k] - 0.5 * v, 1e-6);
    }
  }
}

TEST(Training, GradientAccumulationMatchesLargeBatch) {
  const ModelConfig mcfg = tiny_model();
  const auto samples = synthetic_samples(4, 64, 40);
  TrainConfig a;
  a.batch_size = 4;
  a.accumulation_steps = 1;
  TrainConfig b = a;
  b.batch_size = 2;
  b.accumulation_steps = 2;
  Model ma(mcfg, 3), mb(mcfg, 3);
  Optimizer oa(a, 10, 0), ob(b, 10, 0);
  const StepStats sa = train_step(ma, oa, 0, samples, a);
  const StepStats sb = train_step(mb, ob, 0, samples, b);
  EXPECT_NEAR(sa.loss, sb.loss, 1e-6 * std::abs(sa.loss));
  const auto pa = flat_params(ma), pb = flat_params(mb);
  ASSERT_EQ(pa.size(), pb.size());
  double worst = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) worst = std::max(worst, std::abs(double(pa[i]) - pb[i]));
  EXPECT_LE(worst, 1e-6);
}

TEST(Training, UntrainedModelIsQuietAtHalfConfidence) {
  Model model(tiny_model(), 5);
  const auto samples = synthetic_samples(2, 64, 50);
  for (const auto& s : samples) EXPECT_TRUE(detect(model, s.image, 0.5, 0.5).empty());
}

TEST(Training, DeriveMaxFractions) {
  EXPECT_FALSE(derive_max_fractions({}).has_value());
  std::vector<AnnotationRecord> recs(2);
  recs[0].boxes = {{0.5, 0.5, 0.2, 0.1, Space::kNormalized}};
  recs[1].boxes = {{0.5, 0.5, 0.1, 0.95, Space::kNormalized}};
  const auto f = derive_max_fractions(recs);
  ASSERT_TRUE(f.has_value());
  EXPECT_NEAR(f->first, 0.22, 1e-12);
  EXPECT_NEAR(f->second, 1.0, 1e-12);
}

TEST(Training, MapsDetectionsBackToOriginalImage) {
  const cv::Mat img(100, 200, CV_8UC3, cv::Scalar::all(0));
  const std::vector<Box> boxes = {{150, 25, 40, 10, Space::kPixel}};
  const LetterboxResult lb = letterbox(img, boxes, 64);
  const std::vector<Detection> dets = {{lb.boxes[0], 0.7}};
  const auto back = to_original_normalized(dets, lb.transform, 200, 100);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_NEAR(back[0].box.cx, 0.75, 1e-9);
  EXPECT_NEAR(back[0].box.cy, 0.25, 1e-9);
  EXPECT_NEAR(back[0].box.w, 0.2, 1e-9);
  EXPECT_EQ(back[0].box.space, Space::kNormalized);
  EXPECT_EQ(back[0].confidence, 0.7);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  oracle::TempDir dir("ckpt");
  Model model(tiny_model(), 9);
  TrainConfig tcfg;
  tcfg.learning_rate = 0.02;
  tcfg.neighbor_mode = NeighborMode::k4;
  Optimizer opt(tcfg, 10, 0);
  train_step(model, opt, 0, synthetic_samples(2, 64, 60), tcfg);
  const CheckpointMeta meta{model.config(), tcfg, 3, 0.75, 0.35};
  save_checkpoint(dir.path() / "m.ckpt", model, meta);

  CheckpointMeta read;
  Model loaded = load_checkpoint(dir.path() / "m.ckpt", &read);
  EXPECT_EQ(read.train, tcfg);
  EXPECT_EQ(read.epoch, 3);
  EXPECT_DOUBLE_EQ(read.best_f2, 0.75);
  EXPECT_DOUBLE_EQ(read.best_threshold, 0.35);
  EXPECT_EQ(read_checkpoint_meta(dir.path() / "m.ckpt").epoch, 3);
  Tensor img({1, 3, 64, 64}, 0.4f);
  const auto ra = model.forward(img, nn::Mode::kEval);
  const auto rb = loaded.forward(img, nn::Mode::kEval);
  for (int l = 0; l < 3; ++l) EXPECT_EQ(ra[l].values, rb[l].values);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  oracle::TempDir dir("ckpt");
  Model model(tiny_model(), 9);
  save_checkpoint(dir.path() / "m.ckpt", model, {model.config(), TrainConfig{}, 0, 0, 0.5});
  std::ifstream in(dir.path() / "m.ckpt", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  std::ofstream(dir.path() / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 100);
  std::ofstream(dir.path() / "magic.ckpt", std::ios::binary) << "XXXX" << bytes.substr(4);
  EXPECT_THROW(load_checkpoint(dir.path() / "short.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir.path() / "magic.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir.path() / "absent.ckpt"), CheckpointError);
}

TEST(Training, ShortRunWritesArtifacts) {
  oracle::TempDir dir("train");
  SyntheticDatasetSpec spec;
  spec.scene.canvas_w = spec.scene.canvas_h = 128;
  spec.scene.vessel_length = {20, 40};
  spec.scene.vessel_width = {8, 16};
  spec.n_images = 6;
  spec.val_fraction = 0.34;
  write_synthetic_dataset(spec, dir.path() / "data");
  const auto recs = load_dataset(dir.path() / "data");
  const auto split = read_split(dir.path() / "data");
  std::vector<AnnotationRecord> train_recs, val_recs;
  for (const auto& r : recs) (split.at(r.stem) == Split::kVal ? val_recs : train_recs).push_back(r);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.input_size = 64;
  cfg.warmup_epochs = 1;
  int calls = 0;
  log::set_level(log::Level::kError);
  const TrainResult r = train(tiny_model(), cfg, train_recs, val_recs, dir.path() / "run",
                              [&](const EpochRecord&) { ++calls; });
  log::set_level(log::Level::kInfo);
  EXPECT_EQ(calls, 2);
  ASSERT_EQ(r.history.size(), 2u);
  for (const auto& e : r.history) EXPECT_TRUE(std::isfinite(e.mean_loss));
  EXPECT_TRUE(fs::exists(dir.path() / "run" / "last.ckpt"));
  EXPECT_TRUE(fs::exists(dir.path() / "run" / "train_log.jsonl"));
  ASSERT_NE(r.model, nullptr);
  // Derived size bound replaces the configured one.
  EXPECT_LT(r.model->config().max_w_frac, 0.5);
  EXPECT_THROW(validate(*r.model, std::span<const AnnotationRecord>{}, cfg), std::exception);
}

}  // namespace
}  // namespace vdet
