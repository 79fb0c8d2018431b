#include "vdet/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vdet {

const char* to_string(BackboneId id) {
  switch (id) {
    case BackboneId::kVgg11Bn: return "vgg11bn";
    case BackboneId::kYolov7Tiny: return "yolov7tiny";
    case BackboneId::kResnet18: return "resnet18";
  }
  return "unknown";
}

BackboneId parse_backbone(const std::string& name) {
  if (name == "vgg11bn") return BackboneId::kVgg11Bn;
  if (name == "yolov7tiny") return BackboneId::kYolov7Tiny;
  if (name == "resnet18") return BackboneId::kResnet18;
  throw ConfigError("unknown backbone '" + name + "' (expected vgg11bn|yolov7tiny|resnet18)");
}

const char* to_string(UpsampleMode mode) {
  return mode == UpsampleMode::kNearest ? "nearest" : "bilinear";
}

UpsampleMode parse_upsample(const std::string& name) {
  if (name == "nearest") return UpsampleMode::kNearest;
  if (name == "bilinear") return UpsampleMode::kBilinear;
  throw ConfigError("unknown upsample mode '" + name + "' (expected nearest|bilinear)");
}

void ModelConfig::validate() const {
  if (num_levels != kNumLevels) throw ConfigError("num_levels must be 3");
  if (level_strides != std::array<int, kNumLevels>{8, 16, 32})
    throw ConfigError("level_strides must be 8,16,32 for the supported architectures");
  if (input_h <= 0 || input_w <= 0) throw ConfigError("input size must be positive");
  const int largest = level_strides.back();
  if (input_h % largest != 0 || input_w % largest != 0)
    throw ConfigError("input size " + std::to_string(input_w) + "x" + std::to_string(input_h) +
                      " is not divisible by the largest stride " + std::to_string(largest));
  if (!(max_w_frac > 0.0 && max_w_frac <= 1.0) || !(max_h_frac > 0.0 && max_h_frac <= 1.0))
    throw ConfigError("max_w_frac and max_h_frac must lie in (0, 1]");
  if (!(neck_width_multiplier > 0.0) || !(backbone_width_multiplier > 0.0))
    throw ConfigError("width multipliers must be positive");
}

RawGridPrediction::RawGridPrediction(int level, int batch, int grid_h, int grid_w)
    : level(level),
      batch(batch),
      grid_h(grid_h),
      grid_w(grid_w),
      values(static_cast<std::size_t>(batch) * grid_h * grid_w * kOutputsPerCell, 0.0) {}

RawGridPrediction RawGridPrediction::slice(int b) const {
  RawGridPrediction out(level, 1, grid_h, grid_w);
  const std::size_t len = cells() * kOutputsPerCell;
  std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(b * len), len, out.values.begin());
  return out;
}

double sigmoid(double t) {
  constexpr double kLo = std::numeric_limits<double>::min();
  constexpr double kHi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  const double s = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
  return std::clamp(s, kLo, kHi);
}

DecodedCell decode_cell(const std::array<double, kOutputsPerCell>& t, int row, int col, int level,
                        const ModelConfig& cfg) {
  const double stride_x = static_cast<double>(cfg.input_w) / cfg.grid_w(level);
  const double stride_y = static_cast<double>(cfg.input_h) / cfg.grid_h(level);
  const double sw = sigmoid(t[2]);
  const double sh = sigmoid(t[3]);
  DecodedCell d;
  d.cx = (2.0 * sigmoid(t[0]) - 0.5 + col) * stride_x;
  d.cy = (2.0 * sigmoid(t[1]) - 0.5 + row) * stride_y;
  // sigma^2 * g * m * (s / g) collapses to sigma^2 * m * s; the bound is
  // formed first so the product stays strictly below it.
  d.w = (sw * sw) * cfg.max_box_w();
  d.h = (sh * sh) * cfg.max_box_h();
  d.conf = sigmoid(t[4]);
  return d;
}

std::vector<Detection> decode(const RawGridPrediction& raw, const ModelConfig& cfg, int image) {
  std::vector<Detection> out;
  out.reserve(raw.cells());
  std::array<double, kOutputsPerCell> t{};
  for (int r = 0; r < raw.grid_h; ++r) {
    for (int c = 0; c < raw.grid_w; ++c) {
      for (int k = 0; k < kOutputsPerCell; ++k) t[k] = raw.at(image, r, c, k);
      const DecodedCell d = decode_cell(t, r, c, raw.level, cfg);
      out.push_back({d.box(), d.conf});
    }
  }
  return out;
}

EncodedCenter encode_center(double cx, double cy, int level, const ModelConfig& cfg) {
  const double gx = cx * cfg.grid_w(level) / cfg.input_w;
  const double gy = cy * cfg.grid_h(level) / cfg.input_h;
  EncodedCenter e;
  e.col = std::clamp(static_cast<int>(std::floor(gx)), 0, cfg.grid_w(level) - 1);
  e.row = std::clamp(static_cast<int>(std::floor(gy)), 0, cfg.grid_h(level) - 1);
  // offset = 2 sigma(t) - 0.5  =>  sigma(t) = (offset + 0.5) / 2
  const auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  e.tx = logit((gx - e.col + 0.5) / 2.0);
  e.ty = logit((gy - e.row + 0.5) / 2.0);
  return e;
}

namespace {

int scaled(int channels, double multiplier) {
  return std::max(4, static_cast<int>(std::lround(channels * multiplier)));
}

// Graph-building helpers shared by the backbones and the neck.
class Builder {
 public:
  Builder(nn::Network& net, std::string prefix) : net_(net), prefix_(std::move(prefix)) {}

  // "c": conv + batch norm + ReLU.
  int c(int in, int ch, int k, int stride = 1) {
    const std::string name = prefix_ + "." + std::to_string(counter_++);
    const int x = net_.conv(in, ch, k, stride, false, name + ".conv");
    return net_.relu(net_.batch_norm(x, name + ".bn"));
  }

  // conv + batch norm, no activation (residual branches).
  int cb(int in, int ch, int k, int stride = 1) {
    const std::string name = prefix_ + "." + std::to_string(counter_++);
    const int x = net_.conv(in, ch, k, stride, false, name + ".conv");
    return net_.batch_norm(x, name + ".bn");
  }

  // "b": two parallel 1x1 branches, the second followed by two stacked 3x3
  // convolutions; all four maps are concatenated and fused by a 1x1 "c".
  int b(int in, int mid, int out) {
    const int left = c(in, mid, 1);
    const int right = c(in, mid, 1);
    const int r1 = c(right, mid, 3);
    const int r2 = c(r1, mid, 3);
    return c(net_.concat({r2, r1, right, left}), out, 1);
  }

  nn::Network& net() { return net_; }

 private:
  nn::Network& net_;
  std::string prefix_;
  int counter_ = 0;
};

struct Features {
  int c3, c4, c5;
};

Features yolov7tiny_backbone(nn::Network& net, int input, double m) {
  Builder bb(net, "backbone");
  int x = bb.c(input, scaled(32, m), 3, 2);
  x = bb.c(x, scaled(64, m), 3, 2);
  x = bb.b(x, scaled(32, m), scaled(64, m));
  x = net.max_pool(x, 2, 2);
  const int c3 = bb.b(x, scaled(64, m), scaled(128, m));
  x = net.max_pool(c3, 2, 2);
  const int c4 = bb.b(x, scaled(128, m), scaled(256, m));
  x = net.max_pool(c4, 2, 2);
  const int c5 = bb.b(x, scaled(256, m), scaled(512, m));
  return {c3, c4, c5};
}

Features vgg11bn_backbone(nn::Network& net, int input, double m) {
  Builder bb(net, "backbone");
  int x = bb.c(input, scaled(64, m), 3);
  x = net.max_pool(x, 2, 2);
  x = bb.c(x, scaled(128, m), 3);
  x = net.max_pool(x, 2, 2);
  x = bb.c(x, scaled(256, m), 3);
  x = bb.c(x, scaled(256, m), 3);
  x = net.max_pool(x, 2, 2);
  x = bb.c(x, scaled(512, m), 3);
  const int c3 = bb.c(x, scaled(512, m), 3);
  x = net.max_pool(c3, 2, 2);
  x = bb.c(x, scaled(512, m), 3);
  const int c4 = bb.c(x, scaled(512, m), 3);
  const int c5 = net.max_pool(c4, 2, 2);
  return {c3, c4, c5};
}

int basic_block(Builder& bb, int in, int ch, int stride) {
  nn::Network& net = bb.net();
  int shortcut = in;
  if (stride != 1 || net.channels(in) != ch) shortcut = bb.cb(in, ch, 1, stride);
  const int x = bb.c(in, ch, 3, stride);
  const int y = bb.cb(x, ch, 3);
  return net.relu(net.add(y, shortcut));
}

Features resnet18_backbone(nn::Network& net, int input, double m) {
  Builder bb(net, "backbone");
  int x = bb.c(input, scaled(64, m), 7, 2);
  x = net.max_pool(x, 3, 2, 1);
  x = basic_block(bb, x, scaled(64, m), 1);
  x = basic_block(bb, x, scaled(64, m), 1);
  x = basic_block(bb, x, scaled(128, m), 2);
  const int c3 = basic_block(bb, x, scaled(128, m), 1);
  x = basic_block(bb, c3, scaled(256, m), 2);
  const int c4 = basic_block(bb, x, scaled(256, m), 1);
  x = basic_block(bb, c4, scaled(512, m), 2);
  const int c5 = basic_block(bb, x, scaled(512, m), 1);
  return {c3, c4, c5};
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int input = net_.input(3);
  Features f{};
  switch (cfg_.backbone) {
    case BackboneId::kYolov7Tiny:
      f = yolov7tiny_backbone(net_, input, cfg_.backbone_width_multiplier);
      break;
    case BackboneId::kVgg11Bn: f = vgg11bn_backbone(net_, input, cfg_.backbone_width_multiplier); break;
    case BackboneId::kResnet18:
      f = resnet18_backbone(net_, input, cfg_.backbone_width_multiplier);
      break;
  }

  // Neck: YOLOv7-tiny style SPP + top-down and bottom-up paths.
  const double m = cfg_.neck_width_multiplier;
  const bool bilinear = cfg_.upsample == UpsampleMode::kBilinear;
  Builder nk(net_, "neck");

  const int spp_skip = nk.c(f.c5, scaled(256, m), 1);
  const int spp_in = nk.c(f.c5, scaled(256, m), 1);
  const int m5 = net_.max_pool(spp_in, 5, 1);
  const int m9 = net_.max_pool(spp_in, 9, 1);
  const int m13 = net_.max_pool(spp_in, 13, 1);
  const int spp = nk.c(net_.concat({m13, m9, m5, spp_in}), scaled(256, m), 1);
  const int p5 = nk.c(net_.concat({spp, spp_skip}), scaled(256, m), 1);

  int up = net_.upsample(nk.c(p5, scaled(128, m), 1), 2, bilinear);
  const int p4 = nk.b(net_.concat({up, nk.c(f.c4, scaled(128, m), 1)}), scaled(64, m),
                      scaled(128, m));

  up = net_.upsample(nk.c(p4, scaled(64, m), 1), 2, bilinear);
  const int out3 = nk.b(net_.concat({up, nk.c(f.c3, scaled(64, m), 1)}), scaled(32, m),
                        scaled(64, m));

  int down = nk.c(out3, scaled(128, m), 3, 2);
  const int out4 = nk.b(net_.concat({down, p4}), scaled(64, m), scaled(128, m));

  down = nk.c(out4, scaled(256, m), 3, 2);
  const int out5 = nk.b(net_.concat({down, p5}), scaled(128, m), scaled(256, m));

  neck_out_ = {out3, out4, out5};

  // Head: one conv block and one output conv with 5 channels per level.
  std::vector<int> outputs;
  for (int level = 0; level < kNumLevels; ++level) {
    Builder hd(net_, "head.p" + std::to_string(level));
    const int in = neck_out_[level];
    const int x = hd.c(in, 2 * net_.channels(in), 3);
    outputs.push_back(net_.conv(x, kOutputsPerCell, 1, 1, true,
                                "head.p" + std::to_string(level) + ".out"));
  }
  net_.set_outputs(outputs);

  for (int level = 0; level < kNumLevels; ++level) {
    if (net_.stride(outputs[level]) != cfg_.level_strides[level])
      throw ConfigError("internal: level " + std::to_string(level) + " has stride " +
                        std::to_string(net_.stride(outputs[level])));
  }

  net_.initialize(seed);

  // Small output weights and a confidence prior of 0.01 keep early
  // predictions almost entirely negative.
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> dist(0.0, 0.01);
  const float conf_prior = static_cast<float>(std::log(0.01 / 0.99));
  for (nn::Param* p : net_.params()) {
    if (!p->name.starts_with("head.") || p->name.find(".out.") == std::string::npos) continue;
    if (p->name.ends_with(".weight")) {
      for (float& v : p->value) v = static_cast<float>(dist(rng));
    } else if (p->name.ends_with(".bias")) {
      std::fill(p->value.begin(), p->value.end(), 0.0f);
      p->value[4] = conf_prior;
    }
  }
}

std::vector<RawGridPrediction> Model::forward(const Tensor& images, nn::Mode mode) {
  const Shape& s = images.shape();
  if (s.c != 3 || s.h != cfg_.input_h || s.w != cfg_.input_w)
    throw std::invalid_argument("model input shape mismatch: expected (N, 3, " +
                                std::to_string(cfg_.input_h) + ", " +
                                std::to_string(cfg_.input_w) + "), got " + to_string(s));
  if (s.n < 1) throw std::invalid_argument("model input has an empty batch");

  const std::vector<Tensor> outs = net_.forward(images, mode);
  std::vector<RawGridPrediction> raw;
  raw.reserve(outs.size());
  for (int level = 0; level < kNumLevels; ++level) {
    const Tensor& t = outs[level];
    const Shape& o = t.shape();
    RawGridPrediction g(level, o.n, o.h, o.w);
    for (int n = 0; n < o.n; ++n)
      for (int k = 0; k < kOutputsPerCell; ++k)
        for (int y = 0; y < o.h; ++y)
          for (int x = 0; x < o.w; ++x) g.at(n, y, x, k) = t.at(n, k, y, x);
    raw.push_back(std::move(g));
  }
  return raw;
}

void Model::backward(const std::vector<RawGridPrediction>& grads) {
  if (grads.size() != kNumLevels) throw std::invalid_argument("backward: expected 3 levels");
  std::vector<Tensor> tg;
  tg.reserve(kNumLevels);
  for (const RawGridPrediction& g : grads) {
    Tensor t({g.batch, kOutputsPerCell, g.grid_h, g.grid_w});
    for (int n = 0; n < g.batch; ++n)
      for (int k = 0; k < kOutputsPerCell; ++k)
        for (int y = 0; y < g.grid_h; ++y)
          for (int x = 0; x < g.grid_w; ++x)
            t.at(n, k, y, x) = static_cast<float>(g.at(n, y, x, k));
    tg.push_back(std::move(t));
  }
  net_.backward(tg);
}

std::vector<Detection> postprocess(const std::vector<RawGridPrediction>& raw,
                                   const ModelConfig& cfg, int image, double conf_thresh,
                                   double nms_iou_thresh) {
  std::vector<Detection> all;
  for (const RawGridPrediction& level : raw) {
    for (const Detection& d : decode(level, cfg, image))
      if (d.confidence >= conf_thresh) all.push_back(d);
  }
  return nms(std::move(all), nms_iou_thresh, std::min(conf_thresh, std::nextafter(1.0, 0.0)));
}

std::vector<Detection> predict(Model& model, const Tensor& image, double conf_thresh,
                               double nms_iou_thresh) {
  if (image.shape().n != 1) throw std::invalid_argument("predict expects a single image");
  if (!(conf_thresh >= 0.0 && conf_thresh <= 1.0))
    throw std::invalid_argument("predict: conf_thresh must lie in [0, 1]");
  const auto raw = model.forward(image, nn::Mode::kEval);
  return postprocess(raw, model.config(), 0, conf_thresh, nms_iou_thresh);
}

}  // namespace vdet
