#include "vdet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "vdet/log.hpp"

namespace vdet {

Box to_pixel(const Box& b, int image_w, int image_h) {
  if (b.space != Space::kNormalized) throw SpaceMismatch(b.space, Space::kNormalized);
  return {b.cx * image_w, b.cy * image_h, b.w * image_w, b.h * image_h, Space::kPixel};
}

Box to_normalized(const Box& b, int image_w, int image_h) {
  if (b.space != Space::kPixel) throw SpaceMismatch(b.space, Space::kPixel);
  return {b.cx / image_w, b.cy / image_h, b.w / image_w, b.h / image_h, Space::kNormalized};
}

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

bool parse_double(std::string_view s, double& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

[[noreturn]] void fail(const fs::path& path, int line, const std::string& what) {
  throw DatasetError(path.string() + ":" + std::to_string(line) + ": " + what);
}

Box clamp_unit(const Box& b) {
  Corners c = to_corners(b);
  c.x1 = std::clamp(c.x1, 0.0, 1.0);
  c.y1 = std::clamp(c.y1, 0.0, 1.0);
  c.x2 = std::clamp(c.x2, 0.0, 1.0);
  c.y2 = std::clamp(c.y2, 0.0, 1.0);
  return from_corners(c, Space::kNormalized);
}

std::string format_values(std::initializer_list<double> values, const char* fmt) {
  std::string out;
  char buf[64];
  for (double v : values) {
    if (!out.empty()) out += ' ';
    std::snprintf(buf, sizeof(buf), fmt, v);
    out += buf;
  }
  return out;
}

}  // namespace

std::vector<Box> parse_label_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open label file " + path.string());
  std::vector<Box> boxes;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto fields = split_ws(line);
    if (fields.empty()) continue;
    if (fields.size() != 4 && fields.size() != 5)
      fail(path, lineno, "expected 4 or 5 fields, got " + std::to_string(fields.size()));
    std::size_t first = 0;
    if (fields.size() == 5) {
      double cls = 0.0;
      if (!parse_double(fields[0], cls) || cls != 0.0)
        fail(path, lineno, "class index must be 0 for a single-class dataset");
      first = 1;
    }
    double v[4];
    for (int k = 0; k < 4; ++k)
      if (!parse_double(fields[first + k], v[k]))
        fail(path, lineno, "not a number: '" + std::string(fields[first + k]) + "'");
    if (v[2] < 0.0 || v[3] < 0.0) fail(path, lineno, "negative box extent");
    boxes.push_back(clamp_unit({v[0], v[1], v[2], v[3], Space::kNormalized}));
  }
  return boxes;
}

void write_label_file(const fs::path& path, std::span<const Box> boxes,
                      std::span<const double> confidences) {
  if (!confidences.empty() && confidences.size() != boxes.size())
    throw std::invalid_argument("write_label_file: confidence count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write " + path.string());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    if (b.space != Space::kNormalized) throw SpaceMismatch(b.space, Space::kNormalized);
    if (confidences.empty())
      out << format_values({b.cx, b.cy, b.w, b.h}, "%.9g") << '\n';
    else
      out << format_values({b.cx, b.cy, b.w, b.h, confidences[i]}, "%.17g") << '\n';
  }
}

std::vector<Detection> parse_prediction_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open prediction file " + path.string());
  std::vector<Detection> dets;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto fields = split_ws(line);
    if (fields.empty()) continue;
    if (fields.size() != 5) fail(path, lineno, "expected 'cx cy w h confidence'");
    double v[5];
    for (int k = 0; k < 5; ++k)
      if (!parse_double(fields[k], v[k]))
        fail(path, lineno, "not a number: '" + std::string(fields[k]) + "'");
    if (v[2] < 0.0 || v[3] < 0.0) fail(path, lineno, "negative box extent");
    if (v[4] < 0.0 || v[4] > 1.0) fail(path, lineno, "confidence outside [0, 1]");
    dets.push_back({{v[0], v[1], v[2], v[3], Space::kNormalized}, v[4]});
  }
  return dets;
}

bool is_image_file(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".tif" || ext == ".tiff" ||
         ext == ".bmp";
}

cv::Mat load_image_rgb(const fs::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw DatasetError("cannot read image " + path.string());
  cv::Mat img8;
  if (raw.depth() == CV_8U) {
    img8 = raw;
  } else if (raw.depth() == CV_16U) {
    raw.convertTo(img8, CV_8U, 1.0 / 257.0);
  } else {
    double lo = 0.0, hi = 1.0;
    cv::minMaxLoc(raw.reshape(1), &lo, &hi);
    raw.convertTo(img8, CV_8U, hi > lo ? 255.0 / (hi - lo) : 1.0, hi > lo ? -lo * 255.0 / (hi - lo) : 0.0);
  }
  cv::Mat rgb;
  switch (img8.channels()) {
    case 1: cv::cvtColor(img8, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(img8, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(img8, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw DatasetError("unsupported channel count in " + path.string());
  }
  return rgb;
}

void save_image_rgb(const fs::path& path, const cv::Mat& rgb) {
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw DatasetError("cannot write image " + path.string());
}

std::vector<AnnotationRecord> load_dataset(const fs::path& root) {
  const fs::path images = root / "images";
  const fs::path labels = root / "labels";
  if (!fs::is_directory(images)) throw DatasetError("missing directory " + images.string());
  if (!fs::is_directory(labels)) throw DatasetError("missing directory " + labels.string());

  std::vector<AnnotationRecord> records;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
    AnnotationRecord rec;
    rec.image_path = entry.path();
    rec.stem = entry.path().stem().string();
    const fs::path label = labels / (rec.stem + ".txt");
    if (fs::exists(label)) {
      rec.boxes = parse_label_file(label);
    } else {
      log::warning("no label file for " + rec.image_path.string() + "; treating as empty");
    }
    records.push_back(std::move(rec));
  }
  std::sort(records.begin(), records.end(),
            [](const auto& a, const auto& b) { return a.stem < b.stem; });
  for (std::size_t i = 1; i < records.size(); ++i)
    if (records[i].stem == records[i - 1].stem)
      throw DatasetError("duplicate image stem '" + records[i].stem + "'");

  for (AnnotationRecord& rec : records) {
    // Header-only reads are not exposed by imgcodecs; decode once for size.
    const cv::Mat img = cv::imread(rec.image_path.string(), cv::IMREAD_UNCHANGED);
    if (img.empty()) throw DatasetError("cannot read image " + rec.image_path.string());
    rec.image_w = img.cols;
    rec.image_h = img.rows;
  }
  return records;
}

std::map<std::string, Split> read_split(const fs::path& root) {
  std::map<std::string, Split> split;
  const fs::path path = root / "split.txt";
  if (!fs::exists(path)) return split;
  std::ifstream in(path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto fields = split_ws(line);
    if (fields.empty()) continue;
    if (fields.size() != 2) fail(path, lineno, "expected 'stem train|val'");
    if (fields[1] == "train")
      split[std::string(fields[0])] = Split::kTrain;
    else if (fields[1] == "val")
      split[std::string(fields[0])] = Split::kVal;
    else
      fail(path, lineno, "split must be 'train' or 'val'");
  }
  return split;
}

void write_split(const fs::path& root, const std::map<std::string, Split>& split) {
  std::ofstream out(root / "split.txt", std::ios::binary);
  if (!out) throw DatasetError("cannot write split.txt under " + root.string());
  for (const auto& [stem, s] : split) out << stem << ' ' << (s == Split::kVal ? "val" : "train") << '\n';
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::map<std::string, Split> make_split(std::span<const std::string> stems, double val_fraction,
                                        std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction <= 1.0))
    throw std::invalid_argument("val_fraction must lie in [0, 1]");
  std::vector<std::pair<std::uint64_t, std::string>> keyed;
  for (const std::string& s : stems) keyed.emplace_back(splitmix64(fnv1a(s) ^ splitmix64(seed)), s);
  std::sort(keyed.begin(), keyed.end());
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * keyed.size()));
  std::map<std::string, Split> split;
  for (std::size_t i = 0; i < keyed.size(); ++i)
    split[keyed[i].second] = i < n_val ? Split::kVal : Split::kTrain;
  return split;
}

Box LetterboxTransform::forward(const Box& b) const {
  if (b.space != Space::kPixel) throw SpaceMismatch(b.space, Space::kPixel);
  return {b.cx * scale_x + pad_x, b.cy * scale_y + pad_y, b.w * scale_x, b.h * scale_y,
          Space::kPixel};
}

Box LetterboxTransform::inverse(const Box& b) const {
  if (b.space != Space::kPixel) throw SpaceMismatch(b.space, Space::kPixel);
  return {(b.cx - pad_x) / scale_x, (b.cy - pad_y) / scale_y, b.w / scale_x, b.h / scale_y,
          Space::kPixel};
}

LetterboxResult letterbox(const cv::Mat& image, std::span<const Box> pixel_boxes, int target) {
  if (target <= 0) throw std::invalid_argument("letterbox target must be positive");
  if (image.empty()) throw std::invalid_argument("letterbox: empty image");
  const double scale = std::min(static_cast<double>(target) / image.cols,
                                static_cast<double>(target) / image.rows);
  const int nw = std::clamp(static_cast<int>(std::lround(image.cols * scale)), 1, target);
  const int nh = std::clamp(static_cast<int>(std::lround(image.rows * scale)), 1, target);
  const int pad_x = (target - nw) / 2;
  const int pad_y = (target - nh) / 2;

  LetterboxResult out;
  out.transform = {static_cast<double>(nw) / image.cols, static_cast<double>(nh) / image.rows,
                   static_cast<double>(pad_x), static_cast<double>(pad_y)};

  cv::Mat resized;
  if (nw == image.cols && nh == image.rows) {
    resized = image;
  } else {
    const int interp = (nw < image.cols) ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(image, resized, cv::Size(nw, nh), 0, 0, interp);
  }
  out.image = cv::Mat(target, target, image.type(), cv::Scalar::all(kPadGray));
  resized.copyTo(out.image(cv::Rect(pad_x, pad_y, nw, nh)));

  out.boxes.reserve(pixel_boxes.size());
  for (const Box& b : pixel_boxes) out.boxes.push_back(out.transform.forward(b));
  return out;
}

Sample mosaic_augment(std::span<const Sample> samples, std::mt19937_64& rng) {
  if (samples.size() != 4) throw std::invalid_argument("mosaic needs exactly four samples");
  const int w = samples[0].image.cols;
  const int h = samples[0].image.rows;
  std::uniform_int_distribution<int> ux(w / 4, 3 * w / 4);
  std::uniform_int_distribution<int> uy(h / 4, 3 * h / 4);
  const int cx = ux(rng);
  const int cy = uy(rng);
  return mosaic_augment(samples, cx, cy);
}

Sample mosaic_augment(std::span<const Sample> samples, int cx, int cy) {
  if (samples.size() != 4) throw std::invalid_argument("mosaic needs exactly four samples");
  const int w = samples[0].image.cols;
  const int h = samples[0].image.rows;
  for (const Sample& s : samples)
    if (s.image.cols != w || s.image.rows != h || s.image.type() != samples[0].image.type())
      throw std::invalid_argument("mosaic samples must share size and type");
  if (cx < 0 || cx > w || cy < 0 || cy > h) throw std::invalid_argument("mosaic center outside image");

  Sample out;
  out.id = "mosaic(" + samples[0].id + "," + samples[1].id + "," + samples[2].id + "," +
           samples[3].id + ")";
  out.image = cv::Mat(h, w, samples[0].image.type(), cv::Scalar::all(kPadGray));

  struct Quadrant {
    cv::Rect dst;
    int dx, dy;  // dst = src + (dx, dy)
  };
  const Quadrant quads[4] = {
      {cv::Rect(0, 0, cx, cy), cx - w, cy - h},
      {cv::Rect(cx, 0, w - cx, cy), cx, cy - h},
      {cv::Rect(0, cy, cx, h - cy), cx - w, cy},
      {cv::Rect(cx, cy, w - cx, h - cy), cx, cy},
  };
  for (int q = 0; q < 4; ++q) {
    const Quadrant& qd = quads[q];
    if (qd.dst.area() <= 0) continue;
    const cv::Rect src(qd.dst.x - qd.dx, qd.dst.y - qd.dy, qd.dst.width, qd.dst.height);
    samples[q].image(src).copyTo(out.image(qd.dst));
    for (const Box& b : samples[q].boxes) {
      Corners c = to_corners(b);
      c.x1 = std::clamp(c.x1 + qd.dx, static_cast<double>(qd.dst.x), static_cast<double>(qd.dst.br().x));
      c.x2 = std::clamp(c.x2 + qd.dx, static_cast<double>(qd.dst.x), static_cast<double>(qd.dst.br().x));
      c.y1 = std::clamp(c.y1 + qd.dy, static_cast<double>(qd.dst.y), static_cast<double>(qd.dst.br().y));
      c.y2 = std::clamp(c.y2 + qd.dy, static_cast<double>(qd.dst.y), static_cast<double>(qd.dst.br().y));
      const Box clipped = from_corners(c, Space::kPixel);
      if (clipped.area() >= kMinMosaicArea) out.boxes.push_back(clipped);
    }
  }
  return out;
}

Tensor to_tensor(std::span<const cv::Mat> images) {
  if (images.empty()) throw std::invalid_argument("to_tensor: no images");
  const int h = images[0].rows;
  const int w = images[0].cols;
  Tensor t({static_cast<int>(images.size()), 3, h, w});
  for (int n = 0; n < static_cast<int>(images.size()); ++n) {
    const cv::Mat& img = images[n];
    if (img.type() != CV_8UC3 || img.rows != h || img.cols != w)
      throw std::invalid_argument("to_tensor: images must be equally sized CV_8UC3");
    float* base = t.sample(n);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int y = 0; y < h; ++y) {
      const std::uint8_t* row = img.ptr<std::uint8_t>(y);
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          base[c * plane + static_cast<std::size_t>(y) * w + x] = row[3 * x + c] / 255.0f;
    }
  }
  return t;
}

}  // namespace vdet
