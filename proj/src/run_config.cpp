#include "vdet/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace vdet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const std::string t = trim(text);
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw ConfigError("invalid value '" + text + "' for key '" + key + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("invalid boolean '" + text + "' for key '" + key + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename Enum, typename Parser>
Enum parse_enum(const std::string& key, const std::string& text, Parser parser) {
  try {
    return parser(trim(text));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("invalid value '" + text + "' for key '" + key + "': " + e.what());
  }
}

struct Field {
  const char* key;
  const char* description;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
};

#define VDET_NUM(path, type, key, desc)                                                       \
  Field {                                                                                     \
    key, desc, [](const RunConfig& c) { return fmt(static_cast<double>(c.path)); },           \
        [](RunConfig& c, const std::string& k, const std::string& v) {                       \
          c.path = parse_number<type>(k, v);                                                  \
        }                                                                                     \
  }
#define VDET_BOOL(path, key, desc)                                                          \
  Field {                                                                                   \
    key, desc, [](const RunConfig& c) { return fmt(c.path); },                              \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.path = parse_bool(k, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> kFields = {
      {"data_root", "dataset directory with images/, labels/ and optional split.txt",
       [](const RunConfig& c) { return c.data_root.string(); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.data_root = trim(v); }},
      {"out_dir", "directory receiving checkpoints and the training log",
       [](const RunConfig& c) { return c.out_dir.string(); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = trim(v); }},
      VDET_NUM(val_fraction, double, "val_fraction",
               "validation share used when the dataset has no split.txt"),
      {"backbone", "vgg11bn | yolov7tiny | resnet18",
       [](const RunConfig& c) { return std::string(to_string(c.model.backbone)); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.backbone = parse_enum<BackboneId>(k, v, parse_backbone);
       }},
      VDET_NUM(model.neck_width_multiplier, double, "neck_width_multiplier",
               "channel multiplier applied to the neck and head"),
      VDET_NUM(model.backbone_width_multiplier, double, "backbone_width_multiplier",
               "channel multiplier applied to the backbone"),
      VDET_NUM(model.max_w_frac, double, "max_w_frac",
               "largest box width as a fraction of the input (ignored when derive_max_size)"),
      VDET_NUM(model.max_h_frac, double, "max_h_frac",
               "largest box height as a fraction of the input (ignored when derive_max_size)"),
      VDET_BOOL(model.max_size_constraint, "max_size_constraint",
                "bound decoded boxes by max_w_frac/max_h_frac; false bounds them by the input"),
      {"level_strides", "strides of the three output levels",
       [](const RunConfig& c) {
         const auto& s = c.model.level_strides;
         return std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]);
       },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const auto items = split_list(v);
         if (items.size() != kNumLevels) throw ConfigError("key '" + k + "' needs three strides");
         for (int i = 0; i < kNumLevels; ++i) c.model.level_strides[i] = parse_number<int>(k, items[i]);
       }},
      VDET_NUM(model.num_levels, int, "num_levels", "number of output levels (must be 3)"),
      {"upsample", "nearest | bilinear",
       [](const RunConfig& c) { return std::string(to_string(c.model.upsample)); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.upsample = parse_enum<UpsampleMode>(k, v, parse_upsample);
       }},
      VDET_NUM(train.input_size, int, "input_size", "square network input in pixels"),
      VDET_NUM(train.epochs, int, "epochs", "training epochs"),
      VDET_NUM(train.batch_size, int, "batch_size", "images per micro-batch"),
      VDET_NUM(train.accumulation_steps, int, "accumulation_steps",
               "micro-batches accumulated per optimizer update"),
      VDET_NUM(train.learning_rate, double, "learning_rate", "peak learning rate"),
      VDET_NUM(train.final_lr_factor, double, "final_lr_factor",
               "learning rate at the end of the cosine decay, relative to the peak"),
      VDET_NUM(train.momentum, double, "momentum", "SGD momentum"),
      VDET_NUM(train.weight_decay, double, "weight_decay", "L2 penalty on convolution weights"),
      VDET_NUM(train.warmup_epochs, double, "warmup_epochs", "linear learning-rate warmup length"),
      {"neighbor_mode", "extra positive cells per ground truth: 0 | 2 | 4",
       [](const RunConfig& c) { return std::to_string(to_int(c.train.neighbor_mode)); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const int n = parse_number<int>(k, v);
         c.train.neighbor_mode = parse_enum<NeighborMode>(k, v, [n](const std::string&) {
           return parse_neighbor_mode(n);
         });
       }},
      {"iou_variant", "regression loss: iou | giou | diou | ciou",
       [](const RunConfig& c) { return std::string(to_string(c.train.iou_variant)); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.train.iou_variant = parse_enum<IouVariant>(k, v, parse_iou_variant);
       }},
      VDET_BOOL(train.mosaic, "mosaic", "four-image mosaic augmentation"),
      {"seed", "seed for initialization, shuffling and augmentation",
       [](const RunConfig& c) { return std::to_string(c.train.seed); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.train.seed = parse_number<std::uint64_t>(k, v);
       }},
      {"eval_conf_sweep", "comma-separated confidence thresholds swept at validation",
       [](const RunConfig& c) {
         std::string s;
         for (double t : c.train.eval_conf_sweep) s += (s.empty() ? "" : ",") + fmt(t);
         return s;
       },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.train.eval_conf_sweep.clear();
         for (const std::string& item : split_list(v))
           c.train.eval_conf_sweep.push_back(parse_number<double>(k, item));
       }},
      VDET_NUM(train.match_iou, double, "match_iou", "IoU needed for a detection to count as a hit"),
      VDET_NUM(train.nms_iou, double, "nms_iou", "IoU above which NMS suppresses a detection"),
      VDET_BOOL(train.derive_max_size, "derive_max_size",
                "set max_w_frac/max_h_frac to 1.1x the largest training box (capped at 1)"),
      VDET_NUM(train.bn_group, int, "bn_group", "images per batch-norm statistics group"),
      VDET_BOOL(train.deterministic, "deterministic", "single-threaded, reproducible arithmetic"),
      VDET_NUM(train.val_every, int, "val_every", "validate every this many epochs"),
  };
  return kFields;
}

#undef VDET_NUM
#undef VDET_BOOL

const Field& find_field(const std::string& key) {
  for (const Field& f : fields())
    if (key == f.key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

bool is_model_key(const std::string& key) {
  static const std::vector<std::string> kModelKeys = {
      "backbone", "neck_width_multiplier", "backbone_width_multiplier", "max_w_frac", "max_h_frac",
      "max_size_constraint", "level_strides", "num_levels", "upsample"};
  return std::find(kModelKeys.begin(), kModelKeys.end(), key) != kModelKeys.end();
}

bool is_run_key(const std::string& key) {
  return key == "data_root" || key == "out_dir" || key == "val_fraction";
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  find_field(key).set(*this, key, value);
}

std::string RunConfig::get(const std::string& key) const { return find_field(key).get(*this); }

void RunConfig::finalize() {
  model.input_h = model.input_w = train.input_size;
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw ConfigError("val_fraction must lie in [0, 1)");
  model.validate();
  train.validate();
}

const std::vector<KeyInfo>& run_config_keys() {
  static const std::vector<KeyInfo> keys = [] {
    std::vector<KeyInfo> out;
    for (const Field& f : fields()) out.push_back({f.key, f.description});
    return out;
  }();
  return keys;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    cfg.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

std::string config_reference() {
  const RunConfig defaults;
  std::string out = "# vdet run configuration keys and their defaults\n";
  for (const Field& f : fields())
    out += "\n# " + std::string(f.description) + "\n" + f.key + " = " + f.get(defaults) + "\n";
  return out;
}

std::vector<std::pair<std::string, std::string>> model_entries(const ModelConfig& cfg) {
  RunConfig rc;
  rc.model = cfg;
  std::vector<std::pair<std::string, std::string>> out;
  for (const Field& f : fields())
    if (is_model_key(f.key)) out.emplace_back(f.key, f.get(rc));
  out.emplace_back("input_h", std::to_string(cfg.input_h));
  out.emplace_back("input_w", std::to_string(cfg.input_w));
  return out;
}

std::vector<std::pair<std::string, std::string>> train_entries(const TrainConfig& cfg) {
  RunConfig rc;
  rc.train = cfg;
  std::vector<std::pair<std::string, std::string>> out;
  for (const Field& f : fields())
    if (!is_model_key(f.key) && !is_run_key(f.key)) out.emplace_back(f.key, f.get(rc));
  return out;
}

void set_model_entry(ModelConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "input_h") {
    cfg.input_h = parse_number<int>(key, value);
    return;
  }
  if (key == "input_w") {
    cfg.input_w = parse_number<int>(key, value);
    return;
  }
  if (!is_model_key(key)) throw ConfigError("unknown model key '" + key + "'");
  RunConfig rc;
  rc.model = cfg;
  rc.set(key, value);
  cfg = rc.model;
}

void set_train_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
  if (is_model_key(key) || is_run_key(key)) throw ConfigError("unknown train key '" + key + "'");
  RunConfig rc;
  rc.train = cfg;
  rc.set(key, value);
  cfg = rc.train;
}

}  // namespace vdet
