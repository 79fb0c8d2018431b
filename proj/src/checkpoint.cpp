#include "vdet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "vdet/run_config.hpp"

namespace vdet {

namespace {

constexpr char kMagic[] = "VDETCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little endian");

nlohmann::json entries_json(const std::vector<std::pair<std::string, std::string>>& entries) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : entries) j[k] = v;
  return j;
}

struct Header {
  CheckpointMeta meta;
  nlohmann::json tensors;
  std::uint64_t payload_offset = 0;
};

Header read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[kMagicLen];
  if (!in.read(magic, kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw CheckpointError(path.string() + " is not a vdet checkpoint");
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (1u << 30))
    throw CheckpointError(path.string() + ": corrupt header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len)))
    throw CheckpointError(path.string() + ": truncated header");

  Header h;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    for (const auto& [k, v] : j.at("model").items()) set_model_entry(h.meta.model, k, v.get<std::string>());
    for (const auto& [k, v] : j.at("train").items()) set_train_entry(h.meta.train, k, v.get<std::string>());
    h.meta.epoch = j.at("epoch").get<int>();
    h.meta.best_f2 = j.at("best_f2").get<double>();
    h.meta.best_threshold = j.at("best_threshold").get<double>();
    h.tensors = j.at("tensors");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  h.payload_offset = kMagicLen + sizeof(len) + len;
  return h;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointMeta& meta) {
  if (!(meta.model == model.config()))
    throw CheckpointError("checkpoint metadata disagrees with the model config");
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<const std::vector<float>*> payload;
  std::uint64_t offset = 0;
  const auto add = [&](const std::string& name, const std::vector<int>& dims,
                       const std::vector<float>& value) {
    tensors.push_back({{"name", name}, {"dims", dims}, {"offset", offset}, {"count", value.size()}});
    payload.push_back(&value);
    offset += value.size() * sizeof(float);
  };
  for (const nn::Param* p : model.network().params()) add(p->name, p->dims, p->value);
  for (const nn::Buffer* b : model.network().buffers()) add(b->name, b->dims, b->value);

  const nlohmann::json header = {
      {"format", "vdet-checkpoint"},
      {"version", 1},
      {"model", entries_json(model_entries(meta.model))},
      {"train", entries_json(train_entries(meta.train))},
      {"epoch", meta.epoch},
      {"best_f2", meta.best_f2},
      {"best_threshold", meta.best_threshold},
      {"tensors", tensors},
  };
  const std::string text = header.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    const std::uint64_t len = text.size();
    out.write(kMagic, kMagicLen);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const std::vector<float>* v : payload)
      out.write(reinterpret_cast<const char*>(v->data()),
                static_cast<std::streamsize>(v->size() * sizeof(float)));
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_header(in, path).meta;
}

Model load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const Header h = read_header(in, path);
  try {
    h.meta.model.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": invalid model config: " + e.what());
  }
  Model model(h.meta.model);

  std::map<std::string, std::pair<std::vector<int>*, std::vector<float>*>> targets;
  for (nn::Param* p : model.network().params()) targets[p->name] = {&p->dims, &p->value};
  for (nn::Buffer* b : model.network().buffers()) targets[b->name] = {&b->dims, &b->value};

  std::size_t loaded = 0;
  for (const auto& t : h.tensors) {
    const std::string name = t.at("name").get<std::string>();
    const auto dims = t.at("dims").get<std::vector<int>>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto count = t.at("count").get<std::uint64_t>();
    const auto it = targets.find(name);
    if (it == targets.end()) throw CheckpointError(path.string() + ": unexpected tensor '" + name + "'");
    if (dims != *it->second.first || count != it->second.second->size())
      throw CheckpointError(path.string() + ": shape mismatch for tensor '" + name + "'");
    in.seekg(static_cast<std::streamoff>(h.payload_offset + offset));
    if (!in.read(reinterpret_cast<char*>(it->second.second->data()),
                 static_cast<std::streamsize>(count * sizeof(float))))
      throw CheckpointError(path.string() + ": truncated data for tensor '" + name + "'");
    ++loaded;
  }
  if (loaded != targets.size())
    throw CheckpointError(path.string() + ": checkpoint lacks " +
                          std::to_string(targets.size() - loaded) + " tensors of the model");
  if (meta) *meta = h.meta;
  return model;
}

}  // namespace vdet
