#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dmadapter/adam.hpp"
#include "dmadapter/config.hpp"
#include "dmadapter/io.hpp"
#include "dmadapter/tensor.hpp"

namespace dmadapter {

struct Checkpoint {
  RunConfig config;
  std::vector<std::pair<std::string, Tensor>> parameters;  // trainable only unless full
  bool full = false;
  AdamState optimizer;
  std::uint64_t global_step = 0;
  // Shuffle generator state at the start of the current epoch.
  std::string rng_state;
  // Running loss sums for the epoch in progress: total, sdm, lb_image, lb_text, batches.
  std::vector<double> epoch_accum = std::vector<double>(5, 0.0);

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : parameters)
      if (n == name) return &t;
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[8] = {'D', 'M', 'A', 'C', 'K', 'P', 'T', '1'};

// Layout: 8-byte magic, u64 header length, JSON header (config text plus a
// directory of name/shape/offset/count), then little-endian float64 blocks.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::vector<std::pair<std::string, const std::vector<double>*>> blocks;
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  auto add_block = [&](const std::string& name, const Shape& shape, const std::vector<double>& values) {
    dir.push_back({{"name", name}, {"shape", shape}, {"offset", offset}, {"count", values.size()}});
    blocks.emplace_back(name, &values);
    offset += values.size() * sizeof(double);
  };
  for (const auto& [name, t] : ck.parameters) add_block("param/" + name, t.shape(), t.data());
  for (const auto& [name, m] : ck.optimizer.m) add_block("adam.m/" + name, {m.size()}, m);
  for (const auto& [name, v] : ck.optimizer.v) add_block("adam.v/" + name, {v.size()}, v);

  nlohmann::ordered_json header;
  header["format"] = 1;
  header["config"] = serialize_config(ck.config);
  header["full"] = ck.full;
  header["global_step"] = ck.global_step;
  header["adam_step"] = ck.optimizer.step;
  header["rng_state"] = ck.rng_state;
  header["epoch_accum"] = ck.epoch_accum;
  header["tensors"] = dir;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint '" + path.string() + "'");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  io::write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, values] : blocks)
    for (double d : *values) io::write_f64(os, d);
  if (!os) throw Error("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IntegrityError("checkpoint not found: '" + path.string() + "'");
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw IntegrityError("'" + path.string() + "' is not a checkpoint");
  const std::uint64_t len = io::read_u64(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IntegrityError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw IntegrityError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  ck.config = parse_config(header.at("config").get<std::string>());
  ck.full = header.at("full").get<bool>();
  ck.global_step = header.at("global_step").get<std::uint64_t>();
  ck.optimizer.step = header.at("adam_step").get<std::uint64_t>();
  ck.rng_state = header.at("rng_state").get<std::string>();
  ck.epoch_accum = header.at("epoch_accum").get<std::vector<double>>();

  const auto data_start = is.tellg();
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto count = entry.at("count").get<std::size_t>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    if (numel(shape) != count) throw IntegrityError("checkpoint tensor '" + name + "' has inconsistent shape");
    is.seekg(data_start + static_cast<std::streamoff>(offset));
    std::vector<double> values(count);
    for (auto& v : values) v = io::read_f64(is);
    if (!is) throw IntegrityError("checkpoint tensor '" + name + "' is truncated");
    if (name.rfind("param/", 0) == 0) {
      ck.parameters.emplace_back(name.substr(6), Tensor(shape, std::move(values)));
    } else if (name.rfind("adam.m/", 0) == 0) {
      ck.optimizer.m[name.substr(7)] = std::move(values);
    } else if (name.rfind("adam.v/", 0) == 0) {
      ck.optimizer.v[name.substr(7)] = std::move(values);
    } else {
      throw IntegrityError("unknown checkpoint block '" + name + "'");
    }
  }
  return ck;
}

}  // namespace dmadapter
