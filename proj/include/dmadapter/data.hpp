#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "dmadapter/errors.hpp"
#include "dmadapter/io.hpp"
#include "dmadapter/tensor.hpp"

namespace dmadapter {

struct DataConfig {
  std::size_t train_ids = 64;
  std::size_t test_ids = 16;
  std::size_t imgs_per_id = 4;
  std::size_t caps_per_img = 1;
  std::size_t attributes = 8;
  std::size_t levels = 8;  // quantization levels per attribute in captions
  double noise = 0.1;
  double min_gap = 0.25;  // min pairwise L-inf distance between identities
  std::uint64_t seed = 0;
  // Pixel grid, normally copied from the backbone.
  std::size_t image_h = 32;
  std::size_t image_w = 16;
  std::size_t channels = 3;
  std::size_t vocab_size = 64;

  std::size_t num_ids() const { return train_ids + test_ids; }

  void validate() const {
    if (num_ids() < 2 || train_ids < 1 || test_ids < 1) throw ConfigError("data: need >= 1 train and >= 1 test identity");
    if (imgs_per_id < 1 || caps_per_img < 1) throw ConfigError("data: imgs_per_id and caps_per_img must be >= 1");
    if (attributes < 1 || levels < 2) throw ConfigError("data: attributes >= 1 and levels >= 2 required");
    if (!(noise >= 0.0)) throw ConfigError("data: noise must be >= 0");
    if (!(min_gap >= 0.0) || min_gap > 2.0) throw ConfigError("data: min_gap must lie in [0, 2]");
    if (image_h % attributes != 0)
      throw ConfigError("data: image height " + std::to_string(image_h) + " not divisible into " +
                        std::to_string(attributes) + " attribute bands");
    if (attributes * levels > vocab_size)
      throw ConfigError("data: codebook needs " + std::to_string(attributes * levels) + " tokens but vocab is " +
                        std::to_string(vocab_size));
    // Grid packing bound on the attribute cube.
    if (min_gap > 0.0) {
      const double per_axis = std::floor(2.0 / min_gap) + 1.0;
      const double capacity = std::pow(per_axis, static_cast<double>(attributes));
      if (static_cast<double>(num_ids()) > capacity)
        throw ConfigError("data: " + std::to_string(num_ids()) + " identities exceed attribute-space capacity " +
                          std::to_string(static_cast<long long>(capacity)));
    }
  }
};

struct IdentitySpec {
  int id = 0;
  std::vector<double> attributes;  // in [-1, 1]
};

struct SyntheticPair {
  std::size_t pair_id = 0;
  std::size_t image_index = 0;  // into Split::images
  std::vector<int> token_ids;
  int identity = 0;
};

struct Split {
  std::vector<Tensor> images;  // H x W x C
  std::vector<int> image_identity;
  std::vector<SyntheticPair> pairs;

  std::vector<std::vector<int>> captions() const {
    std::vector<std::vector<int>> out;
    for (const auto& p : pairs) out.push_back(p.token_ids);
    return out;
  }
  std::vector<int> caption_identity() const {
    std::vector<int> out;
    for (const auto& p : pairs) out.push_back(p.identity);
    return out;
  }
};

struct Dataset {
  DataConfig config;
  std::vector<IdentitySpec> identities;
  std::vector<int> codebook;  // attribute * levels + level -> token id
  std::vector<double> palette;  // attribute * channels + c -> colour weight
  Split train;
  Split test;
};

namespace detail {

inline std::vector<IdentitySpec> sample_identities(const DataConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::vector<IdentitySpec> ids;
  std::size_t attempts = 0;
  const std::size_t max_attempts = 10000 * cfg.num_ids();
  while (ids.size() < cfg.num_ids()) {
    if (++attempts > max_attempts) {
      throw ConfigError("data: could not place " + std::to_string(cfg.num_ids()) + " identities with min gap " +
                        std::to_string(cfg.min_gap));
    }
    std::vector<double> a(cfg.attributes);
    for (auto& v : a) v = unif(rng);
    bool ok = true;
    for (const auto& other : ids) {
      double linf = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) linf = std::max(linf, std::abs(a[k] - other.attributes[k]));
      if (linf < cfg.min_gap) {
        ok = false;
        break;
      }
    }
    if (ok) ids.push_back({static_cast<int>(ids.size()), std::move(a)});
  }
  return ids;
}

// Attribute k fills horizontal band k with its palette colour scaled by the
// attribute value.
inline Tensor render_image(const DataConfig& cfg, const std::vector<double>& attrs, const std::vector<double>& palette,
                           std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t band = cfg.image_h / cfg.attributes;
  std::vector<double> px(cfg.image_h * cfg.image_w * cfg.channels);
  for (std::size_t y = 0; y < cfg.image_h; ++y) {
    const std::size_t k = y / band;
    for (std::size_t x = 0; x < cfg.image_w; ++x)
      for (std::size_t c = 0; c < cfg.channels; ++c) {
        double v = attrs[k] * palette[k * cfg.channels + c];
        if (cfg.noise > 0.0) v += cfg.noise * normal(rng);
        px[(y * cfg.image_w + x) * cfg.channels + c] = v;
      }
  }
  return Tensor({cfg.image_h, cfg.image_w, cfg.channels}, std::move(px));
}

inline std::vector<int> emit_caption(const DataConfig& cfg, const std::vector<double>& attrs,
                                     const std::vector<int>& codebook, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<int> ids;
  for (std::size_t k = 0; k < cfg.attributes; ++k) {
    double a = attrs[k];
    if (cfg.noise > 0.0) a += cfg.noise * normal(rng);
    auto level = static_cast<long long>(std::floor((a + 1.0) / 2.0 * static_cast<double>(cfg.levels)));
    level = std::clamp<long long>(level, 0, static_cast<long long>(cfg.levels) - 1);
    ids.push_back(codebook[k * cfg.levels + static_cast<std::size_t>(level)]);
  }
  return ids;
}

}  // namespace detail

// Deterministic identity-grounded image/caption pairs; train and test use
// disjoint identities.
inline Dataset generate_dataset(const DataConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  ds.identities = detail::sample_identities(cfg, rng);

  std::vector<int> vocab(cfg.vocab_size);
  std::iota(vocab.begin(), vocab.end(), 0);
  for (std::size_t i = vocab.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(vocab[i - 1], vocab[pick(rng)]);
  }
  ds.codebook.assign(vocab.begin(), vocab.begin() + static_cast<std::ptrdiff_t>(cfg.attributes * cfg.levels));

  std::uniform_real_distribution<double> colour(-1.0, 1.0);
  ds.palette.resize(cfg.attributes * cfg.channels);
  for (auto& v : ds.palette) v = colour(rng);

  // Independent streams so image noise and caption noise never share draws.
  std::mt19937_64 image_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 text_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4fULL);
  for (const auto& ident : ds.identities) {
    Split& split = static_cast<std::size_t>(ident.id) < cfg.train_ids ? ds.train : ds.test;
    for (std::size_t i = 0; i < cfg.imgs_per_id; ++i) {
      const std::size_t image_index = split.images.size();
      split.images.push_back(detail::render_image(cfg, ident.attributes, ds.palette, image_rng));
      split.image_identity.push_back(ident.id);
      for (std::size_t c = 0; c < cfg.caps_per_img; ++c) {
        SyntheticPair p;
        p.pair_id = split.pairs.size();
        p.image_index = image_index;
        p.identity = ident.id;
        p.token_ids = detail::emit_caption(cfg, ident.attributes, ds.codebook, text_rng);
        split.pairs.push_back(std::move(p));
      }
    }
  }
  return ds;
}

// Flat image file: three little-endian uint32 (H, W, C) then H*W*C
// little-endian float64 values.
inline void write_image_bin(const std::filesystem::path& path, const Tensor& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  for (std::size_t i = 0; i < 3; ++i) io::write_u32(os, static_cast<std::uint32_t>(image.dim(i)));
  for (double d : image.data()) io::write_f64(os, d);
}

inline Tensor read_image_bin(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image '" + path.string() + "'");
  Shape shape(3);
  for (auto& s : shape) s = io::read_u32(is);
  if (!is || numel(shape) == 0) throw DataError("bad image header in '" + path.string() + "'");
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = io::read_f64(is);
  if (!is) throw DataError("truncated image file '" + path.string() + "'");
  return Tensor(shape, std::move(values));
}

// Writes <dir>/manifest.jsonl plus <dir>/images/<split>_<index>.bin.
inline std::size_t export_manifest(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw Error("cannot write manifest in '" + dir.string() + "'");
  std::size_t records = 0;
  for (const auto& [name, split] : {std::pair<const char*, const Split*>{"train", &ds.train}, {"test", &ds.test}}) {
    std::vector<std::string> paths;
    for (std::size_t i = 0; i < split->images.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "images/%s_%05zu.bin", name, i);
      write_image_bin(dir / buf, split->images[i]);
      paths.emplace_back(buf);
    }
    for (const auto& p : split->pairs) {
      nlohmann::ordered_json rec;
      rec["pair_id"] = p.pair_id;
      rec["identity"] = p.identity;
      rec["split"] = name;
      rec["image_path"] = paths[p.image_index];
      rec["token_ids"] = p.token_ids;
      manifest << rec.dump() << '\n';
      ++records;
    }
  }
  return records;
}

}  // namespace dmadapter
