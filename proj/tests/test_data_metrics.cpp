#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <unistd.h>

#include "json.hpp"

#include "dmadapter/data.hpp"
#include "dmadapter/metrics.hpp"
#include "test_util.hpp"

using namespace dmadapter;
using dmadapter::testing::random_tensor;

namespace {

DataConfig small_data(std::uint64_t seed = 3) {
  DataConfig cfg;
  cfg.train_ids = 8;
  cfg.test_ids = 4;
  cfg.imgs_per_id = 3;
  cfg.caps_per_img = 2;
  cfg.seed = seed;
  return cfg;
}

// Position of gallery item j in query q's ranking: strictly larger scores first,
// equal scores by lower index.
std::size_t position(const Tensor& sim, std::size_t q, std::size_t j) {
  std::size_t pos = 0;
  for (std::size_t i = 0; i < sim.dim(1); ++i) {
    if (sim.at(q, i) > sim.at(q, j) || (sim.at(q, i) == sim.at(q, j) && i < j)) ++pos;
  }
  return pos;
}

double rank_k_oracle(const Tensor& sim, const std::vector<int>& qi, const std::vector<int>& gi, std::size_t k) {
  double hits = 0.0;
  for (std::size_t q = 0; q < qi.size(); ++q) {
    bool hit = false;
    for (std::size_t j = 0; j < gi.size(); ++j) hit |= gi[j] == qi[q] && position(sim, q, j) < k;
    hits += hit;
  }
  return hits / static_cast<double>(qi.size());
}

double map_oracle(const Tensor& sim, const std::vector<int>& qi, const std::vector<int>& gi) {
  double total = 0.0;
  for (std::size_t q = 0; q < qi.size(); ++q) {
    std::vector<std::size_t> pos;
    for (std::size_t j = 0; j < gi.size(); ++j)
      if (gi[j] == qi[q]) pos.push_back(position(sim, q, j));
    double ap = 0.0;
    for (std::size_t p : pos) {
      double above = 0.0;
      for (std::size_t o : pos) above += o <= p;
      ap += above / static_cast<double>(p + 1);
    }
    total += ap / static_cast<double>(pos.size());
  }
  return total / static_cast<double>(qi.size());
}

Tensor map_values(const Tensor& x, double (*fn)(double)) {
  std::vector<double> v = x.data();
  for (auto& e : v) e = fn(e);
  return Tensor(x.shape(), std::move(v));
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dmadapter_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Generator, SameSeedIsDeterministic) {
  const auto a = generate_dataset(small_data()), b = generate_dataset(small_data());
  ASSERT_EQ(a.train.images.size(), b.train.images.size());
  for (std::size_t i = 0; i < a.train.images.size(); ++i) EXPECT_EQ(a.train.images[i].data(), b.train.images[i].data());
  EXPECT_EQ(a.train.captions(), b.train.captions());
  EXPECT_EQ(a.test.captions(), b.test.captions());
  const auto c = generate_dataset(small_data(4));
  EXPECT_NE(a.train.images[0].data(), c.train.images[0].data());
}

TEST(Generator, ShapesAndCounts) {
  const auto cfg = small_data();
  const auto ds = generate_dataset(cfg);
  EXPECT_EQ(ds.train.images.size(), 8u * 3);
  EXPECT_EQ(ds.train.pairs.size(), 8u * 3 * 2);
  EXPECT_EQ(ds.test.pairs.size(), 4u * 3 * 2);
  EXPECT_EQ(ds.train.images[0].shape(), (Shape{cfg.image_h, cfg.image_w, cfg.channels}));
  for (const auto& p : ds.train.pairs) {
    EXPECT_EQ(p.token_ids.size(), cfg.attributes);
    for (int t : p.token_ids) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, static_cast<int>(cfg.vocab_size));
    }
    EXPECT_EQ(ds.train.image_identity[p.image_index], p.identity);
  }
}

TEST(Generator, SplitsHaveDisjointIdentities) {
  const auto ds = generate_dataset(small_data());
  std::set<int> train(ds.train.image_identity.begin(), ds.train.image_identity.end());
  std::set<int> test(ds.test.image_identity.begin(), ds.test.image_identity.end());
  EXPECT_EQ(train.size(), 8u);
  EXPECT_EQ(test.size(), 4u);
  for (int id : test) EXPECT_FALSE(train.count(id));
}

TEST(Generator, ZeroNoiseMakesIdentityCopiesIdentical) {
  auto cfg = small_data();
  cfg.noise = 0.0;
  const auto ds = generate_dataset(cfg);
  for (std::size_t i = 0; i < ds.train.images.size(); ++i) {
    const std::size_t first = i - i % cfg.imgs_per_id;
    EXPECT_EQ(ds.train.images[i].data(), ds.train.images[first].data());
  }
  for (std::size_t i = 0; i < ds.train.pairs.size(); ++i) {
    const std::size_t first = i - i % (cfg.imgs_per_id * cfg.caps_per_img);
    EXPECT_EQ(ds.train.pairs[i].token_ids, ds.train.pairs[first].token_ids);
  }
}

TEST(Generator, IdentitiesRespectMinimumGap) {
  const auto cfg = small_data();
  const auto ds = generate_dataset(cfg);
  for (std::size_t a = 0; a < ds.identities.size(); ++a)
    for (std::size_t b = a + 1; b < ds.identities.size(); ++b) {
      double linf = 0.0;
      for (std::size_t k = 0; k < cfg.attributes; ++k)
        linf = std::max(linf, std::abs(ds.identities[a].attributes[k] - ds.identities[b].attributes[k]));
      EXPECT_GE(linf, cfg.min_gap);
    }
}

TEST(Generator, NearestCentroidSeparatesIdentities) {
  auto cfg = small_data();
  cfg.imgs_per_id = 4;
  const auto ds = generate_dataset(cfg);
  const auto& imgs = ds.test.images;
  const auto& ids = ds.test.image_identity;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    int best = -1;
    double best_d = INFINITY;
    for (int id : std::set<int>(ids.begin(), ids.end())) {
      // leave-one-out centroid
      std::vector<double> c(imgs[i].size(), 0.0);
      double count = 0.0;
      for (std::size_t j = 0; j < imgs.size(); ++j) {
        if (j == i || ids[j] != id) continue;
        for (std::size_t k = 0; k < c.size(); ++k) c[k] += imgs[j][k];
        count += 1.0;
      }
      double d = 0.0;
      for (std::size_t k = 0; k < c.size(); ++k) d += std::pow(imgs[i][k] - c[k] / count, 2);
      if (d < best_d) best_d = d, best = id;
    }
    correct += best == ids[i];
  }
  EXPECT_EQ(correct, imgs.size());
}

TEST(Generator, DegenerateConfigsAreRejected) {
  auto cfg = small_data();
  cfg.test_ids = 0;
  EXPECT_THROW(generate_dataset(cfg), ConfigError);
  cfg = small_data();
  cfg.attributes = 3;  // 32 rows do not split into 3 bands
  EXPECT_THROW(generate_dataset(cfg), ConfigError);
  cfg = small_data();
  cfg.levels = 16;  // 8 * 16 tokens > vocab 64
  EXPECT_THROW(generate_dataset(cfg), ConfigError);
  cfg = small_data();
  cfg.attributes = 1;
  cfg.min_gap = 1.5;  // two points per axis at most
  EXPECT_THROW(generate_dataset(cfg), ConfigError);
}

TEST(ImageBin, RoundTripIsExact) {
  std::mt19937_64 rng(1);
  const auto dir = temp_dir("imgbin");
  const Tensor img = random_tensor({4, 3, 2}, rng);
  write_image_bin(dir / "a.bin", img);
  const Tensor back = read_image_bin(dir / "a.bin");
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_EQ(back.data(), img.data());
  EXPECT_EQ(std::filesystem::file_size(dir / "a.bin"), 12u + 24u * 8u);
  std::filesystem::resize_file(dir / "a.bin", 40);
  EXPECT_THROW(read_image_bin(dir / "a.bin"), DataError);
  EXPECT_THROW(read_image_bin(dir / "missing.bin"), DataError);
  std::filesystem::remove_all(dir);
}

TEST(Manifest, RecordsPointAtReadableImages) {
  const auto ds = generate_dataset(small_data());
  const auto dir = temp_dir("manifest");
  const std::size_t records = export_manifest(ds, dir);
  EXPECT_EQ(records, ds.train.pairs.size() + ds.test.pairs.size());
  std::ifstream is(dir / "manifest.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    const auto rec = nlohmann::json::parse(line);
    const Split& split = rec.at("split") == "train" ? ds.train : ds.test;
    const std::size_t pid = rec.at("pair_id");
    const auto& pair = split.pairs.at(pid);
    EXPECT_EQ(rec.at("identity").get<int>(), pair.identity);
    EXPECT_EQ(rec.at("token_ids").get<std::vector<int>>(), pair.token_ids);
    EXPECT_EQ(read_image_bin(dir / rec.at("image_path").get<std::string>()).data(),
              split.images[pair.image_index].data());
    ++n;
  }
  EXPECT_EQ(n, records);
  std::filesystem::remove_all(dir);
}

TEST(RankK, HandExample) {
  const Tensor sim = Tensor::matrix({{0.9, 0.1, 0.5}, {0.2, 0.8, 0.3}});
  const std::vector<int> q = {0, 1}, g = {1, 0, 1};
  // query 0 ranks [0,2,1]: first match (id 0) at position 2; query 1 ranks [1,2,0]: miss at 1
  EXPECT_EQ(rank_k(sim, q, g, 1), 0.0);
  EXPECT_EQ(rank_k(sim, q, g, 2), 0.5);
  EXPECT_EQ(rank_k(sim, q, g, 3), 1.0);
}

TEST(RankK, InvalidCutOff) {
  const Tensor sim = Tensor::matrix({{0.1, 0.2}});
  EXPECT_THROW(rank_k(sim, {0}, {0, 1}, 3), ArgumentError);
  EXPECT_THROW(rank_k(sim, {0}, {0, 1}, 0), ArgumentError);
  EXPECT_THROW(rank_k(sim, {0, 1}, {0, 1}, 1), DimensionError);
}

TEST(RankK, TiesBreakTowardLowerIndex) {
  const Tensor sim = Tensor::matrix({{0.5, 0.5}});
  EXPECT_EQ(rank_k(sim, {1}, {0, 1}, 1), 0.0);
  EXPECT_EQ(rank_k(sim, {0}, {0, 1}, 1), 1.0);
}

TEST(RankK, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> id(0, 9);
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor sim = random_tensor({20, 50}, rng);
    std::vector<int> q(20), g(50);
    for (auto& v : q) v = id(rng);
    for (auto& v : g) v = id(rng);
    for (std::size_t k : {1u, 5u, 10u, 50u}) EXPECT_EQ(rank_k(sim, q, g, k), rank_k_oracle(sim, q, g, k));
  }
}

TEST(RankK, FullGalleryCutOffIsOne) {
  std::mt19937_64 rng(3);
  const Tensor sim = random_tensor({6, 9}, rng);
  EXPECT_EQ(rank_k(sim, {0, 1, 2, 0, 1, 2}, {0, 1, 2, 0, 1, 2, 0, 1, 2}, 9), 1.0);
}

TEST(MeanAp, Examples) {
  EXPECT_EQ(mean_ap(Tensor::matrix({{0.9, 0.1}}), {3}, {3, 4}), 1.0);
  EXPECT_EQ(mean_ap(Tensor::matrix({{0.1, 0.9}}), {3}, {3, 4}), 0.5);
  // matches at positions 0 and 2: (1/1 + 2/3) / 2
  EXPECT_DOUBLE_EQ(mean_ap(Tensor::matrix({{0.9, 0.5, 0.1}}), {1}, {1, 2, 1}), (1.0 + 2.0 / 3.0) / 2.0);
}

TEST(MeanAp, QueryWithoutMatchNamesTheQuery) {
  try {
    mean_ap(Tensor::matrix({{0.1, 0.2}, {0.3, 0.4}}), {0, 7}, {0, 1});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("query 1"), std::string::npos) << e.what();
  }
}

TEST(MeanAp, MatchesOracle) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor sim = random_tensor({12, 30}, rng);
    std::vector<int> q(12), g(30);
    for (std::size_t i = 0; i < 30; ++i) g[i] = static_cast<int>(i % 5);
    for (std::size_t i = 0; i < 12; ++i) q[i] = static_cast<int>(i % 5);
    EXPECT_NEAR(mean_ap(sim, q, g), map_oracle(sim, q, g), 1e-12);
  }
}

TEST(Retrieval, InvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(5);
  const Tensor sim = random_tensor({10, 25}, rng);
  std::vector<int> q(10), g(25);
  for (std::size_t i = 0; i < 10; ++i) q[i] = static_cast<int>(i % 4);
  for (std::size_t i = 0; i < 25; ++i) g[i] = static_cast<int>(i % 4);
  const auto base = retrieval_report(sim, q, g);
  for (const Tensor& t : {map_values(sim, [](double x) { return 2.0 * x + 1.0; }),
                          map_values(sim, [](double x) { return x * x * x; })}) {
    const auto r = retrieval_report(t, q, g);
    EXPECT_EQ(r.rank1, base.rank1);
    EXPECT_EQ(r.rank5, base.rank5);
    EXPECT_EQ(r.rank10, base.rank10);
    EXPECT_EQ(r.map, base.map);
  }
}

TEST(Retrieval, InvariantUnderGalleryShuffle) {
  std::mt19937_64 rng(6);
  const Tensor sim = random_tensor({8, 20}, rng);
  std::vector<int> q(8), g(20);
  for (std::size_t i = 0; i < 8; ++i) q[i] = static_cast<int>(i % 4);
  for (std::size_t i = 0; i < 20; ++i) g[i] = static_cast<int>(i % 4);
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> shuffled(8 * 20);
  std::vector<int> pg(20);
  for (std::size_t j = 0; j < 20; ++j) {
    pg[j] = g[perm[j]];
    for (std::size_t i = 0; i < 8; ++i) shuffled[i * 20 + j] = sim.at(i, perm[j]);
  }
  const auto a = retrieval_report(sim, q, g), b = retrieval_report(Tensor({8, 20}, shuffled), q, pg);
  EXPECT_EQ(a.rank1, b.rank1);
  EXPECT_EQ(a.rank5, b.rank5);
  EXPECT_NEAR(a.map, b.map, 1e-15);
}

TEST(Retrieval, CutOffsClampToSmallGallery) {
  const auto r = retrieval_report(Tensor::matrix({{0.2, 0.9, 0.1}}), {5}, {5, 6, 7});
  EXPECT_EQ(r.rank1, 0.0);
  EXPECT_EQ(r.rank5, 1.0);
  EXPECT_EQ(r.rank10, 1.0);
  EXPECT_EQ(r.n_gallery, 3u);
}

TEST(Retrieval, NonFiniteSimilarityIsDataError) {
  EXPECT_THROW(rank_k(Tensor::matrix({{0.1, NAN}}), {0}, {0, 1}, 1), DataError);
}
