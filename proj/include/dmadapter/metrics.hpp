#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dmadapter/errors.hpp"
#include "dmadapter/tensor.hpp"

namespace dmadapter {

struct RetrievalReport {
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  std::size_t n_queries = 0;
  std::size_t n_gallery = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline void check_retrieval_inputs(const Tensor& sim, const std::vector<int>& query_ids,
                                   const std::vector<int>& gallery_ids) {
  if (sim.rank() != 2 || sim.dim(0) != query_ids.size() || sim.dim(1) != gallery_ids.size()) {
    throw DimensionError("retrieval: similarity " + shape_str(sim.shape()) + " does not match " +
                         std::to_string(query_ids.size()) + " queries x " + std::to_string(gallery_ids.size()) +
                         " gallery items");
  }
  for (double v : sim.data())
    if (!std::isfinite(v)) throw DataError("retrieval: non-finite similarity");
}

// Gallery order for one query: descending similarity, ties by lower index.
inline std::vector<std::size_t> ranking(const Tensor& sim, std::size_t query) {
  const std::size_t g = sim.dim(1);
  std::vector<std::size_t> order(g);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double* row = sim.data().data() + query * g;
  std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  return order;
}

}  // namespace detail

// Fraction of queries with at least one same-identity item in their top k.
inline double rank_k(const Tensor& sim, const std::vector<int>& query_ids, const std::vector<int>& gallery_ids,
                     std::size_t k) {
  detail::check_retrieval_inputs(sim, query_ids, gallery_ids);
  if (k < 1 || k > gallery_ids.size()) {
    throw ArgumentError("rank_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(gallery_ids.size()) + "]");
  }
  std::size_t hits = 0;
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    const auto order = detail::ranking(sim, q);
    for (std::size_t r = 0; r < k; ++r) {
      if (gallery_ids[order[r]] == query_ids[q]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(query_ids.size());
}

// Mean over queries of the average precision at every matching rank.
inline double mean_ap(const Tensor& sim, const std::vector<int>& query_ids, const std::vector<int>& gallery_ids) {
  detail::check_retrieval_inputs(sim, query_ids, gallery_ids);
  double total = 0.0;
  for (std::size_t q = 0; q < query_ids.size(); ++q) {
    const auto order = detail::ranking(sim, q);
    double matches = 0.0, ap = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery_ids[order[r]] == query_ids[q]) {
        matches += 1.0;
        ap += matches / static_cast<double>(r + 1);
      }
    }
    if (matches == 0.0) {
      throw DataError("mean_ap: query " + std::to_string(q) + " (identity " + std::to_string(query_ids[q]) +
                      ") has no gallery match");
    }
    total += ap / matches;
  }
  return total / static_cast<double>(query_ids.size());
}

// Rank-1/5/10 (cut-offs clamped to the gallery size) and mAP.
inline RetrievalReport retrieval_report(const Tensor& sim, const std::vector<int>& query_ids,
                                        const std::vector<int>& gallery_ids, std::uint64_t seed = 0) {
  const std::size_t g = gallery_ids.size();
  RetrievalReport r;
  r.rank1 = rank_k(sim, query_ids, gallery_ids, std::min<std::size_t>(1, g));
  r.rank5 = rank_k(sim, query_ids, gallery_ids, std::min<std::size_t>(5, g));
  r.rank10 = rank_k(sim, query_ids, gallery_ids, std::min<std::size_t>(10, g));
  r.map = mean_ap(sim, query_ids, gallery_ids);
  r.n_queries = query_ids.size();
  r.n_gallery = g;
  r.seed = seed;
  return r;
}

}  // namespace dmadapter
