#pragma once

// Fixtures and independent reference implementations shared by the unit and
// acceptance tests. Nothing here calls into the library code it is used to
// check.

#include "onepiece/model.hpp"
#include "onepiece/rng.hpp"
#include "onepiece/tokenizer.hpp"
#include "onepiece/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace onepiece::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.K = 8;
  c.L_max = 4;
  c.moe.n_experts = 4;
  c.moe.top_k = 2;
  c.moe.expert_hidden = 12;
  c.temperature = 0.5;
  c.static_dim = 3;
  return c;
}

template <typename T>
ItemTable<T> random_item_table(std::size_t V, std::size_t side_dim, std::uint64_t seed) {
  ItemTable<T> t;
  Rng rng(seed, 11);
  t.side.resize(static_cast<Eigen::Index>(V), static_cast<Eigen::Index>(side_dim));
  for (std::size_t r = 0; r < V; ++r) {
    const auto id = static_cast<ItemId>(100 + 3 * r);
    t.ids.push_back(id);
    t.row_of.emplace(id, r);
    for (std::size_t k = 0; k < side_dim; ++k)
      t.side(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = static_cast<T>(rng.uniform());
  }
  return t;
}

template <typename T>
Model<T> tiny_model(const ModelConfig& c, std::size_t V, std::uint64_t seed) {
  return init_model<T>(c, random_item_table<T>(V, c.side_dim(), seed), seed);
}

/// Random examples over a table with distinct targets.
template <typename T>
std::vector<TrainExample> random_examples(const Model<T>& m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed, 12);
  std::vector<TrainExample> out;
  const std::size_t V = m.items.size();
  std::vector<std::size_t> targets(V);
  for (std::size_t i = 0; i < V; ++i) targets[i] = i;
  rng.shuffle(std::span<std::size_t>(targets));
  for (std::size_t e = 0; e < n; ++e) {
    TrainExample ex;
    const std::size_t len = 1 + rng.uniform_int(m.config.L_max);
    for (std::size_t t = 0; t < len; ++t) ex.token_rows.push_back(rng.uniform_int(V));
    ex.target_row = targets[e % V];
    ex.target = m.items.ids[ex.target_row];
    ex.sid = {static_cast<int>(rng.uniform_int(m.config.K)), static_cast<int>(rng.uniform_int(m.config.K))};
    out.push_back(std::move(ex));
  }
  return out;
}

inline PopularityTable random_popularity(const std::vector<ItemId>& ids, std::uint64_t seed) {
  Rng rng(seed, 13);
  PopularityTable q;
  double total = 0.0;
  for (ItemId id : ids) {
    q.Q[id] = 0.5 + rng.uniform();
    total += q.Q[id];
  }
  for (auto& [id, v] : q.Q) v /= total;
  return q;
}

// ---------------------------------------------------------------------------
// Reference implementations

/// Mean absolute difference over all ordered pairs divided by twice the mean.
inline double gini_pairwise(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double sum = 0.0, diff = 0.0;
  for (double a : x) sum += a;
  for (double a : x)
    for (double b : x) diff += std::abs(a - b);
  return diff / (2.0 * n * sum);
}

struct RankedPair {
  SemanticId sid;
  double logp;
};

template <typename T>
std::vector<long double> reference_log_softmax(const Vec<T>& x) {
  long double mx = static_cast<long double>(x.maxCoeff());
  long double z = 0.0L;
  for (Eigen::Index i = 0; i < x.size(); ++i) z += std::exp(static_cast<long double>(x[i]) - mx);
  std::vector<long double> out;
  for (Eigen::Index i = 0; i < x.size(); ++i) out.push_back(static_cast<long double>(x[i]) - mx - std::log(z));
  return out;
}

/// Every (c1, c2) pair scored by joint log-probability, best first, ties by
/// (c1, c2) ascending.
template <typename T>
std::vector<RankedPair> brute_force_pairs(const Parameters<T>& p, const Mat<T>& H, const Vec<T>& h_T) {
  const auto lp1 = reference_log_softmax<T>(decode_sid1_logits(p, H, h_T));
  std::vector<std::pair<long double, SemanticId>> all;
  for (std::size_t a = 0; a < lp1.size(); ++a) {
    const auto lp2 = reference_log_softmax<T>(decode_sid2_logits(p, h_T, static_cast<int>(a)));
    for (std::size_t b = 0; b < lp2.size(); ++b)
      all.push_back({lp1[a] + lp2[b], SemanticId{static_cast<int>(a), static_cast<int>(b)}});
  }
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });
  std::vector<RankedPair> out;
  for (const auto& [lp, sid] : all) out.push_back({sid, static_cast<double>(lp)});
  return out;
}

/// Plain Lloyd: assign to nearest (lowest index on ties), recompute means,
/// keep the old centroid for empty clusters. Returns the MSE after each
/// assignment step.
inline std::vector<double> reference_lloyd_mse(const MatD& x, MatD c, std::size_t iters) {
  std::vector<double> mse;
  for (std::size_t it = 0; it <= iters; ++it) {
    std::vector<std::size_t> a(static_cast<std::size_t>(x.rows()));
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double best = 0.0;
      std::size_t arg = 0;
      for (Eigen::Index k = 0; k < c.rows(); ++k) {
        const double d = (x.row(i) - c.row(k)).squaredNorm();
        if (k == 0 || d < best) {
          best = d;
          arg = static_cast<std::size_t>(k);
        }
      }
      a[static_cast<std::size_t>(i)] = arg;
      total += best;
    }
    mse.push_back(total / static_cast<double>(x.rows()));
    if (it == iters) break;
    MatD sums = MatD::Zero(c.rows(), c.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(c.rows()), 0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      sums.row(static_cast<Eigen::Index>(a[static_cast<std::size_t>(i)])) += x.row(i);
      ++counts[a[static_cast<std::size_t>(i)]];
    }
    for (Eigen::Index k = 0; k < c.rows(); ++k)
      if (counts[static_cast<std::size_t>(k)] > 0) c.row(k) = sums.row(k) / static_cast<double>(counts[static_cast<std::size_t>(k)]);
  }
  return mse;
}

/// Points around `clusters` random unit centres, rows unit-normalized.
inline FusedEmbeddingMatrix clustered_embeddings(std::size_t n, std::size_t d, std::size_t clusters,
                                                 double spread, std::uint64_t seed) {
  Rng rng(seed, 21);
  MatD centres(static_cast<Eigen::Index>(clusters), static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < centres.rows(); ++k) {
    for (Eigen::Index j = 0; j < centres.cols(); ++j) centres(k, j) = rng.normal();
    centres.row(k).normalize();
  }
  FusedEmbeddingMatrix emb;
  emb.vectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<Eigen::Index>(rng.uniform_int(clusters));
    for (Eigen::Index j = 0; j < centres.cols(); ++j)
      emb.vectors(static_cast<Eigen::Index>(i), j) = centres(k, j) + spread * rng.normal();
    emb.vectors.row(static_cast<Eigen::Index>(i)).normalize();
    emb.item_ids.push_back(static_cast<ItemId>(i));
  }
  return emb;
}

/// Conflicts counted straight from the definition: items whose SID is shared.
inline std::size_t reference_conflicts(const AssignmentTable& t) {
  std::map<SemanticId, std::size_t> occupancy;
  for (const auto& [id, sid] : t.forward()) ++occupancy[sid];
  std::size_t c = 0;
  for (const auto& [id, sid] : t.forward())
    if (occupancy[sid] > 1) ++c;
  return c;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("onepiece_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace onepiece::testing
