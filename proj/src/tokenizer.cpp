#include "onepiece/tokenizer.hpp"

#include "onepiece/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

namespace onepiece {

namespace {

constexpr std::uint64_t kFallbackSeed = 0xF05EDull;

Vec<double> fallback_vector(ItemId id, std::size_t d) {
  Rng rng = Rng::derive(kFallbackSeed, static_cast<std::uint64_t>(id));
  Vec<double> v(static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = rng.normal();
  return v / v.norm();
}

}  // namespace

FusedEmbeddingMatrix fuse_embeddings(const ItemCatalog& catalog) {
  if (catalog.empty()) throw DataError("fuse_embeddings: empty catalog");
  std::size_t d = 0;
  for (ModalityId m : catalog.modalities()) d = std::max(d, catalog.modality_dim(m));
  if (d == 0) throw DataError("fuse_embeddings: no modality present in catalog");

  FusedEmbeddingMatrix out;
  out.vectors.resize(static_cast<Eigen::Index>(catalog.total_items()), static_cast<Eigen::Index>(d));
  out.item_ids.reserve(catalog.total_items());
  Eigen::Index row = 0;
  for (const auto& rec : catalog.items()) {
    Vec<double> acc = Vec<double>::Zero(static_cast<Eigen::Index>(d));
    std::size_t used = 0;
    for (const auto& [m, v] : rec.modality_embeddings) {
      Vec<double> x = Vec<double>::Zero(static_cast<Eigen::Index>(d));
      for (std::size_t k = 0; k < v.size(); ++k) x[static_cast<Eigen::Index>(k)] = v[k];
      const double norm = x.norm();
      if (norm == 0.0) continue;
      acc += x / norm;
      ++used;
    }
    const double norm = acc.norm();
    if (used == 0 || norm == 0.0) {
      out.vectors.row(row) = fallback_vector(rec.item_id, d).transpose();
    } else {
      out.vectors.row(row) = (acc / norm).transpose();
    }
    out.item_ids.push_back(rec.item_id);
    ++row;
  }
  return out;
}

FusedEmbeddingMatrix modality_embeddings(const ItemCatalog& catalog, ModalityId m) {
  const std::size_t d = catalog.modality_dim(m);
  if (d == 0) throw DataError("modality " + std::to_string(m) + " absent from catalog");
  FusedEmbeddingMatrix out;
  std::vector<const ItemRecord*> covered;
  for (const auto& rec : catalog.items())
    if (rec.has_modality(m)) covered.push_back(&rec);
  out.vectors.resize(static_cast<Eigen::Index>(covered.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < covered.size(); ++i) {
    const auto& v = covered[i]->modality_embeddings.at(m);
    Vec<double> x(static_cast<Eigen::Index>(d));
    for (std::size_t k = 0; k < d; ++k) x[static_cast<Eigen::Index>(k)] = v[k];
    const double norm = x.norm();
    if (norm > 0.0) out.vectors.row(static_cast<Eigen::Index>(i)) = (x / norm).transpose();
    else out.vectors.row(static_cast<Eigen::Index>(i)) = fallback_vector(covered[i]->item_id, d).transpose();
    out.item_ids.push_back(covered[i]->item_id);
  }
  return out;
}

FusedEmbeddingMatrix external_embeddings(const MatF& vectors, std::vector<ItemId> ids) {
  if (static_cast<std::size_t>(vectors.rows()) != ids.size())
    throw DataError("external embeddings: row count does not match id count");
  FusedEmbeddingMatrix out;
  out.vectors = vectors.cast<double>();
  for (Eigen::Index r = 0; r < out.vectors.rows(); ++r) {
    const double norm = out.vectors.row(r).norm();
    if (norm == 0.0) {
      out.vectors.row(r) = fallback_vector(ids[static_cast<std::size_t>(r)],
                                           static_cast<std::size_t>(vectors.cols()))
                               .transpose();
    } else {
      out.vectors.row(r) /= norm;
    }
  }
  out.item_ids = std::move(ids);
  return out;
}

// ---------------------------------------------------------------------------
// K-means

std::size_t nearest_centroid(const MatD& centroids, const Eigen::Ref<const Vec<double>>& x) {
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
    const double dist = (centroids.row(j).transpose() - x).squaredNorm();
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<std::size_t>(j);
    }
  }
  return best;
}

MatD kmeans_pp_init(const MatD& points, std::size_t K, Rng& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n == 0) throw DataError("k-means on zero points");
  if (K < 1) throw DataError("K must be >= 1");
  if (K > n)
    std::cerr << "warning: K=" << K << " exceeds number of points " << n
              << "; duplicate centroids will be re-seeded\n";
  MatD centroids(static_cast<Eigen::Index>(K), points.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.uniform_int(n);
  for (std::size_t c = 0; c < K; ++c) {
    centroids.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dist = (points.row(static_cast<Eigen::Index>(i)) -
                           centroids.row(static_cast<Eigen::Index>(c)))
                              .squaredNorm();
      d2[i] = std::min(d2[i], dist);
      total += d2[i];
    }
    if (c + 1 == K) break;
    if (total <= 0.0) {
      pick = rng.uniform_int(n);
      continue;
    }
    const double target = rng.uniform() * total;
    double acc = 0.0;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      acc += d2[i];
      if (acc > target && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
  }
  return centroids;
}

namespace {

// Assigns every point; returns the mean squared error.
double assign_points(const MatD& points, const MatD& centroids,
                     std::vector<std::size_t>& assignment, std::vector<double>& dist) {
  const auto n = static_cast<std::size_t>(points.rows());
  assignment.resize(n);
  dist.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = points.row(static_cast<Eigen::Index>(i));
    std::size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
      const double d = (centroids.row(j) - x).squaredNorm();
      if (d < best_dist) {
        best_dist = d;
        best = static_cast<std::size_t>(j);
      }
    }
    assignment[i] = best;
    dist[i] = best_dist;
    total += best_dist;
  }
  return total / static_cast<double>(n);
}

}  // namespace

KMeansResult lloyd(const MatD& points, MatD centroids, std::size_t iters) {
  if (iters < 1) throw DataError("k-means needs at least one iteration");
  if (points.rows() == 0) throw DataError("k-means on zero points");
  KMeansResult result;
  std::vector<double> dist;
  result.loss_history.push_back(assign_points(points, centroids, result.assignment, dist));
  const auto K = static_cast<std::size_t>(centroids.rows());
  const auto n = static_cast<std::size_t>(points.rows());
  for (std::size_t it = 0; it < iters; ++it) {
    MatD sums = MatD::Zero(centroids.rows(), centroids.cols());
    std::vector<std::size_t> counts(K, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(result.assignment[i])) +=
          points.row(static_cast<Eigen::Index>(i));
      ++counts[result.assignment[i]];
    }
    std::vector<std::uint8_t> taken(n, 0);
    std::size_t reseeded = 0;
    for (std::size_t j = 0; j < K; ++j) {
      if (counts[j] > 0) {
        centroids.row(static_cast<Eigen::Index>(j)) =
            sums.row(static_cast<Eigen::Index>(j)) / static_cast<double>(counts[j]);
        continue;
      }
      // Farthest not-yet-used point from its own centroid; lowest index on ties.
      std::size_t far = n;
      double far_dist = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i] && dist[i] > far_dist) {
          far_dist = dist[i];
          far = i;
        }
      }
      if (far == n) continue;
      taken[far] = 1;
      centroids.row(static_cast<Eigen::Index>(j)) = points.row(static_cast<Eigen::Index>(far));
      ++reseeded;
    }
    result.reseeded += reseeded;
    const auto previous = result.assignment;
    result.loss_history.push_back(assign_points(points, centroids, result.assignment, dist));
    if (reseeded == 0 && previous == result.assignment) break;
  }
  result.centroids = std::move(centroids);
  return result;
}

ResidualFit residual_kmeans_fit(const FusedEmbeddingMatrix& emb, std::size_t K, std::size_t iters,
                                std::uint64_t seed) {
  if (K < 2) throw DataError("codebook size K must be >= 2");
  Rng rng1 = Rng::derive(seed, 0xC0DE1u);
  auto first = lloyd(emb.vectors, kmeans_pp_init(emb.vectors, K, rng1), iters);

  MatD residuals = emb.vectors;
  for (Eigen::Index i = 0; i < residuals.rows(); ++i)
    residuals.row(i) -= first.centroids.row(static_cast<Eigen::Index>(first.assignment[static_cast<std::size_t>(i)]));

  Rng rng2 = Rng::derive(seed, 0xC0DE2u);
  auto second = lloyd(residuals, kmeans_pp_init(residuals, K, rng2), iters);

  ResidualFit fit;
  fit.codebook.level1 = std::move(first.centroids);
  fit.codebook.level2 = std::move(second.centroids);
  fit.loss1_history = std::move(first.loss_history);
  fit.loss2_history = std::move(second.loss_history);
  return fit;
}

// ---------------------------------------------------------------------------
// Assignment

void AssignmentTable::set(ItemId item, SemanticId sid) {
  auto it = forward_.find(item);
  if (it != forward_.end()) {
    auto& old = reverse_[it->second];
    old.erase(std::find(old.begin(), old.end(), item));
    if (old.empty()) reverse_.erase(it->second);
    it->second = sid;
  } else {
    forward_.emplace(item, sid);
  }
  auto& bucket = reverse_[sid];
  bucket.insert(std::lower_bound(bucket.begin(), bucket.end(), item), item);
}

const SemanticId& AssignmentTable::at(ItemId item) const {
  auto it = forward_.find(item);
  if (it == forward_.end()) throw DataError("item " + std::to_string(item) + " has no SID");
  return it->second;
}

AssignmentTable assign(const FusedEmbeddingMatrix& emb, const Codebook& cb) {
  if (static_cast<std::size_t>(emb.vectors.cols()) != cb.dim())
    throw DataError("assign: embedding dimension does not match codebook");
  AssignmentTable table;
  for (std::size_t i = 0; i < emb.rows(); ++i) {
    const Vec<double> x = emb.vectors.row(static_cast<Eigen::Index>(i)).transpose();
    const std::size_t c1 = nearest_centroid(cb.level1, x);
    const Vec<double> r = x - cb.level1.row(static_cast<Eigen::Index>(c1)).transpose();
    const std::size_t c2 = nearest_centroid(cb.level2, r);
    table.set(emb.item_ids[i], {static_cast<std::int32_t>(c1), static_cast<std::int32_t>(c2)});
  }
  return table;
}

CollisionReport collision_report(const AssignmentTable& table, std::size_t n_items) {
  CollisionReport rep;
  rep.unique_pairs = table.reverse().size();
  for (const auto& [sid, items] : table.reverse())
    if (items.size() > 1) rep.conflicts += items.size();
  rep.conflict_rate =
      n_items == 0 ? 0.0 : static_cast<double>(rep.conflicts) / static_cast<double>(n_items);
  return rep;
}

namespace {

// Indices of the n closest rows, ascending by (distance, index).
std::vector<std::size_t> closest_rows(const MatD& centroids, const Vec<double>& x, std::size_t n) {
  std::vector<std::pair<double, std::size_t>> d;
  d.reserve(static_cast<std::size_t>(centroids.rows()));
  for (Eigen::Index j = 0; j < centroids.rows(); ++j)
    d.emplace_back((centroids.row(j).transpose() - x).squaredNorm(), static_cast<std::size_t>(j));
  n = std::min(n, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n), d.end());
  std::vector<std::size_t> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = d[k].second;
  return out;
}

double reconstruction_distance(const Codebook& cb, const Vec<double>& x, SemanticId sid) {
  return (x - cb.level1.row(sid.c1).transpose() - cb.level2.row(sid.c2).transpose()).squaredNorm();
}

}  // namespace

AssignmentTable greedy_reassign(const AssignmentTable& table, const FusedEmbeddingMatrix& emb,
                                const Codebook& cb, std::size_t top_n) {
  if (top_n < 1) throw DataError("top_n must be >= 1");
  std::map<ItemId, std::size_t> row_of;
  for (std::size_t i = 0; i < emb.rows(); ++i) row_of.emplace(emb.item_ids[i], i);
  auto vector_of = [&](ItemId id) -> Vec<double> {
    auto it = row_of.find(id);
    if (it == row_of.end()) throw DataError("greedy_reassign: item " + std::to_string(id) + " has no embedding");
    return emb.vectors.row(static_cast<Eigen::Index>(it->second)).transpose();
  };

  AssignmentTable out = table;
  std::vector<std::pair<SemanticId, std::vector<ItemId>>> groups;
  for (const auto& [sid, items] : table.reverse())
    if (items.size() > 1) groups.emplace_back(sid, items);

  for (const auto& [sid, items] : groups) {
    ItemId keeper = items.front();
    double keeper_dist = std::numeric_limits<double>::infinity();
    for (ItemId id : items) {
      const double dist = reconstruction_distance(cb, vector_of(id), sid);
      if (dist < keeper_dist) {
        keeper_dist = dist;
        keeper = id;
      }
    }
    for (ItemId id : items) {
      if (id == keeper) continue;
      const Vec<double> x = vector_of(id);
      const auto level1 = closest_rows(cb.level1, x, top_n);
      const Vec<double> residual = x - cb.level1.row(sid.c1).transpose();
      const auto level2 = closest_rows(cb.level2, residual, top_n);
      bool found = false;
      SemanticId best{};
      double best_dist = std::numeric_limits<double>::infinity();
      for (std::size_t a : level1) {
        for (std::size_t b : level2) {
          const SemanticId cand{static_cast<std::int32_t>(a), static_cast<std::int32_t>(b)};
          if (out.occupied(cand)) continue;
          const double dist = reconstruction_distance(cb, x, cand);
          if (dist < best_dist || (dist == best_dist && cand < best)) {
            best_dist = dist;
            best = cand;
            found = true;
          }
        }
      }
      if (found) out.set(id, best);
    }
  }
  return out;
}

InvertedIndex inverted_index(const AssignmentTable& table) { return table.reverse(); }

// ---------------------------------------------------------------------------
// Files

void save_codebook(const std::filesystem::path& path, const Codebook& cb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  nlohmann::json header = {{"K", cb.K()}, {"d", cb.dim()}, {"levels", 2}};
  out << header.dump() << '\n';
  write_matrix(out, cb.level1.cast<float>());
  write_matrix(out, cb.level2.cast<float>());
}

Codebook load_codebook(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("levels", 0) != 2)
    throw DataError("codebook header must declare levels: 2");
  Codebook cb;
  cb.level1 = read_matrix(in).cast<double>();
  cb.level2 = read_matrix(in).cast<double>();
  if (cb.K() != header.value("K", std::size_t{0}) || cb.dim() != header.value("d", std::size_t{0}) ||
      cb.level2.rows() != cb.level1.rows() || cb.level2.cols() != cb.level1.cols())
    throw DataError("codebook shape does not match header");
  return cb;
}

void save_assignments(const std::filesystem::path& path, const AssignmentTable& table) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "item_id,c1,c2\n";
  for (const auto& [id, sid] : table.forward()) out << id << ',' << sid.c1 << ',' << sid.c2 << '\n';
}

AssignmentTable load_assignments(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "item_id,c1,c2") throw DataError("assignment file: unexpected header '" + line + "'");
  AssignmentTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    long long id = 0;
    int c1 = 0, c2 = 0;
    if (std::sscanf(line.c_str(), "%lld,%d,%d", &id, &c1, &c2) != 3)
      throw DataError("assignment file line " + std::to_string(line_no) + ": malformed");
    table.set(id, {c1, c2});
  }
  return table;
}

std::string collision_csv(const std::vector<CollisionRow>& rows) {
  std::ostringstream out;
  out << "modality,loss1,loss2,std_conflicts,std_conflict_rate,std_unique_pairs,"
         "reassigned_conflicts,reassigned_conflict_rate,reassigned_unique_pairs\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%llu,%.6f,%llu,%llu,%.6f,%llu\n",
                  r.modality.c_str(), r.loss1, r.loss2,
                  static_cast<unsigned long long>(r.standard.conflicts), r.standard.conflict_rate,
                  static_cast<unsigned long long>(r.standard.unique_pairs),
                  static_cast<unsigned long long>(r.reassigned.conflicts),
                  r.reassigned.conflict_rate,
                  static_cast<unsigned long long>(r.reassigned.unique_pairs));
    out << buf;
  }
  return out.str();
}

}  // namespace onepiece
