#pragma once

#include "onepiece/data.hpp"
#include "onepiece/tensor.hpp"

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace onepiece {

class Rng;

/// Row-aligned, unit-norm item vectors used as tokenizer input.
struct FusedEmbeddingMatrix {
  MatD vectors;
  std::vector<ItemId> item_ids;

  std::size_t rows() const { return item_ids.size(); }
};

/// Normalized mean of the item's present modalities (zero-padded to the
/// widest modality). Items without any modality get a pseudo-random unit
/// vector keyed by their id.
FusedEmbeddingMatrix fuse_embeddings(const ItemCatalog& catalog);
/// Single-modality matrix over the items that carry modality m.
FusedEmbeddingMatrix modality_embeddings(const ItemCatalog& catalog, ModalityId m);
/// Externally supplied embeddings (for example exported from a trained model).
FusedEmbeddingMatrix external_embeddings(const MatF& vectors, std::vector<ItemId> ids);

struct Codebook {
  MatD level1;
  MatD level2;

  std::size_t K() const { return static_cast<std::size_t>(level1.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(level1.cols()); }
};

/// Index of the closest row of `centroids` to `x` (squared Euclidean), lowest
/// index on ties.
std::size_t nearest_centroid(const MatD& centroids, const Eigen::Ref<const Vec<double>>& x);

struct KMeansResult {
  MatD centroids;
  std::vector<std::size_t> assignment;
  /// Mean squared quantization error after each assignment step; entry 0 is
  /// the error of the initial centroids.
  std::vector<double> loss_history;
  std::size_t reseeded = 0;
};

MatD kmeans_pp_init(const MatD& points, std::size_t K, Rng& rng);
/// Lloyd iterations from given centroids. Empty clusters are re-seeded to the
/// point farthest from its assigned centroid.
KMeansResult lloyd(const MatD& points, MatD centroids, std::size_t iters);

struct ResidualFit {
  Codebook codebook;
  std::vector<double> loss1_history;
  std::vector<double> loss2_history;
  double loss1() const { return loss1_history.back(); }
  double loss2() const { return loss2_history.back(); }
};

ResidualFit residual_kmeans_fit(const FusedEmbeddingMatrix& emb, std::size_t K, std::size_t iters,
                                std::uint64_t seed);

struct SemanticId {
  std::int32_t c1 = 0;
  std::int32_t c2 = 0;
  auto operator<=>(const SemanticId&) const = default;
};

class AssignmentTable {
 public:
  void set(ItemId item, SemanticId sid);
  const SemanticId& at(ItemId item) const;
  bool contains(ItemId item) const { return forward_.count(item) != 0; }
  std::size_t size() const { return forward_.size(); }
  bool occupied(SemanticId sid) const { return reverse_.count(sid) != 0; }

  const std::map<ItemId, SemanticId>& forward() const { return forward_; }
  const std::map<SemanticId, std::vector<ItemId>>& reverse() const { return reverse_; }

 private:
  std::map<ItemId, SemanticId> forward_;
  std::map<SemanticId, std::vector<ItemId>> reverse_;  // lists kept ascending
};

AssignmentTable assign(const FusedEmbeddingMatrix& emb, const Codebook& cb);

struct CollisionReport {
  std::uint64_t conflicts = 0;
  double conflict_rate = 0.0;  // fraction in [0, 1]
  std::uint64_t unique_pairs = 0;
};

CollisionReport collision_report(const AssignmentTable& table, std::size_t n_items);

/// Moves all but one member of each colliding SID to the nearest unoccupied
/// code pair among top_n x top_n level-1/level-2 neighbours.
AssignmentTable greedy_reassign(const AssignmentTable& table, const FusedEmbeddingMatrix& emb,
                                const Codebook& cb, std::size_t top_n = 50);

using InvertedIndex = std::map<SemanticId, std::vector<ItemId>>;
InvertedIndex inverted_index(const AssignmentTable& table);

// File formats.
void save_codebook(const std::filesystem::path& path, const Codebook& cb);
Codebook load_codebook(const std::filesystem::path& path);
void save_assignments(const std::filesystem::path& path, const AssignmentTable& table);
AssignmentTable load_assignments(const std::filesystem::path& path);

struct CollisionRow {
  std::string modality;
  double loss1 = 0.0;
  double loss2 = 0.0;
  CollisionReport standard;
  CollisionReport reassigned;
};

std::string collision_csv(const std::vector<CollisionRow>& rows);

}  // namespace onepiece
