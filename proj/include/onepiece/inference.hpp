#pragma once

#include "onepiece/data.hpp"
#include "onepiece/model.hpp"
#include "onepiece/tokenizer.hpp"

#include <optional>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace onepiece {

struct BeamHypothesis {
  int c1 = 0;
  std::optional<int> c2;
  double logp = 0.0;
};

struct ScoredSid {
  SemanticId sid;
  double logp = 0.0;
};

/// Two-step beam search over (c1, c2). Keeps the `beam_width` best c1 codes,
/// scores every c2 under each, and returns the best `k_prime` complete pairs
/// by joint log-probability (ties: (c1, c2) ascending). With `constrain`, only
/// pairs present in the index are eligible.
template <typename T>
std::vector<ScoredSid> beam_search_sids(const Parameters<T>& params, const Mat<T>& H,
                                        const Vec<T>& h_T, std::size_t beam_width,
                                        std::size_t k_prime, const InvertedIndex* constrain = nullptr);

struct CandidateSet {
  std::vector<ItemId> item_ids;
  std::vector<SemanticId> provenance;  // parallel to item_ids
};

/// Union of the index buckets of `pairs`, in pair order; the first pair that
/// yields an item is its provenance.
CandidateSet expand_candidates(std::span<const ScoredSid> pairs, const InvertedIndex& index);

/// Unit-norm ItemDNN embeddings for the items seen in training.
struct CandidateEmbeddings {
  std::vector<ItemId> ids;
  std::unordered_map<ItemId, std::size_t> row_of;
  MatF vectors;

  bool contains(ItemId id) const { return row_of.count(id) != 0; }
};

CandidateEmbeddings build_candidate_embeddings(const Model<float>& model,
                                               const std::vector<ItemId>& train_items);
void save_candidate_embeddings(const std::filesystem::path& path, const CandidateEmbeddings& emb);
CandidateEmbeddings load_candidate_embeddings(const std::filesystem::path& path);

struct ScoredItem {
  ItemId item_id = 0;
  double score = 0.0;
};

struct CandidateScores {
  std::vector<ScoredItem> scored;
  std::vector<ItemId> cold_start;  // candidates without an embedding row
};

CandidateScores score_candidates(const Vec<float>& q_u, std::span<const ItemId> candidates,
                                 const CandidateEmbeddings& emb);

using RecList = std::vector<ScoredItem>;

/// Drops history and cold-start items, then returns the `top` best by score
/// (ties: item_id ascending).
RecList filter_and_rank(std::span<const ScoredItem> scores, const std::unordered_set<ItemId>& history,
                        const std::unordered_set<ItemId>& cold_start, std::size_t top = 10);

struct InferenceConfig {
  std::size_t beam_width = 20;
  std::size_t k_prime = 384;
  std::size_t topn = 10;
  bool constrain_to_index = false;
};

struct Recommendation {
  RecList items;
  std::vector<ScoredSid> pairs;
  CandidateSet candidates;
};

/// Encodes the most recent L_max history items and runs the three stages.
Recommendation recommend(const std::vector<ItemId>& history, const Model<float>& model,
                         const InvertedIndex& index, const CandidateEmbeddings& emb,
                         const InferenceConfig& config = {});

/// Unit-norm user vector for a history (most recent L_max items).
Vec<float> user_vector(const std::vector<ItemId>& history, const Model<float>& model);

/// Exhaustive cosine top-n over the whole candidate matrix.
RecList dual_tower_topn(const Vec<float>& q_u, const CandidateEmbeddings& emb,
                        const std::unordered_set<ItemId>& history, std::size_t top = 10);

}  // namespace onepiece
