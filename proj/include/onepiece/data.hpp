#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace onepiece {

using ItemId = std::int64_t;
using ModalityId = int;

inline constexpr ItemId kPadId = -1;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ItemRecord {
  ItemId item_id = 0;
  // A modality absent from the map is missing for this item (never zero-filled).
  std::map<ModalityId, std::vector<float>> modality_embeddings;
  std::vector<float> static_features;
  std::uint64_t popularity_count = 0;

  bool has_modality(ModalityId m) const { return modality_embeddings.count(m) != 0; }
};

class ItemCatalog {
 public:
  ItemCatalog() = default;
  /// Validates id uniqueness and per-modality dimension agreement.
  explicit ItemCatalog(std::vector<ItemRecord> items);

  const std::vector<ItemRecord>& items() const { return items_; }
  std::size_t total_items() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  bool contains(ItemId id) const { return index_.count(id) != 0; }
  /// Dense position of an item in items(); throws DataError if unknown.
  std::size_t position(ItemId id) const;
  const ItemRecord& at(ItemId id) const { return items_[position(id)]; }

  /// Modality ids present anywhere in the catalog, ascending.
  std::vector<ModalityId> modalities() const;
  /// Dimension of a modality (0 if never present).
  std::size_t modality_dim(ModalityId m) const;
  std::size_t static_dim() const;

  void set_popularity(const std::unordered_map<ItemId, std::uint64_t>& counts);

 private:
  std::vector<ItemRecord> items_;
  std::unordered_map<ItemId, std::size_t> index_;
  std::map<ModalityId, std::size_t> modality_dims_;
};

struct UserSequence {
  std::int64_t user_id = 0;
  std::vector<ItemId> history;
  std::optional<ItemId> target;
};

/// One left-padded row: real tokens are right-aligned so the final position
/// always holds the most recent item.
struct PaddedRow {
  std::vector<ItemId> tokens;
  std::vector<std::uint8_t> valid;
  std::size_t n_valid = 0;
  std::size_t first_valid() const { return tokens.size() - n_valid; }
};

struct PaddedBatch {
  std::vector<PaddedRow> rows;
  std::vector<ItemId> targets;
};

// JSON-lines I/O.
ItemCatalog load_catalog(const std::filesystem::path& path);
ItemCatalog parse_catalog(const std::string& text);
void write_catalog(const std::filesystem::path& path, const ItemCatalog& catalog);
std::string serialize_catalog(const ItemCatalog& catalog);

std::vector<UserSequence> load_sequences(const std::filesystem::path& path);
std::vector<UserSequence> parse_sequences(const std::string& text);
void write_sequences(const std::filesystem::path& path, const std::vector<UserSequence>& seqs);
std::string serialize_sequences(const std::vector<UserSequence>& seqs);

struct CoverageRow {
  ModalityId modality = 0;
  std::uint64_t covered_items = 0;
  std::uint64_t total_items = 0;
  double coverage_rate = 0.0;  // percent, [0, 100]
};

std::vector<CoverageRow> coverage_report(const ItemCatalog& catalog);
CoverageRow coverage_row(ModalityId modality, std::uint64_t covered, std::uint64_t total);
/// Percentage with three decimals, e.g. "87.403%".
std::string format_rate(double percent);

struct SyntheticConfig {
  std::size_t n_items = 10000;
  std::size_t n_users = 5000;
  std::size_t n_modalities = 5;
  std::size_t dim = 32;
  std::size_t static_dim = 16;
  std::size_t n_latent_clusters = 100;
  std::size_t seq_len_min = 8;
  std::size_t seq_len_max = 24;
  std::vector<double> missing_rate_per_modality;  // empty means all zero
  double cluster_switch_prob = 0.1;
  std::size_t walk_neighbors = 5;
  std::uint64_t seed = 0;
};

struct SyntheticData {
  ItemCatalog catalog;
  std::vector<UserSequence> sequences;
};

/// Modality tags used for generated data: 81, 82, 83, 85, 86, then 87 onward.
std::vector<ModalityId> synthetic_modality_ids(std::size_t n);

SyntheticData generate_synthetic(const SyntheticConfig& config);

/// Keeps the most recent L_max history items; pads on the left.
PaddedRow pad_truncate(const UserSequence& seq, std::size_t L_max, ItemId pad_id = kPadId);
PaddedRow pad_truncate(const std::vector<ItemId>& history, std::size_t L_max,
                       ItemId pad_id = kPadId);

struct DatasetSplits {
  std::vector<UserSequence> train;
  std::vector<UserSequence> valid;
  std::vector<UserSequence> test;
};

/// User-level disjoint 80/10/10 split, deterministic in the seed.
DatasetSplits split_users(const std::vector<UserSequence>& sequences, std::uint64_t seed);

/// Interaction counts over histories and targets.
std::unordered_map<ItemId, std::uint64_t> count_interactions(
    const std::vector<UserSequence>& sequences, bool targets_only = false);

}  // namespace onepiece
