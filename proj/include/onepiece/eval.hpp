#pragma once

#include "onepiece/inference.hpp"
#include "onepiece/training.hpp"

#include <span>
#include <string>
#include <vector>

namespace onepiece {

/// 1 iff `target` is among the first k entries.
int hr_at_k(std::span<const ItemId> ranked, ItemId target, std::size_t k);
/// 1 / log2(rank + 1) for a 1-based rank <= k, else 0.
double ndcg_at_k(std::span<const ItemId> ranked, ItemId target, std::size_t k);

enum class EvalMode { Cascade, DualTower, SidOnly };

EvalMode parse_eval_mode(const std::string& s);
std::string to_string(EvalMode mode);

struct EvalConfig {
  EvalMode mode = EvalMode::Cascade;
  InferenceConfig inference;
  std::size_t k = 10;
  unsigned threads = 1;
};

struct MetricRow {
  std::string split;
  std::size_t epoch = 0;
  std::string mode;
  std::size_t users = 0;
  double hr_at_10 = 0.0;
  double ndcg_at_10 = 0.0;
  /// SID-only mode: true c1 in the SID1 head's top-k codes / true pair in the
  /// joint top-k beam pairs.
  double sid1_hr = 0.0;
  double sid2_hr = 0.0;
  std::size_t model_size_params = 0;
};

/// Mean metrics over the users of `split` (each must carry a target).
MetricRow evaluate_split(const Model<float>& model, const std::vector<UserSequence>& split,
                         const std::string& split_name, const InvertedIndex& index,
                         const CandidateEmbeddings& emb, const AssignmentTable& assignments,
                         const EvalConfig& config);

/// Most-popular-in-training ranking with the same history filtering as the
/// cascade (ties: item_id ascending).
MetricRow popularity_baseline(const std::vector<UserSequence>& train,
                              const std::vector<UserSequence>& split, const std::string& split_name,
                              std::size_t k = 10);

std::string metric_csv_header();
std::string metric_csv_row(const MetricRow& row);

struct PowerLawFit {
  double a = 0.0;
  double b = 0.0;
  double r2 = 0.0;
};

/// Least squares on log L = log a - b log N. R^2 is 1 when the log losses have
/// zero variance.
PowerLawFit power_law_fit(std::span<const double> sizes, std::span<const double> losses);

struct SweepRow {
  std::size_t layers = 0;
  std::size_t params = 0;
  double metric_a = 0.0;  // last-100-batch in-batch hitrate
  double metric_b = 0.0;  // last-100-batch in-batch NDCG
  double loss = 0.0;      // last-100-batch InfoNCE loss
};

struct SweepInputs {
  ModelConfig model;
  TrainConfig train;
  const ItemTable<float>* items = nullptr;
  const std::vector<TrainExample>* examples = nullptr;
  const PopularityTable* Q = nullptr;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // one per depth, averaged over seeds
  std::vector<std::vector<double>> loss_per_seed;  // [depth][seed]
};

/// Trains one model per (depth, seed) on the same examples and averages the
/// last-100-batch metrics over seeds.
SweepResult layer_sweep(const SweepInputs& inputs, std::span<const std::size_t> layer_counts,
                        std::span<const std::uint64_t> seeds);

std::string sweep_csv(const std::vector<SweepRow>& rows);
std::vector<SweepRow> parse_sweep_csv(const std::string& text);

/// Number of adjacent depth pairs where the loss goes up, summed over seeds.
std::size_t count_loss_inversions(const std::vector<std::vector<double>>& loss_per_seed);

}  // namespace onepiece
