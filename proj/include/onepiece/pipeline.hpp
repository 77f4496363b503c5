#pragma once

#include "onepiece/config.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

namespace onepiece {

/// Fixed file names under RunConfig::out_dir.
namespace artifact {
inline constexpr const char* kCatalog = "items.jsonl";
inline constexpr const char* kSequences = "sequences.jsonl";
inline constexpr const char* kCoverage = "coverage.csv";
inline constexpr const char* kCodebook = "codebook.bin";
inline constexpr const char* kAssignments = "assignments.csv";
inline constexpr const char* kStandardAssignments = "assignments_standard.csv";
inline constexpr const char* kCollisions = "collisions.csv";
inline constexpr const char* kSplitDir = "splits";
inline constexpr const char* kCheckpoint = "checkpoint";
inline constexpr const char* kMetrics = "metrics.csv";
inline constexpr const char* kCandidates = "candidates.bin";
inline constexpr const char* kRecommendations = "recommendations.jsonl";
inline constexpr const char* kEval = "eval.csv";
inline constexpr const char* kSweep = "sweep.csv";
inline constexpr const char* kSweepSeeds = "sweep_seeds.csv";
inline constexpr const char* kPowerLaw = "power_law.json";
}  // namespace artifact

/// Reported to the caller through `log` (one line per call, no newline).
using LogFn = std::function<void(const std::string&)>;

struct TokenizeOptions {
  /// Optional externally supplied embeddings (matrix + ".ids.json" sidecar).
  std::filesystem::path embeddings;
};

struct TrainOptions {
  bool resume = false;
  /// Stop (and checkpoint) after this many new steps; 0 runs to the end.
  std::size_t stop_after = 0;
};

struct InferOptions {
  std::filesystem::path input;   // default: test split
  std::filesystem::path output;  // default: out_dir/recommendations.jsonl
};

void cmd_gen_data(const RunConfig& config, const LogFn& log = {});
void cmd_tokenize(const RunConfig& config, const TokenizeOptions& options = {}, const LogFn& log = {});
void cmd_train(const RunConfig& config, const TrainOptions& options = {}, const LogFn& log = {});
void cmd_infer(const RunConfig& config, const InferOptions& options = {}, const LogFn& log = {});
void cmd_eval(const RunConfig& config, const LogFn& log = {});
void cmd_sweep(const RunConfig& config, const LogFn& log = {});

/// Everything training needs, derived from catalog, sequences and the
/// assignment table.
struct TrainingData {
  ItemCatalog catalog;
  DatasetSplits splits;
  AssignmentTable assignments;
  ItemTable<float> items;
  PopularityTable Q;
  std::vector<TrainExample> examples;
  std::vector<ItemId> train_items;  // items seen in the training split
  std::size_t codebook_K = 0;       // from the saved codebook; 0 falls back to the config
};

TrainingData prepare_training_data(const RunConfig& config, ItemCatalog catalog,
                                   const std::vector<UserSequence>& sequences,
                                   AssignmentTable assignments);

/// Model config with data-dependent fields (static_dim, K) filled in. K comes
/// from the saved codebook when one was loaded, so a later `train` does not
/// need to repeat the tokenizer flags.
ModelConfig effective_model_config(const RunConfig& config, const TrainingData& data);

}  // namespace onepiece
