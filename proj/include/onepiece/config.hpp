#pragma once

#include "onepiece/data.hpp"
#include "onepiece/eval.hpp"
#include "onepiece/inference.hpp"
#include "onepiece/model.hpp"
#include "onepiece/training.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace onepiece {

struct TokenizerParams {
  std::size_t K = 256;
  std::size_t iters = 50;
  std::size_t top_n = 50;
  bool per_modality = false;
};

struct SweepParams {
  std::vector<std::size_t> layers{1, 2, 4};
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct EvalParams {
  std::vector<std::string> modes{"cascade", "dual-tower", "sid-only"};
  std::size_t k = 10;
};

/// Everything a subcommand may need. Paths left empty default to files under
/// out_dir.
struct RunConfig {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::filesystem::path out_dir = "onepiece_out";
  std::filesystem::path catalog;
  std::filesystem::path sequences;
  SyntheticConfig synthetic;
  TokenizerParams tokenizer;
  ModelConfig model;
  TrainConfig train;
  InferenceConfig inference;
  EvalParams eval;
  SweepParams sweep;

  std::filesystem::path catalog_path() const;
  std::filesystem::path sequences_path() const;
};

/// Applies the keys of `j` on top of `base`; unknown keys throw.
RunConfig parse_run_config(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
nlohmann::json run_config_json(const RunConfig& c);

}  // namespace onepiece
