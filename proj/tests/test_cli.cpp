#include "onepiece/config.hpp"
#include "onepiece/pipeline.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <sys/wait.h>

using namespace onepiece;
using namespace onepiece::testing;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string err;
};

CliResult run_cli(const fs::path& out_dir, const std::string& args) {
  const auto err_file = out_dir.parent_path() / (out_dir.filename().string() + ".stderr");
  const std::string cmd = std::string("\"") + ONEPIECE_CLI + "\" --seed 3 --threads 1 --out-dir \"" +
                          out_dir.string() + "\" " + args + " > /dev/null 2> \"" + err_file.string() + "\"";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(err_file)};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

const char* kSmallData = "gen-data --n-items 600 --n-users 300 --clusters 12 --dim 8 --static-dim 4";

}  // namespace

TEST_CASE("config rejects unknown keys and applies known ones") {
  const auto c = parse_run_config(nlohmann::json::parse(R"({"seed": 9, "model": {"n_layers": 3},
                                                            "train": {"batch_size": 32}})"));
  CHECK(c.seed == 9);
  CHECK(c.model.n_layers == 3);
  CHECK(c.model.hidden_dim == ModelConfig{}.hidden_dim);
  CHECK(c.train.batch_size == 32);
  CHECK_THROWS(parse_run_config(nlohmann::json::parse(R"({"sead": 9})")));
  CHECK_THROWS(parse_run_config(nlohmann::json::parse(R"({"model": {"layers": 3}})")));
  CHECK_THROWS(parse_run_config(nlohmann::json::parse(R"({"train": {"batch": 3}})")));
  const auto round = parse_run_config(run_config_json(c));
  CHECK(run_config_json(round) == run_config_json(c));
}

TEST_CASE("gen-data: readable output, reproducible, usage errors") {
  const auto root = scratch_dir("cli_gen");
  CHECK(run_cli(root / "a", kSmallData).code == 0);
  CHECK(run_cli(root / "b", kSmallData).code == 0);
  CHECK(load_catalog(root / "a" / artifact::kCatalog).total_items() == 600);
  CHECK(read_file(root / "a" / artifact::kCatalog) == read_file(root / "b" / artifact::kCatalog));
  CHECK(read_file(root / "a" / artifact::kSequences) == read_file(root / "b" / artifact::kSequences));
  CHECK(lines(read_file(root / "a" / artifact::kCoverage))[0] == "modality,covered_items,total_items,coverage_rate");

  const auto bad = run_cli(root / "c", "gen-data --n-items 0");
  CHECK(bad.code == 2);
  CHECK(nlohmann::json::parse(lines(bad.err).back()).at("error") == "usage");
  fs::remove_all(root);
}

TEST_CASE("tokenize: property in the emitted csv, tiny exact case, missing input") {
  const auto root = scratch_dir("cli_tok");
  REQUIRE(run_cli(root / "a", kSmallData).code == 0);
  REQUIRE(run_cli(root / "a", "tokenize --k 8 --per-modality").code == 0);
  const auto rows = lines(read_file(root / "a" / artifact::kCollisions));
  REQUIRE(rows.size() >= 2);
  const auto header = rows[0];
  CHECK(header.find("modality") == 0);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::vector<std::string> f;
    std::istringstream in(rows[i]);
    for (std::string x; std::getline(in, x, ',');) f.push_back(x);
    std::vector<std::string> h;
    std::istringstream hin(header);
    for (std::string x; std::getline(hin, x, ',');) h.push_back(x);
    const auto col = [&](const std::string& name) {
      return std::stod(f[static_cast<std::size_t>(std::find(h.begin(), h.end(), name) - h.begin())]);
    };
    CHECK(col("reassigned_conflict_rate") <= col("std_conflict_rate"));
  }

  // Four items at four distinct points: K=4 leaves no conflicts.
  fs::create_directories(root / "four");
  std::ofstream(root / "four" / "items.jsonl") << "{\"item_id\":1,\"static\":[0],\"mm\":{\"81\":[1,0]}}\n"
                                                  "{\"item_id\":2,\"static\":[0],\"mm\":{\"81\":[0,1]}}\n"
                                                  "{\"item_id\":3,\"static\":[0],\"mm\":{\"81\":[-1,0]}}\n"
                                                  "{\"item_id\":4,\"static\":[0],\"mm\":{\"81\":[0,-1]}}\n";
  std::ofstream(root / "four" / "sequences.jsonl") << "{\"user_id\":1,\"history\":[1,2],\"target\":3}\n";
  REQUIRE(run_cli(root / "four", "tokenize --k 4").code == 0);
  const auto four = load_assignments(root / "four" / artifact::kAssignments);
  CHECK(collision_report(four, 4).conflicts == 0);

  const auto missing = run_cli(root / "none", "tokenize --k 4");
  CHECK(missing.code == 1);
  CHECK(missing.err.find("items.jsonl") != std::string::npos);
  fs::remove_all(root);
}

TEST_CASE("train, infer, eval and sweep on a small run") {
  const auto root = scratch_dir("cli_train");
  const auto dir = root / "run";
  REQUIRE(run_cli(dir, kSmallData).code == 0);
  REQUIRE(run_cli(dir, "tokenize --k 8").code == 0);

  SUBCASE("one layer, 50 steps, then recommendations") {
    REQUIRE(run_cli(dir, "train --layers 1 --steps 50 --batch-size 32").code == 0);
    CHECK(fs::exists(dir / artifact::kCheckpoint / "manifest.json"));
    CHECK(lines(read_file(dir / artifact::kMetrics)).size() == 51);
    REQUIRE(run_cli(dir, "infer --constrain-to-index --k-prime 8 --beam-width 4").code == 0);
    std::map<std::int64_t, std::vector<ItemId>> hist;
    for (const auto& s : load_sequences(dir / artifact::kSplitDir / "test.jsonl")) hist[s.user_id] = s.history;
    for (const auto& l : lines(read_file(dir / artifact::kRecommendations))) {
      const auto j = nlohmann::json::parse(l);
      const auto items = j.at("items").get<std::vector<ItemId>>();
      CHECK(items.size() <= 10);
      CHECK_FALSE(items.empty());
      CHECK(j.at("scores").size() == items.size());
      const auto& h = hist.at(j.at("user_id").get<std::int64_t>());
      for (ItemId i : items) CHECK(std::find(h.begin(), h.end(), i) == h.end());
    }
    REQUIRE(run_cli(dir, "eval --mode dual-tower --mode sid-only").code == 0);
    const auto eval_rows = lines(read_file(dir / artifact::kEval));
    CHECK(eval_rows[0] == "split,epoch,mode,users,hr_at_10,ndcg_at_10,sid1_hr,sid2_hr,model_size_params");
    CHECK(eval_rows.size() == 1 + 2 * 3);  // two modes plus the baseline, per split
  }

  SUBCASE("zero SID weights leave the SID heads at their initial values") {
    REQUIRE(run_cli(dir, "train --steps 1 --stop-after 1 --lambda1 0 --lambda2 0 --batch-size 32").code == 0);
    // Both runs start from the same seeded initialization.
    const auto first = load_checkpoint(dir / artifact::kCheckpoint);
    REQUIRE(run_cli(dir, "train --steps 20 --lambda1 0 --lambda2 0 --batch-size 32").code == 0);
    const auto last = load_checkpoint(dir / artifact::kCheckpoint);
    CHECK(first.params.sid1_wq == last.params.sid1_wq);
    CHECK(first.params.sid1_proj == last.params.sid1_proj);
    CHECK(first.params.code_embedding == last.params.code_embedding);
    CHECK(first.params.sid2_proj == last.params.sid2_proj);
    CHECK(first.params.user_w != last.params.user_w);
    const auto metrics = lines(read_file(dir / artifact::kMetrics));
    std::istringstream row(metrics[1]);
    std::vector<double> v;
    for (std::string x; std::getline(row, x, ',');) v.push_back(std::stod(x));
    CHECK(std::abs(v[3] - std::log(8.0)) < 0.5);  // L_c1 near ln K at init
    CHECK(v[5] == v[2]);                          // L_total == L_con
  }

  SUBCASE("resume reproduces the next step's loss") {
    REQUIRE(run_cli(dir, "train --steps 12 --batch-size 32").code == 0);
    const auto full = lines(read_file(dir / artifact::kMetrics));
    REQUIRE(run_cli(dir, "train --steps 12 --batch-size 32 --stop-after 7").code == 0);
    REQUIRE(lines(read_file(dir / artifact::kMetrics)).size() == 8);
    REQUIRE(run_cli(dir, "train --steps 12 --batch-size 32 --resume").code == 0);
    CHECK(lines(read_file(dir / artifact::kMetrics)) == full);
  }

  SUBCASE("sweep emits one row per depth and a fit") {
    REQUIRE(run_cli(dir, "sweep --layers 1 2 3 --seeds 0 --steps 6 --batch-size 32").code == 0);
    const auto rows = parse_sweep_csv(read_file(dir / artifact::kSweep));
    CHECK(rows.size() == 3);
    CHECK(rows[0].params < rows[1].params);
    CHECK(rows[1].params < rows[2].params);
    const auto fit = nlohmann::json::parse(read_file(dir / artifact::kPowerLaw));
    CHECK(fit.contains("r2"));
    std::vector<double> n, l;
    for (const auto& r : rows) {
      n.push_back(static_cast<double>(r.params));
      l.push_back(r.loss);
    }
    CHECK(fit.at("b").get<double>() == doctest::Approx(power_law_fit(n, l).b));
  }
  fs::remove_all(root);
}

TEST_CASE("bad flags are usage errors") {
  const auto root = scratch_dir("cli_flags");
  CHECK(run_cli(root / "a", "train --no-such-flag").code != 0);
  CHECK(run_cli(root / "a", "").code != 0);
  fs::remove_all(root);
}
