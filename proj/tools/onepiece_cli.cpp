#include "onepiece/parallel.hpp"
#include "onepiece/pipeline.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace onepiece;

/// Option value plus the places it was registered, so config values are only
/// overridden by flags that were actually given.
template <typename T>
struct Flag {
  T value{};
  std::vector<CLI::Option*> options;

  void add(CLI::App* app, const std::string& name, const std::string& help = "") {
    options.push_back(app->add_option(name, value, help));
  }
  bool given() const {
    for (auto* o : options)
      if (o->count() > 0) return true;
    return false;
  }
};

template <typename T, typename U>
void override_with(const Flag<T>& flag, U& target) {
  if (flag.given()) target = flag.value;
}

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"onepiece: cascade generative recommendation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  Flag<std::uint64_t> seed;
  Flag<unsigned> threads;
  Flag<std::string> out_dir;
  app.add_option("--config", config_path, "JSON run config; flags override its values")->check(CLI::ExistingFile);
  seed.add(&app, "--seed", "Seed for every random choice");
  threads.add(&app, "--threads", "Worker threads (default: available cores)");
  out_dir.add(&app, "--out-dir", "Artifact directory");

  Flag<std::string> catalog, sequences;
  auto add_paths = [&](CLI::App* sub) {
    catalog.add(sub, "--catalog", "Item JSON-lines file (default: <out-dir>/items.jsonl)");
    sequences.add(sub, "--sequences", "Sequence JSON-lines file (default: <out-dir>/sequences.jsonl)");
  };

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic catalog and user sequences");
  Flag<std::size_t> n_items, n_users, n_modalities, dim, clusters, static_dim;
  Flag<std::vector<double>> missing;
  n_items.add(gen, "--n-items");
  n_users.add(gen, "--n-users");
  n_modalities.add(gen, "--n-modalities");
  dim.add(gen, "--dim", "Modality embedding dimension");
  static_dim.add(gen, "--static-dim");
  clusters.add(gen, "--clusters", "Latent clusters");
  missing.add(gen, "--missing-rate", "Per-modality missing rates");

  // tokenize
  auto* tok = app.add_subcommand("tokenize", "Fit residual k-means codebooks and assign semantic IDs");
  add_paths(tok);
  Flag<std::size_t> tok_k, tok_iters, tok_top_n;
  bool per_modality = false;
  std::string embeddings;
  tok_k.add(tok, "--k", "Codebook size per level");
  tok_iters.add(tok, "--iters", "Lloyd iterations per level");
  tok_top_n.add(tok, "--top-n", "Neighbours per level for re-assignment");
  tok->add_flag("--per-modality", per_modality, "Also report collisions per modality");
  tok->add_option("--embeddings", embeddings, "External embedding matrix (with .ids.json sidecar)")
      ->check(CLI::ExistingFile);

  // train
  auto* train = app.add_subcommand("train", "Train the model and write a checkpoint");
  add_paths(train);
  Flag<std::size_t> layers, hidden, steps, epochs, batch, stop_after, warmup;
  Flag<double> lr, lambda1, lambda2, balance;
  bool resume = false, no_moe = false;
  layers.add(train, "--layers");
  hidden.add(train, "--hidden-dim");
  steps.add(train, "--steps", "Stop after this many optimizer steps in total");
  epochs.add(train, "--epochs");
  batch.add(train, "--batch-size");
  warmup.add(train, "--warmup", "Warmup steps");
  lr.add(train, "--lr");
  lambda1.add(train, "--lambda1", "SID1 loss weight");
  lambda2.add(train, "--lambda2", "SID2 loss weight");
  balance.add(train, "--balance-weight", "MoE load-balance loss weight");
  train->add_flag("--no-moe", no_moe, "Disable the MoE layers");
  train->add_flag("--resume", resume, "Continue from <out-dir>/checkpoint");
  stop_after.add(train, "--stop-after", "Checkpoint after this many new steps");

  // infer
  auto* infer = app.add_subcommand("infer", "Recommend items for sequences");
  Flag<std::size_t> beam_width, k_prime, topn;
  bool constrain = false;
  std::string infer_in, infer_out;
  beam_width.add(infer, "--beam-width", "Beam width B (default 20)");
  k_prime.add(infer, "--k-prime", "SID pairs kept after beam search (default 384)");
  topn.add(infer, "--topn", "Items per user (default 10)");
  infer->add_flag("--constrain-to-index", constrain, "Restrict the beam to occupied SID pairs");
  infer->add_option("--in", infer_in, "Sequence JSON-lines (default: test split)")->check(CLI::ExistingFile);
  infer->add_option("--out", infer_out, "Output JSON-lines");

  // eval
  auto* eval = app.add_subcommand("eval", "Offline HR/NDCG on the validation and test splits");
  Flag<std::vector<std::string>> modes;
  Flag<std::size_t> eval_k;
  modes.add(eval, "--mode", "cascade, dual-tower, sid-only (repeatable)");
  eval_k.add(eval, "--k", "Cutoff");
  beam_width.add(eval, "--beam-width");
  k_prime.add(eval, "--k-prime");
  eval->add_flag("--constrain-to-index", constrain);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Train one model per depth and fit a power law");
  add_paths(sweep);
  Flag<std::vector<std::size_t>> sweep_layers;
  Flag<std::vector<std::uint64_t>> sweep_seeds;
  sweep_layers.add(sweep, "--layers", "Depths to train");
  sweep_seeds.add(sweep, "--seeds", "Initialization seeds averaged per depth");
  steps.add(sweep, "--steps");
  epochs.add(sweep, "--epochs");
  batch.add(sweep, "--batch-size");
  balance.add(sweep, "--balance-weight");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  auto log = [](const std::string& line) { std::cout << line << std::endl; };
  try {
    RunConfig config;
    config.threads = default_threads();
    if (!config_path.empty()) config = load_run_config(config_path, config);
    override_with(seed, config.seed);
    override_with(threads, config.threads);
    if (out_dir.given()) config.out_dir = out_dir.value;
    if (catalog.given()) config.catalog = catalog.value;
    if (sequences.given()) config.sequences = sequences.value;

    override_with(n_items, config.synthetic.n_items);
    override_with(n_users, config.synthetic.n_users);
    override_with(n_modalities, config.synthetic.n_modalities);
    override_with(dim, config.synthetic.dim);
    override_with(static_dim, config.synthetic.static_dim);
    override_with(clusters, config.synthetic.n_latent_clusters);
    override_with(missing, config.synthetic.missing_rate_per_modality);

    override_with(tok_k, config.tokenizer.K);
    override_with(tok_iters, config.tokenizer.iters);
    override_with(tok_top_n, config.tokenizer.top_n);
    if (per_modality) config.tokenizer.per_modality = true;

    override_with(layers, config.model.n_layers);
    override_with(hidden, config.model.hidden_dim);
    override_with(lambda1, config.model.lambda1);
    override_with(lambda2, config.model.lambda2);
    override_with(balance, config.model.balance_loss_weight);
    if (no_moe) config.model.use_moe = false;
    override_with(steps, config.train.max_steps);
    override_with(epochs, config.train.epochs);
    override_with(batch, config.train.batch_size);
    override_with(warmup, config.train.warmup_steps);
    override_with(lr, config.train.optimizer.lr);

    override_with(beam_width, config.inference.beam_width);
    override_with(k_prime, config.inference.k_prime);
    override_with(topn, config.inference.topn);
    if (constrain) config.inference.constrain_to_index = true;
    override_with(modes, config.eval.modes);
    override_with(eval_k, config.eval.k);
    override_with(sweep_layers, config.sweep.layers);
    override_with(sweep_seeds, config.sweep.seeds);
    if (config.threads == 0) throw std::invalid_argument("--threads must be >= 1");

    if (gen->parsed()) {
      cmd_gen_data(config, log);
    } else if (tok->parsed()) {
      cmd_tokenize(config, {embeddings}, log);
    } else if (train->parsed()) {
      cmd_train(config, {resume, stop_after.value}, log);
    } else if (infer->parsed()) {
      cmd_infer(config, {infer_in, infer_out}, log);
    } else if (eval->parsed()) {
      cmd_eval(config, log);
    } else if (sweep->parsed()) {
      cmd_sweep(config, log);
    }
  } catch (const std::invalid_argument& e) {
    print_error("usage", e.what());
    return 2;
  } catch (const DataError& e) {
    print_error("data", e.what());
    return 1;
  } catch (const FormatError& e) {
    print_error("format", e.what());
    return 1;
  } catch (const NumericError& e) {
    print_error("numeric", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 1;
  }
  return 0;
}
