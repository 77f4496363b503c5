#include "onepiece/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace onepiece {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void say(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path))
    throw std::runtime_error(what + " not found: " + path.string());
}

std::string coverage_csv(const std::vector<CoverageRow>& rows) {
  std::string out = "modality,covered_items,total_items,coverage_rate\n";
  for (const auto& r : rows)
    out += std::to_string(r.modality) + "," + std::to_string(r.covered_items) + "," +
           std::to_string(r.total_items) + "," + format_rate(r.coverage_rate) + "\n";
  return out;
}

CollisionRow tokenize_one(const std::string& name, const FusedEmbeddingMatrix& emb,
                          const TokenizerParams& p, std::uint64_t seed, Codebook* codebook_out,
                          AssignmentTable* standard_out, AssignmentTable* reassigned_out) {
  const auto fit = residual_kmeans_fit(emb, p.K, p.iters, seed);
  auto standard = assign(emb, fit.codebook);
  auto reassigned = greedy_reassign(standard, emb, fit.codebook, p.top_n);
  CollisionRow row;
  row.modality = name;
  row.loss1 = fit.loss1();
  row.loss2 = fit.loss2();
  row.standard = collision_report(standard, emb.rows());
  row.reassigned = collision_report(reassigned, emb.rows());
  if (codebook_out) *codebook_out = fit.codebook;
  if (standard_out) *standard_out = std::move(standard);
  if (reassigned_out) *reassigned_out = std::move(reassigned);
  return row;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path split_path(const RunConfig& c, const std::string& name) {
  return c.out_dir / artifact::kSplitDir / (name + ".jsonl");
}

}  // namespace

// ---------------------------------------------------------------------------

void cmd_gen_data(const RunConfig& config, const LogFn& log) {
  SyntheticConfig g = config.synthetic;
  if (g.n_items == 0) throw std::invalid_argument("--n-items must be positive");
  if (g.n_users == 0) throw std::invalid_argument("--n-users must be positive");
  g.seed = config.seed;
  const auto data = generate_synthetic(g);
  fs::create_directories(config.out_dir);
  write_catalog(config.out_dir / artifact::kCatalog, data.catalog);
  write_sequences(config.out_dir / artifact::kSequences, data.sequences);
  const auto coverage = coverage_report(data.catalog);
  write_text(config.out_dir / artifact::kCoverage, coverage_csv(coverage));
  say(log, "gen-data: " + std::to_string(data.catalog.total_items()) + " items, " +
               std::to_string(data.sequences.size()) + " users -> " + config.out_dir.string());
}

void cmd_tokenize(const RunConfig& config, const TokenizeOptions& options, const LogFn& log) {
  const auto catalog_path = config.catalog_path();
  require_file(catalog_path, "catalog");
  const auto catalog = load_catalog(catalog_path);
  const auto& p = config.tokenizer;
  if (p.K < 2) throw std::invalid_argument("tokenizer K must be >= 2");
  if (p.iters == 0) throw std::invalid_argument("tokenizer iters must be >= 1");
  if (p.top_n == 0) throw std::invalid_argument("tokenizer top_n must be >= 1");

  FusedEmbeddingMatrix emb;
  std::string source = "fused";
  if (!options.embeddings.empty()) {
    require_file(options.embeddings, "embedding matrix");
    auto ext = load_candidate_embeddings(options.embeddings);
    emb = external_embeddings(ext.vectors, ext.ids);
    source = "external";
    for (const auto& rec : catalog.items())
      if (std::find(emb.item_ids.begin(), emb.item_ids.end(), rec.item_id) == emb.item_ids.end())
        throw DataError("external embeddings lack catalog item " + std::to_string(rec.item_id));
  } else {
    emb = fuse_embeddings(catalog);
  }
  if (emb.rows() < p.K) say(log, "tokenize: warning: K exceeds the number of items");

  Codebook codebook;
  AssignmentTable standard, reassigned;
  std::vector<CollisionRow> rows;
  rows.push_back(tokenize_one(source, emb, p, config.seed, &codebook, &standard, &reassigned));
  if (p.per_modality)
    for (ModalityId m : catalog.modalities()) {
      const auto me = modality_embeddings(catalog, m);
      rows.push_back(tokenize_one(std::to_string(m), me, p, config.seed, nullptr, nullptr, nullptr));
    }

  fs::create_directories(config.out_dir);
  save_codebook(config.out_dir / artifact::kCodebook, codebook);
  save_assignments(config.out_dir / artifact::kStandardAssignments, standard);
  save_assignments(config.out_dir / artifact::kAssignments, reassigned);
  write_text(config.out_dir / artifact::kCollisions, collision_csv(rows));
  for (const auto& r : rows)
    if (r.reassigned.conflict_rate > r.standard.conflict_rate)
      throw std::logic_error("re-assignment increased the conflict rate for " + r.modality);
  const auto& r0 = rows.front();
  say(log, "tokenize: K=" + std::to_string(p.K) + " loss1=" + fmt("%.4f", r0.loss1) +
               " loss2=" + fmt("%.4f", r0.loss2) + " conflict_rate " +
               fmt("%.4f", r0.standard.conflict_rate) + " -> " +
               fmt("%.4f", r0.reassigned.conflict_rate));
}

// ---------------------------------------------------------------------------

TrainingData prepare_training_data(const RunConfig& config, ItemCatalog catalog,
                                   const std::vector<UserSequence>& sequences,
                                   AssignmentTable assignments) {
  TrainingData d;
  d.catalog = std::move(catalog);
  d.assignments = std::move(assignments);
  for (const auto& rec : d.catalog.items())
    if (!d.assignments.contains(rec.item_id))
      throw DataError("assignment table lacks catalog item " + std::to_string(rec.item_id));
  d.splits = split_users(sequences, config.seed);
  if (d.splits.train.empty()) throw DataError("training split is empty");
  const auto counts = count_interactions(d.splits.train, false);
  d.items = build_item_table(d.catalog, counts, d.catalog.static_dim());
  for (const auto& [id, c] : counts) d.train_items.push_back(id);
  std::sort(d.train_items.begin(), d.train_items.end());
  d.Q = estimate_popularity(d.splits.train, d.train_items, config.train.smoothing_eps,
                            config.train.popularity_targets_only);
  d.examples = make_examples(d.items, d.assignments, d.splits.train, config.model.L_max,
                             config.train.prefix_augment);
  return d;
}

ModelConfig effective_model_config(const RunConfig& config, const TrainingData& data) {
  ModelConfig mc = config.model;
  mc.static_dim = data.catalog.static_dim();
  mc.time_dim = 0;
  mc.hot_dim = 1;
  mc.K = data.codebook_K != 0 ? data.codebook_K : config.tokenizer.K;
  for (const auto& [id, sid] : data.assignments.forward())
    if (sid.c1 < 0 || sid.c2 < 0 || static_cast<std::size_t>(std::max(sid.c1, sid.c2)) >= mc.K)
      throw DataError("assignment of item " + std::to_string(id) + " is outside [0, K)");
  mc.validate();
  return mc;
}

namespace {

TrainingData load_training_data(const RunConfig& config) {
  require_file(config.catalog_path(), "catalog");
  require_file(config.sequences_path(), "sequences");
  require_file(config.out_dir / artifact::kAssignments, "assignment table (run tokenize first)");
  require_file(config.out_dir / artifact::kCodebook, "codebook (run tokenize first)");
  auto data = prepare_training_data(config, load_catalog(config.catalog_path()),
                                    load_sequences(config.sequences_path()),
                                    load_assignments(config.out_dir / artifact::kAssignments));
  data.codebook_K = load_codebook(config.out_dir / artifact::kCodebook).K();
  return data;
}

}  // namespace

void cmd_train(const RunConfig& config, const TrainOptions& options, const LogFn& log) {
  auto data = load_training_data(config);
  const ModelConfig mc = effective_model_config(config, data);
  fs::create_directories(config.out_dir / artifact::kSplitDir);
  write_sequences(split_path(config, "train"), data.splits.train);
  write_sequences(split_path(config, "valid"), data.splits.valid);
  write_sequences(split_path(config, "test"), data.splits.test);

  TrainConfig tc = config.train;
  tc.seed = config.seed;
  tc.threads = config.threads;
  const fs::path ckpt = config.out_dir / artifact::kCheckpoint;
  const fs::path metrics = config.out_dir / artifact::kMetrics;

  Model<float> model;
  AdamWState<float> state;
  if (options.resume) {
    json train_state;
    model = load_checkpoint(ckpt, {{"adam_m", &state.m}, {"adam_v", &state.v}}, &train_state);
    state.step = train_state.value("step", std::uint64_t{0});
    if (model.items.ids != data.items.ids) throw DataError("checkpoint vocabulary does not match the catalog");
    json saved, now;
    to_json(saved, model.config);
    to_json(now, mc);
    if (saved != now) throw DataError("checkpoint model config differs from the requested config");
    require_file(metrics, "metrics log");
  } else {
    model = init_model(mc, data.items, config.seed);
  }

  Trainer trainer(model, data.examples, data.Q, tc);
  if (options.resume) trainer.optimizer_state() = std::move(state);

  std::ofstream out(metrics, options.resume ? std::ios::app | std::ios::binary : std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + metrics.string());
  if (!options.resume) out << metrics_csv_header(model.config.use_moe ? model.config.n_layers : 0);
  say(log, "train: " + std::to_string(data.examples.size()) + " examples, " +
               std::to_string(trainer.total_steps()) + " steps, " +
               std::to_string(model.params.count()) + " parameters");
  const std::size_t every = std::max<std::size_t>(1, trainer.total_steps() / 20);
  trainer.run(
      [&](const StepLog& s) {
        out << metrics_csv_row(s);
        if (s.step % every == 0 || s.step == 1)
          say(log, "step " + std::to_string(s.step) + " L_total=" + fmt("%.4f", s.loss.L_total) +
                       " L_con=" + fmt("%.4f", s.loss.L_con) + " hitrate=" + fmt("%.3f", s.loss.hitrate));
      },
      options.stop_after);
  out.close();

  const json train_state{{"step", trainer.step()}, {"seed", config.seed}, {"epochs", tc.epochs}};
  const auto& st = trainer.optimizer_state();
  save_checkpoint(ckpt, model, {{"adam_m", &st.m}, {"adam_v", &st.v}}, &train_state);
  save_candidate_embeddings(config.out_dir / artifact::kCandidates,
                            build_candidate_embeddings(model, data.train_items));
  say(log, "train: checkpoint at step " + std::to_string(trainer.step()) + " -> " + ckpt.string());
}

// ---------------------------------------------------------------------------

namespace {

struct LoadedModel {
  Model<float> model;
  std::size_t epochs = 0;
  AssignmentTable assignments;
  InvertedIndex index;
  CandidateEmbeddings emb;
};

LoadedModel load_trained(const RunConfig& config) {
  LoadedModel m;
  json state;
  m.model = load_checkpoint(config.out_dir / artifact::kCheckpoint, {}, &state);
  m.epochs = state.value("epochs", std::size_t{0});
  require_file(config.out_dir / artifact::kAssignments, "assignment table");
  m.assignments = load_assignments(config.out_dir / artifact::kAssignments);
  m.index = inverted_index(m.assignments);
  require_file(config.out_dir / artifact::kCandidates, "candidate embeddings");
  m.emb = load_candidate_embeddings(config.out_dir / artifact::kCandidates);
  return m;
}

}  // namespace

void cmd_infer(const RunConfig& config, const InferOptions& options, const LogFn& log) {
  const fs::path input = options.input.empty() ? split_path(config, "test") : options.input;
  const fs::path output = options.output.empty() ? config.out_dir / artifact::kRecommendations : options.output;
  require_file(input, "input sequences");
  const auto seqs = load_sequences(input);
  const auto m = load_trained(config);
  const auto& ic = config.inference;
  if (ic.beam_width == 0 || ic.k_prime == 0 || ic.topn == 0)
    throw std::invalid_argument("beam width, K' and topn must be >= 1");

  std::vector<std::string> lines(seqs.size());
  std::size_t short_lists = 0;
  for (std::size_t u = 0; u < seqs.size(); ++u) {
    const auto rec = recommend(seqs[u].history, m.model, m.index, m.emb, ic);
    const std::unordered_set<ItemId> hist(seqs[u].history.begin(), seqs[u].history.end());
    json items = json::array(), scores = json::array();
    for (const auto& s : rec.items) {
      if (hist.count(s.item_id) || !m.emb.contains(s.item_id))
        throw std::logic_error("filtered item emitted for user " + std::to_string(seqs[u].user_id));
      items.push_back(s.item_id);
      scores.push_back(static_cast<float>(s.score));
    }
    if (rec.items.size() < ic.topn) ++short_lists;
    lines[u] = json{{"user_id", seqs[u].user_id}, {"items", items}, {"scores", scores}}.dump() + "\n";
  }
  std::string text;
  for (const auto& l : lines) text += l;
  write_text(output, text);
  if (short_lists > 0)
    say(log, "infer: " + std::to_string(short_lists) + " users received fewer than " +
                 std::to_string(ic.topn) + " items");
  say(log, "infer: " + std::to_string(seqs.size()) + " users -> " + output.string());
}

void cmd_eval(const RunConfig& config, const LogFn& log) {
  const auto m = load_trained(config);
  std::string csv = metric_csv_header();
  std::vector<UserSequence> train;
  require_file(split_path(config, "train"), "training split");
  train = load_sequences(split_path(config, "train"));
  for (const std::string split : {"valid", "test"}) {
    require_file(split_path(config, split), split + " split");
    const auto seqs = load_sequences(split_path(config, split));
    for (const auto& mode : config.eval.modes) {
      EvalConfig ec;
      ec.mode = parse_eval_mode(mode);
      ec.inference = config.inference;
      ec.k = config.eval.k;
      ec.threads = config.threads;
      auto row = evaluate_split(m.model, seqs, split, m.index, m.emb, m.assignments, ec);
      row.epoch = m.epochs;
      csv += metric_csv_row(row);
      say(log, "eval " + split + " " + mode + ": HR@" + std::to_string(ec.k) + "=" +
                   fmt("%.4f", row.hr_at_10) + " NDCG=" + fmt("%.4f", row.ndcg_at_10) +
                   (ec.mode == EvalMode::SidOnly
                        ? " SID1_HR=" + fmt("%.4f", row.sid1_hr) + " SID2_HR=" + fmt("%.4f", row.sid2_hr)
                        : std::string()));
    }
    auto pop = popularity_baseline(train, seqs, split, config.eval.k);
    pop.epoch = m.epochs;
    csv += metric_csv_row(pop);
    say(log, "eval " + split + " popularity: HR@" + std::to_string(config.eval.k) + "=" +
                 fmt("%.4f", pop.hr_at_10));
  }
  write_text(config.out_dir / artifact::kEval, csv);
}

void cmd_sweep(const RunConfig& config, const LogFn& log) {
  auto data = load_training_data(config);
  SweepInputs in;
  in.model = effective_model_config(config, data);
  in.train = config.train;
  in.train.threads = config.threads;
  in.items = &data.items;
  in.examples = &data.examples;
  in.Q = &data.Q;
  const auto result = layer_sweep(in, config.sweep.layers, config.sweep.seeds);
  fs::create_directories(config.out_dir);
  write_text(config.out_dir / artifact::kSweep, sweep_csv(result.rows));
  std::string seeds_csv = "layers,seed,loss\n";
  for (std::size_t d = 0; d < result.rows.size(); ++d)
    for (std::size_t s = 0; s < config.sweep.seeds.size(); ++s)
      seeds_csv += std::to_string(result.rows[d].layers) + "," + std::to_string(config.sweep.seeds[s]) +
                   "," + fmt("%.9g", result.loss_per_seed[d][s]) + "\n";
  write_text(config.out_dir / artifact::kSweepSeeds, seeds_csv);

  json fit_json{{"inversions", count_loss_inversions(result.loss_per_seed)}};
  if (result.rows.size() >= 3) {
    std::vector<double> sizes, losses;
    for (const auto& r : result.rows) {
      sizes.push_back(static_cast<double>(r.params));
      losses.push_back(r.loss);
    }
    const auto fit = power_law_fit(sizes, losses);
    fit_json["a"] = fit.a;
    fit_json["b"] = fit.b;
    fit_json["r2"] = fit.r2;
    say(log, "sweep: power law a=" + fmt("%.6f", fit.a) + " b=" + fmt("%.6f", fit.b) +
                 " r2=" + fmt("%.6f", fit.r2));
  } else {
    say(log, "sweep: fewer than 3 depths, power-law fit skipped");
  }
  write_text(config.out_dir / artifact::kPowerLaw, fit_json.dump(2) + "\n");
  for (const auto& r : result.rows)
    say(log, "sweep: layers=" + std::to_string(r.layers) + " params=" + std::to_string(r.params) +
                 " loss=" + fmt("%.4f", r.loss) + " hitrate=" + fmt("%.4f", r.metric_a));
}

}  // namespace onepiece
