#include "onepiece/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>

namespace onepiece {

using nlohmann::json;

namespace {

class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + " must be a JSON object");
  }

  template <typename V>
  void read(const char* key, V& out) {
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
    seen_.insert(key);
  }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw std::invalid_argument("unknown key '" + key + "' in " + where_);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

std::filesystem::path RunConfig::catalog_path() const {
  return catalog.empty() ? out_dir / "items.jsonl" : catalog;
}

std::filesystem::path RunConfig::sequences_path() const {
  return sequences.empty() ? out_dir / "sequences.jsonl" : sequences;
}

RunConfig parse_run_config(const json& j, RunConfig c) {
  Section root(j, "config");
  root.read("seed", c.seed);
  root.read("threads", c.threads);
  std::string path;
  if (j.contains("out_dir")) {
    root.read("out_dir", path);
    c.out_dir = path;
  }
  if (j.contains("catalog")) {
    root.read("catalog", path);
    c.catalog = path;
  }
  if (j.contains("sequences")) {
    root.read("sequences", path);
    c.sequences = path;
  }
  if (const json* s = root.child("synthetic")) {
    Section sec(*s, "synthetic");
    auto& g = c.synthetic;
    sec.read("n_items", g.n_items);
    sec.read("n_users", g.n_users);
    sec.read("n_modalities", g.n_modalities);
    sec.read("dim", g.dim);
    sec.read("static_dim", g.static_dim);
    sec.read("n_latent_clusters", g.n_latent_clusters);
    sec.read("seq_len_min", g.seq_len_min);
    sec.read("seq_len_max", g.seq_len_max);
    sec.read("missing_rate_per_modality", g.missing_rate_per_modality);
    sec.read("cluster_switch_prob", g.cluster_switch_prob);
    sec.read("walk_neighbors", g.walk_neighbors);
    sec.finish();
  }
  if (const json* s = root.child("tokenizer")) {
    Section sec(*s, "tokenizer");
    sec.read("K", c.tokenizer.K);
    sec.read("iters", c.tokenizer.iters);
    sec.read("top_n", c.tokenizer.top_n);
    sec.read("per_modality", c.tokenizer.per_modality);
    sec.finish();
  }
  if (const json* s = root.child("model")) {
    ModelConfig defaults = c.model;
    json merged;
    to_json(merged, defaults);
    merged.merge_patch(*s);
    // Unknown keys survive merge_patch and are rejected by from_json.
    from_json(merged, c.model);
  }
  if (const json* s = root.child("train")) {
    Section sec(*s, "train");
    auto& t = c.train;
    sec.read("lr", t.optimizer.lr);
    sec.read("beta1", t.optimizer.beta1);
    sec.read("beta2", t.optimizer.beta2);
    sec.read("eps", t.optimizer.eps);
    sec.read("weight_decay", t.optimizer.weight_decay);
    sec.read("warmup_steps", t.warmup_steps);
    sec.read("lr_min", t.lr_min);
    sec.read("batch_size", t.batch_size);
    sec.read("epochs", t.epochs);
    sec.read("max_steps", t.max_steps);
    sec.read("smoothing_eps", t.smoothing_eps);
    sec.read("popularity_targets_only", t.popularity_targets_only);
    sec.read("prefix_augment", t.prefix_augment);
    sec.finish();
  }
  if (const json* s = root.child("inference")) {
    Section sec(*s, "inference");
    sec.read("beam_width", c.inference.beam_width);
    sec.read("k_prime", c.inference.k_prime);
    sec.read("topn", c.inference.topn);
    sec.read("constrain_to_index", c.inference.constrain_to_index);
    sec.finish();
  }
  if (const json* s = root.child("eval")) {
    Section sec(*s, "eval");
    sec.read("modes", c.eval.modes);
    sec.read("k", c.eval.k);
    sec.finish();
    for (const auto& m : c.eval.modes) parse_eval_mode(m);
  }
  if (const json* s = root.child("sweep")) {
    Section sec(*s, "sweep");
    sec.read("layers", c.sweep.layers);
    sec.read("seeds", c.sweep.seeds);
    sec.finish();
  }
  root.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return parse_run_config(j, std::move(base));
}

json run_config_json(const RunConfig& c) {
  json model;
  to_json(model, c.model);
  const auto& g = c.synthetic;
  const auto& t = c.train;
  return json{
      {"seed", c.seed},
      {"threads", c.threads},
      {"out_dir", c.out_dir.string()},
      {"catalog", c.catalog.string()},
      {"sequences", c.sequences.string()},
      {"synthetic",
       {{"n_items", g.n_items},
        {"n_users", g.n_users},
        {"n_modalities", g.n_modalities},
        {"dim", g.dim},
        {"static_dim", g.static_dim},
        {"n_latent_clusters", g.n_latent_clusters},
        {"seq_len_min", g.seq_len_min},
        {"seq_len_max", g.seq_len_max},
        {"missing_rate_per_modality", g.missing_rate_per_modality},
        {"cluster_switch_prob", g.cluster_switch_prob},
        {"walk_neighbors", g.walk_neighbors}}},
      {"tokenizer",
       {{"K", c.tokenizer.K},
        {"iters", c.tokenizer.iters},
        {"top_n", c.tokenizer.top_n},
        {"per_modality", c.tokenizer.per_modality}}},
      {"model", model},
      {"train",
       {{"lr", t.optimizer.lr},
        {"beta1", t.optimizer.beta1},
        {"beta2", t.optimizer.beta2},
        {"eps", t.optimizer.eps},
        {"weight_decay", t.optimizer.weight_decay},
        {"warmup_steps", t.warmup_steps},
        {"lr_min", t.lr_min},
        {"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"max_steps", t.max_steps},
        {"smoothing_eps", t.smoothing_eps},
        {"popularity_targets_only", t.popularity_targets_only},
        {"prefix_augment", t.prefix_augment}}},
      {"inference",
       {{"beam_width", c.inference.beam_width},
        {"k_prime", c.inference.k_prime},
        {"topn", c.inference.topn},
        {"constrain_to_index", c.inference.constrain_to_index}}},
      {"eval", {{"modes", c.eval.modes}, {"k", c.eval.k}}},
      {"sweep", {{"layers", c.sweep.layers}, {"seeds", c.sweep.seeds}}}};
}

}  // namespace onepiece
