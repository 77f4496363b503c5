#include "onepiece/eval.hpp"

#include "onepiece/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace onepiece {

int hr_at_k(std::span<const ItemId> ranked, ItemId target, std::size_t k) {
  if (k == 0) throw std::invalid_argument("k must be >= 1");
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t i = 0; i < n; ++i)
    if (ranked[i] == target) return 1;
  return 0;
}

double ndcg_at_k(std::span<const ItemId> ranked, ItemId target, std::size_t k) {
  if (k == 0) throw std::invalid_argument("k must be >= 1");
  const std::size_t n = std::min(k, ranked.size());
  for (std::size_t i = 0; i < n; ++i)
    if (ranked[i] == target) return 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return 0.0;
}

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "cascade") return EvalMode::Cascade;
  if (s == "dual-tower") return EvalMode::DualTower;
  if (s == "sid-only") return EvalMode::SidOnly;
  throw std::invalid_argument("unknown eval mode '" + s + "' (cascade, dual-tower, sid-only)");
}

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::Cascade: return "cascade";
    case EvalMode::DualTower: return "dual-tower";
    case EvalMode::SidOnly: return "sid-only";
  }
  return "?";
}

namespace {

struct UserScore {
  double hr = 0.0, ndcg = 0.0, sid1 = 0.0, sid2 = 0.0;
};

std::vector<ItemId> ids_of(const RecList& list) {
  std::vector<ItemId> out;
  out.reserve(list.size());
  for (const auto& s : list) out.push_back(s.item_id);
  return out;
}

std::vector<int> top_codes(const Vec<float>& logits, std::size_t k) {
  std::vector<int> idx(static_cast<std::size_t>(logits.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  if (idx.size() > k) idx.resize(k);
  return idx;
}

}  // namespace

MetricRow evaluate_split(const Model<float>& model, const std::vector<UserSequence>& split,
                         const std::string& split_name, const InvertedIndex& index,
                         const CandidateEmbeddings& emb, const AssignmentTable& assignments,
                         const EvalConfig& config) {
  if (split.empty()) throw DataError("evaluate_split: split '" + split_name + "' is empty");
  for (const auto& s : split)
    if (!s.target) throw DataError("evaluate_split: user " + std::to_string(s.user_id) + " has no target");

  std::vector<UserScore> per_user(split.size());
  parallel_for(split.size(), config.threads, [&](std::size_t u, unsigned) {
    const auto& seq = split[u];
    const ItemId target = *seq.target;
    UserScore& r = per_user[u];
    switch (config.mode) {
      case EvalMode::Cascade: {
        InferenceConfig ic = config.inference;
        ic.topn = config.k;
        const auto ids = ids_of(recommend(seq.history, model, index, emb, ic).items);
        r.hr = hr_at_k(ids, target, config.k);
        r.ndcg = ndcg_at_k(ids, target, config.k);
        break;
      }
      case EvalMode::DualTower: {
        const std::unordered_set<ItemId> hist(seq.history.begin(), seq.history.end());
        const auto ids = ids_of(dual_tower_topn(user_vector(seq.history, model), emb, hist, config.k));
        r.hr = hr_at_k(ids, target, config.k);
        r.ndcg = ndcg_at_k(ids, target, config.k);
        break;
      }
      case EvalMode::SidOnly: {
        if (!assignments.contains(target)) break;
        const SemanticId truth = assignments.at(target);
        const std::size_t L = model.config.L_max;
        const std::size_t begin = seq.history.size() > L ? seq.history.size() - L : 0;
        std::vector<std::size_t> rows;
        for (std::size_t i = begin; i < seq.history.size(); ++i) rows.push_back(model.items.row(seq.history[i]));
        const auto enc = encode_rows(model, std::span<const std::size_t>(rows));
        const auto codes = top_codes(decode_sid1_logits(model.params, enc.H, enc.h_T), config.k);
        r.sid1 = std::find(codes.begin(), codes.end(), truth.c1) != codes.end() ? 1.0 : 0.0;
        const auto pairs =
            beam_search_sids(model.params, enc.H, enc.h_T, config.inference.beam_width, config.k);
        for (const auto& p : pairs)
          if (p.sid == truth) r.sid2 = 1.0;
        break;
      }
    }
  });

  MetricRow row;
  row.split = split_name;
  row.mode = to_string(config.mode);
  row.users = split.size();
  row.model_size_params = model.params.count();
  for (const auto& r : per_user) {
    row.hr_at_10 += r.hr;
    row.ndcg_at_10 += r.ndcg;
    row.sid1_hr += r.sid1;
    row.sid2_hr += r.sid2;
  }
  const auto n = static_cast<double>(split.size());
  row.hr_at_10 /= n;
  row.ndcg_at_10 /= n;
  row.sid1_hr /= n;
  row.sid2_hr /= n;
  return row;
}

MetricRow popularity_baseline(const std::vector<UserSequence>& train,
                              const std::vector<UserSequence>& split, const std::string& split_name,
                              std::size_t k) {
  if (split.empty()) throw DataError("popularity_baseline: split '" + split_name + "' is empty");
  const auto counts = count_interactions(train, false);
  std::vector<std::pair<ItemId, std::uint64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  MetricRow row;
  row.split = split_name;
  row.mode = "popularity";
  row.users = split.size();
  for (const auto& seq : split) {
    if (!seq.target) throw DataError("popularity_baseline: user without target");
    const std::unordered_set<ItemId> hist(seq.history.begin(), seq.history.end());
    std::vector<ItemId> top;
    for (const auto& [id, c] : ranked) {
      if (top.size() == k) break;
      if (!hist.count(id)) top.push_back(id);
    }
    row.hr_at_10 += hr_at_k(top, *seq.target, k);
    row.ndcg_at_10 += ndcg_at_k(top, *seq.target, k);
  }
  row.hr_at_10 /= static_cast<double>(split.size());
  row.ndcg_at_10 /= static_cast<double>(split.size());
  return row;
}

std::string metric_csv_header() {
  return "split,epoch,mode,users,hr_at_10,ndcg_at_10,sid1_hr,sid2_hr,model_size_params\n";
}

std::string metric_csv_row(const MetricRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%zu,%s,%zu,%.9g,%.9g,%.9g,%.9g,%zu\n", r.split.c_str(), r.epoch,
                r.mode.c_str(), r.users, r.hr_at_10, r.ndcg_at_10, r.sid1_hr, r.sid2_hr,
                r.model_size_params);
  return buf;
}

PowerLawFit power_law_fit(std::span<const double> sizes, std::span<const double> losses) {
  if (sizes.size() != losses.size()) throw std::invalid_argument("power_law_fit: length mismatch");
  if (sizes.size() < 3) throw std::invalid_argument("power_law_fit: need at least 3 points");
  const std::size_t n = sizes.size();
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(sizes[i] > 0.0) || !(losses[i] > 0.0))
      throw std::invalid_argument("power_law_fit: sizes and losses must be positive");
    x[i] = std::log(sizes[i]);
    y[i] = std::log(losses[i]);
  }
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("power_law_fit: all sizes are equal");
  const double slope = sxy / sxx;
  const double intercept = my - slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = y[i] - (intercept + slope * x[i]);
    ss_res += e * e;
  }
  PowerLawFit fit;
  fit.a = std::exp(intercept);
  fit.b = -slope;
  const bool flat = std::all_of(y.begin(), y.end(), [&](double v) { return v == y.front(); });
  fit.r2 = flat ? 1.0 : 1.0 - ss_res / syy;
  if (flat) fit.b = 0.0;
  return fit;
}

SweepResult layer_sweep(const SweepInputs& inputs, std::span<const std::size_t> layer_counts,
                        std::span<const std::uint64_t> seeds) {
  if (layer_counts.empty()) throw std::invalid_argument("layer_sweep: no depths");
  if (seeds.empty()) throw std::invalid_argument("layer_sweep: no seeds");
  if (!inputs.items || !inputs.examples || !inputs.Q) throw std::invalid_argument("layer_sweep: missing inputs");
  SweepResult result;
  for (std::size_t layers : layer_counts) {
    SweepRow row;
    row.layers = layers;
    std::vector<double> losses;
    for (std::uint64_t seed : seeds) {
      ModelConfig mc = inputs.model;
      mc.n_layers = layers;
      auto model = init_model(mc, *inputs.items, seed);
      TrainConfig tc = inputs.train;
      tc.seed = seed;
      Trainer trainer(model, *inputs.examples, *inputs.Q, tc);
      const auto logs = trainer.run();
      const auto avg = average_last(logs, 100);
      row.params = model.params.count();
      row.metric_a += avg.hitrate;
      row.metric_b += avg.ndcg;
      row.loss += avg.L_con;
      losses.push_back(avg.L_con);
    }
    const auto s = static_cast<double>(seeds.size());
    row.metric_a /= s;
    row.metric_b /= s;
    row.loss /= s;
    result.rows.push_back(row);
    result.loss_per_seed.push_back(std::move(losses));
  }
  return result;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "layers,params,metric_a,metric_b,loss\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g\n", r.layers, r.params, r.metric_a,
                  r.metric_b, r.loss);
    out += buf;
  }
  return out;
}

std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "layers,params,metric_a,metric_b,loss")
    throw FormatError("sweep csv: unexpected header");
  std::vector<SweepRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    SweepRow r;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf,%lf%c", &r.layers, &r.params, &r.metric_a,
                    &r.metric_b, &r.loss, &tail) != 5)
      throw FormatError("sweep csv: malformed line " + std::to_string(lineno));
    rows.push_back(r);
  }
  return rows;
}

std::size_t count_loss_inversions(const std::vector<std::vector<double>>& loss_per_seed) {
  std::size_t inversions = 0;
  for (std::size_t d = 1; d < loss_per_seed.size(); ++d)
    for (std::size_t s = 0; s < loss_per_seed[d].size(); ++s)
      if (loss_per_seed[d][s] > loss_per_seed[d - 1][s]) ++inversions;
  return inversions;
}

}  // namespace onepiece
