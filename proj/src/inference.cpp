#include "onepiece/inference.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

namespace onepiece {

namespace {

template <typename T>
std::vector<double> log_softmax(const Vec<T>& logits) {
  std::vector<double> out(static_cast<std::size_t>(logits.size()));
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double z = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) z += std::exp(static_cast<double>(logits[i]) - mx);
  const double lse = mx + std::log(z);
  for (Eigen::Index i = 0; i < logits.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(logits[i]) - lse;
  return out;
}

bool better(const ScoredSid& a, const ScoredSid& b) {
  if (a.logp != b.logp) return a.logp > b.logp;
  return a.sid < b.sid;
}

}  // namespace

template <typename T>
std::vector<ScoredSid> beam_search_sids(const Parameters<T>& params, const Mat<T>& H,
                                        const Vec<T>& h_T, std::size_t beam_width,
                                        std::size_t k_prime, const InvertedIndex* constrain) {
  if (beam_width == 0 || k_prime == 0) throw std::invalid_argument("beam width and K' must be >= 1");
  const auto lp1 = log_softmax(decode_sid1_logits(params, H, h_T));
  const int K = static_cast<int>(lp1.size());

  std::set<int> allowed_c1;
  if (constrain)
    for (const auto& [sid, items] : *constrain)
      if (!items.empty()) allowed_c1.insert(sid.c1);

  std::vector<BeamHypothesis> beams;
  for (int c = 0; c < K; ++c)
    if (!constrain || allowed_c1.count(c)) beams.push_back({c, std::nullopt, lp1[static_cast<std::size_t>(c)]});
  std::stable_sort(beams.begin(), beams.end(),
                   [](const BeamHypothesis& a, const BeamHypothesis& b) { return a.logp > b.logp; });
  if (beams.size() > beam_width) beams.resize(beam_width);

  std::vector<ScoredSid> pairs;
  for (const auto& beam : beams) {
    const auto lp2 = log_softmax(decode_sid2_logits(params, h_T, beam.c1));
    for (int c2 = 0; c2 < static_cast<int>(lp2.size()); ++c2) {
      const SemanticId sid{beam.c1, c2};
      if (constrain) {
        auto it = constrain->find(sid);
        if (it == constrain->end() || it->second.empty()) continue;
      }
      pairs.push_back({sid, beam.logp + lp2[static_cast<std::size_t>(c2)]});
    }
  }
  std::sort(pairs.begin(), pairs.end(), better);
  if (pairs.size() > k_prime) pairs.resize(k_prime);
  return pairs;
}

template std::vector<ScoredSid> beam_search_sids<float>(const Parameters<float>&, const Mat<float>&,
                                                        const Vec<float>&, std::size_t, std::size_t,
                                                        const InvertedIndex*);
template std::vector<ScoredSid> beam_search_sids<double>(const Parameters<double>&, const Mat<double>&,
                                                         const Vec<double>&, std::size_t, std::size_t,
                                                         const InvertedIndex*);

CandidateSet expand_candidates(std::span<const ScoredSid> pairs, const InvertedIndex& index) {
  CandidateSet out;
  std::unordered_set<ItemId> seen;
  for (const auto& p : pairs) {
    auto it = index.find(p.sid);
    if (it == index.end()) continue;
    for (ItemId id : it->second)
      if (seen.insert(id).second) {
        out.item_ids.push_back(id);
        out.provenance.push_back(p.sid);
      }
  }
  return out;
}

CandidateEmbeddings build_candidate_embeddings(const Model<float>& model,
                                               const std::vector<ItemId>& train_items) {
  CandidateEmbeddings out;
  std::vector<ItemId> ids = train_items;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::vector<std::size_t> rows;
  for (ItemId id : ids) {
    rows.push_back(model.items.row(id));
    out.row_of[id] = out.ids.size();
    out.ids.push_back(id);
  }
  out.vectors = rows.empty() ? MatF(0, static_cast<Eigen::Index>(model.config.hidden_dim))
                             : item_embeddings(model, std::span<const std::size_t>(rows));
  return out;
}

namespace {

std::filesystem::path ids_path(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".ids.json");
  return p;
}

}  // namespace

void save_candidate_embeddings(const std::filesystem::path& path, const CandidateEmbeddings& emb) {
  save_matrix(path, emb.vectors);
  std::ofstream out(ids_path(path), std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + ids_path(path).string());
  out << nlohmann::json(emb.ids).dump() << "\n";
}

CandidateEmbeddings load_candidate_embeddings(const std::filesystem::path& path) {
  CandidateEmbeddings emb;
  emb.vectors = load_matrix(path);
  std::ifstream in(ids_path(path), std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + ids_path(path).string());
  emb.ids = nlohmann::json::parse(in).get<std::vector<ItemId>>();
  if (static_cast<Eigen::Index>(emb.ids.size()) != emb.vectors.rows())
    throw FormatError("candidate embeddings: id count does not match matrix rows");
  for (std::size_t i = 0; i < emb.ids.size(); ++i) emb.row_of[emb.ids[i]] = i;
  return emb;
}

CandidateScores score_candidates(const Vec<float>& q_u, std::span<const ItemId> candidates,
                                 const CandidateEmbeddings& emb) {
  CandidateScores out;
  const float qn = q_u.norm();
  for (ItemId id : candidates) {
    auto it = emb.row_of.find(id);
    if (it == emb.row_of.end()) {
      out.cold_start.push_back(id);
      continue;
    }
    const auto k = emb.vectors.row(static_cast<Eigen::Index>(it->second));
    const double denom = static_cast<double>(qn) * static_cast<double>(k.norm());
    double s = denom > 0.0 ? static_cast<double>(k.dot(q_u.transpose())) / denom : 0.0;
    out.scored.push_back({id, std::clamp(s, -1.0, 1.0)});
  }
  return out;
}

RecList filter_and_rank(std::span<const ScoredItem> scores, const std::unordered_set<ItemId>& history,
                        const std::unordered_set<ItemId>& cold_start, std::size_t top) {
  RecList out;
  for (const auto& s : scores) {
    if (cold_start.count(s.item_id)) continue;
    if (history.count(s.item_id)) continue;  // score -inf: never emitted
    out.push_back(s);
  }
  std::sort(out.begin(), out.end(), [](const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item_id < b.item_id;
  });
  if (out.size() > top) out.resize(top);
  return out;
}

namespace {

ForwardCache<float> encode_history(const std::vector<ItemId>& history, const Model<float>& model) {
  if (history.empty()) throw DataError("recommend: empty history");
  const std::size_t L = model.config.L_max;
  const std::size_t begin = history.size() > L ? history.size() - L : 0;
  std::vector<std::size_t> rows;
  for (std::size_t i = begin; i < history.size(); ++i) rows.push_back(model.items.row(history[i]));
  return encode_rows(model, std::span<const std::size_t>(rows));
}

}  // namespace

Vec<float> user_vector(const std::vector<ItemId>& history, const Model<float>& model) {
  const auto enc = encode_history(history, model);
  return user_embedding(model.params, enc.h_T);
}

Recommendation recommend(const std::vector<ItemId>& history, const Model<float>& model,
                         const InvertedIndex& index, const CandidateEmbeddings& emb,
                         const InferenceConfig& config) {
  const auto enc = encode_history(history, model);
  const Vec<float> q_u = user_embedding(model.params, enc.h_T);
  Recommendation rec;
  rec.pairs = beam_search_sids(model.params, enc.H, enc.h_T, config.beam_width, config.k_prime,
                               config.constrain_to_index ? &index : nullptr);
  rec.candidates = expand_candidates(std::span<const ScoredSid>(rec.pairs), index);
  const auto scores = score_candidates(q_u, std::span<const ItemId>(rec.candidates.item_ids), emb);
  const std::unordered_set<ItemId> hist(history.begin(), history.end());
  const std::unordered_set<ItemId> cold(scores.cold_start.begin(), scores.cold_start.end());
  rec.items = filter_and_rank(std::span<const ScoredItem>(scores.scored), hist, cold, config.topn);
  return rec;
}

RecList dual_tower_topn(const Vec<float>& q_u, const CandidateEmbeddings& emb,
                        const std::unordered_set<ItemId>& history, std::size_t top) {
  const auto scores = score_candidates(q_u, std::span<const ItemId>(emb.ids), emb);
  return filter_and_rank(std::span<const ScoredItem>(scores.scored), history, {}, top);
}

}  // namespace onepiece
