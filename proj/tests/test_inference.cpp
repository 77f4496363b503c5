#include "onepiece/inference.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace onepiece;
using namespace onepiece::testing;

namespace {

/// A K=2 model whose first-level head puts 0.9 on code 0 and whose second
/// level is uniform: the SID1 projection is zeroed and the bias carries the
/// prior.
Model<double> prior_model() {
  auto c = tiny_config();
  c.K = 2;
  auto m = tiny_model<double>(c, 6, 1);
  m.params.sid1_proj.setZero();
  m.params.sid1_bias << std::log(0.9), std::log(0.1);
  m.params.sid2_proj.setZero();
  m.params.sid2_bias.setZero();
  return m;
}

}  // namespace

TEST_CASE("beam search on a hand-enumerable head") {
  const auto m = prior_model();
  const std::vector<std::size_t> rows{0, 1};
  const auto enc = encode_rows(m, std::span<const std::size_t>(rows));
  const auto pairs = beam_search_sids(m.params, enc.H, enc.h_T, 2, 4);
  REQUIRE(pairs.size() == 4);
  CHECK(pairs[0].sid == SemanticId{0, 0});
  CHECK(pairs[0].logp == doctest::Approx(std::log(0.45)));
  CHECK(pairs[1].sid == SemanticId{0, 1});
  CHECK(pairs[2].sid == SemanticId{1, 0});
  CHECK(pairs[3].logp == doctest::Approx(std::log(0.05)));

  const auto greedy = beam_search_sids(m.params, enc.H, enc.h_T, 1, 4);
  CHECK(greedy.size() == 2);
  for (const auto& p : greedy) CHECK(p.sid.c1 == 0);
  CHECK_THROWS(beam_search_sids(m.params, enc.H, enc.h_T, 0, 4));
  CHECK_THROWS(beam_search_sids(m.params, enc.H, enc.h_T, 1, 0));
}

TEST_CASE("top-1 joint probability never drops as the beam widens") {
  auto c = tiny_config();
  for (std::uint64_t s = 0; s < 30; ++s) {
    auto m = tiny_model<double>(c, 8, s);
    const std::vector<std::size_t> rows{s % 8, (s + 3) % 8};
    const auto enc = encode_rows(m, std::span<const std::size_t>(rows));
    double prev = -INFINITY;
    for (std::size_t B = 1; B <= c.K; ++B) {
      const double top = beam_search_sids(m.params, enc.H, enc.h_T, B, 1)[0].logp;
      CHECK(top >= prev);
      prev = top;
    }
  }
}

TEST_CASE("constrained beam only emits occupied pairs") {
  auto m = tiny_model<double>(tiny_config(), 8, 3);
  const std::vector<std::size_t> rows{1, 2};
  const auto enc = encode_rows(m, std::span<const std::size_t>(rows));
  const InvertedIndex idx{{{2, 3}, {5}}, {{6, 1}, {7}}};
  const auto pairs = beam_search_sids(m.params, enc.H, enc.h_T, 8, 64, &idx);
  CHECK(pairs.size() == 2);
  for (const auto& p : pairs) CHECK(idx.count(p.sid) == 1);
}

TEST_CASE("candidate expansion deduplicates with first provenance") {
  const InvertedIndex idx{{{0, 0}, {1, 2}}, {{1, 4}, {2, 3}}};
  const std::vector<ScoredSid> pairs{{{0, 0}, -0.1}, {{1, 4}, -0.2}, {{5, 5}, -0.3}};
  const auto c = expand_candidates(pairs, idx);
  CHECK(c.item_ids == std::vector<ItemId>{1, 2, 3});
  CHECK(c.provenance[1] == SemanticId{0, 0});
  CHECK(c.provenance[2] == SemanticId{1, 4});
  const std::vector<ScoredSid> empty_pairs{{{7, 7}, 0.0}};
  CHECK(expand_candidates(empty_pairs, idx).item_ids.empty());

  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    InvertedIndex r;
    std::size_t bucket_total = 0;
    std::vector<ScoredSid> ps;
    for (int b = 0; b < 10; ++b) {
      const SemanticId sid{b, 0};
      ps.push_back({sid, -static_cast<double>(b)});
      std::vector<ItemId> items;
      for (std::size_t k = rng.uniform_int(5); k > 0; --k) items.push_back(static_cast<ItemId>(rng.uniform_int(20)));
      std::sort(items.begin(), items.end());
      items.erase(std::unique(items.begin(), items.end()), items.end());
      bucket_total += items.size();
      r[sid] = items;
    }
    CHECK(expand_candidates(ps, r).item_ids.size() <= bucket_total);
  }
}

namespace {

CandidateEmbeddings embeddings(const std::vector<std::vector<float>>& rows) {
  CandidateEmbeddings e;
  e.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      e.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    e.ids.push_back(static_cast<ItemId>(i + 1));
    e.row_of[static_cast<ItemId>(i + 1)] = i;
  }
  e.vectors.rowwise().normalize();
  return e;
}

}  // namespace

TEST_CASE("scores are cosines and missing rows are cold-start") {
  const auto e = embeddings({{1, 0}, {-1, 0}, {0.6f, 0.8f}});
  Vec<float> q(2);
  q << 1, 0;
  const std::vector<ItemId> cands{1, 2, 3, 99};
  const auto s = score_candidates(q, cands, e);
  REQUIRE(s.scored.size() == 3);
  CHECK(s.scored[0].score == doctest::Approx(1.0));
  CHECK(s.scored[1].score == doctest::Approx(-1.0));
  CHECK(s.scored[2].score == doctest::Approx(0.6));
  CHECK(s.cold_start == std::vector<ItemId>{99});
}

TEST_CASE("scoring order matches a brute-force dot-product scan") {
  Rng rng(6);
  std::vector<std::vector<float>> rows(30, std::vector<float>(5));
  for (auto& r : rows)
    for (auto& v : r) v = static_cast<float>(rng.normal());
  const auto e = embeddings(rows);
  Vec<float> q(5);
  for (auto& v : q) v = static_cast<float>(rng.normal());
  q.normalize();
  const auto ranked = filter_and_rank(score_candidates(q, e.ids, e).scored, {}, {}, 30);
  std::vector<std::pair<float, ItemId>> scan;
  for (std::size_t i = 0; i < e.ids.size(); ++i) scan.push_back({-e.vectors.row(static_cast<Eigen::Index>(i)).dot(q), e.ids[i]});
  std::sort(scan.begin(), scan.end());
  for (std::size_t i = 0; i < 30; ++i) CHECK(ranked[i].item_id == scan[i].second);
}

TEST_CASE("filtering drops history and cold items") {
  const std::vector<ScoredItem> s{{1, 0.9}, {2, 0.8}, {3, 0.7}};
  const auto out = filter_and_rank(s, {1}, {}, 10);
  REQUIRE(out.size() == 2);
  CHECK(out[0].item_id == 2);
  CHECK(out[1].item_id == 3);
  CHECK(filter_and_rank(s, {1, 2, 3}, {}, 10).empty());
  CHECK(filter_and_rank(s, {}, {2}, 10).size() == 2);
  const std::vector<ScoredItem> ties{{9, 0.5}, {4, 0.5}, {6, 0.5}};
  const auto t = filter_and_rank(ties, {}, {}, 2);
  CHECK(t.size() == 2);
  CHECK(t[0].item_id == 4);
  CHECK(t[1].item_id == 6);
}

TEST_CASE("recommend is deterministic and candidate matrices round-trip") {
  auto c = tiny_config();
  auto m = tiny_model<float>(c, 30, 7);
  AssignmentTable table;
  Rng rng(7);
  for (ItemId id : m.items.ids)
    table.set(id, {static_cast<int>(rng.uniform_int(8)), static_cast<int>(rng.uniform_int(8))});
  const auto idx = inverted_index(table);
  const auto emb = build_candidate_embeddings(m, m.items.ids);
  const std::vector<ItemId> history{m.items.ids[3], m.items.ids[4]};
  InferenceConfig ic;
  ic.beam_width = 4;
  ic.k_prime = 20;
  const auto a = recommend(history, m, idx, emb, ic), b = recommend(history, m, idx, emb, ic);
  REQUIRE(a.items.size() == b.items.size());
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].item_id == b.items[i].item_id);
    CHECK(a.items[i].score == b.items[i].score);
  }
  CHECK(a.items.size() <= 10);

  const auto dir = scratch_dir("candidates");
  save_candidate_embeddings(dir / "c.bin", emb);
  const auto back = load_candidate_embeddings(dir / "c.bin");
  CHECK(back.ids == emb.ids);
  CHECK(back.vectors == emb.vectors);
  std::filesystem::remove_all(dir);
}
