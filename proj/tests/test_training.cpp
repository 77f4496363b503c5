#include "onepiece/training.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace onepiece;
using namespace onepiece::testing;

namespace {

Mat<double> unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  Mat<double> m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  m.rowwise().normalize();
  return m;
}

PopularityTable uniform_q(const std::vector<ItemId>& ids) {
  PopularityTable q;
  for (ItemId id : ids) q.Q[id] = 1.0 / static_cast<double>(ids.size());
  return q;
}

}  // namespace

TEST_CASE("popularity estimates") {
  const std::vector<UserSequence> one{{1, {5, 5}, 5}};
  CHECK(estimate_popularity(one).prob(5) == doctest::Approx(1.0));
  const std::vector<UserSequence> ab{{1, {1, 1, 1}, 2}};
  const auto q0 = estimate_popularity(ab, {}, 0.0);
  CHECK(q0.prob(1) == doctest::Approx(0.75));
  const std::vector<UserSequence> sym{{1, {1, 1, 1, 1, 2, 2, 2, 2}, 1}, {2, {2}, std::nullopt}};
  const auto qs = estimate_popularity(sym, {}, 1e-12);
  CHECK(qs.prob(1) == doctest::Approx(0.5));
  CHECK(qs.prob(2) == doctest::Approx(0.5));
  const auto smoothed = estimate_popularity(ab, {1, 2, 3});
  CHECK(smoothed.prob(3) == doctest::Approx(1.0 / 7.0));
  CHECK(std::isfinite(smoothed.log_q(3)));
}

TEST_CASE("infonce basics") {
  Rng rng(1);
  const auto u1 = unit_rows(1, 4, rng), i1 = unit_rows(1, 4, rng);
  const std::vector<ItemId> t1{9};
  CHECK(infonce_logq_loss<double>(u1, i1, t1, uniform_q({9}), 0.1).loss == doctest::Approx(0.0));

  Mat<double> u(2, 2), items(2, 2);
  u << 1, 0, 0, 1;
  items << 0.6, 0.8, 0.6, 0.8;  // identical item vectors: every logit in a row is equal
  const std::vector<ItemId> t2{1, 2};
  CHECK(infonce_logq_loss<double>(u, items, t2, uniform_q({1, 2}), 0.5).loss == doctest::Approx(std::log(2.0)));
}

TEST_CASE("uniform popularity leaves every row's ranking unchanged") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto users = unit_rows(8, 6, rng), items = unit_rows(8, 6, rng);
    std::vector<ItemId> targets;
    for (ItemId i = 0; i < 8; ++i) targets.push_back(100 + i);
    const auto res = infonce_logq_loss<double>(users, items, targets, uniform_q(targets), 0.2, false);
    const Mat<double> raw = users * items.transpose();
    for (Eigen::Index r = 0; r < 8; ++r) {
      Eigen::Index a, b;
      res.logits.row(r).maxCoeff(&a);
      raw.row(r).maxCoeff(&b);
      CHECK(a == b);
    }
  }
}

TEST_CASE("duplicate positives are never negatives") {
  Rng rng(3);
  const auto users = unit_rows(4, 5, rng), items = unit_rows(4, 5, rng);
  const std::vector<ItemId> targets{7, 8, 7, 9};
  const auto res = infonce_logq_loss<double>(users, items, targets, uniform_q({7, 8, 9}), 0.3);
  CHECK(std::isinf(res.logits(0, 2)));
  CHECK(std::isinf(res.logits(2, 0)));
  CHECK(std::isfinite(res.logits(0, 0)));
  CHECK(std::isfinite(res.logits(0, 1)));
  // Oracle: softmax over the unmasked entries only.
  double loss = 0.0;
  const PopularityTable q = uniform_q({7, 8, 9});
  for (int r = 0; r < 4; ++r) {
    double z = 0.0, pos = 0.0;
    for (int c = 0; c < 4; ++c) {
      if (c != r && targets[c] == targets[r]) continue;
      const double l = users.row(r).dot(items.row(c)) / 0.3 - q.log_q(targets[c]);
      z += std::exp(l);
      if (c == r) pos = l;
    }
    loss += std::log(z) - pos;
  }
  CHECK(res.loss == doctest::Approx(loss / 4.0).epsilon(1e-12));
}

TEST_CASE("cross entropy matches a direct softmax and NLL") {
  Rng rng(4);
  Mat<double> logits(5, 6);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = 3.0 * rng.normal();
  const std::vector<int> targets{0, 5, 2, 2, 3};
  double expect = 0.0;
  for (int r = 0; r < 5; ++r) {
    long double z = 0.0L;
    for (int c = 0; c < 6; ++c) z += std::exp(static_cast<long double>(logits(r, c)));
    expect += static_cast<double>(std::log(z) - logits(r, targets[r]));
  }
  CHECK(cross_entropy<double>(logits, targets).loss == doctest::Approx(expect / 5.0).epsilon(1e-12));
  CHECK(cross_entropy<double>(Mat<double>::Zero(3, 8), std::vector<int>{1, 2, 3}).loss ==
        doctest::Approx(std::log(8.0)));
  Mat<double> sharp = Mat<double>::Zero(1, 4);
  sharp(0, 2) = 200.0;
  CHECK(cross_entropy<double>(sharp, std::vector<int>{2}).loss < 1e-12);
  CHECK_THROWS_AS(cross_entropy<double>(sharp, std::vector<int>{4}), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy<double>(sharp, std::vector<int>{-1}), std::out_of_range);
}

TEST_CASE("total loss is the weighted sum") {
  CHECK(total_loss(1.5, 2.0, 3.0, 0.0, 0.0) == 1.5);
  CHECK(total_loss(1.0, 2.0, 3.0, 1.0, 1.0) == 6.0);
  CHECK(total_loss(1.0, 2.0, 3.0, 0.5, 2.0) == 8.0);
}

TEST_CASE("learning-rate schedule") {
  LrSchedule s{1e-3, 1e-5, 100, 1000};
  CHECK(lr_at_step(0, s) == 0.0);
  CHECK(lr_at_step(100, s) == doctest::Approx(1e-3));
  CHECK(lr_at_step(1000, s) == doctest::Approx(1e-5));
  double prev = -1.0;
  for (std::size_t t = 0; t <= 100; ++t) {
    CHECK(lr_at_step(t, s) >= prev);
    prev = lr_at_step(t, s);
  }
  for (std::size_t t = 101; t <= 1000; ++t) {
    CHECK(lr_at_step(t, s) <= prev);
    CHECK(std::abs(lr_at_step(t, s) - prev) < 1e-5);
    prev = lr_at_step(t, s);
  }
}

TEST_CASE("adamw hand-computed updates") {
  auto m = tiny_model<double>(tiny_config(), 4, 1);
  auto p = m.params;
  auto g = Parameters<double>::zeros_like(p);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  auto st = adamw_init(p);
  adamw_step(p, g, st, cfg, 1e-3);
  CHECK(p.id_embedding == m.params.id_embedding);
  CHECK(p.sid2_w1 == m.params.sid2_w1);

  // One step on a scalar with gradient 0.5: mhat = 0.5, vhat = 0.25.
  g.user_b(0) = 0.5;
  p = m.params;
  st = adamw_init(p);
  cfg.weight_decay = 0.1;
  const double w0 = p.user_b(0);
  adamw_step(p, g, st, cfg, 0.01);
  CHECK(p.user_b(0) == doctest::Approx(w0 - 0.01 * 0.5 / (0.5 + 1e-8) - 0.01 * 0.1 * w0).epsilon(1e-14));

  // Zero gradient with decay shrinks by lr * wd * w.
  CHECK(p.user_b(1) == doctest::Approx(m.params.user_b(1) * (1.0 - 0.01 * 0.1)));

  g.sid1_bias(0) = std::nan("");
  const auto before = p.user_b;
  CHECK_THROWS_AS(adamw_step(p, g, st, cfg, 0.01), NumericError);
  CHECK(p.user_b == before);
}

TEST_CASE("frozen heads are untouched by the optimizer") {
  auto c = tiny_config();
  c.lambda1 = 0.0;
  c.lambda2 = 0.0;
  const auto frozen = frozen_tensors(c);
  auto m = tiny_model<double>(c, 4, 2);
  auto p = m.params;
  auto g = Parameters<double>::zeros_like(p);
  g.sid1_proj.setConstant(1.0);
  g.code_embedding.setConstant(1.0);
  g.user_w.setConstant(1.0);
  auto st = adamw_init(p);
  adamw_step(p, g, st, AdamWConfig{}, 0.01, &frozen);
  CHECK(p.sid1_proj == m.params.sid1_proj);
  CHECK(p.code_embedding == m.params.code_embedding);
  CHECK(p.user_w != m.params.user_w);
}

TEST_CASE("make_examples expands prefixes and truncates windows") {
  auto m = tiny_model<float>(tiny_config(), 10, 3);
  AssignmentTable t;
  for (ItemId id : m.items.ids) t.set(id, {1, 2});
  const auto& ids = m.items.ids;
  const std::vector<UserSequence> seqs{{1, {ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]}, ids[6]}};
  const auto plain = make_examples(m.items, t, seqs, 4, false);
  REQUIRE(plain.size() == 1);
  CHECK(plain[0].token_rows == std::vector<std::size_t>{2, 3, 4, 5});
  CHECK(plain[0].target == ids[6]);
  CHECK(plain[0].sid == SemanticId{1, 2});
  const auto aug = make_examples(m.items, t, seqs, 4, true);
  CHECK(aug.size() == 6);
  CHECK(aug.front().token_rows == std::vector<std::size_t>{0});
  CHECK(aug.front().target == ids[1]);
}

TEST_CASE("gradient check: full pass, zero-loss control, corrupted backward") {
  auto c = tiny_config();
  c.balance_loss_weight = 0.01;
  auto m = tiny_model<double>(c, 12, 4);
  const auto batch = random_examples(m, 4, 5);
  const auto Q = random_popularity(m.items.ids, 6);
  GradCheckOptions opt;
  opt.samples_per_tensor = 8;
  CHECK(grad_check(m, std::span<const TrainExample>(batch), Q, opt).passed());

  opt.corrupt = [](Parameters<double>& g) { g.layers[1].w_o.array() += 0.1; };
  const auto bad = grad_check(m, std::span<const TrainExample>(batch), Q, opt);
  CHECK_FALSE(bad.passed());
  CHECK(std::find(bad.failures.begin(), bad.failures.end(), "layer1.hstu.w_o") != bad.failures.end());

  // One example, no auxiliary heads: the objective is identically zero.
  auto zc = tiny_config();
  zc.lambda1 = zc.lambda2 = 0.0;
  zc.use_moe = false;
  auto zm = tiny_model<double>(zc, 12, 7);
  const auto single = random_examples(zm, 1, 8);
  GradCheckOptions zopt;
  zopt.samples_per_tensor = 4;
  const auto zero = grad_check(zm, std::span<const TrainExample>(single), Q, zopt);
  CHECK(zero.passed());
  for (const auto& e : zero.entries) CHECK(e.max_abs_analytic == 0.0);
}

TEST_CASE("multi-threaded batches agree with single-threaded ones") {
  auto m = tiny_model<double>(tiny_config(), 20, 9);
  const auto batch = random_examples(m, 8, 10);
  const auto Q = random_popularity(m.items.ids, 11);
  auto g1 = Parameters<double>::zeros_like(m.params), g4 = g1;
  BatchOptions o1, o4;
  o4.threads = 4;
  const auto r1 = compute_batch(m, std::span<const TrainExample>(batch), Q, &g1, o1);
  const auto r4 = compute_batch(m, std::span<const TrainExample>(batch), Q, &g4, o4);
  CHECK(r1.objective == doctest::Approx(r4.objective).epsilon(1e-12));
  CHECK((g1.id_embedding - g4.id_embedding).norm() < 1e-12);
  CHECK((g1.layers[0].w_uvqk - g4.layers[0].w_uvqk).norm() < 1e-12);
}

TEST_CASE("trainer is reproducible and respects zero SID weights") {
  auto c = tiny_config();
  c.lambda1 = c.lambda2 = 0.0;
  auto run = [&](std::uint64_t seed) {
    auto m = tiny_model<float>(c, 40, 12);
    const auto d = tiny_model<double>(c, 40, 12);
    auto ex = random_examples(d, 64, 13);
    TrainConfig tc;
    tc.batch_size = 16;
    tc.epochs = 2;
    tc.seed = seed;
    tc.warmup_steps = 2;
    Trainer tr(m, ex, random_popularity(m.items.ids, 14), tc);
    auto logs = tr.run();
    return std::make_pair(std::move(m), std::move(logs));
  };
  const auto [ma, la] = run(1);
  const auto [mb, lb] = run(1);
  REQUIRE(la.size() == 8);
  for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i].loss.L_total == lb[i].loss.L_total);
  const auto fresh = tiny_model<float>(c, 40, 12);
  CHECK(ma.params.sid1_wq == fresh.params.sid1_wq);
  CHECK(ma.params.sid2_proj == fresh.params.sid2_proj);
  CHECK(ma.params.user_w != fresh.params.user_w);
  // Uninformed heads start near a uniform guess over K codes.
  CHECK(la[0].loss.L_c1 > 0.5 * std::log(8.0));
  CHECK(la[0].loss.L_total == la[0].loss.L_con);
}

TEST_CASE("metrics csv layout") {
  CHECK(metrics_csv_header(2) == "step,epoch,L_con,L_c1,L_c2,L_total,hitrate,ndcg,lr,gini_layer_0,gini_layer_1\n");
  StepLog s;
  s.step = 3;
  s.gini = {0.25, 0.5};
  const auto row = metrics_csv_row(s);
  CHECK(std::count(row.begin(), row.end(), ',') == 10);
  std::vector<StepLog> logs(5);
  for (std::size_t i = 0; i < 5; ++i) logs[i].loss.L_con = static_cast<double>(i);
  CHECK(average_last(logs, 2).L_con == doctest::Approx(3.5));
  CHECK(average_last(logs, 100).L_con == doctest::Approx(2.0));
}
