#include "onepiece/model.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace onepiece;
using namespace onepiece::testing;

namespace {

Vec<double> random_vec(std::size_t n, Rng& rng) {
  Vec<double> v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("gini closed forms and bounds") {
  const std::vector<std::uint64_t> flat{5, 5, 5, 5}, one_hot{10, 0, 0, 0}, ramp{1, 2, 3, 4}, zero{0, 0};
  CHECK(gini(std::span<const std::uint64_t>(flat)) == 0.0);
  CHECK(gini(std::span<const std::uint64_t>(one_hot)) == doctest::Approx(0.75));
  CHECK(gini(std::span<const std::uint64_t>(ramp)) == doctest::Approx(0.25));
  CHECK_THROWS(gini(std::span<const std::uint64_t>(zero)));
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::uint64_t> c(2 + rng.uniform_int(10));
    for (auto& v : c) v = rng.uniform_int(50);
    c[0] += 1;
    const double g = gini(std::span<const std::uint64_t>(c));
    CHECK(g >= 0.0);
    CHECK(g <= static_cast<double>(c.size() - 1) / static_cast<double>(c.size()) + 1e-15);
  }
}

TEST_CASE("item dnn: identity path only and zero input") {
  auto m = tiny_model<double>(tiny_config(), 6, 1);
  m.params.dnn_wa.setZero();
  Rng rng(1);
  const std::size_t in = m.config.item_input_dim();
  Mat<double> x(2, static_cast<Eigen::Index>(in));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  // With W_a = 0 the map is affine; the midpoint maps to the mean of the images.
  Mat<double> mid = 0.5 * (x.row(0) + x.row(1));
  Mat<double> three(3, static_cast<Eigen::Index>(in));
  three << x, mid;
  const Mat<double> y = item_dnn_forward_raw(m.params, three);
  CHECK((y.row(2) - 0.5 * (y.row(0) + y.row(1))).norm() < 1e-12);

  auto z = tiny_model<double>(tiny_config(), 6, 2);
  z.params.dnn_ba.setZero();
  z.params.dnn_bb.setZero();
  z.params.dnn_bo.setZero();
  const Mat<double> zero_out = item_dnn_forward_raw(z.params, Mat<double>(Mat<double>::Zero(1, static_cast<Eigen::Index>(in))));
  CHECK(zero_out.norm() == 0.0);
}

TEST_CASE("hstu block is strictly causal") {
  const auto c = tiny_config();
  auto m = tiny_model<double>(c, 6, 3);
  Rng rng(3);
  Mat<double> x(4, 8);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const Mat<double> base = hstu_block_forward(c, m.params.layers[0], x);
  for (Eigen::Index t = 0; t + 1 < x.rows(); ++t) {
    Mat<double> y = x;
    y.row(t + 1).array() += 3.0;
    const Mat<double> out = hstu_block_forward(c, m.params.layers[0], y);
    CHECK(out.topRows(t + 1) == base.topRows(t + 1));
  }
  const Mat<double> single = hstu_block_forward(c, m.params.layers[0], Mat<double>(x.topRows(1)));
  CHECK((single.row(0) - base.row(0)).norm() < 1e-12);
}

TEST_CASE("hstu at the reference shape produces finite output") {
  ModelConfig c;
  c.hidden_dim = 128;
  c.n_heads = 8;
  c.L_max = 101;
  c.K = 16;
  c.n_layers = 1;
  auto m = tiny_model<float>(c, 4, 4);
  Rng rng(4);
  Mat<float> x(101, 128);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal());
  const auto out = hstu_block_forward(c, m.params.layers[0], x);
  CHECK(out.rows() == 101);
  CHECK(out.cols() == 128);
  CHECK(out.allFinite());
}

TEST_CASE("moe degenerate cases and routing") {
  auto c = tiny_config();
  Rng rng(5);
  auto expert_out = [](const LayerParams<double>& p, std::size_t e, const Vec<double>& x) {
    Vec<double> h = p.expert_w1[e] * x + p.expert_b1[e];
    h = h.array() / (1.0 + (-h.array()).exp());
    return Vec<double>(p.expert_w2[e] * h + p.expert_b2[e]);
  };
  SUBCASE("single expert") {
    c.moe.n_experts = 1;
    c.moe.top_k = 1;
    auto m = tiny_model<double>(c, 4, 5);
    const auto& p = m.params.layers[0];
    const Vec<double> x = random_vec(8, rng);
    std::vector<std::uint64_t> usage(1, 0);
    const Vec<double> y = moe_forward(p, x, 1, usage);
    CHECK((y - expert_out(p, 0, x)).norm() < 1e-12);
    CHECK(usage[0] == 1);
  }
  SUBCASE("uniform gate averages all experts") {
    auto m = tiny_model<double>(c, 4, 6);
    auto p = m.params.layers[0];
    p.gate.setZero();
    const Vec<double> x = random_vec(8, rng);
    std::vector<std::uint64_t> usage(4, 0);
    const Vec<double> y = moe_forward(p, x, 4, usage);
    Vec<double> mean = Vec<double>::Zero(8);
    for (std::size_t e = 0; e < 4; ++e) mean += expert_out(p, e, x) / 4.0;
    CHECK((y - mean).norm() < 1e-12);
    CHECK(usage == std::vector<std::uint64_t>{1, 1, 1, 1});
  }
  SUBCASE("top-1 routes to the gate argmax") {
    auto m = tiny_model<double>(c, 4, 7);
    const auto& p = m.params.layers[0];
    for (int t = 0; t < 50; ++t) {
      const Vec<double> x = random_vec(8, rng);
      std::vector<std::uint64_t> usage(4, 0);
      moe_forward(p, x, 1, usage);
      Eigen::Index arg;
      (p.gate * x).maxCoeff(&arg);
      CHECK(usage[static_cast<std::size_t>(arg)] == 1);
    }
  }
}

TEST_CASE("moe usage sums to tokens times top_k") {
  const auto c = tiny_config();
  auto m = tiny_model<double>(c, 10, 8);
  const std::vector<std::size_t> rows{1, 4, 2, 9};
  const auto cache = encode_rows(m, std::span<const std::size_t>(rows));
  for (const auto& layer : cache.usage()) {
    std::uint64_t total = 0;
    for (auto u : layer) total += u;
    CHECK(total == rows.size() * c.moe.top_k);
  }
}

TEST_CASE("encoder ignores padding and returns the last row") {
  auto m = tiny_model<double>(tiny_config(), 10, 9);
  const auto a = encode_sequence(m, pad_truncate(std::vector<ItemId>{m.items.ids[3], m.items.ids[5]}, 4));
  PaddedRow junk = pad_truncate(std::vector<ItemId>{m.items.ids[3], m.items.ids[5]}, 4);
  junk.tokens[0] = m.items.ids[7];
  junk.tokens[1] = m.items.ids[8];
  const auto b = encode_sequence(m, junk);
  CHECK(a.h_T == b.h_T);
  CHECK(a.H == b.H);
  CHECK(a.h_T == a.H.row(a.H.rows() - 1).transpose());
  const auto again = encode_sequence(m, pad_truncate(std::vector<ItemId>{m.items.ids[3], m.items.ids[5]}, 4));
  CHECK(again.h_T == a.h_T);
  PaddedRow empty;
  empty.tokens.assign(4, kPadId);
  empty.valid.assign(4, 0);
  CHECK_THROWS(encode_sequence(m, empty));
}

TEST_CASE("sid1 head attends over valid positions only") {
  auto m = tiny_model<double>(tiny_config(), 10, 10);
  const std::vector<std::size_t> one{2};
  const auto enc1 = encode_rows(m, std::span<const std::size_t>(one));
  Sid1Cache<double> c1;
  decode_sid1_logits(m.params, enc1.H, enc1.h_T, &c1);
  REQUIRE(c1.weights.size() == 1);
  CHECK(c1.weights[0] == doctest::Approx(1.0));
  CHECK((c1.context - c1.values.row(0).transpose()).norm() < 1e-12);

  const std::vector<std::size_t> three{2, 5, 7};
  const auto enc3 = encode_rows(m, std::span<const std::size_t>(three));
  Sid1Cache<double> c3;
  const auto logits = decode_sid1_logits(m.params, enc3.H, enc3.h_T, &c3);
  CHECK(c3.weights.size() == 3);
  CHECK(c3.weights.sum() == doctest::Approx(1.0));
  CHECK(logits.size() == 8);
  CHECK(logits.allFinite());
}

TEST_CASE("sid2 head is conditioned on the first code") {
  auto m = tiny_model<double>(tiny_config(), 10, 11);
  const std::vector<std::size_t> rows{1, 2};
  const auto enc = encode_rows(m, std::span<const std::size_t>(rows));
  const auto l0 = decode_sid2_logits(m.params, enc.h_T, 0);
  const auto l1 = decode_sid2_logits(m.params, enc.h_T, 1);
  CHECK(l0.size() == 8);
  CHECK((l0 - l1).norm() > 1e-6);
  CHECK_THROWS(decode_sid2_logits(m.params, enc.h_T, 8));
  CHECK_THROWS(decode_sid2_logits(m.params, enc.h_T, -1));

  // Finite-difference sensitivity to the conditioning code's embedding row.
  auto p = m.params;
  p.code_embedding(3, 0) += 1e-4;
  const auto moved = decode_sid2_logits(p, enc.h_T, 3);
  CHECK((moved - decode_sid2_logits(m.params, enc.h_T, 3)).norm() > 0.0);
  CHECK(decode_sid2_logits(p, enc.h_T, 4) == decode_sid2_logits(m.params, enc.h_T, 4));

  m.params.sid2_proj.setZero();
  m.params.sid2_bias.setZero();
  const auto flat = decode_sid2_logits(m.params, enc.h_T, 2);
  CHECK(flat.isZero());
}

TEST_CASE("parameter count equals the enumerated tensor sizes") {
  const auto c = tiny_config();
  auto m = tiny_model<float>(c, 10, 12);
  const std::size_t D = c.hidden_dim, V = 10, L = c.L_max, K = c.K, E = c.moe.n_experts, Hd = c.moe.expert_hidden;
  const std::size_t in = c.item_input_dim();
  std::size_t expected = V * D + L * D;
  expected += m.params.dnn_wa.size() + m.params.dnn_ba.size() + m.params.dnn_wb.size() + m.params.dnn_bb.size() +
              D * m.params.dnn_wo.cols() + D;
  CHECK(m.params.dnn_wa.cols() == static_cast<Eigen::Index>(in));
  const std::size_t hstu = 2 * D + 4 * D * D + 4 * D + 2 * D + D * D + D;
  const std::size_t moe = 2 * D + E * D + E * (Hd * D + Hd + D * Hd + D);
  expected += c.n_layers * (hstu + moe);
  expected += 2 * D + D * D + D;                   // final LN, user head
  expected += 3 * D * D + K * D + K;               // sid1
  expected += K * D + D * 2 * D + D + D * D + D + K * D + K;  // sid2
  CHECK(m.params.count() == expected);
}

TEST_CASE("checkpoints round-trip bit for bit") {
  const auto dir = scratch_dir("checkpoint");
  auto m = tiny_model<float>(tiny_config(), 10, 13);
  save_checkpoint(dir, m);
  const auto back = load_checkpoint(dir);
  CHECK(back.params.count() == m.params.count());
  CHECK(back.params.id_embedding == m.params.id_embedding);
  CHECK(back.params.layers[1].expert_w2[3] == m.params.layers[1].expert_w2[3]);
  CHECK(back.params.sid2_bias == m.params.sid2_bias);
  CHECK(back.items.ids == m.items.ids);
  CHECK(back.items.side == m.items.side);
  std::filesystem::remove_all(dir);
}
