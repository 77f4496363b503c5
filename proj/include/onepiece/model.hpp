#pragma once

#include "onepiece/data.hpp"
#include "onepiece/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace onepiece {

struct MoEConfig {
  std::size_t n_experts = 8;
  std::size_t top_k = 2;
  std::size_t expert_hidden = 0;  // 0 means 4 * hidden_dim
};

struct ModelConfig {
  std::size_t hidden_dim = 32;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t K = 256;
  std::size_t L_max = 32;
  MoEConfig moe;
  bool use_moe = true;
  double temperature = 0.02;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double balance_loss_weight = 0.0;
  /// Replace the pointwise SiLU attention with causal softmax attention.
  bool softmax_attention = false;
  std::size_t static_dim = 0;
  std::size_t time_dim = 0;
  std::size_t hot_dim = 1;

  std::size_t expert_hidden() const {
    return moe.expert_hidden == 0 ? 4 * hidden_dim : moe.expert_hidden;
  }
  std::size_t side_dim() const { return static_dim + time_dim + hot_dim; }
  std::size_t item_input_dim() const { return side_dim() + hidden_dim; }
  /// Throws std::invalid_argument on violated invariants.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <typename T>
struct LayerParams {
  // HSTU block
  Vec<T> ln1_g, ln1_b;
  Mat<T> w_uvqk;  // [4D x D]
  Vec<T> b_uvqk;
  Vec<T> ln2_g, ln2_b;
  Mat<T> w_o;  // [D x D]
  Vec<T> b_o;
  // MoE layer (empty when use_moe is off)
  Vec<T> lnm_g, lnm_b;
  Mat<T> gate;  // [E x D]
  std::vector<Mat<T>> expert_w1;  // [H x D]
  std::vector<Vec<T>> expert_b1;
  std::vector<Mat<T>> expert_w2;  // [D x H]
  std::vector<Vec<T>> expert_b2;
};

template <typename T>
struct Parameters {
  Mat<T> id_embedding;   // [V x D]
  Mat<T> pos_embedding;  // [L_max x D]
  // ItemDNN: out = W_out (ReLU(W_a c + b_a) + W_b c + b_b) + b_out
  Mat<T> dnn_wa;
  Vec<T> dnn_ba;
  Mat<T> dnn_wb;
  Vec<T> dnn_bb;
  Mat<T> dnn_wo;
  Vec<T> dnn_bo;
  std::vector<LayerParams<T>> layers;
  Vec<T> final_ln_g, final_ln_b;
  // Embedding head for the dual-tower score.
  Mat<T> user_w;
  Vec<T> user_b;
  // SID1 head: single cross-attention with h_T as query, then projection to K.
  Mat<T> sid1_wq, sid1_wk, sid1_wv;
  Mat<T> sid1_proj;
  Vec<T> sid1_bias;
  // SID2 head: MLP([h_T; E(c1)]) then projection to K.
  Mat<T> code_embedding;  // [K x D]
  Mat<T> sid2_w1;         // [D x 2D]
  Vec<T> sid2_b1;
  Mat<T> sid2_w2;  // [D x D]
  Vec<T> sid2_b2;
  Mat<T> sid2_proj;
  Vec<T> sid2_bias;

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t count() const;
  void set_zero();
  /// Same shapes as `shape`, all zeros.
  static Parameters zeros_like(const Parameters& shape);
  void add(const Parameters& other);
  template <typename U>
  Parameters<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& p, F& f);
};

/// Non-trainable per-item side features plus the vocabulary mapping.
template <typename T>
struct ItemTable {
  std::vector<ItemId> ids;
  std::unordered_map<ItemId, std::size_t> row_of;
  Mat<T> side;  // [V x side_dim]: static | time | hot

  std::size_t size() const { return ids.size(); }
  std::size_t row(ItemId id) const;
  bool contains(ItemId id) const { return row_of.count(id) != 0; }
};

/// Side features from the catalog; the hot feature is log(1 + count) scaled
/// by the largest count among `train_counts`.
ItemTable<float> build_item_table(const ItemCatalog& catalog,
                                  const std::unordered_map<ItemId, std::uint64_t>& train_counts,
                                  std::size_t static_dim);

template <typename T>
struct Model {
  ModelConfig config;
  ItemTable<T> items;
  Parameters<T> params;

  template <typename U>
  Model<U> cast() const;
};

/// Random initialization from the portable generator.
template <typename T>
Model<T> init_model(const ModelConfig& config, ItemTable<T> items, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward caches

template <typename T>
struct LnCache {
  Mat<T> xhat;
  Vec<T> rstd;
};

template <typename T>
struct ItemDnnCache {
  Mat<T> input;  // [m x item_input_dim]
  Mat<T> pre_relu;
  Mat<T> hidden;  // ReLU path + identity path
  Mat<T> out;
  std::vector<std::size_t> rows;
};

template <typename T>
struct HstuCache {
  Mat<T> x_in;
  LnCache<T> ln1;
  Mat<T> normed;
  Mat<T> proj;    // pre-activation U|V|Q|K
  Mat<T> gated;   // SiLU(proj)
  std::vector<Mat<T>> scores;   // per head, pre-activation
  std::vector<Mat<T>> weights;  // per head, masked attention weights
  Mat<T> attn;
  LnCache<T> ln2;
  Mat<T> attn_normed;
  Mat<T> mixed;  // LN(A V) * U
};

template <typename T>
struct ExpertBatch {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> slots;
  Mat<T> input;
  Mat<T> pre;
  Mat<T> act;
  Mat<T> out;
};

template <typename T>
struct MoeCache {
  Mat<T> x_in;
  LnCache<T> ln;
  Mat<T> normed;
  Mat<T> logits;  // [n x E]
  Mat<T> probs;   // full softmax, for the balance loss
  std::vector<int> route;  // [n * top_k] expert ids
  Mat<T> gates;            // [n x top_k] renormalized over the kept set
  std::vector<ExpertBatch<T>> experts;
  std::vector<std::uint64_t> usage;
};

/// Routing decisions of one sequence, one flat [n * top_k] vector per layer.
using RouteTrace = std::vector<std::vector<int>>;

template <typename T>
struct ForwardCache {
  std::size_t n = 0;       // valid tokens
  std::size_t offset = 0;  // absolute position of the first valid token
  ItemDnnCache<T> items;
  std::vector<HstuCache<T>> hstu;
  std::vector<MoeCache<T>> moe;
  Mat<T> pre_final;
  LnCache<T> final_ln;
  Mat<T> H;  // [n x D], rows for the valid positions only
  Vec<T> h_T;

  RouteTrace routes() const;
  std::vector<std::vector<std::uint64_t>> usage() const;
};

template <typename T>
struct Sid1Cache {
  Vec<T> q;
  Mat<T> keys, values;
  Vec<T> weights;
  Vec<T> context;
  Vec<T> logits;
};

template <typename T>
struct Sid2Cache {
  int c1 = 0;
  Vec<T> input;
  Vec<T> pre;
  Vec<T> act;
  Vec<T> query;
  Vec<T> logits;
};

template <typename T>
struct UserCache {
  Vec<T> raw;
  T norm = T(0);
  Vec<T> unit;
};

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
Mat<T> layer_norm_forward(const Mat<T>& x, const Vec<T>& g, const Vec<T>& b, LnCache<T>& cache);
template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LnCache<T>& cache, const Vec<T>& g, Vec<T>& dg,
                           Vec<T>& db);

/// ItemDNN over vocabulary rows (unnormalized output).
template <typename T>
Mat<T> item_dnn_forward(const Model<T>& model, std::span<const std::size_t> rows,
                        ItemDnnCache<T>* cache = nullptr);
/// ItemDNN on an explicit concatenated input [m x item_input_dim].
template <typename T>
Mat<T> item_dnn_forward_raw(const Parameters<T>& p, const Mat<T>& input,
                            ItemDnnCache<T>* cache = nullptr);
template <typename T>
void item_dnn_backward(const Model<T>& model, const ItemDnnCache<T>& cache, const Mat<T>& d_out,
                       Parameters<T>& grads);

template <typename T>
Mat<T> hstu_block_forward(const ModelConfig& config, const LayerParams<T>& p, const Mat<T>& x,
                          HstuCache<T>* cache = nullptr);
template <typename T>
Mat<T> hstu_block_backward(const ModelConfig& config, const LayerParams<T>& p,
                           const HstuCache<T>& cache, const Mat<T>& d_out, LayerParams<T>& grads);

/// One token through the MoE layer (no layer norm, no residual).
template <typename T>
Vec<T> moe_forward(const LayerParams<T>& p, const Vec<T>& x, std::size_t top_k,
                   std::vector<std::uint64_t>& usage);
/// Full MoE layer over a sequence: x + MoE(LN(x)).
template <typename T>
Mat<T> moe_layer_forward(const ModelConfig& config, const LayerParams<T>& p, const Mat<T>& x,
                         const std::vector<int>* frozen_route, MoeCache<T>& cache);
/// Returns d_x. `balance_weight` scales the auxiliary load-balance loss
/// (n_experts * sum_j f_j * mean_t p_tj) for this sequence.
template <typename T>
Mat<T> moe_layer_backward(const ModelConfig& config, const LayerParams<T>& p,
                          const MoeCache<T>& cache, const Mat<T>& d_out, T balance_weight,
                          LayerParams<T>& grads);
template <typename T>
T moe_balance_loss(const ModelConfig& config, const MoeCache<T>& cache);

/// Gini coefficient of usage counts. Throws on all-zero input.
double gini(std::span<const std::uint64_t> counts);
double gini(std::span<const double> counts);

/// Embeds the valid tokens of a padded row and runs the encoder stack.
template <typename T>
ForwardCache<T> encode_sequence(const Model<T>& model, const PaddedRow& row,
                                const RouteTrace* frozen = nullptr);
template <typename T>
ForwardCache<T> encode_rows(const Model<T>& model, std::span<const std::size_t> token_rows,
                            const RouteTrace* frozen = nullptr);
/// Back-propagates d_H ([n x D]) through the encoder into the parameters.
template <typename T>
void encode_backward(const Model<T>& model, const ForwardCache<T>& cache, const Mat<T>& d_H,
                     T balance_weight, Parameters<T>& grads);

template <typename T>
Vec<T> decode_sid1_logits(const Parameters<T>& p, const Mat<T>& H, const Vec<T>& h_T,
                          Sid1Cache<T>* cache = nullptr);
template <typename T>
void decode_sid1_backward(const Parameters<T>& p, const Mat<T>& H, const Vec<T>& h_T,
                          const Sid1Cache<T>& cache, const Vec<T>& d_logits, Mat<T>& d_H,
                          Vec<T>& d_h, Parameters<T>& grads);

template <typename T>
Vec<T> decode_sid2_logits(const Parameters<T>& p, const Vec<T>& h_T, int c1,
                          Sid2Cache<T>* cache = nullptr);
template <typename T>
void decode_sid2_backward(const Parameters<T>& p, const Sid2Cache<T>& cache,
                          const Vec<T>& d_logits, Vec<T>& d_h, Parameters<T>& grads);

template <typename T>
Vec<T> user_embedding(const Parameters<T>& p, const Vec<T>& h_T, UserCache<T>* cache = nullptr);
template <typename T>
void user_embedding_backward(const Parameters<T>& p, const Vec<T>& h_T, const UserCache<T>& cache,
                             const Vec<T>& d_unit, Vec<T>& d_h, Parameters<T>& grads);

/// Unit-norm candidate embeddings (ItemDNN output, L2-normalized) for rows.
template <typename T>
Mat<T> item_embeddings(const Model<T>& model, std::span<const std::size_t> rows);

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + one binary matrix per tensor.

void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model,
                     const std::vector<std::pair<std::string, const Parameters<float>*>>& extra = {},
                     const nlohmann::json* train_state = nullptr);
Model<float> load_checkpoint(const std::filesystem::path& dir,
                             const std::vector<std::pair<std::string, Parameters<float>*>>& extra = {},
                             nlohmann::json* train_state = nullptr);

template <typename T>
template <typename Self, typename F>
void Parameters<T>::visit_impl(Self& p, F& f) {
  f("item.id_embedding", p.id_embedding);
  f("item.pos_embedding", p.pos_embedding);
  f("item_dnn.wa", p.dnn_wa);
  f("item_dnn.ba", p.dnn_ba);
  f("item_dnn.wb", p.dnn_wb);
  f("item_dnn.bb", p.dnn_bb);
  f("item_dnn.wo", p.dnn_wo);
  f("item_dnn.bo", p.dnn_bo);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    f(pre + "hstu.ln1_g", L.ln1_g);
    f(pre + "hstu.ln1_b", L.ln1_b);
    f(pre + "hstu.w_uvqk", L.w_uvqk);
    f(pre + "hstu.b_uvqk", L.b_uvqk);
    f(pre + "hstu.ln2_g", L.ln2_g);
    f(pre + "hstu.ln2_b", L.ln2_b);
    f(pre + "hstu.w_o", L.w_o);
    f(pre + "hstu.b_o", L.b_o);
    if (L.expert_w1.empty()) continue;
    f(pre + "moe.ln_g", L.lnm_g);
    f(pre + "moe.ln_b", L.lnm_b);
    f(pre + "moe.gate", L.gate);
    for (std::size_t e = 0; e < L.expert_w1.size(); ++e) {
      const std::string ep = pre + "moe.expert" + std::to_string(e) + ".";
      f(ep + "w1", L.expert_w1[e]);
      f(ep + "b1", L.expert_b1[e]);
      f(ep + "w2", L.expert_w2[e]);
      f(ep + "b2", L.expert_b2[e]);
    }
  }
  f("final_ln.g", p.final_ln_g);
  f("final_ln.b", p.final_ln_b);
  f("user.w", p.user_w);
  f("user.b", p.user_b);
  f("sid1.wq", p.sid1_wq);
  f("sid1.wk", p.sid1_wk);
  f("sid1.wv", p.sid1_wv);
  f("sid1.proj", p.sid1_proj);
  f("sid1.bias", p.sid1_bias);
  f("sid2.code_embedding", p.code_embedding);
  f("sid2.w1", p.sid2_w1);
  f("sid2.b1", p.sid2_b1);
  f("sid2.w2", p.sid2_w2);
  f("sid2.b2", p.sid2_b2);
  f("sid2.proj", p.sid2_proj);
  f("sid2.bias", p.sid2_bias);
}

}  // namespace onepiece
