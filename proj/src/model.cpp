#include "onepiece/model.hpp"

#include "onepiece/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <tuple>
#include <type_traits>

namespace onepiece {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (hidden_dim == 0) throw std::invalid_argument("hidden_dim must be positive");
  if (n_heads == 0 || hidden_dim % n_heads != 0)
    throw std::invalid_argument("hidden_dim must be divisible by n_heads");
  if (n_layers == 0) throw std::invalid_argument("n_layers must be positive");
  if (K < 2) throw std::invalid_argument("K must be >= 2");
  if (L_max == 0) throw std::invalid_argument("L_max must be positive");
  if (use_moe) {
    if (moe.n_experts == 0) throw std::invalid_argument("moe.n_experts must be positive");
    if (moe.top_k == 0 || moe.top_k > moe.n_experts)
      throw std::invalid_argument("moe.top_k must be in [1, n_experts]");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("lambda weights must be >= 0");
  if (balance_loss_weight < 0.0) throw std::invalid_argument("balance_loss_weight must be >= 0");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"hidden_dim", c.hidden_dim},
           {"n_heads", c.n_heads},
           {"n_layers", c.n_layers},
           {"K", c.K},
           {"L_max", c.L_max},
           {"moe",
            {{"n_experts", c.moe.n_experts},
             {"top_k", c.moe.top_k},
             {"expert_hidden", c.moe.expert_hidden}}},
           {"use_moe", c.use_moe},
           {"temperature", c.temperature},
           {"lambda1", c.lambda1},
           {"lambda2", c.lambda2},
           {"balance_loss_weight", c.balance_loss_weight},
           {"softmax_attention", c.softmax_attention},
           {"static_dim", c.static_dim},
           {"time_dim", c.time_dim},
           {"hot_dim", c.hot_dim}};
}

namespace {

template <typename V>
void read_field(const json& j, const char* key, V& out, std::set<std::string>& seen) {
  if (j.contains(key)) {
    out = j.at(key).get<V>();
    seen.insert(key);
  }
}

void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
  for (const auto& [key, value] : j.items())
    if (!seen.count(key)) throw std::invalid_argument("unknown key '" + key + "' in " + where);
}

}  // namespace

void from_json(const json& j, ModelConfig& c) {
  std::set<std::string> seen;
  read_field(j, "hidden_dim", c.hidden_dim, seen);
  read_field(j, "n_heads", c.n_heads, seen);
  read_field(j, "n_layers", c.n_layers, seen);
  read_field(j, "K", c.K, seen);
  read_field(j, "L_max", c.L_max, seen);
  if (j.contains("moe")) {
    seen.insert("moe");
    std::set<std::string> moe_seen;
    const auto& m = j.at("moe");
    read_field(m, "n_experts", c.moe.n_experts, moe_seen);
    read_field(m, "top_k", c.moe.top_k, moe_seen);
    read_field(m, "expert_hidden", c.moe.expert_hidden, moe_seen);
    reject_unknown(m, moe_seen, "model.moe");
  }
  read_field(j, "use_moe", c.use_moe, seen);
  read_field(j, "temperature", c.temperature, seen);
  read_field(j, "lambda1", c.lambda1, seen);
  read_field(j, "lambda2", c.lambda2, seen);
  read_field(j, "balance_loss_weight", c.balance_loss_weight, seen);
  read_field(j, "softmax_attention", c.softmax_attention, seen);
  read_field(j, "static_dim", c.static_dim, seen);
  read_field(j, "time_dim", c.time_dim, seen);
  read_field(j, "hot_dim", c.hot_dim, seen);
  reject_unknown(j, seen, "model config");
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
std::size_t Parameters<T>::count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

template <typename T>
void Parameters<T>::set_zero() {
  visit([](const std::string&, auto& t) { t.setZero(); });
}

template <typename T>
Parameters<T> Parameters<T>::zeros_like(const Parameters& shape) {
  Parameters out = shape;
  out.set_zero();
  return out;
}

template <typename T>
void Parameters<T>::add(const Parameters& other) {
  std::vector<const T*> src;
  other.visit([&](const std::string&, const auto& t) { src.push_back(t.data()); });
  std::size_t i = 0;
  visit([&](const std::string&, auto& t) {
    const T* s = src[i++];
    T* d = t.data();
    for (Eigen::Index k = 0; k < t.size(); ++k) d[k] += s[k];
  });
}

template <typename T>
template <typename U>
Parameters<U> Parameters<T>::cast() const {
  Parameters<U> out;
  out.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::size_t e = layers[l].expert_w1.size();
    out.layers[l].expert_w1.resize(e);
    out.layers[l].expert_b1.resize(e);
    out.layers[l].expert_w2.resize(e);
    out.layers[l].expert_b2.resize(e);
  }
  std::vector<std::tuple<Eigen::Index, Eigen::Index, const T*>> src;
  visit([&](const std::string&, const auto& t) { src.emplace_back(t.rows(), t.cols(), t.data()); });
  std::size_t i = 0;
  out.visit([&](const std::string&, auto& t) {
    const auto [r, c, d] = src[i++];
    t.resize(r, c);
    for (Eigen::Index k = 0; k < r * c; ++k) t.data()[k] = static_cast<U>(d[k]);
  });
  return out;
}

template <typename T>
std::size_t ItemTable<T>::row(ItemId id) const {
  auto it = row_of.find(id);
  if (it == row_of.end()) throw DataError("item " + std::to_string(id) + " not in model vocabulary");
  return it->second;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out;
  out.config = config;
  out.items.ids = items.ids;
  out.items.row_of = items.row_of;
  out.items.side = items.side.template cast<U>();
  out.params = params.template cast<U>();
  return out;
}

ItemTable<float> build_item_table(const ItemCatalog& catalog,
                                  const std::unordered_map<ItemId, std::uint64_t>& train_counts,
                                  std::size_t static_dim) {
  ItemTable<float> table;
  const std::size_t V = catalog.total_items();
  table.side = MatF::Zero(static_cast<Eigen::Index>(V), static_cast<Eigen::Index>(static_dim + 1));
  std::uint64_t max_count = 0;
  for (const auto& [id, c] : train_counts) max_count = std::max(max_count, c);
  const double denom = std::log1p(static_cast<double>(std::max<std::uint64_t>(max_count, 1)));
  for (std::size_t r = 0; r < V; ++r) {
    const auto& rec = catalog.items()[r];
    table.ids.push_back(rec.item_id);
    table.row_of.emplace(rec.item_id, r);
    const std::size_t ds = std::min(static_dim, rec.static_features.size());
    for (std::size_t k = 0; k < ds; ++k)
      table.side(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rec.static_features[k];
    auto it = train_counts.find(rec.item_id);
    const double c = it == train_counts.end() ? 0.0 : static_cast<double>(it->second);
    table.side(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(static_dim)) =
        static_cast<float>(std::log1p(c) / denom);
  }
  return table;
}

namespace {

template <typename T>
Parameters<T> shape_parameters(const ModelConfig& c, std::size_t V) {
  const auto D = static_cast<Eigen::Index>(c.hidden_dim);
  const auto K = static_cast<Eigen::Index>(c.K);
  const auto Hx = static_cast<Eigen::Index>(c.expert_hidden());
  const auto din = static_cast<Eigen::Index>(c.item_input_dim());
  Parameters<T> p;
  p.id_embedding = Mat<T>::Zero(static_cast<Eigen::Index>(V), D);
  p.pos_embedding = Mat<T>::Zero(static_cast<Eigen::Index>(c.L_max), D);
  p.dnn_wa = Mat<T>::Zero(D, din);
  p.dnn_ba = Vec<T>::Zero(D);
  p.dnn_wb = Mat<T>::Zero(D, din);
  p.dnn_bb = Vec<T>::Zero(D);
  p.dnn_wo = Mat<T>::Zero(D, D);
  p.dnn_bo = Vec<T>::Zero(D);
  p.layers.resize(c.n_layers);
  for (auto& L : p.layers) {
    L.ln1_g = Vec<T>::Zero(D);
    L.ln1_b = Vec<T>::Zero(D);
    L.w_uvqk = Mat<T>::Zero(4 * D, D);
    L.b_uvqk = Vec<T>::Zero(4 * D);
    L.ln2_g = Vec<T>::Zero(D);
    L.ln2_b = Vec<T>::Zero(D);
    L.w_o = Mat<T>::Zero(D, D);
    L.b_o = Vec<T>::Zero(D);
    if (!c.use_moe) continue;
    const auto E = static_cast<Eigen::Index>(c.moe.n_experts);
    L.lnm_g = Vec<T>::Zero(D);
    L.lnm_b = Vec<T>::Zero(D);
    L.gate = Mat<T>::Zero(E, D);
    for (Eigen::Index e = 0; e < E; ++e) {
      L.expert_w1.push_back(Mat<T>::Zero(Hx, D));
      L.expert_b1.push_back(Vec<T>::Zero(Hx));
      L.expert_w2.push_back(Mat<T>::Zero(D, Hx));
      L.expert_b2.push_back(Vec<T>::Zero(D));
    }
  }
  p.final_ln_g = Vec<T>::Zero(D);
  p.final_ln_b = Vec<T>::Zero(D);
  p.user_w = Mat<T>::Zero(D, D);
  p.user_b = Vec<T>::Zero(D);
  p.sid1_wq = Mat<T>::Zero(D, D);
  p.sid1_wk = Mat<T>::Zero(D, D);
  p.sid1_wv = Mat<T>::Zero(D, D);
  p.sid1_proj = Mat<T>::Zero(K, D);
  p.sid1_bias = Vec<T>::Zero(K);
  p.code_embedding = Mat<T>::Zero(K, D);
  p.sid2_w1 = Mat<T>::Zero(D, 2 * D);
  p.sid2_b1 = Vec<T>::Zero(D);
  p.sid2_w2 = Mat<T>::Zero(D, D);
  p.sid2_b2 = Vec<T>::Zero(D);
  p.sid2_proj = Mat<T>::Zero(K, D);
  p.sid2_bias = Vec<T>::Zero(K);
  return p;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename T>
Model<T> init_model(const ModelConfig& config, ItemTable<T> items, std::uint64_t seed) {
  config.validate();
  if (static_cast<std::size_t>(items.side.cols()) != config.side_dim())
    throw std::invalid_argument("item side features do not match static/time/hot dims");
  Model<T> model;
  model.config = config;
  model.params = shape_parameters<T>(config, items.size());
  model.items = std::move(items);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  std::uint64_t tensor_index = 0;
  model.params.visit([&](const std::string& name, auto& t) {
    using Tensor = std::decay_t<decltype(t)>;
    Rng rng = Rng::derive(seed, 0x1417ull, tensor_index++);
    if constexpr (Tensor::ColsAtCompileTime == 1) {
      if (ends_with(name, "_g") || ends_with(name, ".g")) t.setOnes();
      else t.setZero();
    } else {
      double scale = 1.0 / std::sqrt(static_cast<double>(t.cols()));
      if (name == "item.id_embedding") scale = 0.1;
      if (name == "item.pos_embedding") scale = 0.02;
      if (ends_with(name, "hstu.w_o") || ends_with(name, ".w2")) scale *= residual_scale;
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<T>(scale * rng.normal());
    }
  });
  return model;
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}
template <typename T>
T silu(T z) {
  return z * sigmoid(z);
}
template <typename T>
T silu_grad(T z) {
  const T s = sigmoid(z);
  return s * (T(1) + z * (T(1) - s));
}

template <typename T>
Mat<T> silu_mat(const Mat<T>& z) {
  return z.unaryExpr([](T v) { return silu(v); });
}
template <typename T>
Mat<T> silu_grad_mat(const Mat<T>& z) {
  return z.unaryExpr([](T v) { return silu_grad(v); });
}

template <typename T>
Vec<T> colsum(const Mat<T>& m) {
  return m.colwise().sum().transpose();
}

}  // namespace

template <typename T>
Mat<T> layer_norm_forward(const Mat<T>& x, const Vec<T>& g, const Vec<T>& b, LnCache<T>& cache) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(n);
  Mat<T> y(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu).matrix();
    const T var = centered.squaredNorm() / static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    cache.rstd[r] = rstd;
    cache.xhat.row(r) = centered * rstd;
    y.row(r) = cache.xhat.row(r).cwiseProduct(g.transpose()) + b.transpose();
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LnCache<T>& cache, const Vec<T>& g, Vec<T>& dg,
                           Vec<T>& db) {
  const Eigen::Index n = dy.rows();
  const Eigen::Index d = dy.cols();
  Mat<T> dx(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto xhat = cache.xhat.row(r);
    dg += dy.row(r).cwiseProduct(xhat).transpose();
    db += dy.row(r).transpose();
    const Eigen::Matrix<T, 1, Eigen::Dynamic> dxhat = dy.row(r).cwiseProduct(g.transpose());
    const T m1 = dxhat.mean();
    const T m2 = dxhat.cwiseProduct(xhat).mean();
    dx.row(r) = cache.rstd[r] * (dxhat.array() - m1 - xhat.array() * m2).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ItemDNN

template <typename T>
Mat<T> item_dnn_forward_raw(const Parameters<T>& p, const Mat<T>& input, ItemDnnCache<T>* cache) {
  Mat<T> pre = (input * p.dnn_wa.transpose()).rowwise() + p.dnn_ba.transpose();
  Mat<T> hidden = pre.cwiseMax(T(0));
  hidden.noalias() += input * p.dnn_wb.transpose();
  hidden.rowwise() += p.dnn_bb.transpose();
  Mat<T> out = (hidden * p.dnn_wo.transpose()).rowwise() + p.dnn_bo.transpose();
  if (cache) {
    cache->input = input;
    cache->pre_relu = std::move(pre);
    cache->hidden = std::move(hidden);
    cache->out = out;
  }
  return out;
}

template <typename T>
Mat<T> item_dnn_forward(const Model<T>& model, std::span<const std::size_t> rows,
                        ItemDnnCache<T>* cache) {
  const auto side = model.items.side.cols();
  const auto D = static_cast<Eigen::Index>(model.config.hidden_dim);
  Mat<T> input(static_cast<Eigen::Index>(rows.size()), side + D);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    input.row(static_cast<Eigen::Index>(i)).head(side) = model.items.side.row(r);
    input.row(static_cast<Eigen::Index>(i)).tail(D) = model.params.id_embedding.row(r);
  }
  Mat<T> out = item_dnn_forward_raw(model.params, input, cache);
  if (cache) cache->rows.assign(rows.begin(), rows.end());
  return out;
}

template <typename T>
void item_dnn_backward(const Model<T>& model, const ItemDnnCache<T>& cache, const Mat<T>& d_out,
                       Parameters<T>& grads) {
  const auto& p = model.params;
  grads.dnn_wo.noalias() += d_out.transpose() * cache.hidden;
  grads.dnn_bo += colsum(d_out);
  const Mat<T> d_hidden = d_out * p.dnn_wo;
  const Mat<T> d_pre =
      d_hidden.cwiseProduct(cache.pre_relu.unaryExpr([](T v) { return v > T(0) ? T(1) : T(0); }));
  grads.dnn_wa.noalias() += d_pre.transpose() * cache.input;
  grads.dnn_ba += colsum(d_pre);
  grads.dnn_wb.noalias() += d_hidden.transpose() * cache.input;
  grads.dnn_bb += colsum(d_hidden);
  if (cache.rows.empty()) return;
  const Mat<T> d_input = d_pre * p.dnn_wa + d_hidden * p.dnn_wb;
  const auto D = static_cast<Eigen::Index>(model.config.hidden_dim);
  for (std::size_t i = 0; i < cache.rows.size(); ++i)
    grads.id_embedding.row(static_cast<Eigen::Index>(cache.rows[i])) +=
        d_input.row(static_cast<Eigen::Index>(i)).tail(D);
}

// ---------------------------------------------------------------------------
// HSTU block

template <typename T>
Mat<T> hstu_block_forward(const ModelConfig& config, const LayerParams<T>& p, const Mat<T>& x,
                          HstuCache<T>* cache) {
  HstuCache<T> local;
  HstuCache<T>& c = cache ? *cache : local;
  const Eigen::Index n = x.rows();
  const auto D = static_cast<Eigen::Index>(config.hidden_dim);
  const auto heads = static_cast<Eigen::Index>(config.n_heads);
  const Eigen::Index dh = D / heads;
  const T inv_len = T(1) / static_cast<T>(config.L_max);
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  c.x_in = x;
  c.normed = layer_norm_forward(x, p.ln1_g, p.ln1_b, c.ln1);
  c.proj = (c.normed * p.w_uvqk.transpose()).rowwise() + p.b_uvqk.transpose();
  c.gated = silu_mat(c.proj);
  c.scores.assign(static_cast<std::size_t>(heads), Mat<T>());
  c.weights.assign(static_cast<std::size_t>(heads), Mat<T>());
  c.attn.resize(n, D);
  for (Eigen::Index h = 0; h < heads; ++h) {
    const auto Q = c.gated.block(0, 2 * D + h * dh, n, dh);
    const auto Kh = c.gated.block(0, 3 * D + h * dh, n, dh);
    const auto V = c.gated.block(0, D + h * dh, n, dh);
    Mat<T>& G = c.scores[static_cast<std::size_t>(h)];
    Mat<T>& W = c.weights[static_cast<std::size_t>(h)];
    G = Q * Kh.transpose();
    W = Mat<T>::Zero(n, n);
    for (Eigen::Index t = 0; t < n; ++t) {
      if (config.softmax_attention) {
        T mx = G(t, 0) * inv_sqrt_dh;
        for (Eigen::Index s = 1; s <= t; ++s) mx = std::max(mx, G(t, s) * inv_sqrt_dh);
        T z = T(0);
        for (Eigen::Index s = 0; s <= t; ++s) {
          W(t, s) = std::exp(G(t, s) * inv_sqrt_dh - mx);
          z += W(t, s);
        }
        for (Eigen::Index s = 0; s <= t; ++s) W(t, s) /= z;
      } else {
        for (Eigen::Index s = 0; s <= t; ++s) W(t, s) = silu(G(t, s)) * inv_len;
      }
    }
    c.attn.block(0, h * dh, n, dh) = W * V;
  }
  c.attn_normed = layer_norm_forward(c.attn, p.ln2_g, p.ln2_b, c.ln2);
  c.mixed = c.attn_normed.cwiseProduct(c.gated.leftCols(D));
  Mat<T> out = x + ((c.mixed * p.w_o.transpose()).rowwise() + p.b_o.transpose());
  return out;
}

template <typename T>
Mat<T> hstu_block_backward(const ModelConfig& config, const LayerParams<T>& p,
                           const HstuCache<T>& c, const Mat<T>& d_out, LayerParams<T>& g) {
  const Eigen::Index n = d_out.rows();
  const auto D = static_cast<Eigen::Index>(config.hidden_dim);
  const auto heads = static_cast<Eigen::Index>(config.n_heads);
  const Eigen::Index dh = D / heads;
  const T inv_len = T(1) / static_cast<T>(config.L_max);
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> d_x = d_out;
  g.w_o.noalias() += d_out.transpose() * c.mixed;
  g.b_o += colsum(d_out);
  const Mat<T> d_mixed = d_out * p.w_o;
  Mat<T> d_gated = Mat<T>::Zero(n, 4 * D);
  d_gated.leftCols(D) = d_mixed.cwiseProduct(c.attn_normed);
  const Mat<T> d_attn_normed = d_mixed.cwiseProduct(c.gated.leftCols(D));
  const Mat<T> d_attn = layer_norm_backward(d_attn_normed, c.ln2, p.ln2_g, g.ln2_g, g.ln2_b);

  for (Eigen::Index h = 0; h < heads; ++h) {
    const auto Q = c.gated.block(0, 2 * D + h * dh, n, dh);
    const auto Kh = c.gated.block(0, 3 * D + h * dh, n, dh);
    const auto V = c.gated.block(0, D + h * dh, n, dh);
    const Mat<T>& G = c.scores[static_cast<std::size_t>(h)];
    const Mat<T>& W = c.weights[static_cast<std::size_t>(h)];
    const auto dO = d_attn.block(0, h * dh, n, dh);
    const Mat<T> dW = dO * V.transpose();
    d_gated.block(0, D + h * dh, n, dh) += W.transpose() * dO;
    Mat<T> dG = Mat<T>::Zero(n, n);
    for (Eigen::Index t = 0; t < n; ++t) {
      if (config.softmax_attention) {
        T dot = T(0);
        for (Eigen::Index s = 0; s <= t; ++s) dot += W(t, s) * dW(t, s);
        for (Eigen::Index s = 0; s <= t; ++s) dG(t, s) = W(t, s) * (dW(t, s) - dot) * inv_sqrt_dh;
      } else {
        for (Eigen::Index s = 0; s <= t; ++s) dG(t, s) = dW(t, s) * silu_grad(G(t, s)) * inv_len;
      }
    }
    d_gated.block(0, 2 * D + h * dh, n, dh) += dG * Kh;
    d_gated.block(0, 3 * D + h * dh, n, dh) += dG.transpose() * Q;
  }

  const Mat<T> d_proj = d_gated.cwiseProduct(silu_grad_mat(c.proj));
  g.w_uvqk.noalias() += d_proj.transpose() * c.normed;
  g.b_uvqk += colsum(d_proj);
  const Mat<T> d_normed = d_proj * p.w_uvqk;
  d_x += layer_norm_backward(d_normed, c.ln1, p.ln1_g, g.ln1_g, g.ln1_b);
  return d_x;
}

// ---------------------------------------------------------------------------
// Sparse MoE

namespace {

// Expert ids ordered by logit descending, lowest index first on ties.
template <typename T>
std::vector<int> top_k_experts(const Eigen::Ref<const Eigen::Matrix<T, 1, Eigen::Dynamic>>& logits,
                               std::size_t k) {
  std::vector<int> order(static_cast<std::size_t>(logits.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits[a] > logits[b]; });
  order.resize(k);
  return order;
}

template <typename T>
Vec<T> expert_forward(const LayerParams<T>& p, std::size_t e, const Vec<T>& x) {
  const Vec<T> pre = p.expert_w1[e] * x + p.expert_b1[e];
  return p.expert_w2[e] * pre.unaryExpr([](T v) { return silu(v); }) + p.expert_b2[e];
}

}  // namespace

template <typename T>
Vec<T> moe_forward(const LayerParams<T>& p, const Vec<T>& x, std::size_t top_k,
                   std::vector<std::uint64_t>& usage) {
  const std::size_t E = p.expert_w1.size();
  if (top_k == 0 || top_k > E) throw std::invalid_argument("top_k must be in [1, n_experts]");
  usage.resize(E, 0);
  const Eigen::Matrix<T, 1, Eigen::Dynamic> logits = (p.gate * x).transpose();
  const auto chosen = top_k_experts<T>(logits, top_k);
  T mx = logits[chosen.front()];
  std::vector<T> w(top_k);
  T z = T(0);
  for (std::size_t s = 0; s < top_k; ++s) {
    w[s] = std::exp(logits[chosen[s]] - mx);
    z += w[s];
  }
  Vec<T> y = Vec<T>::Zero(x.size());
  for (std::size_t s = 0; s < top_k; ++s) {
    y += (w[s] / z) * expert_forward(p, static_cast<std::size_t>(chosen[s]), x);
    ++usage[static_cast<std::size_t>(chosen[s])];
  }
  return y;
}

template <typename T>
Mat<T> moe_layer_forward(const ModelConfig& config, const LayerParams<T>& p, const Mat<T>& x,
                         const std::vector<int>* frozen_route, MoeCache<T>& c) {
  const Eigen::Index n = x.rows();
  const std::size_t E = config.moe.n_experts;
  const std::size_t k = config.moe.top_k;
  c.x_in = x;
  c.normed = layer_norm_forward(x, p.lnm_g, p.lnm_b, c.ln);
  c.logits = c.normed * p.gate.transpose();
  c.probs.resize(n, static_cast<Eigen::Index>(E));
  c.route.assign(static_cast<std::size_t>(n) * k, 0);
  c.gates.resize(n, static_cast<Eigen::Index>(k));
  c.usage.assign(E, 0);
  c.experts.assign(E, ExpertBatch<T>{});
  if (frozen_route && frozen_route->size() != c.route.size())
    throw std::invalid_argument("frozen route has the wrong size");

  for (Eigen::Index t = 0; t < n; ++t) {
    const auto row = c.logits.row(t);
    const T mx = row.maxCoeff();
    const auto ex = (row.array() - mx).exp();
    c.probs.row(t) = ex / ex.sum();
    std::vector<int> chosen;
    if (frozen_route) {
      chosen.assign(frozen_route->begin() + t * static_cast<Eigen::Index>(k),
                    frozen_route->begin() + (t + 1) * static_cast<Eigen::Index>(k));
    } else {
      chosen = top_k_experts<T>(row, k);
    }
    T kept_max = row[chosen[0]];
    for (int e : chosen) kept_max = std::max(kept_max, row[e]);
    T z = T(0);
    for (std::size_t s = 0; s < k; ++s) {
      c.gates(t, static_cast<Eigen::Index>(s)) = std::exp(row[chosen[s]] - kept_max);
      z += c.gates(t, static_cast<Eigen::Index>(s));
    }
    for (std::size_t s = 0; s < k; ++s) {
      c.gates(t, static_cast<Eigen::Index>(s)) /= z;
      const auto e = static_cast<std::size_t>(chosen[s]);
      c.route[static_cast<std::size_t>(t) * k + s] = chosen[s];
      ++c.usage[e];
      c.experts[e].tokens.push_back(static_cast<std::size_t>(t));
      c.experts[e].slots.push_back(s);
    }
  }

  const auto D = static_cast<Eigen::Index>(config.hidden_dim);
  Mat<T> out = x;
  for (std::size_t e = 0; e < E; ++e) {
    auto& b = c.experts[e];
    const auto m = static_cast<Eigen::Index>(b.tokens.size());
    if (m == 0) continue;
    b.input.resize(m, D);
    for (Eigen::Index i = 0; i < m; ++i)
      b.input.row(i) = c.normed.row(static_cast<Eigen::Index>(b.tokens[static_cast<std::size_t>(i)]));
    b.pre = (b.input * p.expert_w1[e].transpose()).rowwise() + p.expert_b1[e].transpose();
    b.act = silu_mat(b.pre);
    b.out = (b.act * p.expert_w2[e].transpose()).rowwise() + p.expert_b2[e].transpose();
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto t = static_cast<Eigen::Index>(b.tokens[static_cast<std::size_t>(i)]);
      const auto s = static_cast<Eigen::Index>(b.slots[static_cast<std::size_t>(i)]);
      out.row(t) += c.gates(t, s) * b.out.row(i);
    }
  }
  return out;
}

template <typename T>
T moe_balance_loss(const ModelConfig& config, const MoeCache<T>& c) {
  const auto n = static_cast<T>(c.probs.rows());
  const std::size_t E = config.moe.n_experts;
  const auto k = static_cast<T>(config.moe.top_k);
  T loss = T(0);
  for (std::size_t e = 0; e < E; ++e) {
    const T f = static_cast<T>(c.usage[e]) / (n * k);
    const T pbar = c.probs.col(static_cast<Eigen::Index>(e)).sum() / n;
    loss += f * pbar;
  }
  return static_cast<T>(E) * loss;
}

template <typename T>
Mat<T> moe_layer_backward(const ModelConfig& config, const LayerParams<T>& p, const MoeCache<T>& c,
                          const Mat<T>& d_out, T balance_weight, LayerParams<T>& g) {
  const Eigen::Index n = d_out.rows();
  const std::size_t E = config.moe.n_experts;
  const std::size_t k = config.moe.top_k;
  const auto D = static_cast<Eigen::Index>(config.hidden_dim);

  Mat<T> d_x = d_out;
  Mat<T> d_normed = Mat<T>::Zero(n, D);
  Mat<T> d_gates = Mat<T>::Zero(n, static_cast<Eigen::Index>(k));
  for (std::size_t e = 0; e < E; ++e) {
    const auto& b = c.experts[e];
    const auto m = static_cast<Eigen::Index>(b.tokens.size());
    if (m == 0) continue;
    Mat<T> d_eout(m, D);
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto t = static_cast<Eigen::Index>(b.tokens[static_cast<std::size_t>(i)]);
      const auto s = static_cast<Eigen::Index>(b.slots[static_cast<std::size_t>(i)]);
      d_eout.row(i) = c.gates(t, s) * d_out.row(t);
      d_gates(t, s) = d_out.row(t).dot(b.out.row(i));
    }
    g.expert_w2[e].noalias() += d_eout.transpose() * b.act;
    g.expert_b2[e] += colsum(d_eout);
    const Mat<T> d_pre = (d_eout * p.expert_w2[e]).cwiseProduct(silu_grad_mat(b.pre));
    g.expert_w1[e].noalias() += d_pre.transpose() * b.input;
    g.expert_b1[e] += colsum(d_pre);
    const Mat<T> d_in = d_pre * p.expert_w1[e];
    for (Eigen::Index i = 0; i < m; ++i)
      d_normed.row(static_cast<Eigen::Index>(b.tokens[static_cast<std::size_t>(i)])) += d_in.row(i);
  }

  Mat<T> d_logits = Mat<T>::Zero(n, static_cast<Eigen::Index>(E));
  for (Eigen::Index t = 0; t < n; ++t) {
    T dot = T(0);
    for (std::size_t s = 0; s < k; ++s) dot += c.gates(t, static_cast<Eigen::Index>(s)) * d_gates(t, static_cast<Eigen::Index>(s));
    for (std::size_t s = 0; s < k; ++s) {
      const int e = c.route[static_cast<std::size_t>(t) * k + s];
      d_logits(t, e) += c.gates(t, static_cast<Eigen::Index>(s)) * (d_gates(t, static_cast<Eigen::Index>(s)) - dot);
    }
  }
  if (balance_weight != T(0)) {
    const T nt = static_cast<T>(n);
    Eigen::Matrix<T, 1, Eigen::Dynamic> d_prob(static_cast<Eigen::Index>(E));
    for (std::size_t e = 0; e < E; ++e)
      d_prob[static_cast<Eigen::Index>(e)] = balance_weight * static_cast<T>(E) *
                                              (static_cast<T>(c.usage[e]) / (nt * static_cast<T>(k))) / nt;
    for (Eigen::Index t = 0; t < n; ++t) {
      const auto pr = c.probs.row(t);
      const T dot = pr.dot(d_prob);
      d_logits.row(t) += pr.cwiseProduct((d_prob.array() - dot).matrix());
    }
  }
  g.gate.noalias() += d_logits.transpose() * c.normed;
  d_normed.noalias() += d_logits * p.gate;
  d_x += layer_norm_backward(d_normed, c.ln, p.lnm_g, g.lnm_g, g.lnm_b);
  return d_x;
}

double gini(std::span<const double> counts) {
  if (counts.empty()) throw std::invalid_argument("gini of an empty vector");
  std::vector<double> sorted(counts.begin(), counts.end());
  double total = 0.0;
  for (double v : sorted) {
    if (v < 0.0) throw std::invalid_argument("gini: negative count");
    total += v;
  }
  if (total <= 0.0) throw std::invalid_argument("gini: all counts are zero");
  std::sort(sorted.begin(), sorted.end());
  // sum_i sum_j |x_i - x_j| = 2 * sum_i (2i - n + 1) x_(i) over ascending order.
  const auto n = static_cast<double>(sorted.size());
  double weighted = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i)
    weighted += (2.0 * static_cast<double>(i) - n + 1.0) * sorted[i];
  return weighted / (n * total);
}

double gini(std::span<const std::uint64_t> counts) {
  std::vector<double> v(counts.begin(), counts.end());
  return gini(std::span<const double>(v));
}

// ---------------------------------------------------------------------------
// Encoder stack

template <typename T>
RouteTrace ForwardCache<T>::routes() const {
  RouteTrace trace;
  for (const auto& m : moe) trace.push_back(m.route);
  return trace;
}

template <typename T>
std::vector<std::vector<std::uint64_t>> ForwardCache<T>::usage() const {
  std::vector<std::vector<std::uint64_t>> out;
  for (const auto& m : moe) out.push_back(m.usage);
  return out;
}

template <typename T>
ForwardCache<T> encode_rows(const Model<T>& model, std::span<const std::size_t> token_rows,
                            const RouteTrace* frozen) {
  const auto& cfg = model.config;
  if (token_rows.empty()) throw DataError("encode: sequence has no valid tokens");
  if (token_rows.size() > cfg.L_max) throw DataError("encode: sequence longer than L_max");
  ForwardCache<T> c;
  c.n = token_rows.size();
  c.offset = cfg.L_max - c.n;
  const auto n = static_cast<Eigen::Index>(c.n);
  const auto D = static_cast<Eigen::Index>(cfg.hidden_dim);
  Mat<T> x = item_dnn_forward(model, token_rows, &c.items);
  x += model.params.pos_embedding.block(static_cast<Eigen::Index>(c.offset), 0, n, D);
  c.hstu.resize(cfg.n_layers);
  if (cfg.use_moe) c.moe.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    x = hstu_block_forward(cfg, model.params.layers[l], x, &c.hstu[l]);
    if (cfg.use_moe)
      x = moe_layer_forward(cfg, model.params.layers[l], x, frozen ? &(*frozen)[l] : nullptr,
                            c.moe[l]);
  }
  c.pre_final = x;
  c.H = layer_norm_forward(x, model.params.final_ln_g, model.params.final_ln_b, c.final_ln);
  c.h_T = c.H.row(n - 1).transpose();
  return c;
}

template <typename T>
ForwardCache<T> encode_sequence(const Model<T>& model, const PaddedRow& row,
                                const RouteTrace* frozen) {
  if (row.tokens.size() != model.config.L_max)
    throw DataError("encode: row is not padded to L_max");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < row.tokens.size(); ++i)
    if (row.valid[i]) rows.push_back(model.items.row(row.tokens[i]));
  return encode_rows(model, std::span<const std::size_t>(rows), frozen);
}

template <typename T>
void encode_backward(const Model<T>& model, const ForwardCache<T>& c, const Mat<T>& d_H,
                     T balance_weight, Parameters<T>& grads) {
  const auto& cfg = model.config;
  const auto& p = model.params;
  Mat<T> d_x = layer_norm_backward(d_H, c.final_ln, p.final_ln_g, grads.final_ln_g, grads.final_ln_b);
  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    if (cfg.use_moe)
      d_x = moe_layer_backward(cfg, p.layers[l], c.moe[l], d_x, balance_weight, grads.layers[l]);
    d_x = hstu_block_backward(cfg, p.layers[l], c.hstu[l], d_x, grads.layers[l]);
  }
  const auto n = static_cast<Eigen::Index>(c.n);
  grads.pos_embedding.block(static_cast<Eigen::Index>(c.offset), 0, n, d_x.cols()) += d_x;
  item_dnn_backward(model, c.items, d_x, grads);
}

// ---------------------------------------------------------------------------
// Heads

template <typename T>
Vec<T> decode_sid1_logits(const Parameters<T>& p, const Mat<T>& H, const Vec<T>& h_T,
                          Sid1Cache<T>* cache) {
  Sid1Cache<T> local;
  Sid1Cache<T>& c = cache ? *cache : local;
  const T scale = T(1) / std::sqrt(static_cast<T>(h_T.size()));
  c.q = p.sid1_wq * h_T;
  c.keys = H * p.sid1_wk.transpose();
  c.values = H * p.sid1_wv.transpose();
  const Vec<T> scores = (c.keys * c.q) * scale;
  const T mx = scores.maxCoeff();
  c.weights = (scores.array() - mx).exp().matrix();
  c.weights /= c.weights.sum();
  c.context = c.values.transpose() * c.weights;
  c.logits = p.sid1_proj * c.context + p.sid1_bias;
  return c.logits;
}

template <typename T>
void decode_sid1_backward(const Parameters<T>& p, const Mat<T>& H, const Vec<T>& h_T,
                          const Sid1Cache<T>& c, const Vec<T>& d_logits, Mat<T>& d_H,
                          Vec<T>& d_h, Parameters<T>& g) {
  const T scale = T(1) / std::sqrt(static_cast<T>(h_T.size()));
  g.sid1_proj.noalias() += d_logits * c.context.transpose();
  g.sid1_bias += d_logits;
  const Vec<T> d_context = p.sid1_proj.transpose() * d_logits;
  const Vec<T> d_w = c.values * d_context;
  const Mat<T> d_values = c.weights * d_context.transpose();
  const T dot = c.weights.dot(d_w);
  const Vec<T> d_scores = c.weights.cwiseProduct((d_w.array() - dot).matrix()) * scale;
  const Vec<T> d_q = c.keys.transpose() * d_scores;
  const Mat<T> d_keys = d_scores * c.q.transpose();
  g.sid1_wq.noalias() += d_q * h_T.transpose();
  g.sid1_wk.noalias() += d_keys.transpose() * H;
  g.sid1_wv.noalias() += d_values.transpose() * H;
  d_H.noalias() += d_keys * p.sid1_wk;
  d_H.noalias() += d_values * p.sid1_wv;
  d_h.noalias() += p.sid1_wq.transpose() * d_q;
}

template <typename T>
Vec<T> decode_sid2_logits(const Parameters<T>& p, const Vec<T>& h_T, int c1, Sid2Cache<T>* cache) {
  if (c1 < 0 || c1 >= p.code_embedding.rows())
    throw std::out_of_range("decode_sid2_logits: c1 outside [0, K)");
  Sid2Cache<T> local;
  Sid2Cache<T>& c = cache ? *cache : local;
  const Eigen::Index D = h_T.size();
  c.c1 = c1;
  c.input.resize(2 * D);
  c.input.head(D) = h_T;
  c.input.tail(D) = p.code_embedding.row(c1).transpose();
  c.pre = p.sid2_w1 * c.input + p.sid2_b1;
  c.act = c.pre.unaryExpr([](T v) { return silu(v); });
  c.query = p.sid2_w2 * c.act + p.sid2_b2;
  c.logits = p.sid2_proj * c.query + p.sid2_bias;
  return c.logits;
}

template <typename T>
void decode_sid2_backward(const Parameters<T>& p, const Sid2Cache<T>& c, const Vec<T>& d_logits,
                          Vec<T>& d_h, Parameters<T>& g) {
  const Eigen::Index D = d_h.size();
  g.sid2_proj.noalias() += d_logits * c.query.transpose();
  g.sid2_bias += d_logits;
  const Vec<T> d_query = p.sid2_proj.transpose() * d_logits;
  g.sid2_w2.noalias() += d_query * c.act.transpose();
  g.sid2_b2 += d_query;
  const Vec<T> d_pre =
      (p.sid2_w2.transpose() * d_query).cwiseProduct(c.pre.unaryExpr([](T v) { return silu_grad(v); }));
  g.sid2_w1.noalias() += d_pre * c.input.transpose();
  g.sid2_b1 += d_pre;
  const Vec<T> d_input = p.sid2_w1.transpose() * d_pre;
  d_h += d_input.head(D);
  g.code_embedding.row(c.c1) += d_input.tail(D).transpose();
}

template <typename T>
Vec<T> user_embedding(const Parameters<T>& p, const Vec<T>& h_T, UserCache<T>* cache) {
  UserCache<T> local;
  UserCache<T>& c = cache ? *cache : local;
  c.raw = p.user_w * h_T + p.user_b;
  c.norm = std::max(c.raw.norm(), static_cast<T>(1e-12));
  c.unit = c.raw / c.norm;
  return c.unit;
}

template <typename T>
void user_embedding_backward(const Parameters<T>& p, const Vec<T>& h_T, const UserCache<T>& c,
                             const Vec<T>& d_unit, Vec<T>& d_h, Parameters<T>& g) {
  const Vec<T> d_raw = (d_unit - c.unit * c.unit.dot(d_unit)) / c.norm;
  g.user_w.noalias() += d_raw * h_T.transpose();
  g.user_b += d_raw;
  d_h.noalias() += p.user_w.transpose() * d_raw;
}

template <typename T>
Mat<T> item_embeddings(const Model<T>& model, std::span<const std::size_t> rows) {
  Mat<T> out = item_dnn_forward(model, rows, static_cast<ItemDnnCache<T>*>(nullptr));
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const T norm = std::max(out.row(r).norm(), static_cast<T>(1e-12));
    out.row(r) /= norm;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::string tensor_file(const std::string& name) { return name + ".bin"; }

template <typename F>
void for_each_tensor(const Parameters<float>& p, F&& f) {
  p.visit([&](const std::string& name, const auto& t) {
    MatF m(t.rows(), t.cols());
    std::copy(t.data(), t.data() + t.size(), m.data());
    f(name, m);
  });
}

void fill_tensors(Parameters<float>& p, const std::filesystem::path& dir, const std::string& prefix,
                  const std::map<std::string, json>& entries) {
  p.visit([&](const std::string& name, auto& t) {
    const std::string full = prefix + name;
    auto it = entries.find(full);
    if (it == entries.end()) throw FormatError("checkpoint is missing tensor " + full);
    const MatF m = load_matrix(dir / it->second.at("file").get<std::string>());
    if (m.rows() != t.rows() || m.cols() != t.cols())
      throw FormatError("checkpoint tensor " + full + " has the wrong shape");
    std::copy(m.data(), m.data() + m.size(), t.data());
  });
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model,
                     const std::vector<std::pair<std::string, const Parameters<float>*>>& extra,
                     const json* train_state) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "onepiece-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = model.config;
  manifest["vocab"] = model.items.ids;
  json tensors = json::array();
  auto save_group = [&](const std::string& prefix, const Parameters<float>& p) {
    for_each_tensor(p, [&](const std::string& name, const MatF& m) {
      const std::string full = prefix + name;
      save_matrix(dir / tensor_file(full), m);
      tensors.push_back({{"name", full}, {"file", tensor_file(full)}, {"rows", m.rows()}, {"cols", m.cols()}});
    });
  };
  save_group("", model.params);
  for (const auto& [prefix, p] : extra) save_group(prefix + ".", *p);
  manifest["tensors"] = std::move(tensors);
  save_matrix(dir / "buffer.item_side.bin", model.items.side);
  manifest["buffers"] = {{"item_side", "buffer.item_side.bin"}};
  if (train_state) manifest["train_state"] = *train_state;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw FormatError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Model<float> load_checkpoint(const std::filesystem::path& dir,
                             const std::vector<std::pair<std::string, Parameters<float>*>>& extra,
                             json* train_state) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no checkpoint manifest in " + dir.string());
  const json manifest = json::parse(in);
  if (manifest.value("format", "") != "onepiece-checkpoint")
    throw FormatError("not a checkpoint manifest: " + dir.string());
  Model<float> model;
  model.config = manifest.at("config").get<ModelConfig>();
  model.config.validate();
  model.items.ids = manifest.at("vocab").get<std::vector<ItemId>>();
  for (std::size_t r = 0; r < model.items.ids.size(); ++r) model.items.row_of.emplace(model.items.ids[r], r);
  model.items.side = load_matrix(dir / manifest.at("buffers").at("item_side").get<std::string>());
  if (static_cast<std::size_t>(model.items.side.rows()) != model.items.ids.size())
    throw FormatError("item side buffer does not match vocabulary");
  model.params = shape_parameters<float>(model.config, model.items.ids.size());
  std::map<std::string, json> entries;
  for (const auto& t : manifest.at("tensors")) entries.emplace(t.at("name").get<std::string>(), t);
  fill_tensors(model.params, dir, "", entries);
  for (const auto& [prefix, p] : extra) {
    *p = Parameters<float>::zeros_like(model.params);
    fill_tensors(*p, dir, prefix + ".", entries);
  }
  if (train_state) *train_state = manifest.value("train_state", json::object());
  return model;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define ONEPIECE_INSTANTIATE(T)                                                                    \
  template struct Parameters<T>;                                                                   \
  template struct ItemTable<T>;                                                                    \
  template struct ForwardCache<T>;                                                                 \
  template Model<T> init_model<T>(const ModelConfig&, ItemTable<T>, std::uint64_t);                \
  template Mat<T> layer_norm_forward<T>(const Mat<T>&, const Vec<T>&, const Vec<T>&, LnCache<T>&); \
  template Mat<T> layer_norm_backward<T>(const Mat<T>&, const LnCache<T>&, const Vec<T>&, Vec<T>&, \
                                         Vec<T>&);                                                 \
  template Mat<T> item_dnn_forward<T>(const Model<T>&, std::span<const std::size_t>,               \
                                      ItemDnnCache<T>*);                                           \
  template Mat<T> item_dnn_forward_raw<T>(const Parameters<T>&, const Mat<T>&, ItemDnnCache<T>*);  \
  template void item_dnn_backward<T>(const Model<T>&, const ItemDnnCache<T>&, const Mat<T>&,       \
                                     Parameters<T>&);                                              \
  template Mat<T> hstu_block_forward<T>(const ModelConfig&, const LayerParams<T>&, const Mat<T>&,  \
                                        HstuCache<T>*);                                            \
  template Mat<T> hstu_block_backward<T>(const ModelConfig&, const LayerParams<T>&,                \
                                         const HstuCache<T>&, const Mat<T>&, LayerParams<T>&);     \
  template Vec<T> moe_forward<T>(const LayerParams<T>&, const Vec<T>&, std::size_t,                \
                                 std::vector<std::uint64_t>&);                                     \
  template Mat<T> moe_layer_forward<T>(const ModelConfig&, const LayerParams<T>&, const Mat<T>&,   \
                                       const std::vector<int>*, MoeCache<T>&);                     \
  template Mat<T> moe_layer_backward<T>(const ModelConfig&, const LayerParams<T>&,                 \
                                        const MoeCache<T>&, const Mat<T>&, T, LayerParams<T>&);    \
  template T moe_balance_loss<T>(const ModelConfig&, const MoeCache<T>&);                          \
  template ForwardCache<T> encode_sequence<T>(const Model<T>&, const PaddedRow&,                   \
                                              const RouteTrace*);                                  \
  template ForwardCache<T> encode_rows<T>(const Model<T>&, std::span<const std::size_t>,           \
                                          const RouteTrace*);                                      \
  template void encode_backward<T>(const Model<T>&, const ForwardCache<T>&, const Mat<T>&, T,      \
                                   Parameters<T>&);                                                \
  template Vec<T> decode_sid1_logits<T>(const Parameters<T>&, const Mat<T>&, const Vec<T>&,        \
                                        Sid1Cache<T>*);                                            \
  template void decode_sid1_backward<T>(const Parameters<T>&, const Mat<T>&, const Vec<T>&,        \
                                        const Sid1Cache<T>&, const Vec<T>&, Mat<T>&, Vec<T>&,      \
                                        Parameters<T>&);                                           \
  template Vec<T> decode_sid2_logits<T>(const Parameters<T>&, const Vec<T>&, int, Sid2Cache<T>*);  \
  template void decode_sid2_backward<T>(const Parameters<T>&, const Sid2Cache<T>&, const Vec<T>&,  \
                                        Vec<T>&, Parameters<T>&);                                  \
  template Vec<T> user_embedding<T>(const Parameters<T>&, const Vec<T>&, UserCache<T>*);           \
  template void user_embedding_backward<T>(const Parameters<T>&, const Vec<T>&,                    \
                                           const UserCache<T>&, const Vec<T>&, Vec<T>&,            \
                                           Parameters<T>&);                                        \
  template Mat<T> item_embeddings<T>(const Model<T>&, std::span<const std::size_t>);

ONEPIECE_INSTANTIATE(float)
ONEPIECE_INSTANTIATE(double)
#undef ONEPIECE_INSTANTIATE

template Parameters<double> Parameters<float>::cast<double>() const;
template Parameters<float> Parameters<double>::cast<float>() const;
template Parameters<float> Parameters<float>::cast<float>() const;
template Parameters<double> Parameters<double>::cast<double>() const;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;

}  // namespace onepiece
