#include "onepiece/training.hpp"

#include "onepiece/parallel.hpp"
#include "onepiece/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace onepiece {

// ---------------------------------------------------------------------------
// Popularity

double PopularityTable::prob(ItemId id) const {
  auto it = Q.find(id);
  if (it == Q.end()) throw DataError("item " + std::to_string(id) + " has no popularity estimate");
  return it->second;
}

double PopularityTable::log_q(ItemId id) const { return std::log(prob(id)); }

PopularityTable estimate_popularity(const std::vector<UserSequence>& sequences,
                                    const std::vector<ItemId>& vocabulary, double smoothing_eps,
                                    bool targets_only) {
  if (smoothing_eps < 0.0) throw std::invalid_argument("smoothing_eps must be >= 0");
  const auto counts = count_interactions(sequences, targets_only);
  std::vector<ItemId> items = vocabulary;
  if (items.empty()) {
    for (const auto& [id, c] : counts) items.push_back(id);
    std::sort(items.begin(), items.end());
  }
  if (items.empty()) throw DataError("estimate_popularity: no interactions");
  PopularityTable table;
  table.smoothing_eps = smoothing_eps;
  double total = 0.0;
  for (ItemId id : items) {
    auto it = counts.find(id);
    const double c = (it == counts.end() ? 0.0 : static_cast<double>(it->second)) + smoothing_eps;
    table.Q[id] = c;
    total += c;
  }
  if (total <= 0.0) throw DataError("estimate_popularity: zero total mass (use smoothing_eps > 0)");
  for (auto& [id, q] : table.Q) q /= total;
  return table;
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
InfoNceResult<T> infonce_logq_loss(const Mat<T>& users, const Mat<T>& items,
                                   std::span<const ItemId> targets, const PopularityTable& Q,
                                   T temperature, bool with_grad) {
  const Eigen::Index B = users.rows();
  if (B == 0 || items.rows() != B || static_cast<Eigen::Index>(targets.size()) != B)
    throw std::invalid_argument("infonce: batch shapes disagree");
  if (!(temperature > T(0))) throw std::invalid_argument("infonce: temperature must be > 0");
  InfoNceResult<T> r;
  const T neg_inf = -std::numeric_limits<T>::infinity();
  r.logits = (users * items.transpose()) / temperature;
  std::vector<T> log_q(static_cast<std::size_t>(B));
  for (Eigen::Index j = 0; j < B; ++j) log_q[static_cast<std::size_t>(j)] = static_cast<T>(Q.log_q(targets[static_cast<std::size_t>(j)]));
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index j = 0; j < B; ++j) {
      if (j != b && targets[static_cast<std::size_t>(j)] == targets[static_cast<std::size_t>(b)]) r.logits(b, j) = neg_inf;
      else r.logits(b, j) -= log_q[static_cast<std::size_t>(j)];
    }

  Mat<T> d_logits = Mat<T>::Zero(B, B);
  T loss = T(0);
  double hits = 0.0, ndcg = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto row = r.logits.row(b);
    const T mx = row.maxCoeff();
    T z = T(0);
    for (Eigen::Index j = 0; j < B; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    loss += lse - row[b];
    for (Eigen::Index j = 0; j < B; ++j) d_logits(b, j) = std::exp(row[j] - lse);
    d_logits(b, b) -= T(1);
    std::size_t rank = 1;
    for (Eigen::Index j = 0; j < B; ++j)
      if (row[j] > row[b]) ++rank;
    if (rank <= 10) {
      hits += 1.0;
      ndcg += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
    }
  }
  r.loss = loss / static_cast<T>(B);
  r.hitrate = hits / static_cast<double>(B);
  r.ndcg = ndcg / static_cast<double>(B);
  if (with_grad) {
    d_logits /= static_cast<T>(B);
    r.d_users = d_logits * items / temperature;
    r.d_items = d_logits.transpose() * users / temperature;
  }
  return r;
}

template <typename T>
CrossEntropyResult<T> cross_entropy(const Mat<T>& logits, std::span<const int> targets) {
  const Eigen::Index B = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != B)
    throw std::invalid_argument("cross_entropy: target count mismatch");
  CrossEntropyResult<T> r;
  r.d_logits.resize(B, logits.cols());
  T loss = T(0);
  for (Eigen::Index b = 0; b < B; ++b) {
    const int t = targets[static_cast<std::size_t>(b)];
    if (t < 0 || t >= logits.cols()) throw std::out_of_range("cross_entropy: target outside [0, K)");
    const auto row = logits.row(b);
    const T mx = row.maxCoeff();
    const T lse = mx + std::log((row.array() - mx).exp().sum());
    loss += lse - row[t];
    r.d_logits.row(b) = (row.array() - lse).exp().matrix();
    r.d_logits(b, t) -= T(1);
  }
  if (B > 0) {
    r.loss = loss / static_cast<T>(B);
    r.d_logits /= static_cast<T>(B);
  }
  return r;
}

template <typename T>
SidLosses<T> sid_ce_losses(const Mat<T>& logits1, const Mat<T>& logits2,
                           std::span<const SemanticId> targets) {
  std::vector<int> t1, t2;
  for (const auto& s : targets) {
    t1.push_back(s.c1);
    t2.push_back(s.c2);
  }
  return {cross_entropy(logits1, std::span<const int>(t1)), cross_entropy(logits2, std::span<const int>(t2))};
}

double total_loss(double L_con, double L_c1, double L_c2, double lambda1, double lambda2) {
  return L_con + lambda1 * L_c1 + lambda2 * L_c2;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

double lr_at_step(std::size_t step, const LrSchedule& s) {
  if (s.warmup_steps > 0 && step < s.warmup_steps)
    return s.lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return s.lr_min;
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  if (span <= 0.0) return s.lr_min;
  const double progress = static_cast<double>(step - s.warmup_steps) / span;
  return s.lr_min + 0.5 * (s.lr - s.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamWState<T> adamw_init(const Parameters<T>& params) {
  return {Parameters<T>::zeros_like(params), Parameters<T>::zeros_like(params), 0};
}

namespace {

bool is_frozen(const std::string& name, const std::set<std::string>* frozen) {
  if (!frozen) return false;
  for (const auto& prefix : *frozen)
    if (name.rfind(prefix, 0) == 0) return true;
  return false;
}

template <typename T>
std::vector<T*> tensor_data(Parameters<T>& p) {
  std::vector<T*> out;
  p.visit([&](const std::string&, auto& t) { out.push_back(t.data()); });
  return out;
}

template <typename T>
std::vector<const T*> tensor_data(const Parameters<T>& p) {
  std::vector<const T*> out;
  p.visit([&](const std::string&, const auto& t) { out.push_back(t.data()); });
  return out;
}

}  // namespace

template <typename T>
void adamw_step(Parameters<T>& params, const Parameters<T>& grads, AdamWState<T>& state,
                const AdamWConfig& cfg, double lr, const std::set<std::string>* frozen) {
  grads.visit([&](const std::string& name, const auto& g) {
    if (!g.allFinite()) throw NumericError("non-finite gradient in tensor " + name);
  });
  ++state.step;
  const auto t = static_cast<double>(state.step);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps), step = static_cast<T>(lr);
  const T decay = static_cast<T>(lr * cfg.weight_decay);
  const auto g_data = tensor_data(grads);
  const auto m_data = tensor_data(state.m);
  const auto v_data = tensor_data(state.v);
  std::size_t i = 0;
  params.visit([&](const std::string& name, auto& p) {
    const std::size_t k = i++;
    if (is_frozen(name, frozen)) return;
    const T* g = g_data[k];
    T* m = m_data[k];
    T* v = v_data[k];
    T* w = p.data();
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / bc1;
      const T vhat = v[j] / bc2;
      w[j] -= step * mhat / (std::sqrt(vhat) + eps) + decay * w[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Examples and batches

std::vector<TrainExample> make_examples(const ItemTable<float>& items,
                                        const AssignmentTable& assignments,
                                        const std::vector<UserSequence>& sequences,
                                        std::size_t L_max, bool prefix_augment) {
  std::vector<TrainExample> out;
  auto emit = [&](const std::vector<ItemId>& history, std::size_t len, ItemId target) {
    TrainExample ex;
    const std::size_t begin = len > L_max ? len - L_max : 0;
    for (std::size_t i = begin; i < len; ++i) ex.token_rows.push_back(items.row(history[i]));
    ex.target = target;
    ex.target_row = items.row(target);
    ex.sid = assignments.at(target);
    out.push_back(std::move(ex));
  };
  for (const auto& s : sequences) {
    if (s.history.empty() || !s.target) continue;
    if (prefix_augment)
      for (std::size_t k = 1; k < s.history.size(); ++k) emit(s.history, k, s.history[k]);
    emit(s.history, s.history.size(), *s.target);
  }
  return out;
}

std::set<std::string> frozen_tensors(const ModelConfig& config) {
  std::set<std::string> out;
  if (config.lambda1 == 0.0) out.insert("sid1.");
  if (config.lambda2 == 0.0) out.insert("sid2.");
  return out;
}

template <typename T>
BatchResult<T> compute_batch(const Model<T>& model, std::span<const TrainExample> batch,
                             const PopularityTable& Q, Parameters<T>* grads,
                             const BatchOptions& options) {
  const auto& cfg = model.config;
  const std::size_t B = batch.size();
  if (B == 0) throw std::invalid_argument("compute_batch: empty batch");
  if (options.frozen_routes && options.frozen_routes->size() != B)
    throw std::invalid_argument("compute_batch: frozen routes do not match batch");
  const auto D = static_cast<Eigen::Index>(cfg.hidden_dim);
  const auto K = static_cast<Eigen::Index>(cfg.K);

  // Item tower over the batch targets.
  std::vector<std::size_t> target_rows(B);
  std::vector<ItemId> targets(B);
  std::vector<SemanticId> sids(B);
  for (std::size_t b = 0; b < B; ++b) {
    target_rows[b] = batch[b].target_row;
    targets[b] = batch[b].target;
    sids[b] = batch[b].sid;
  }
  ItemDnnCache<T> item_cache;
  const Mat<T> item_raw = item_dnn_forward(model, std::span<const std::size_t>(target_rows), &item_cache);
  Mat<T> item_unit = item_raw;
  Vec<T> item_norm(static_cast<Eigen::Index>(B));
  for (Eigen::Index b = 0; b < item_unit.rows(); ++b) {
    item_norm[b] = std::max(item_unit.row(b).norm(), static_cast<T>(1e-12));
    item_unit.row(b) /= item_norm[b];
  }

  // Sequence side.
  std::vector<ForwardCache<T>> enc(B);
  std::vector<UserCache<T>> user(B);
  std::vector<Sid1Cache<T>> sid1(B);
  std::vector<Sid2Cache<T>> sid2(B);
  Mat<T> users(static_cast<Eigen::Index>(B), D);
  Mat<T> logits1(static_cast<Eigen::Index>(B), K), logits2(static_cast<Eigen::Index>(B), K);
  std::vector<T> balance(B, T(0));
  parallel_for(B, options.threads, [&](std::size_t b, unsigned) {
    const auto* frozen = options.frozen_routes ? &(*options.frozen_routes)[b] : nullptr;
    enc[b] = encode_rows(model, std::span<const std::size_t>(batch[b].token_rows), frozen);
    users.row(static_cast<Eigen::Index>(b)) = user_embedding(model.params, enc[b].h_T, &user[b]).transpose();
    logits1.row(static_cast<Eigen::Index>(b)) =
        decode_sid1_logits(model.params, enc[b].H, enc[b].h_T, &sid1[b]).transpose();
    logits2.row(static_cast<Eigen::Index>(b)) =
        decode_sid2_logits(model.params, enc[b].h_T, batch[b].sid.c1, &sid2[b]).transpose();
    if (cfg.use_moe)
      for (const auto& m : enc[b].moe) balance[b] += moe_balance_loss(cfg, m);
  });

  const bool with_grad = grads != nullptr;
  const auto nce = infonce_logq_loss(users, item_unit, std::span<const ItemId>(targets), Q,
                                     static_cast<T>(cfg.temperature), with_grad);
  const auto ce = sid_ce_losses(logits1, logits2, std::span<const SemanticId>(sids));

  BatchResult<T> result;
  result.loss.L_con = static_cast<double>(nce.loss);
  result.loss.L_c1 = static_cast<double>(ce.level1.loss);
  result.loss.L_c2 = static_cast<double>(ce.level2.loss);
  result.loss.L_total = total_loss(result.loss.L_con, result.loss.L_c1, result.loss.L_c2,
                                   cfg.lambda1, cfg.lambda2);
  result.loss.hitrate = nce.hitrate;
  result.loss.ndcg = nce.ndcg;
  T balance_mean = T(0);
  for (T v : balance) balance_mean += v;
  balance_mean /= static_cast<T>(B);
  result.loss.balance = static_cast<double>(balance_mean);
  result.objective = nce.loss + static_cast<T>(cfg.lambda1) * ce.level1.loss +
                     static_cast<T>(cfg.lambda2) * ce.level2.loss +
                     static_cast<T>(cfg.balance_loss_weight) * balance_mean;
  if (cfg.use_moe) {
    result.usage.assign(cfg.n_layers, std::vector<std::uint64_t>(cfg.moe.n_experts, 0));
    for (const auto& e : enc)
      for (std::size_t l = 0; l < cfg.n_layers; ++l)
        for (std::size_t x = 0; x < cfg.moe.n_experts; ++x) result.usage[l][x] += e.moe[l].usage[x];
  }
  result.routes.reserve(B);
  for (const auto& e : enc) result.routes.push_back(e.routes());
  if (!with_grad) return result;

  // Item tower backward through the row normalization.
  Mat<T> d_item_raw(static_cast<Eigen::Index>(B), D);
  for (Eigen::Index b = 0; b < d_item_raw.rows(); ++b) {
    const auto u = item_unit.row(b);
    const auto du = nce.d_items.row(b);
    d_item_raw.row(b) = (du - u * u.dot(du)) / item_norm[b];
  }
  item_dnn_backward(model, item_cache, d_item_raw, *grads);

  const T lambda1 = static_cast<T>(cfg.lambda1);
  const T lambda2 = static_cast<T>(cfg.lambda2);
  const T balance_weight = static_cast<T>(cfg.balance_loss_weight) / static_cast<T>(B);
  const unsigned workers = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(B)));
  std::vector<Parameters<T>> partial;
  if (workers > 1) partial.assign(workers, Parameters<T>::zeros_like(*grads));
  parallel_for(B, workers, [&](std::size_t b, unsigned w) {
    Parameters<T>& g = workers > 1 ? partial[w] : *grads;
    const auto& e = enc[b];
    Mat<T> d_H = Mat<T>::Zero(e.H.rows(), D);
    Vec<T> d_h = Vec<T>::Zero(D);
    user_embedding_backward(model.params, e.h_T, user[b],
                            Vec<T>(nce.d_users.row(static_cast<Eigen::Index>(b)).transpose()), d_h, g);
    if (lambda1 != T(0))
      decode_sid1_backward(model.params, e.H, e.h_T, sid1[b],
                           Vec<T>(lambda1 * ce.level1.d_logits.row(static_cast<Eigen::Index>(b)).transpose()),
                           d_H, d_h, g);
    if (lambda2 != T(0))
      decode_sid2_backward(model.params, sid2[b],
                           Vec<T>(lambda2 * ce.level2.d_logits.row(static_cast<Eigen::Index>(b)).transpose()),
                           d_h, g);
    d_H.row(d_H.rows() - 1) += d_h.transpose();
    encode_backward(model, e, d_H, balance_weight, g);
  });
  for (const auto& p : partial) grads->add(p);
  return result;
}

// ---------------------------------------------------------------------------
// Logging

std::string metrics_csv_header(std::size_t n_layers) {
  std::string h = "step,epoch,L_con,L_c1,L_c2,L_total,hitrate,ndcg,lr";
  for (std::size_t l = 0; l < n_layers; ++l) h += ",gini_layer_" + std::to_string(l);
  return h + "\n";
}

std::string metrics_csv_row(const StepLog& log) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", log.step, log.epoch,
                log.loss.L_con, log.loss.L_c1, log.loss.L_c2, log.loss.L_total, log.loss.hitrate,
                log.loss.ndcg, log.lr);
  std::string row = buf;
  for (double g : log.gini) {
    std::snprintf(buf, sizeof buf, ",%.9g", g);
    row += buf;
  }
  return row + "\n";
}

LossBreakdown average_last(const std::vector<StepLog>& logs, std::size_t window) {
  LossBreakdown avg;
  if (logs.empty()) return avg;
  const std::size_t n = std::min(window, logs.size());
  for (std::size_t i = logs.size() - n; i < logs.size(); ++i) {
    const auto& l = logs[i].loss;
    avg.L_con += l.L_con;
    avg.L_c1 += l.L_c1;
    avg.L_c2 += l.L_c2;
    avg.L_total += l.L_total;
    avg.balance += l.balance;
    avg.hitrate += l.hitrate;
    avg.ndcg += l.ndcg;
  }
  const auto d = static_cast<double>(n);
  avg.L_con /= d;
  avg.L_c1 /= d;
  avg.L_c2 /= d;
  avg.L_total /= d;
  avg.balance /= d;
  avg.hitrate /= d;
  avg.ndcg /= d;
  return avg;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(Model<float>& model, std::vector<TrainExample> examples, PopularityTable Q,
                 TrainConfig config)
    : model_(model),
      examples_(std::move(examples)),
      Q_(std::move(Q)),
      config_(std::move(config)),
      state_(adamw_init(model.params)),
      frozen_(frozen_tensors(model.config)) {
  if (examples_.empty()) throw DataError("trainer: no training examples");
  if (config_.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(config_.optimizer.lr > 0.0)) throw std::invalid_argument("lr must be > 0");
}

std::size_t Trainer::steps_per_epoch() const {
  return std::max<std::size_t>(1, examples_.size() / config_.batch_size);
}

std::size_t Trainer::total_steps() const {
  const std::size_t full = steps_per_epoch() * config_.epochs;
  return config_.max_steps == 0 ? full : config_.max_steps;
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(examples_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(config_.seed, 0xE90Cull, epoch);
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

StepLog Trainer::step_once() {
  const std::size_t spe = steps_per_epoch();
  const std::size_t epoch = state_.step / spe;
  const std::size_t index = state_.step % spe;
  if (epoch != cached_epoch_) {
    order_ = epoch_order(epoch);
    cached_epoch_ = epoch;
  }
  const std::size_t bs = std::min(config_.batch_size, examples_.size());
  std::vector<TrainExample> batch;
  batch.reserve(bs);
  for (std::size_t i = 0; i < bs; ++i) batch.push_back(examples_[order_[index * bs + i]]);

  Parameters<float> grads = Parameters<float>::zeros_like(model_.params);
  BatchOptions options;
  options.threads = config_.threads;
  const auto result = compute_batch(model_, std::span<const TrainExample>(batch), Q_, &grads, options);

  LrSchedule schedule{config_.optimizer.lr, config_.lr_min, config_.warmup_steps, total_steps()};
  const double lr = lr_at_step(state_.step + 1, schedule);
  adamw_step(model_.params, grads, state_, config_.optimizer, lr, &frozen_);

  StepLog log;
  log.step = state_.step;
  log.epoch = epoch;
  log.loss = result.loss;
  log.lr = lr;
  log.usage = result.usage;
  for (const auto& u : result.usage) log.gini.push_back(gini(std::span<const std::uint64_t>(u)));
  return log;
}

std::vector<StepLog> Trainer::run(const std::function<void(const StepLog&)>& on_step,
                                  std::size_t max_new_steps) {
  std::vector<StepLog> logs;
  while (!done() && (max_new_steps == 0 || logs.size() < max_new_steps)) {
    logs.push_back(step_once());
    if (on_step) on_step(logs.back());
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport grad_check(const Model<double>& model, std::span<const TrainExample> batch,
                           const PopularityTable& Q, const GradCheckOptions& options) {
  Parameters<double> analytic = Parameters<double>::zeros_like(model.params);
  const auto base = compute_batch(model, batch, Q, &analytic);
  if (options.corrupt) options.corrupt(analytic);
  BatchOptions frozen;
  frozen.frozen_routes = &base.routes;

  Model<double> work = model;
  const auto analytic_data = tensor_data(static_cast<const Parameters<double>&>(analytic));
  std::vector<std::pair<std::string, std::pair<double*, Eigen::Index>>> tensors;
  work.params.visit([&](const std::string& name, auto& t) {
    tensors.push_back({name, {t.data(), t.size()}});
  });

  auto objective = [&] { return compute_batch<double>(work, batch, Q, nullptr, frozen).objective; };

  GradCheckReport report;
  Rng rng = Rng::derive(options.seed, 0x6C4Eull);
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto& [name, view] = tensors[k];
    const auto [data, size] = view;
    std::vector<Eigen::Index> indices;
    if (static_cast<std::size_t>(size) <= options.samples_per_tensor) {
      for (Eigen::Index i = 0; i < size; ++i) indices.push_back(i);
    } else {
      std::set<Eigen::Index> picked;
      while (picked.size() < options.samples_per_tensor)
        picked.insert(static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(size))));
      indices.assign(picked.begin(), picked.end());
    }
    GradCheckEntry entry;
    entry.tensor = name;
    for (Eigen::Index i : indices) {
      const double orig = data[i];
      const double h = options.step * std::max(1.0, std::abs(orig));
      data[i] = orig + h;
      const double plus = objective();
      data[i] = orig - h;
      const double minus = objective();
      data[i] = orig;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic_data[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
      entry.max_abs_analytic = std::max(entry.max_abs_analytic, std::abs(a));
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    if (entry.max_rel_error > options.tolerance) report.failures.push_back(name);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

// ---------------------------------------------------------------------------

#define ONEPIECE_INSTANTIATE(T)                                                                   \
  template InfoNceResult<T> infonce_logq_loss<T>(const Mat<T>&, const Mat<T>&,                    \
                                                 std::span<const ItemId>, const PopularityTable&, \
                                                 T, bool);                                        \
  template CrossEntropyResult<T> cross_entropy<T>(const Mat<T>&, std::span<const int>);           \
  template SidLosses<T> sid_ce_losses<T>(const Mat<T>&, const Mat<T>&,                            \
                                         std::span<const SemanticId>);                            \
  template AdamWState<T> adamw_init<T>(const Parameters<T>&);                                     \
  template void adamw_step<T>(Parameters<T>&, const Parameters<T>&, AdamWState<T>&,               \
                              const AdamWConfig&, double, const std::set<std::string>*);          \
  template BatchResult<T> compute_batch<T>(const Model<T>&, std::span<const TrainExample>,        \
                                           const PopularityTable&, Parameters<T>*,                \
                                           const BatchOptions&);

ONEPIECE_INSTANTIATE(float)
ONEPIECE_INSTANTIATE(double)
#undef ONEPIECE_INSTANTIATE

}  // namespace onepiece
