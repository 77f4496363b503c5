#pragma once

#include "onepiece/data.hpp"
#include "onepiece/model.hpp"
#include "onepiece/tokenizer.hpp"

#include <functional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace onepiece {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PopularityTable {
  std::unordered_map<ItemId, double> Q;
  double smoothing_eps = 1.0;

  double prob(ItemId id) const;
  double log_q(ItemId id) const;
};

/// Q(i) = (count(i) + eps) / sum_j (count(j) + eps) over `vocabulary` (or
/// over the items seen in `sequences` when the vocabulary is empty).
PopularityTable estimate_popularity(const std::vector<UserSequence>& sequences,
                                    const std::vector<ItemId>& vocabulary = {},
                                    double smoothing_eps = 1.0, bool targets_only = false);

struct LossBreakdown {
  double L_con = 0.0;
  double L_c1 = 0.0;
  double L_c2 = 0.0;
  double L_total = 0.0;
  double balance = 0.0;  // auxiliary load-balance term, before weighting
  double hitrate = 0.0;  // in-batch top-10 retrieval rate
  double ndcg = 0.0;
};

template <typename T>
struct InfoNceResult {
  T loss = T(0);
  Mat<T> logits;  // corrected logits; masked duplicates hold -inf
  Mat<T> d_users;
  Mat<T> d_items;
  double hitrate = 0.0;
  double ndcg = 0.0;
};

/// In-batch sampled softmax with LogQ correction over unit-norm rows:
/// logit(u, j) = cos(u, e_j) / tau - log Q(target_j). Other occurrences of a
/// row's own positive item are masked out of its negatives.
template <typename T>
InfoNceResult<T> infonce_logq_loss(const Mat<T>& users, const Mat<T>& items,
                                   std::span<const ItemId> targets, const PopularityTable& Q,
                                   T temperature, bool with_grad = true);

template <typename T>
struct CrossEntropyResult {
  T loss = T(0);
  Mat<T> d_logits;
};

template <typename T>
CrossEntropyResult<T> cross_entropy(const Mat<T>& logits, std::span<const int> targets);

template <typename T>
struct SidLosses {
  CrossEntropyResult<T> level1;
  CrossEntropyResult<T> level2;
};

template <typename T>
SidLosses<T> sid_ce_losses(const Mat<T>& logits1, const Mat<T>& logits2,
                           std::span<const SemanticId> targets);

double total_loss(double L_con, double L_c1, double L_c2, double lambda1, double lambda2);

struct LrSchedule {
  double lr = 1e-3;
  double lr_min = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

/// Linear warmup from 0, then cosine decay to lr_min at total_steps.
double lr_at_step(std::size_t step, const LrSchedule& s);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamWState {
  Parameters<T> m;
  Parameters<T> v;
  std::uint64_t step = 0;
};

template <typename T>
AdamWState<T> adamw_init(const Parameters<T>& params);

/// One AdamW update at learning rate `lr`. Tensors whose name starts with an
/// entry of `frozen` are left untouched (no gradient step, no decay). Throws
/// NumericError on a non-finite gradient before modifying anything.
template <typename T>
void adamw_step(Parameters<T>& params, const Parameters<T>& grads, AdamWState<T>& state,
                const AdamWConfig& config, double lr, const std::set<std::string>* frozen = nullptr);

struct TrainExample {
  std::vector<std::size_t> token_rows;  // vocabulary rows, oldest first, at most L_max
  std::size_t target_row = 0;
  ItemId target = 0;
  SemanticId sid;
};

/// One example per sequence (history -> target); with `prefix_augment`,
/// additionally one per history prefix predicting the following item.
std::vector<TrainExample> make_examples(const ItemTable<float>& items,
                                        const AssignmentTable& assignments,
                                        const std::vector<UserSequence>& sequences,
                                        std::size_t L_max, bool prefix_augment);

struct BatchOptions {
  const std::vector<RouteTrace>* frozen_routes = nullptr;
  unsigned threads = 1;
};

template <typename T>
struct BatchResult {
  LossBreakdown loss;
  T objective = T(0);  // L_total + balance_loss_weight * balance
  std::vector<std::vector<std::uint64_t>> usage;  // per layer
  std::vector<RouteTrace> routes;                 // per example
};

/// Forward (and backward when grads is non-null) of the joint objective.
template <typename T>
BatchResult<T> compute_batch(const Model<T>& model, std::span<const TrainExample> batch,
                             const PopularityTable& Q, Parameters<T>* grads,
                             const BatchOptions& options = {});

/// Tensors the optimizer must leave alone given the loss weights.
std::set<std::string> frozen_tensors(const ModelConfig& config);

struct TrainConfig {
  AdamWConfig optimizer;
  std::size_t warmup_steps = 50;
  double lr_min = 0.0;
  std::size_t batch_size = 128;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: run all epochs
  std::uint64_t seed = 0;
  double smoothing_eps = 1.0;
  bool popularity_targets_only = false;
  bool prefix_augment = true;
  unsigned threads = 1;
};

struct StepLog {
  std::size_t step = 0;  // 1-based
  std::size_t epoch = 0;
  LossBreakdown loss;
  double lr = 0.0;
  std::vector<double> gini;  // per MoE layer, usage of this step
  std::vector<std::vector<std::uint64_t>> usage;
};

std::string metrics_csv_header(std::size_t n_layers);
std::string metrics_csv_row(const StepLog& log);
/// Mean of the last `window` steps (all steps if fewer).
LossBreakdown average_last(const std::vector<StepLog>& logs, std::size_t window = 100);

class Trainer {
 public:
  Trainer(Model<float>& model, std::vector<TrainExample> examples, PopularityTable Q,
          TrainConfig config);

  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const;
  std::size_t step() const { return state_.step; }
  bool done() const { return state_.step >= total_steps(); }

  /// Runs one optimizer step and returns its log row.
  StepLog step_once();
  /// Runs until done() or `max_new_steps` more steps, invoking `on_step` per row.
  std::vector<StepLog> run(const std::function<void(const StepLog&)>& on_step = {},
                           std::size_t max_new_steps = 0);

  AdamWState<float>& optimizer_state() { return state_; }
  const PopularityTable& popularity() const { return Q_; }

 private:
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;

  Model<float>& model_;
  std::vector<TrainExample> examples_;
  PopularityTable Q_;
  TrainConfig config_;
  AdamWState<float> state_;
  std::set<std::string> frozen_;
  std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order_;
};

struct GradCheckEntry {
  std::string tensor;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::vector<std::string> failures;
  bool passed() const { return failures.empty(); }
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-6;
  std::size_t samples_per_tensor = 24;
  std::uint64_t seed = 0;
  /// Test hook applied to the analytic gradients before comparison.
  std::function<void(Parameters<double>&)> corrupt;
};

/// Central finite differences against the analytic gradient of the full
/// objective, with MoE routing held fixed at the unperturbed decisions.
GradCheckReport grad_check(const Model<double>& model, std::span<const TrainExample> batch,
                           const PopularityTable& Q, const GradCheckOptions& options = {});

}  // namespace onepiece
