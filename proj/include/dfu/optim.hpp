#pragma once

// Adam optimizer, step-down learning-rate schedule, and the mini-batch
// training loop over a network. Batch gradients are means, so the learning
// rate keeps the same meaning at any batch size.

#include <dfu/network.hpp>
#include <dfu/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfu {

struct AdamState {
  std::map<std::string, Tensor> m;  // first moments, shapes mirror the parameters
  std::map<std::string, Tensor> v;  // second moments
  long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline AdamState make_adam_state(const Params& params) {
  AdamState s;
  for (const auto& [name, p] : params) {
    s.m.emplace(name, Tensor(p.shape()));
    s.v.emplace(name, Tensor(p.shape()));
  }
  return s;
}

// One Adam update with bias correction:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
inline void adam_step(Params& params, const Params& grads, AdamState& state, double lr) {
  if (lr <= 0.0) throw std::invalid_argument("adam: learning rate must be positive");
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("adam: missing gradient for " + name);
    const Tensor& g = git->second;
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    if (!g.same_shape(p) || !m.same_shape(p) || !v.same_shape(p))
      throw std::invalid_argument("adam: shape mismatch for " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

struct LrSchedule {
  double base_lr = 1e-3;
  double gamma = 0.1;            // multiplicative decay per stage
  double step_fraction = 0.33;   // fraction of total iterations per stage
  std::size_t total_iterations = 1;

  void validate() const {
    if (base_lr <= 0.0) throw std::invalid_argument("schedule: base_lr must be positive");
    if (gamma <= 0.0 || gamma > 1.0) throw std::invalid_argument("schedule: gamma in (0,1]");
    if (step_fraction <= 0.0 || step_fraction > 1.0)
      throw std::invalid_argument("schedule: step_fraction in (0,1]");
    if (total_iterations == 0) throw std::invalid_argument("schedule: total_iterations > 0");
  }
};

// Stage length is ceil(step_fraction * total); a trailing remainder shorter
// than a full stage stays at the last full stage's rate, so a 33% fraction
// yields exactly three stages.
inline double lr_at(const LrSchedule& schedule, std::size_t iteration) {
  schedule.validate();
  if (iteration >= schedule.total_iterations)
    throw std::invalid_argument("schedule: iteration out of range");
  const std::size_t stage_len = static_cast<std::size_t>(std::ceil(
      schedule.step_fraction * static_cast<double>(schedule.total_iterations) - 1e-9));
  const std::size_t full_stages = schedule.total_iterations / stage_len;
  const std::size_t last_stage = full_stages > 0 ? full_stages - 1 : 0;
  const std::size_t stage = std::min(iteration / stage_len, last_stage);
  return schedule.base_lr * std::pow(schedule.gamma, static_cast<double>(stage));
}

// ---------------------------------------------------------------------------
// Training loop

struct LabeledData {
  Tensor inputs;                    // N x C x H x W
  std::vector<std::size_t> labels;  // class indices, one per sample
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  double base_lr = 1e-3;
  double gamma = 0.1;
  double step_fraction = 0.33;
  std::uint64_t seed = 42;
  double stop_at_accuracy = 0.0;  // early stop once epoch accuracy reaches this; 0 disables
  std::ostream* log = nullptr;    // per-iteration CSV lines: epoch,iteration,lr,loss,train_accuracy
  std::function<void(const EpochStats&, const Params&)> on_epoch_end;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// Fisher-Yates with generator-native draws; stable across standard libraries.
inline void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& gen) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(gen() % i);
    std::swap(idx[i - 1], idx[j]);
  }
}

inline Tensor gather_batch(const Tensor& inputs, const std::vector<std::size_t>& idx,
                           std::size_t begin, std::size_t end) {
  const std::size_t sample = inputs.size() / inputs.extent(0);
  Tensor batch({end - begin, inputs.extent(1), inputs.extent(2), inputs.extent(3)});
  for (std::size_t i = begin; i < end; ++i)
    std::copy_n(inputs.data() + idx[i] * sample, sample, batch.data() + (i - begin) * sample);
  return batch;
}

}  // namespace detail

// Seeded-shuffle mini-batch training with Adam and the step-down schedule.
// The final partial batch is processed. Deterministic for a fixed seed.
inline std::vector<EpochStats> train(const NetworkSpec& net, Params& params,
                                     const LabeledData& data, const TrainConfig& config) {
  const std::size_t n = data.labels.size();
  if (n == 0) throw std::invalid_argument("train: empty dataset");
  if (data.inputs.rank() != 4 || data.inputs.extent(0) != n)
    throw std::invalid_argument("train: inputs must be N x C x H x W with one label per sample");
  if (config.batch_size == 0 || config.batch_size > n)
    throw std::invalid_argument("train: batch_size must be in [1, dataset size]");

  const std::size_t batches_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  LrSchedule schedule{config.base_lr, config.gamma, config.step_fraction,
                      config.epochs * batches_per_epoch};
  AdamState adam = make_adam_state(params);
  std::mt19937_64 gen(config.seed);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  std::vector<EpochStats> log;
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    detail::shuffle_indices(order, gen);
    double epoch_loss = 0.0;
    std::size_t epoch_correct = 0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b, ++iteration) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(begin + config.batch_size, n);
      Tensor batch = detail::gather_batch(data.inputs, order, begin, end);
      std::vector<std::size_t> labels(end - begin);
      for (std::size_t i = begin; i < end; ++i) labels[i - begin] = data.labels[order[i]];

      ForwardCache cache;
      Tensor logits = forward(net, params, batch, &cache);
      double loss = 0.0;
      Params grads = backward(net, params, cache, labels, &loss);
      if (!std::isfinite(loss))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(b));

      std::size_t correct = 0;
      for (std::size_t row = 0; row < labels.size(); ++row) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < net.num_classes; ++k)
          if (logits.at2(row, k) > logits.at2(row, best)) best = k;
        if (best == labels[row]) ++correct;
      }
      epoch_correct += correct;
      epoch_loss += loss * static_cast<double>(labels.size());

      const double lr = lr_at(schedule, iteration);
      adam_step(params, grads, adam, lr);

      if (config.log)
        *config.log << epoch << ',' << iteration << ',' << lr << ',' << loss << ','
                    << static_cast<double>(correct) / static_cast<double>(labels.size()) << '\n';
    }
    EpochStats stats{epoch, epoch_loss / static_cast<double>(n),
                     static_cast<double>(epoch_correct) / static_cast<double>(n)};
    log.push_back(stats);
    if (config.on_epoch_end) config.on_epoch_end(stats, params);
    if (config.stop_at_accuracy > 0.0 && stats.accuracy >= config.stop_at_accuracy) break;
  }
  return log;
}

}  // namespace dfu
