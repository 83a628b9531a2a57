#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/config.hpp"
#include "duet/data.hpp"
#include "duet/errors.hpp"
#include "duet/loss.hpp"
#include "duet/model.hpp"
#include "duet/rng.hpp"

namespace duet {

struct ScheduleSpec {
  Scheduler kind = Scheduler::cosine;
  int warmup_steps = 0;
  double peak_lr = 0.0;
  int total_steps = 0;

  void validate() const {
    if (warmup_steps < 0) throw BadSpec("warmup_steps must be >= 0");
    if (!(peak_lr > 0.0)) throw BadSpec("peak_lr must be > 0");
    if (total_steps <= warmup_steps) {
      throw BadSpec("total_steps (" + std::to_string(total_steps) +
                    ") must exceed warmup_steps (" +
                    std::to_string(warmup_steps) + ")");
    }
  }
};

/// Linear warmup from lr(0)=0 to peak at step == warmup_steps, then
/// cosine decay to 0 at total_steps, or constant at peak.
inline double lr_at(const ScheduleSpec& s, int step) {
  s.validate();
  if (step < 0 || step > s.total_steps) {
    throw BadStep("step " + std::to_string(step) + " outside [0, " +
                  std::to_string(s.total_steps) + "]");
  }
  if (step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / s.warmup_steps;
  }
  if (s.kind == Scheduler::constant) return s.peak_lr;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          (s.total_steps - s.warmup_steps);
  return s.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// AdamW with decoupled weight decay applied before the moment update.
/// Element math runs in double regardless of the storage type so the f64
/// path matches an independent oracle to 1e-12.
template <typename T>
struct AdamWState {
  int t = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.0;
  std::vector<std::vector<T>> m, v;
  std::vector<bool> apply_decay;

  static AdamWState init(const std::vector<std::size_t>& sizes,
                         const std::vector<bool>& decay_mask, double beta1,
                         double beta2, double eps, double weight_decay) {
    if (sizes.size() != decay_mask.size()) {
      throw ShapeMismatch("adamw: decay mask size mismatch");
    }
    AdamWState st;
    st.beta1 = beta1;
    st.beta2 = beta2;
    st.eps = eps;
    st.weight_decay = weight_decay;
    st.apply_decay = decay_mask;
    for (std::size_t n : sizes) {
      st.m.emplace_back(n, T{0});
      st.v.emplace_back(n, T{0});
    }
    return st;
  }
};

/// One optimizer step over parallel vectors of parameter / gradient
/// tensors. Returns the updated parameter tensors (inputs are immutable).
template <typename T>
std::vector<Tensor<T>> adamw_step(const std::vector<Tensor<T>>& params,
                                  const std::vector<Tensor<T>>& grads,
                                  AdamWState<T>& st, double lr) {
  if (lr < 0.0) throw BadRange("lr must be >= 0");
  if (params.size() != grads.size() || params.size() != st.m.size()) {
    throw ShapeMismatch("adamw_step: parameter list size mismatch");
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, st.t);
  const double bc2 = 1.0 - std::pow(st.beta2, st.t);
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].shape() != grads[p].shape() ||
        params[p].numel() != st.m[p].size()) {
      throw ShapeMismatch("adamw_step: shape mismatch at param " +
                          std::to_string(p));
    }
    std::vector<T> next(params[p].numel());
    const bool decay = st.apply_decay[p] && st.weight_decay != 0.0;
    for (std::size_t i = 0; i < next.size(); ++i) {
      double w = static_cast<double>(params[p].data()[i]);
      const double g = static_cast<double>(grads[p].data()[i]);
      if (decay) w -= lr * st.weight_decay * w;
      const double m = st.beta1 * static_cast<double>(st.m[p][i]) +
                       (1.0 - st.beta1) * g;
      const double v = st.beta2 * static_cast<double>(st.v[p][i]) +
                       (1.0 - st.beta2) * g * g;
      st.m[p][i] = static_cast<T>(m);
      st.v[p][i] = static_cast<T>(v);
      const double m_hat = m / bc1;
      const double v_hat = v / bc2;
      w -= lr * m_hat / (std::sqrt(v_hat) + st.eps);
      next[i] = static_cast<T>(w);
    }
    out.push_back(Tensor<T>::from(params[p].shape(), std::move(next), true));
  }
  return out;
}

struct StepRecord {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double tau = 0.0;
};

inline std::string trajectory_jsonl(const std::vector<StepRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    json j{{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"tau", r.tau}};
    out += j.dump();
    out += "\n";
  }
  return out;
}

/// Execution knobs that are deliberately not part of RunConfig: they model
/// environment behavior, not documented configuration. The unordered
/// gather order exists to demonstrate what nondeterministic reductions do
/// to determinism twins.
struct ExecutionPolicy {
  enum class GatherOrder { ascending, unordered };
  GatherOrder gather_order = GatherOrder::ascending;
};

template <typename T>
struct TrainResult {
  std::vector<StepRecord> trajectory;
  EncoderParams<T> params;
  std::string checkpoint;  // serialized container bytes
};

/// End-to-end deterministic training. Two invocations with an identical
/// config produce bit-identical checkpoints and trajectories.
template <typename T>
TrainResult<T> train(const RunConfig& cfg, const SynthDataset& dataset,
                     const ExecutionPolicy& policy = {}) {
  cfg.validate();
  const int w = cfg.world_size;
  const std::size_t global_batch =
      static_cast<std::size_t>(cfg.batch_per_worker) * static_cast<std::size_t>(w);
  const std::size_t n_samples = dataset.size();
  if (n_samples < global_batch) {
    throw ConfigInvalid("dataset smaller than one global batch");
  }
  const std::size_t steps_per_epoch = n_samples / global_batch;
  const int total_steps = cfg.epochs * static_cast<int>(steps_per_epoch);

  ScheduleSpec sched{cfg.scheduler, cfg.warmup_steps, cfg.peak_lr, total_steps};
  sched.validate();

  ModelDims dims;
  dims.input_dim = cfg.aug.out_size * cfg.aug.out_size * 3;
  dims.hidden_dim = cfg.model.hidden_dim;
  dims.embed_dim = cfg.model.embed_dim;
  dims.vocab_size = dataset.vocab.size();
  dims.context_limit = cfg.model.context_limit;

  RngStream init_stream = stream(cfg.seed, 0, "init");
  EncoderParams<T> params = init_params<T>(init_stream, dims);

  std::vector<RngStream> augment_streams;
  for (int r = 0; r < w; ++r) {
    augment_streams.push_back(stream(cfg.seed, static_cast<std::uint32_t>(r), "augment"));
  }

  std::vector<std::size_t> param_sizes;
  std::vector<bool> decay_mask;
  for (auto& item : params.named()) {
    param_sizes.push_back(item.tensor->numel());
    decay_mask.push_back(item.weight_decay);
  }
  auto opt = AdamWState<T>::init(param_sizes, decay_mask, cfg.beta1, cfg.beta2,
                                 cfg.eps, cfg.weight_decay);

  const LossConfig loss_cfg = cfg.loss_config();
  std::random_device nondet;  // consulted only under the unordered policy

  TrainResult<T> result;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream shuffle_stream =
        stream(cfg.seed, 0, "shuffle:epoch_" + std::to_string(epoch));
    const std::vector<std::size_t> perm = shuffle(shuffle_stream, n_samples);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      // Assemble per-rank shards; ranks always augment in ascending order
      // so the data pipeline stays deterministic even under the unordered
      // reduction policy.
      std::vector<Tensor<T>> u_shards, v_shards;
      for (int r = 0; r < w; ++r) {
        std::vector<std::vector<float>> normed;
        std::vector<std::vector<int>> tokens;
        for (int k = 0; k < cfg.batch_per_worker; ++k) {
          const std::size_t idx =
              perm[b * global_batch +
                   static_cast<std::size_t>(r) * cfg.batch_per_worker +
                   static_cast<std::size_t>(k)];
          SynthImage crop = random_resized_crop(dataset.images[idx], cfg.aug,
                                                augment_streams[static_cast<std::size_t>(r)]);
          normed.push_back(normalize_image(crop, cfg.aug.mean, cfg.aug.std));
          tokens.push_back(dataset.captions[idx].token_ids);
        }
        auto x = image_batch_tensor<T>(normed, dims.input_dim);
        u_shards.push_back(encode_image(params, x));
        v_shards.push_back(encode_text(params, tokens));
      }

      std::vector<int> order(static_cast<std::size_t>(w));
      for (int r = 0; r < w; ++r) order[static_cast<std::size_t>(r)] = r;
      if (policy.gather_order == ExecutionPolicy::GatherOrder::unordered) {
        std::mt19937 g(nondet());
        std::shuffle(order.begin(), order.end(), g);
      }

      const Tensor<T> tau = params.tau();
      LossOutput<T> loss = distributed_info_nce(loss_cfg, u_shards, v_shards,
                                                tau, order);

      const double lr = lr_at(sched, step);
      auto param_tensors = params.parameters();
      auto grads = grad(loss.total, param_tensors);
      auto updated = adamw_step(param_tensors, grads, opt, lr);
      auto named = params.named();
      for (std::size_t p = 0; p < named.size(); ++p) {
        *named[p].tensor = updated[p];
      }

      result.trajectory.push_back({step, lr,
                                   static_cast<double>(loss.total.item()),
                                   static_cast<double>(tau.item())});
      ++step;
    }
  }

  result.checkpoint = serialize_checkpoint(params.snapshot());
  result.params = std::move(params);
  return result;
}

/// Generate the synthetic dataset a config describes.
inline SynthDataset dataset_from_config(const RunConfig& cfg) {
  return synth_dataset(cfg.dataset.concepts, cfg.dataset.n_per_concept,
                       cfg.dataset.image_size, cfg.seed);
}

/// Train + serialize under the precision the config names; returns
/// (trajectory jsonl, checkpoint bytes).
struct RunArtifacts {
  std::vector<StepRecord> trajectory;
  std::string trajectory_jsonl;
  std::string checkpoint;
};

inline RunArtifacts run_training(const RunConfig& cfg,
                                 const SynthDataset& dataset,
                                 const ExecutionPolicy& policy = {}) {
  RunArtifacts out;
  if (cfg.precision == Precision::f64) {
    auto res = train<double>(cfg, dataset, policy);
    out.trajectory = std::move(res.trajectory);
    out.checkpoint = std::move(res.checkpoint);
  } else {
    auto res = train<float>(cfg, dataset, policy);
    out.trajectory = std::move(res.trajectory);
    out.checkpoint = std::move(res.checkpoint);
  }
  out.trajectory_jsonl = trajectory_jsonl(out.trajectory);
  return out;
}

}  // namespace duet
