#pragma once

#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "duet/errors.hpp"
#include "duet/tensor.hpp"

namespace duet {

enum class Aggregation { single, gather_global, local_loss };
enum class PrecisionStage { none, emulate_bf16_on_gather };

struct LossConfig {
  Aggregation aggregation = Aggregation::single;
  int world_size = 1;
  PrecisionStage precision_stage = PrecisionStage::none;
  // Whether remote shards carry gradient in gather_global mode. In
  // local_loss mode remote shards are always detached; the local shard
  // always carries gradient.
  bool gather_with_grad = true;

  void validate() const {
    if (world_size < 1) throw BadSpec("world_size must be >= 1");
  }
};

template <typename T>
struct LossOutput {
  Tensor<T> total;    // rank-0
  Tensor<T> sum_i2t;  // signed log-softmax sum, image->text direction
  Tensor<T> sum_t2i;  // signed log-softmax sum, text->image direction
  Tensor<T> logits;   // tau * similarity, [N, N] diagnostic
};

/// S[i][j] = u_i . v_j for unit-norm rows.
template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& u, const Tensor<T>& v) {
  if (u.rank() != 2 || v.rank() != 2 || u.cols() != v.cols() ||
      u.rows() != v.rows()) {
    throw ShapeMismatch("similarity_matrix requires matching [N,d] inputs");
  }
  return matmul_nt(u, v);
}

/// Temperature-scaled bidirectional InfoNCE. total is computed from the
/// two directional sums as -(sum_i2t + sum_t2i) / (2N), so the equation
/// identity holds bitwise.
template <typename T>
LossOutput<T> info_nce(const Tensor<T>& u, const Tensor<T>& v,
                       const Tensor<T>& tau) {
  if (u.rank() != 2 || v.rank() != 2 || u.shape() != v.shape()) {
    throw ShapeMismatch("info_nce requires matching [N,d] inputs");
  }
  const std::size_t n = u.rows();
  if (n < 2) throw ShapeMismatch("info_nce requires N >= 2");
  if (tau.rank() != 0) throw BadTau("tau must be a scalar");
  if (!(tau.item() > T{0})) {
    throw BadTau("tau must be positive, got " +
                 std::to_string(static_cast<double>(tau.item())));
  }

  LossOutput<T> out;
  out.logits = mul_scalar(matmul_nt(u, v), tau);
  out.sum_i2t = sum_matched(log_softmax_rows(out.logits), 0);
  // The text->image direction is the row-softmax of the transposed logit
  // matrix; recomputing it as tau * V U^T keeps gradients exact.
  auto logits_t = mul_scalar(matmul_nt(v, u), tau);
  out.sum_t2i = sum_matched(log_softmax_rows(logits_t), 0);
  out.total = scale(add(out.sum_i2t, out.sum_t2i),
                    -1.0 / (2.0 * static_cast<double>(n)));
  return out;
}

template <typename T>
LossOutput<T> info_nce(const Tensor<T>& u, const Tensor<T>& v, double tau) {
  if (!(tau > 0.0)) throw BadTau("tau must be positive");
  return info_nce(u, v, Tensor<T>::scalar(static_cast<T>(tau)));
}

/// Split N rows of samples into W contiguous shards; rank r owns rows
/// [r*N/W, (r+1)*N/W).
template <typename T>
std::vector<Tensor<T>> shard(const Tensor<T>& batch, int world_size) {
  if (batch.rank() != 2) throw ShapeMismatch("shard requires a [N,d] batch");
  if (world_size < 1) throw BadSpec("world_size must be >= 1");
  const std::size_t n = batch.rows(), d = batch.cols();
  if (n % static_cast<std::size_t>(world_size) != 0) {
    throw IndivisibleBatch("batch of " + std::to_string(n) +
                           " rows is not divisible by world size " +
                           std::to_string(world_size));
  }
  const std::size_t per = n / static_cast<std::size_t>(world_size);
  std::vector<Tensor<T>> shards;
  shards.reserve(static_cast<std::size_t>(world_size));
  for (int r = 0; r < world_size; ++r) {
    std::vector<T> rows(batch.data().begin() + static_cast<long>(r * per * d),
                        batch.data().begin() +
                            static_cast<long>((r + 1) * per * d));
    shards.push_back(Tensor<T>::from({per, d}, std::move(rows)));
  }
  return shards;
}

/// Generic index sharding for sample lists.
inline std::vector<std::pair<std::size_t, std::size_t>> shard_ranges(
    std::size_t n, int world_size) {
  if (world_size < 1) throw BadSpec("world_size must be >= 1");
  if (n % static_cast<std::size_t>(world_size) != 0) {
    throw IndivisibleBatch("count " + std::to_string(n) +
                           " not divisible by world size " +
                           std::to_string(world_size));
  }
  const std::size_t per = n / static_cast<std::size_t>(world_size);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (int r = 0; r < world_size; ++r) {
    out.emplace_back(r * per, (r + 1) * per);
  }
  return out;
}

/// Concatenate per-rank shards in ascending rank order, from the point of
/// view of local_rank: remote shards are optionally rounded through the
/// bf16 emulation stage and detached unless remote gradients are enabled.
/// The local shard always keeps its gradient path and full precision.
template <typename T>
Tensor<T> gather_features(const std::vector<Tensor<T>>& shards, int local_rank,
                          bool with_grad_remote, PrecisionStage stage) {
  if (shards.empty()) throw ShapeMismatch("gather_features: no shards");
  const std::size_t cols = shards[0].cols();
  std::vector<Tensor<T>> parts;
  parts.reserve(shards.size());
  for (std::size_t r = 0; r < shards.size(); ++r) {
    if (shards[r].rank() != 2 || shards[r].cols() != cols) {
      throw ShapeMismatch("gather_features: shard shapes inconsistent");
    }
    if (static_cast<int>(r) == local_rank) {
      parts.push_back(shards[r]);
      continue;
    }
    Tensor<T> part = shards[r];
    if (stage == PrecisionStage::emulate_bf16_on_gather) {
      part = quantize_bf16_op(part);
    }
    if (!with_grad_remote) part = part.detach();
    parts.push_back(part);
  }
  return concat_rows(parts);
}

namespace detail {
template <typename T>
void check_local_offset(const Tensor<T>& local, const Tensor<T>& global,
                        std::size_t row_offset, const char* what) {
  const std::size_t rows = local.rows(), d = local.cols();
  if (global.cols() != d || row_offset + rows > global.rows()) {
    throw OffsetMismatch(std::string(what) + ": local block does not fit");
  }
  const T* lp = local.data().data();
  const T* gp = global.data().data() + row_offset * d;
  if (std::memcmp(lp, gp, rows * d * sizeof(T)) != 0) {
    throw OffsetMismatch(std::string(what) +
                         ": local rows not found at rank offset " +
                         std::to_string(row_offset));
  }
}
}  // namespace detail

/// One rank's contribution to the local-loss formulation: log-softmax of
/// the rank's local rows against all global columns, picked at the
/// matched global index. Combining over ranks with -(1/2N) reproduces the
/// global objective in exact arithmetic.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> local_loss_contribution(
    int rank, const Tensor<T>& u_local, const Tensor<T>& v_global,
    const Tensor<T>& v_local, const Tensor<T>& u_global, const Tensor<T>& tau) {
  const std::size_t rows = u_local.rows();
  const std::size_t offset = static_cast<std::size_t>(rank) * rows;
  detail::check_local_offset(u_local, u_global, offset, "local_loss u");
  detail::check_local_offset(v_local, v_global, offset, "local_loss v");
  auto i2t =
      sum_matched(log_softmax_rows(mul_scalar(matmul_nt(u_local, v_global), tau)),
                  offset);
  auto t2i =
      sum_matched(log_softmax_rows(mul_scalar(matmul_nt(v_local, u_global), tau)),
                  offset);
  return {i2t, t2i};
}

/// Full distributed loss over simulated workers. rank_order controls the
/// order in which per-rank terms are reduced; ascending order is the
/// deterministic contract, and the fault-injection path feeds a shuffled
/// order here to model an unordered gather reduction.
template <typename T>
LossOutput<T> distributed_info_nce(const LossConfig& cfg,
                                   const std::vector<Tensor<T>>& u_shards,
                                   const std::vector<Tensor<T>>& v_shards,
                                   const Tensor<T>& tau,
                                   std::span<const int> rank_order = {}) {
  cfg.validate();
  const int w = cfg.world_size;
  if (static_cast<int>(u_shards.size()) != w ||
      static_cast<int>(v_shards.size()) != w) {
    throw ShapeMismatch("distributed_info_nce: shard count != world_size");
  }
  std::vector<int> order(rank_order.begin(), rank_order.end());
  if (order.empty()) {
    order.resize(static_cast<std::size_t>(w));
    for (int r = 0; r < w; ++r) order[static_cast<std::size_t>(r)] = r;
  }

  if (cfg.aggregation == Aggregation::single || w == 1) {
    return info_nce(u_shards[0], v_shards[0], tau);
  }

  std::size_t n = 0;
  for (const auto& s : u_shards) n += s.rows();

  if (cfg.aggregation == Aggregation::gather_global) {
    if (cfg.gather_with_grad && cfg.precision_stage == PrecisionStage::none) {
      // Every rank sees the identical global batch, so one pass computes
      // the same value and gradient as the mean over ranks.
      auto u = gather_features(u_shards, 0, true, PrecisionStage::none);
      auto v = gather_features(v_shards, 0, true, PrecisionStage::none);
      return info_nce(u, v, tau);
    }
    LossOutput<T> out;
    Tensor<T> i2t_acc, t2i_acc;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const int r = order[k];
      auto u = gather_features(u_shards, r, cfg.gather_with_grad,
                               cfg.precision_stage);
      auto v = gather_features(v_shards, r, cfg.gather_with_grad,
                               cfg.precision_stage);
      auto one = info_nce(u, v, tau);
      if (r == 0 || !out.logits.defined()) out.logits = one.logits;
      i2t_acc = k == 0 ? one.sum_i2t : add(i2t_acc, one.sum_i2t);
      t2i_acc = k == 0 ? one.sum_t2i : add(t2i_acc, one.sum_t2i);
    }
    out.sum_i2t = scale(i2t_acc, 1.0 / w);
    out.sum_t2i = scale(t2i_acc, 1.0 / w);
    out.total = scale(add(out.sum_i2t, out.sum_t2i),
                      -1.0 / (2.0 * static_cast<double>(n)));
    return out;
  }

  // local_loss: each rank contributes its local rows against the global
  // columns; remote shards never carry gradient here.
  LossOutput<T> out;
  Tensor<T> i2t_acc, t2i_acc;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const int r = order[k];
    auto u_global =
        gather_features(u_shards, r, false, cfg.precision_stage);
    auto v_global =
        gather_features(v_shards, r, false, cfg.precision_stage);
    auto [i2t, t2i] = local_loss_contribution(r, u_shards[static_cast<std::size_t>(r)],
                                              v_global,
                                              v_shards[static_cast<std::size_t>(r)],
                                              u_global, tau);
    i2t_acc = k == 0 ? i2t : add(i2t_acc, i2t);
    t2i_acc = k == 0 ? t2i : add(t2i_acc, t2i);
  }
  out.sum_i2t = i2t_acc;
  out.sum_t2i = t2i_acc;
  out.total = scale(add(out.sum_i2t, out.sum_t2i),
                    -1.0 / (2.0 * static_cast<double>(n)));
  {
    // Diagnostic logits over the plain concatenated batch, detached.
    std::vector<Tensor<T>> u_parts, v_parts;
    for (const auto& s : u_shards) u_parts.push_back(s.detach());
    for (const auto& s : v_shards) v_parts.push_back(s.detach());
    out.logits = mul_scalar(matmul_nt(concat_rows(u_parts), concat_rows(v_parts)),
                            tau.detach());
  }
  return out;
}

}  // namespace duet
