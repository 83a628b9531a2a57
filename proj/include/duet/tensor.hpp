#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "duet/errors.hpp"

namespace duet {

/// Row norms at or below this are treated as zero vectors.
inline constexpr double kEpsilonNorm = 1e-12;

/// Strictly sequential left-to-right accumulation in index order. This is
/// the library's only reduction primitive: the result is bit-identical
/// across runs, platforms, and thread counts.
template <typename T>
T deterministic_sum(std::span<const T> values) {
  static_assert(std::is_floating_point_v<T>);
  T acc{0};
  for (std::size_t i = 0; i < values.size(); ++i) acc += values[i];
  return acc;
}

template <typename T>
T deterministic_sum(const std::vector<T>& values) {
  return deterministic_sum(std::span<const T>(values.data(), values.size()));
}

/// Round to the nearest value with an 8-bit explicit mantissa (ties to
/// even), then widen back. Sign of zero is preserved. This is the
/// reduced-precision emulation hook for the bf16 training axis.
inline float quantize_bf16(float x) {
  std::uint32_t bits;
  std::memcpy(&bits, &x, sizeof(bits));
  const std::uint32_t keep_lsb = (bits >> 15) & 1u;
  bits += 0x3FFFu + keep_lsb;
  bits &= 0xFFFF8000u;
  float out;
  std::memcpy(&out, &bits, sizeof(out));
  return out;
}

inline double quantize_bf16(double x) {
  return static_cast<double>(quantize_bf16(static_cast<float>(x)));
}

namespace detail {
inline std::uint64_t next_node_seq() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}
}  // namespace detail

template <typename T>
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized lazily during backward
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
  }
};

/// Dense row-major tensor with reverse-mode gradient support. A Tensor is
/// a cheap handle onto an immutable value node; copies share the node, so
/// gradients accumulate per mathematical quantity, not per handle.
template <typename T>
class Tensor {
public:
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor from(std::vector<std::size_t> shape, std::vector<T> data,
                     bool requires_grad = false) {
    if (detail::shape_numel(shape) != data.size()) {
      throw ShapeMismatch("tensor data size " + std::to_string(data.size()) +
                          " does not match shape product " +
                          std::to_string(detail::shape_numel(shape)));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    node->seq = detail::next_node_seq();
    return Tensor(std::move(node));
  }

  static Tensor zeros(std::vector<std::size_t> shape,
                      bool requires_grad = false) {
    std::vector<T> data(detail::shape_numel(shape), T{0});
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node().shape; }
  const std::vector<T>& data() const { return node().value; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().value.size(); }
  bool requires_grad() const { return node().requires_grad; }

  std::size_t rows() const {
    require_rank(2, "rows");
    return node().shape[0];
  }
  std::size_t cols() const {
    require_rank(2, "cols");
    return node().shape[1];
  }

  T item() const {
    if (numel() != 1) {
      throw NotScalar("item() requires a single-element tensor");
    }
    return node().value[0];
  }

  T at(std::size_t i, std::size_t j) const {
    require_rank(2, "at");
    return node().value[i * node().shape[1] + j];
  }

  /// Same value, no graph history, no gradient.
  Tensor detach() const {
    return from(node().shape, node().value, false);
  }

  std::shared_ptr<Node> node_ptr() const { return node_; }

private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  Node& node() const {
    if (!node_) throw ShapeMismatch("use of default-constructed tensor");
    return *node_;
  }

  void require_rank(std::size_t r, const char* what) const {
    if (rank() != r) {
      throw ShapeMismatch(std::string(what) + " requires rank " +
                          std::to_string(r) + " tensor, got rank " +
                          std::to_string(rank()));
    }
  }

  template <typename U>
  friend Tensor<U> make_op(std::vector<std::size_t> shape, std::vector<U> value,
                           std::vector<Tensor<U>> parents,
                           std::function<void(TensorNode<U>&)> backward);

  std::shared_ptr<Node> node_;
};

template <typename T>
Tensor<T> make_op(std::vector<std::size_t> shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = detail::next_node_seq();
  bool needs = false;
  for (const auto& p : parents) {
    node->parents.push_back(p.node_ptr());
    needs = needs || p.requires_grad();
  }
  node->requires_grad = needs;
  if (needs) node->backward = std::move(backward);
  return Tensor<T>(std::move(node));
}

namespace detail {
template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": operand shapes differ");
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b},
                    [](TensorNode<T>& n) {
                      for (int k = 0; k < 2; ++k) {
                        auto& p = *n.parents[k];
                        if (!p.requires_grad) continue;
                        p.ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                          p.grad[i] += n.grad[i];
                        }
                      }
                    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b},
                    [](TensorNode<T>& n) {
                      auto& pa = *n.parents[0];
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                          pa.grad[i] += n.grad[i];
                        }
                      }
                      auto& pb = *n.parents[1];
                      if (pb.requires_grad) {
                        pb.ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                          pb.grad[i] -= n.grad[i];
                        }
                      }
                    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b},
                    [](TensorNode<T>& n) {
                      auto& pa = *n.parents[0];
                      auto& pb = *n.parents[1];
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                          pa.grad[i] += n.grad[i] * pb.value[i];
                        }
                      }
                      if (pb.requires_grad) {
                        pb.ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                          pb.grad[i] += n.grad[i] * pa.value[i];
                        }
                      }
                    });
}

/// [N,K] + [K] row broadcast (bias add).
template <typename T>
Tensor<T> add_rows(const Tensor<T>& m, const Tensor<T>& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.cols() != v.shape()[0]) {
    throw ShapeMismatch("add_rows requires [N,K] and [K]");
  }
  const std::size_t n = m.rows(), k = m.cols();
  std::vector<T> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = m.data()[i * k + j] + v.data()[j];
    }
  }
  return make_op<T>(m.shape(), std::move(out), {m, v},
                    [n, k](TensorNode<T>& node) {
                      auto& pm = *node.parents[0];
                      auto& pv = *node.parents[1];
                      if (pm.requires_grad) {
                        pm.ensure_grad();
                        for (std::size_t i = 0; i < n * k; ++i) {
                          pm.grad[i] += node.grad[i];
                        }
                      }
                      if (pv.requires_grad) {
                        pv.ensure_grad();
                        for (std::size_t j = 0; j < k; ++j) {
                          T acc{0};
                          for (std::size_t i = 0; i < n; ++i) {
                            acc += node.grad[i * k + j];
                          }
                          pv.grad[j] += acc;
                        }
                      }
                    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  const T cc = static_cast<T>(c);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * cc;
  return make_op<T>(a.shape(), std::move(out), {a},
                    [cc](TensorNode<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i) {
                        p.grad[i] += n.grad[i] * cc;
                      }
                    });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, -1.0);
}

/// Multiply every element by a rank-0 tensor; gradients reach both sides.
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.rank() != 0) throw ShapeMismatch("mul_scalar: scalar must be rank-0");
  const T sv = s.data()[0];
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
  return make_op<T>(a.shape(), std::move(out), {a, s},
                    [sv](TensorNode<T>& n) {
                      auto& pa = *n.parents[0];
                      auto& ps = *n.parents[1];
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                          pa.grad[i] += n.grad[i] * sv;
                        }
                      }
                      if (ps.requires_grad) {
                        ps.ensure_grad();
                        T acc{0};
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                          acc += n.grad[i] * pa.value[i];
                        }
                        ps.grad[0] += acc;
                      }
                    });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  return make_op<T>(a.shape(), std::move(out), {a},
                    [](TensorNode<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i) {
                        p.grad[i] += n.grad[i] * (T{1} - n.value[i] * n.value[i]);
                      }
                    });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  return make_op<T>(a.shape(), std::move(out), {a},
                    [](TensorNode<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i) {
                        p.grad[i] += n.grad[i] * n.value[i];
                      }
                    });
}

/// Elementwise min(a, c). Subgradient 1 where a <= c, else 0.
template <typename T>
Tensor<T> min_const(const Tensor<T>& a, double c) {
  const T cc = static_cast<T>(c);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.data()[i] <= cc ? a.data()[i] : cc;
  }
  return make_op<T>(a.shape(), std::move(out), {a},
                    [cc](TensorNode<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i) {
                        if (p.value[i] <= cc) p.grad[i] += n.grad[i];
                      }
                    });
}

/// Elementwise reduced-precision rounding with a straight-through gradient.
template <typename T>
Tensor<T> quantize_bf16_op(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = quantize_bf16(a.data()[i]);
  return make_op<T>(a.shape(), std::move(out), {a},
                    [](TensorNode<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n.grad.size(); ++i) {
                        p.grad[i] += n.grad[i];
                      }
                    });
}

// ---------------------------------------------------------------------------
// Matrix ops (inner products accumulate sequentially in index order)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeMismatch("matmul requires [N,K] x [K,M]");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<T> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      T acc{0};
      for (std::size_t kk = 0; kk < k; ++kk) {
        acc += a.data()[i * k + kk] * b.data()[kk * m + j];
      }
      out[i * m + j] = acc;
    }
  }
  return make_op<T>({n, m}, std::move(out), {a, b},
                    [n, k, m](TensorNode<T>& node) {
                      auto& pa = *node.parents[0];
                      auto& pb = *node.parents[1];
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        for (std::size_t i = 0; i < n; ++i) {
                          for (std::size_t kk = 0; kk < k; ++kk) {
                            T acc{0};
                            for (std::size_t j = 0; j < m; ++j) {
                              acc += node.grad[i * m + j] * pb.value[kk * m + j];
                            }
                            pa.grad[i * k + kk] += acc;
                          }
                        }
                      }
                      if (pb.requires_grad) {
                        pb.ensure_grad();
                        for (std::size_t kk = 0; kk < k; ++kk) {
                          for (std::size_t j = 0; j < m; ++j) {
                            T acc{0};
                            for (std::size_t i = 0; i < n; ++i) {
                              acc += pa.value[i * k + kk] * node.grad[i * m + j];
                            }
                            pb.grad[kk * m + j] += acc;
                          }
                        }
                      }
                    });
}

/// A [N,K] times B^T for B [M,K]: out[i][j] = sum_k A[i,k] B[j,k].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw ShapeMismatch("matmul_nt requires [N,K] x [M,K]");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  std::vector<T> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      T acc{0};
      for (std::size_t kk = 0; kk < k; ++kk) {
        acc += a.data()[i * k + kk] * b.data()[j * k + kk];
      }
      out[i * m + j] = acc;
    }
  }
  return make_op<T>({n, m}, std::move(out), {a, b},
                    [n, k, m](TensorNode<T>& node) {
                      auto& pa = *node.parents[0];
                      auto& pb = *node.parents[1];
                      if (pa.requires_grad) {
                        pa.ensure_grad();
                        for (std::size_t i = 0; i < n; ++i) {
                          for (std::size_t kk = 0; kk < k; ++kk) {
                            T acc{0};
                            for (std::size_t j = 0; j < m; ++j) {
                              acc += node.grad[i * m + j] * pb.value[j * k + kk];
                            }
                            pa.grad[i * k + kk] += acc;
                          }
                        }
                      }
                      if (pb.requires_grad) {
                        pb.ensure_grad();
                        for (std::size_t j = 0; j < m; ++j) {
                          for (std::size_t kk = 0; kk < k; ++kk) {
                            T acc{0};
                            for (std::size_t i = 0; i < n; ++i) {
                              acc += node.grad[i * m + j] * pa.value[i * k + kk];
                            }
                            pb.grad[j * k + kk] += acc;
                          }
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// Reductions and row ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T total = deterministic_sum(a.data());
  return make_op<T>({}, {total}, {a},
                    [](TensorNode<T>& n) {
                      auto& p = *n.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < p.grad.size(); ++i) {
                        p.grad[i] += n.grad[0];
                      }
                    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

/// Unit-normalize each row (a rank-1 tensor is one row). Throws ZeroNorm
/// if any row norm is at or below kEpsilonNorm.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a) {
  if (a.rank() != 1 && a.rank() != 2) {
    throw ShapeMismatch("l2_normalize requires rank 1 or 2");
  }
  const std::size_t n = a.rank() == 2 ? a.shape()[0] : 1;
  const std::size_t d = a.rank() == 2 ? a.shape()[1] : a.shape()[0];
  std::vector<T> out(a.numel());
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T sq{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T x = a.data()[i * d + j];
      sq += x * x;
    }
    const T norm = std::sqrt(sq);
    if (!(norm > static_cast<T>(kEpsilonNorm))) {
      throw ZeroNorm("row " + std::to_string(i) + " has norm " +
                     std::to_string(static_cast<double>(norm)));
    }
    norms[i] = norm;
    for (std::size_t j = 0; j < d; ++j) {
      out[i * d + j] = a.data()[i * d + j] / norm;
    }
  }
  return make_op<T>(a.shape(), std::move(out), {a},
                    [n, d, norms](TensorNode<T>& node) {
                      auto& p = *node.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n; ++i) {
                        T dot{0};
                        for (std::size_t j = 0; j < d; ++j) {
                          dot += node.grad[i * d + j] * node.value[i * d + j];
                        }
                        for (std::size_t j = 0; j < d; ++j) {
                          p.grad[i * d + j] +=
                              (node.grad[i * d + j] -
                               dot * node.value[i * d + j]) /
                              norms[i];
                        }
                      }
                    });
}

/// Numerically stable row-wise log-softmax (per-row max subtraction).
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeMismatch("log_softmax_rows requires rank 2");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<T> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    T mx = a.data()[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, a.data()[i * m + j]);
    T z{0};
    for (std::size_t j = 0; j < m; ++j) {
      z += std::exp(a.data()[i * m + j] - mx);
    }
    const T logz = std::log(z);
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = a.data()[i * m + j] - mx - logz;
    }
  }
  return make_op<T>(a.shape(), std::move(out), {a},
                    [n, m](TensorNode<T>& node) {
                      auto& p = *node.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n; ++i) {
                        T gsum{0};
                        for (std::size_t j = 0; j < m; ++j) {
                          gsum += node.grad[i * m + j];
                        }
                        for (std::size_t j = 0; j < m; ++j) {
                          p.grad[i * m + j] +=
                              node.grad[i * m + j] -
                              std::exp(node.value[i * m + j]) * gsum;
                        }
                      }
                    });
}

/// Sum of a[i, i + col_offset] over all rows, as a rank-0 tensor.
template <typename T>
Tensor<T> sum_matched(const Tensor<T>& a, std::size_t col_offset) {
  if (a.rank() != 2) throw ShapeMismatch("sum_matched requires rank 2");
  const std::size_t n = a.rows(), m = a.cols();
  if (n + col_offset > m) {
    throw ShapeMismatch("sum_matched: offset " + std::to_string(col_offset) +
                        " out of range for " + std::to_string(n) + "x" +
                        std::to_string(m));
  }
  T total{0};
  for (std::size_t i = 0; i < n; ++i) total += a.data()[i * m + i + col_offset];
  return make_op<T>({}, {total}, {a},
                    [n, m, col_offset](TensorNode<T>& node) {
                      auto& p = *node.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < n; ++i) {
                        p.grad[i * m + i + col_offset] += node.grad[0];
                      }
                    });
}

/// Row-concatenates rank-2 parts; gradients slice back to each part.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no parts");
  const std::size_t cols = parts[0].cols();
  std::size_t total_rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != cols) {
      throw ShapeMismatch("concat_rows: column counts differ");
    }
    total_rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(total_rows * cols);
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_op<T>({total_rows, cols}, std::move(out), parts,
                    [cols](TensorNode<T>& node) {
                      std::size_t row0 = 0;
                      for (auto& pp : node.parents) {
                        auto& p = *pp;
                        const std::size_t r = p.shape[0];
                        if (p.requires_grad) {
                          p.ensure_grad();
                          for (std::size_t i = 0; i < r * cols; ++i) {
                            p.grad[i] += node.grad[row0 * cols + i];
                          }
                        }
                        row0 += r;
                      }
                    });
}

/// Masked mean of embedding-table rows per token sequence: out[n] is the
/// mean of table[id] over non-pad ids of sequence n (zero row if none).
template <typename T>
Tensor<T> embed_mean(const Tensor<T>& table,
                     const std::vector<std::vector<int>>& token_ids,
                     int pad_id = 0) {
  if (table.rank() != 2) throw ShapeMismatch("embed_mean: table must be [V,H]");
  const std::size_t v = table.rows(), h = table.cols();
  const std::size_t n = token_ids.size();
  std::vector<T> out(n * h, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t cnt = 0;
    for (int id : token_ids[i]) {
      if (id == pad_id) continue;
      if (id < 0 || static_cast<std::size_t>(id) >= v) {
        throw ShapeMismatch("embed_mean: token id " + std::to_string(id) +
                            " outside table of " + std::to_string(v));
      }
      for (std::size_t j = 0; j < h; ++j) {
        out[i * h + j] += table.data()[static_cast<std::size_t>(id) * h + j];
      }
      ++cnt;
    }
    if (cnt > 0) {
      const T inv = T{1} / static_cast<T>(cnt);
      for (std::size_t j = 0; j < h; ++j) out[i * h + j] *= inv;
    }
  }
  return make_op<T>({n, h}, std::move(out), {table},
                    [token_ids, pad_id, h](TensorNode<T>& node) {
                      auto& p = *node.parents[0];
                      p.ensure_grad();
                      for (std::size_t i = 0; i < token_ids.size(); ++i) {
                        std::size_t cnt = 0;
                        for (int id : token_ids[i]) {
                          if (id != pad_id) ++cnt;
                        }
                        if (cnt == 0) continue;
                        const T inv = T{1} / static_cast<T>(cnt);
                        for (int id : token_ids[i]) {
                          if (id == pad_id) continue;
                          for (std::size_t j = 0; j < h; ++j) {
                            p.grad[static_cast<std::size_t>(id) * h + j] +=
                                node.grad[i * h + j] * inv;
                          }
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// Reverse-mode differentiation
// ---------------------------------------------------------------------------

/// Records the subgraph reachable from a scalar root and replays it
/// strictly in reverse recording order.
template <typename T>
class GradTape {
public:
  explicit GradTape(const Tensor<T>& root) : root_(root.node_ptr()) {
    if (root.rank() != 0) {
      throw NotScalar("backward root must be rank-0, got rank " +
                      std::to_string(root.rank()));
    }
    std::vector<TensorNode<T>*> stack{root_.get()};
    std::unordered_set<TensorNode<T>*> seen{root_.get()};
    while (!stack.empty()) {
      TensorNode<T>* node = stack.back();
      stack.pop_back();
      nodes_.push_back(node);
      for (auto& parent : node->parents) {
        if (parent->requires_grad && seen.insert(parent.get()).second) {
          stack.push_back(parent.get());
        }
      }
    }
    std::sort(nodes_.begin(), nodes_.end(),
              [](const TensorNode<T>* a, const TensorNode<T>* b) {
                return a->seq > b->seq;
              });
  }

  void backward() {
    for (auto* node : nodes_) node->grad.assign(node->value.size(), T{0});
    root_->grad[0] = T{1};
    for (auto* node : nodes_) {
      if (node->backward) node->backward(*node);
    }
  }

  /// Accumulated gradient for a tensor; zeros when disconnected.
  Tensor<T> grad_of(const Tensor<T>& t) const {
    const auto& node = *t.node_ptr();
    if (node.grad.size() == node.value.size()) {
      return Tensor<T>::from(node.shape, node.grad);
    }
    return Tensor<T>::zeros(node.shape);
  }

  std::size_t recorded_ops() const { return nodes_.size(); }

private:
  std::shared_ptr<TensorNode<T>> root_;
  std::vector<TensorNode<T>*> nodes_;
};

/// dL/dp for each param. Params not reached by the graph yield zero
/// gradients rather than errors.
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& loss,
                            const std::vector<Tensor<T>>& params) {
  GradTape<T> tape(loss);
  tape.backward();
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(tape.grad_of(p));
  return out;
}

}  // namespace duet
