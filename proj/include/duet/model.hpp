#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "duet/data.hpp"
#include "duet/errors.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

inline constexpr double kInitWeightStd = 0.02;
inline constexpr double kInitTau = 1.0 / 0.07;
inline constexpr double kTauClampMax = 100.0;

struct ModelDims {
  int input_dim = 0;   // flattened pixels: out_size * out_size * 3
  int hidden_dim = 0;
  int embed_dim = 0;
  int vocab_size = 0;
  int context_limit = kDefaultContextLimit;

  void validate() const {
    if (input_dim < 1 || hidden_dim < 1 || embed_dim < 1) {
      throw BadDims("dims must be positive");
    }
    if (vocab_size < 2) throw BadDims("vocab must hold at least pad and unk");
    if (context_limit < 1) throw BadDims("context_limit must be >= 1");
  }
};

/// Dual-encoder parameters. The image path is a flatten linear layer then
/// a two-layer tanh MLP and a linear projection; the text path is a token
/// embedding table, pad-masked mean pool, two-layer tanh MLP and a linear
/// projection. Both project into the shared embed_dim space.
template <typename T>
struct EncoderParams {
  ModelDims dims;

  Tensor<T> img_w0, img_b0;
  Tensor<T> img_w1, img_b1;
  Tensor<T> img_w2, img_b2;
  Tensor<T> img_proj;

  Tensor<T> txt_embed;
  Tensor<T> txt_w1, txt_b1;
  Tensor<T> txt_w2, txt_b2;
  Tensor<T> txt_proj;

  Tensor<T> log_tau;

  struct Named {
    std::string name;
    Tensor<T>* tensor;
    bool weight_decay;  // biases and log_tau are excluded from decay
  };

  std::vector<Named> named() {
    return {
        {"theta.w0", &img_w0, true},    {"theta.b0", &img_b0, false},
        {"theta.w1", &img_w1, true},    {"theta.b1", &img_b1, false},
        {"theta.w2", &img_w2, true},    {"theta.b2", &img_b2, false},
        {"theta.proj", &img_proj, true},
        {"phi.embed", &txt_embed, true},
        {"phi.w1", &txt_w1, true},      {"phi.b1", &txt_b1, false},
        {"phi.w2", &txt_w2, true},      {"phi.b2", &txt_b2, false},
        {"phi.proj", &txt_proj, true},
        {"log_tau", &log_tau, false},
    };
  }

  std::vector<std::pair<std::string, Tensor<T>>> snapshot() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (auto& item : named()) out.emplace_back(item.name, *item.tensor);
    return out;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& item : named()) out.push_back(*item.tensor);
    return out;
  }

  /// Temperature with the learnable-tau clamp applied.
  Tensor<T> tau() const { return exp_op(min_const(log_tau, std::log(kTauClampMax))); }
};

namespace detail {
template <typename T>
Tensor<T> init_weight(RngStream& s, std::size_t rows, std::size_t cols) {
  std::vector<T> w(rows * cols);
  for (auto& x : w) x = static_cast<T>(s.normal(0.0, kInitWeightStd));
  return Tensor<T>::from({rows, cols}, std::move(w), true);
}
}  // namespace detail

/// Weights ~ normal(0, 0.02) drawn in declaration order, biases zero,
/// log_tau = ln(1/0.07). Deterministic given the stream.
template <typename T>
EncoderParams<T> init_params(RngStream& s, const ModelDims& dims) {
  dims.validate();
  const auto in = static_cast<std::size_t>(dims.input_dim);
  const auto h = static_cast<std::size_t>(dims.hidden_dim);
  const auto d = static_cast<std::size_t>(dims.embed_dim);
  const auto v = static_cast<std::size_t>(dims.vocab_size);

  EncoderParams<T> p;
  p.dims = dims;
  p.img_w0 = detail::init_weight<T>(s, in, h);
  p.img_b0 = Tensor<T>::zeros({h}, true);
  p.img_w1 = detail::init_weight<T>(s, h, h);
  p.img_b1 = Tensor<T>::zeros({h}, true);
  p.img_w2 = detail::init_weight<T>(s, h, h);
  p.img_b2 = Tensor<T>::zeros({h}, true);
  p.img_proj = detail::init_weight<T>(s, h, d);

  p.txt_embed = detail::init_weight<T>(s, v, h);
  p.txt_w1 = detail::init_weight<T>(s, h, h);
  p.txt_b1 = Tensor<T>::zeros({h}, true);
  p.txt_w2 = detail::init_weight<T>(s, h, h);
  p.txt_b2 = Tensor<T>::zeros({h}, true);
  p.txt_proj = detail::init_weight<T>(s, h, d);

  p.log_tau = Tensor<T>::scalar(static_cast<T>(std::log(kInitTau)), true);
  return p;
}

/// Encode a batch of already augmented + normalized images, given as a
/// [N, input_dim] tensor. Rows of the result are unit-norm.
template <typename T>
Tensor<T> encode_image(const EncoderParams<T>& p, const Tensor<T>& x) {
  if (x.rank() != 2 ||
      x.cols() != static_cast<std::size_t>(p.dims.input_dim)) {
    throw ShapeMismatch("encode_image expects [N, " +
                        std::to_string(p.dims.input_dim) + "]");
  }
  auto h0 = tanh_op(add_rows(matmul(x, p.img_w0), p.img_b0));
  auto h1 = tanh_op(add_rows(matmul(h0, p.img_w1), p.img_b1));
  auto h2 = tanh_op(add_rows(matmul(h1, p.img_w2), p.img_b2));
  return l2_normalize(matmul(h2, p.img_proj));
}

/// Encode a batch of token sequences. Mean pooling ignores pad positions,
/// so captions padded with extra pad tokens embed identically.
template <typename T>
Tensor<T> encode_text(const EncoderParams<T>& p,
                      const std::vector<std::vector<int>>& token_ids) {
  auto pooled = embed_mean(p.txt_embed, token_ids, kPadId);
  auto h1 = tanh_op(add_rows(matmul(pooled, p.txt_w1), p.txt_b1));
  auto h2 = tanh_op(add_rows(matmul(h1, p.txt_w2), p.txt_b2));
  return l2_normalize(matmul(h2, p.txt_proj));
}

/// l2-normalized image/text embeddings of one batch in the shared space.
template <typename T>
struct EmbeddingBatch {
  Tensor<T> image;  // [N, d]
  Tensor<T> text;   // [N, d]
};

/// Flatten normalized pixel buffers into an encoder input batch.
template <typename T>
Tensor<T> image_batch_tensor(const std::vector<std::vector<float>>& normalized,
                             int input_dim) {
  std::vector<T> flat;
  flat.reserve(normalized.size() * static_cast<std::size_t>(input_dim));
  for (const auto& px : normalized) {
    if (px.size() != static_cast<std::size_t>(input_dim)) {
      throw ShapeMismatch("image buffer size does not match input_dim");
    }
    for (float v : px) flat.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from({normalized.size(), static_cast<std::size_t>(input_dim)},
                         std::move(flat));
}

}  // namespace duet
