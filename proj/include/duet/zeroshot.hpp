#pragma once

#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/data.hpp"
#include "duet/errors.hpp"
#include "duet/model.hpp"
#include "duet/tensor.hpp"

namespace duet {

/// Ordered caption templates, each with exactly one {} placeholder.
struct PromptTemplateSet {
  std::vector<std::string> templates = default_prompt_templates();

  void validate() const {
    if (templates.empty()) throw BadSpec("template set is empty");
    for (const auto& t : templates) {
      const auto first = t.find("{}");
      if (first == std::string::npos || t.find("{}", first + 1) != std::string::npos) {
        throw BadSpec("template \"" + t + "\" must contain exactly one {}");
      }
    }
  }
};

/// Per-class caption lists by literal placeholder substitution.
inline std::vector<std::vector<std::string>> expand_prompts(
    const std::vector<std::string>& labels, const PromptTemplateSet& tset) {
  tset.validate();
  if (labels.empty()) throw BadSpec("labels must be non-empty");
  {
    std::set<std::string> uniq(labels.begin(), labels.end());
    if (uniq.size() != labels.size()) throw DuplicateLabels("labels repeat");
  }
  std::vector<std::vector<std::string>> out;
  out.reserve(labels.size());
  for (const auto& label : labels) {
    std::vector<std::string> captions;
    captions.reserve(tset.templates.size());
    for (const auto& t : tset.templates) {
      captions.push_back(fill_template(t, label));
    }
    out.push_back(std::move(captions));
  }
  return out;
}

template <typename T>
struct ClassEmbedding {
  std::string label;
  std::vector<T> vector;  // unit norm, length embed_dim
};

/// Encode each caption, mean the per-class caption embeddings, and
/// re-normalize: one merged embedding per class.
template <typename T>
std::vector<ClassEmbedding<T>> build_class_embeddings(
    const EncoderParams<T>& params, const std::vector<std::string>& labels,
    const PromptTemplateSet& tset, const Vocab& vocab) {
  const auto prompts = expand_prompts(labels, tset);
  std::vector<ClassEmbedding<T>> out;
  out.reserve(labels.size());
  for (std::size_t c = 0; c < labels.size(); ++c) {
    std::vector<std::vector<int>> tokens;
    tokens.reserve(prompts[c].size());
    for (const auto& caption : prompts[c]) {
      tokens.push_back(tokenize(caption, vocab, params.dims.context_limit));
    }
    const Tensor<T> embedded = encode_text(params, tokens);
    const std::size_t d = embedded.cols();
    std::vector<T> mean(d, T{0});
    for (std::size_t i = 0; i < embedded.rows(); ++i) {
      for (std::size_t j = 0; j < d; ++j) mean[j] += embedded.at(i, j);
    }
    const T inv = T{1} / static_cast<T>(embedded.rows());
    for (auto& x : mean) x *= inv;
    const Tensor<T> merged =
        l2_normalize(Tensor<T>::from({d}, std::move(mean)));
    out.push_back({labels[c], merged.data()});
  }
  return out;
}

/// Argmax of u . c_k over classes; exact ties go to the lowest index.
template <typename T>
std::vector<int> classify(const Tensor<T>& image_embeddings,
                          const std::vector<ClassEmbedding<T>>& classes) {
  if (classes.size() < 2) throw TooFewClasses("need at least 2 classes");
  if (image_embeddings.rank() != 2) {
    throw ShapeMismatch("classify expects [N,d] image embeddings");
  }
  const std::size_t d = image_embeddings.cols();
  for (const auto& c : classes) {
    if (c.vector.size() != d) {
      throw ShapeMismatch("class embedding dim mismatch");
    }
  }
  std::vector<int> preds(image_embeddings.rows());
  for (std::size_t i = 0; i < image_embeddings.rows(); ++i) {
    int best = 0;
    T best_score{0};
    for (std::size_t k = 0; k < classes.size(); ++k) {
      T score{0};
      for (std::size_t j = 0; j < d; ++j) {
        score += image_embeddings.at(i, j) * classes[k].vector[j];
      }
      if (k == 0 || score > best_score) {
        best = static_cast<int>(k);
        best_score = score;
      }
    }
    preds[i] = best;
  }
  return preds;
}

/// Classification report. Sensitivity/specificity are reported for binary
/// problems only, mirroring how the downstream accuracy tables are laid out.
struct EvalReport {
  std::string dataset;
  int n_classes = 0;
  std::vector<int> per_class_counts;          // by true label
  std::vector<std::vector<int>> confusion;    // [true][pred]
  double accuracy = 0.0;
  bool has_binary_metrics = false;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

inline std::string format_pct(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
  return buf;
}

inline EvalReport metrics(const std::vector<int>& preds,
                          const std::vector<int>& labels, int n_classes,
                          int positive_class = 1) {
  if (preds.size() != labels.size()) {
    throw LengthMismatch("preds and labels differ in length");
  }
  if (preds.empty()) throw LengthMismatch("empty prediction list");
  if (n_classes < 2) throw TooFewClasses("need at least 2 classes");
  EvalReport r;
  r.n_classes = n_classes;
  r.per_class_counts.assign(static_cast<std::size_t>(n_classes), 0);
  r.confusion.assign(static_cast<std::size_t>(n_classes),
                     std::vector<int>(static_cast<std::size_t>(n_classes), 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes || preds[i] < 0 ||
        preds[i] >= n_classes) {
      throw LengthMismatch("class index out of range");
    }
    r.per_class_counts[static_cast<std::size_t>(labels[i])]++;
    r.confusion[static_cast<std::size_t>(labels[i])]
               [static_cast<std::size_t>(preds[i])]++;
  }
  int correct = 0;
  for (int c = 0; c < n_classes; ++c) {
    correct += r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
  if (n_classes == 2) {
    if (positive_class != 0 && positive_class != 1) {
      throw LengthMismatch("positive_class must be 0 or 1 for binary metrics");
    }
    const std::size_t pos = static_cast<std::size_t>(positive_class);
    const std::size_t neg = 1 - pos;
    const int tp = r.confusion[pos][pos];
    const int fn = r.confusion[pos][neg];
    const int tn = r.confusion[neg][neg];
    const int fp = r.confusion[neg][pos];
    r.has_binary_metrics = true;
    r.sensitivity = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    r.specificity = (tn + fp) > 0 ? static_cast<double>(tn) / (tn + fp) : 0.0;
  }
  return r;
}

/// Fixed-key-order JSON form; accuracy additionally rendered as a percent
/// string with two decimals.
inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["dataset"] = r.dataset;
  j["n_classes"] = r.n_classes;
  j["per_class_counts"] = r.per_class_counts;
  j["confusion"] = r.confusion;
  j["accuracy"] = r.accuracy;
  j["accuracy_pct"] = format_pct(r.accuracy);
  if (r.has_binary_metrics) {
    j["sensitivity"] = r.sensitivity;
    j["specificity"] = r.specificity;
  }
  return j;
}

}  // namespace duet
