#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/data.hpp"
#include "duet/errors.hpp"
#include "duet/loss.hpp"
#include "duet/sha256.hpp"

namespace duet {

using json = nlohmann::json;

enum class Scheduler { cosine, constant };
enum class Precision { f32, f64, bf16_emulated };

inline std::string to_string(Scheduler s) {
  return s == Scheduler::cosine ? "cosine" : "constant";
}

inline std::string to_string(Precision p) {
  switch (p) {
    case Precision::f32: return "f32";
    case Precision::f64: return "f64";
    default: return "bf16_emulated";
  }
}

inline Scheduler scheduler_from_string(const std::string& s) {
  if (s == "cosine") return Scheduler::cosine;
  if (s == "constant") return Scheduler::constant;
  throw ConfigInvalid("unknown scheduler \"" + s + "\"");
}

inline Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  if (s == "bf16_emulated") return Precision::bf16_emulated;
  throw ConfigInvalid("unknown precision \"" + s + "\"");
}

struct DatasetSpec {
  std::vector<std::string> concepts;
  int n_per_concept = 0;
  int image_size = 0;
};

struct ModelSpec {
  int embed_dim = 0;
  int hidden_dim = 0;
  int context_limit = kDefaultContextLimit;
};

/// Canonical record of every documented hyperparameter of one run. The
/// serialized form carries every field explicitly; unknown or missing
/// keys in a config file are hard errors.
struct RunConfig {
  std::string run_id;
  std::uint64_t seed = 0;
  int world_size = 1;
  int batch_per_worker = 2;
  int epochs = 1;
  int warmup_steps = 0;
  double peak_lr = 0.0;
  Scheduler scheduler = Scheduler::cosine;
  double weight_decay = 0.0;
  AugmentSpec aug;
  bool gather_with_grad = true;
  bool local_loss = false;
  Precision precision = Precision::f32;
  // Documented configuration that cannot move desk-scale numbers; hashed
  // but never consulted by the pipeline.
  bool grad_checkpointing = false;
  bool batchnorm_sync = false;
  bool ddp_static_graph = false;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  ModelSpec model;
  DatasetSpec dataset;

  void validate() const {
    if (run_id.empty()) throw ConfigInvalid("run_id must be non-empty");
    if (world_size < 1) throw ConfigInvalid("world_size must be >= 1");
    if (batch_per_worker < 2) throw ConfigInvalid("batch_per_worker must be >= 2");
    if (epochs < 1) throw ConfigInvalid("epochs must be >= 1");
    if (warmup_steps < 0) throw ConfigInvalid("warmup_steps must be >= 0");
    if (!(peak_lr > 0.0)) throw ConfigInvalid("peak_lr must be > 0");
    if (weight_decay < 0.0) throw ConfigInvalid("weight_decay must be >= 0");
    try {
      aug.validate();
    } catch (const BadSpec& e) {
      throw ConfigInvalid(std::string("aug: ") + e.what());
    }
    if (model.embed_dim < 1 || model.hidden_dim < 1 || model.context_limit < 1) {
      throw ConfigInvalid("model dims must be positive");
    }
    if (dataset.concepts.size() < 2) {
      throw ConfigInvalid("dataset needs at least 2 concepts");
    }
    if (dataset.n_per_concept < 1) {
      throw ConfigInvalid("dataset n_per_concept must be >= 1");
    }
    if (dataset.image_size < 8) {
      throw ConfigInvalid("dataset image_size must be >= 8");
    }
    if (aug.out_size > dataset.image_size) {
      throw ConfigInvalid("aug out_size exceeds dataset image_size");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigInvalid("betas must be in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigInvalid("eps must be > 0");
  }

  LossConfig loss_config() const {
    LossConfig lc;
    lc.world_size = world_size;
    if (world_size == 1) {
      lc.aggregation = Aggregation::single;
    } else if (local_loss) {
      lc.aggregation = Aggregation::local_loss;
    } else {
      lc.aggregation = Aggregation::gather_global;
    }
    lc.gather_with_grad = gather_with_grad;
    lc.precision_stage = precision == Precision::bf16_emulated
                             ? PrecisionStage::emulate_bf16_on_gather
                             : PrecisionStage::none;
    return lc;
  }
};

namespace detail {

inline json aug_to_json(const AugmentSpec& a) {
  return json{{"rrc_scale_min", a.scale_min}, {"rrc_scale_max", a.scale_max},
              {"rrc_ratio_min", a.ratio_min}, {"rrc_ratio_max", a.ratio_max},
              {"out_size", a.out_size},       {"mean", a.mean},
              {"std", a.std}};
}

inline void expect_keys(const json& obj, const std::set<std::string>& keys,
                        const std::string& where) {
  if (!obj.is_object()) throw ConfigInvalid(where + " must be an object");
  for (const auto& [k, v] : obj.items()) {
    if (!keys.contains(k)) {
      throw ConfigInvalid("unknown key \"" + k + "\" in " + where);
    }
  }
  for (const auto& k : keys) {
    if (!obj.contains(k)) {
      throw ConfigInvalid("missing key \"" + k + "\" in " + where);
    }
  }
}

template <typename V>
V get_field(const json& obj, const std::string& key, const std::string& where) {
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigInvalid("bad value for \"" + key + "\" in " + where + ": " +
                        e.what());
  }
}

}  // namespace detail

inline json config_to_json(const RunConfig& c) {
  return json{
      {"run_id", c.run_id},
      {"seed", c.seed},
      {"world_size", c.world_size},
      {"batch_per_worker", c.batch_per_worker},
      {"epochs", c.epochs},
      {"warmup_steps", c.warmup_steps},
      {"peak_lr", c.peak_lr},
      {"scheduler", to_string(c.scheduler)},
      {"weight_decay", c.weight_decay},
      {"aug", detail::aug_to_json(c.aug)},
      {"gather_with_grad", c.gather_with_grad},
      {"local_loss", c.local_loss},
      {"precision", to_string(c.precision)},
      {"grad_checkpointing", c.grad_checkpointing},
      {"batchnorm_sync", c.batchnorm_sync},
      {"ddp_static_graph", c.ddp_static_graph},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"eps", c.eps},
      {"model",
       json{{"embed_dim", c.model.embed_dim},
            {"hidden_dim", c.model.hidden_dim},
            {"context_limit", c.model.context_limit}}},
      {"dataset",
       json{{"concepts", c.dataset.concepts},
            {"n_per_concept", c.dataset.n_per_concept},
            {"image_size", c.dataset.image_size}}},
  };
}

inline RunConfig config_from_json(const json& j) {
  detail::expect_keys(
      j,
      {"run_id", "seed", "world_size", "batch_per_worker", "epochs",
       "warmup_steps", "peak_lr", "scheduler", "weight_decay", "aug",
       "gather_with_grad", "local_loss", "precision", "grad_checkpointing",
       "batchnorm_sync", "ddp_static_graph", "beta1", "beta2", "eps", "model",
       "dataset"},
      "config");
  RunConfig c;
  c.run_id = detail::get_field<std::string>(j, "run_id", "config");
  c.seed = detail::get_field<std::uint64_t>(j, "seed", "config");
  c.world_size = detail::get_field<int>(j, "world_size", "config");
  c.batch_per_worker = detail::get_field<int>(j, "batch_per_worker", "config");
  c.epochs = detail::get_field<int>(j, "epochs", "config");
  c.warmup_steps = detail::get_field<int>(j, "warmup_steps", "config");
  c.peak_lr = detail::get_field<double>(j, "peak_lr", "config");
  c.scheduler = scheduler_from_string(
      detail::get_field<std::string>(j, "scheduler", "config"));
  c.weight_decay = detail::get_field<double>(j, "weight_decay", "config");
  const json& aug = j.at("aug");
  detail::expect_keys(aug,
                      {"rrc_scale_min", "rrc_scale_max", "rrc_ratio_min",
                       "rrc_ratio_max", "out_size", "mean", "std"},
                      "aug");
  c.aug.scale_min = detail::get_field<double>(aug, "rrc_scale_min", "aug");
  c.aug.scale_max = detail::get_field<double>(aug, "rrc_scale_max", "aug");
  c.aug.ratio_min = detail::get_field<double>(aug, "rrc_ratio_min", "aug");
  c.aug.ratio_max = detail::get_field<double>(aug, "rrc_ratio_max", "aug");
  c.aug.out_size = detail::get_field<int>(aug, "out_size", "aug");
  c.aug.mean = detail::get_field<std::array<double, 3>>(aug, "mean", "aug");
  c.aug.std = detail::get_field<std::array<double, 3>>(aug, "std", "aug");
  c.gather_with_grad = detail::get_field<bool>(j, "gather_with_grad", "config");
  c.local_loss = detail::get_field<bool>(j, "local_loss", "config");
  c.precision = precision_from_string(
      detail::get_field<std::string>(j, "precision", "config"));
  c.grad_checkpointing =
      detail::get_field<bool>(j, "grad_checkpointing", "config");
  c.batchnorm_sync = detail::get_field<bool>(j, "batchnorm_sync", "config");
  c.ddp_static_graph = detail::get_field<bool>(j, "ddp_static_graph", "config");
  c.beta1 = detail::get_field<double>(j, "beta1", "config");
  c.beta2 = detail::get_field<double>(j, "beta2", "config");
  c.eps = detail::get_field<double>(j, "eps", "config");
  const json& model = j.at("model");
  detail::expect_keys(model, {"embed_dim", "hidden_dim", "context_limit"},
                      "model");
  c.model.embed_dim = detail::get_field<int>(model, "embed_dim", "model");
  c.model.hidden_dim = detail::get_field<int>(model, "hidden_dim", "model");
  c.model.context_limit =
      detail::get_field<int>(model, "context_limit", "model");
  const json& dataset = j.at("dataset");
  detail::expect_keys(dataset, {"concepts", "n_per_concept", "image_size"},
                      "dataset");
  c.dataset.concepts = detail::get_field<std::vector<std::string>>(
      dataset, "concepts", "dataset");
  c.dataset.n_per_concept =
      detail::get_field<int>(dataset, "n_per_concept", "dataset");
  c.dataset.image_size =
      detail::get_field<int>(dataset, "image_size", "dataset");
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigInvalid("cannot parse " + path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Canonical serialization: sorted keys, lowercase identifiers, shortest
/// round-trip float text, run_id excluded (it names the run, not the
/// configuration).
inline std::string canonical_config(const RunConfig& c) {
  json j = config_to_json(c);
  j.erase("run_id");
  return j.dump();
}

/// SHA-256 over the canonical serialization; 64 hex chars.
inline std::string config_hash(const RunConfig& c) {
  c.validate();
  return sha256_hex(canonical_config(c));
}

struct FieldDiff {
  std::string field;
  std::string value_a;
  std::string value_b;
};

namespace detail {
inline void diff_walk(const json& a, const json& b, const std::string& prefix,
                      std::vector<FieldDiff>& out) {
  if (a.is_object() && b.is_object()) {
    for (const auto& [k, va] : a.items()) {
      const std::string path = prefix.empty() ? k : prefix + "." + k;
      diff_walk(va, b.at(k), path, out);
    }
    return;
  }
  if (a != b) out.push_back({prefix, a.dump(), b.dump()});
}
}  // namespace detail

/// Exactly the differing leaf fields, sorted by field name. run_id is not
/// part of the compared configuration.
inline std::vector<FieldDiff> diff_configs(const RunConfig& a,
                                           const RunConfig& b) {
  json ja = config_to_json(a);
  json jb = config_to_json(b);
  ja.erase("run_id");
  jb.erase("run_id");
  std::vector<FieldDiff> out;
  detail::diff_walk(ja, jb, "", out);
  std::sort(out.begin(), out.end(),
            [](const FieldDiff& x, const FieldDiff& y) { return x.field < y.field; });
  return out;
}

}  // namespace duet
