#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/config.hpp"
#include "duet/errors.hpp"
#include "duet/rng.hpp"
#include "duet/trainer.hpp"

namespace duet {

inline constexpr const char* kArtifactVersion = "0.1.0";

struct EnvRecord {
  std::string artifact_version;
  std::string dtype;
  std::string rng_algorithm;
  std::string os;
  std::string arch;
  std::string timestamp;
};

inline EnvRecord capture_env(const std::string& dtype) {
  EnvRecord env;
  env.artifact_version = kArtifactVersion;
  env.dtype = dtype;
  env.rng_algorithm = RngStream::kAlgorithmId;
#if defined(__linux__)
  env.os = "linux";
#elif defined(__APPLE__)
  env.os = "darwin";
#elif defined(_WIN32)
  env.os = "windows";
#else
  env.os = "unknown-os";
#endif
#if defined(__x86_64__) || defined(_M_X64)
  env.arch = "x86_64";
#elif defined(__aarch64__) || defined(_M_ARM64)
  env.arch = "aarch64";
#else
  env.arch = "unknown-arch";
#endif
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  env.timestamp = buf;
  return env;
}

inline json env_to_json(const EnvRecord& e) {
  return json{{"artifact_version", e.artifact_version},
              {"dtype", e.dtype},
              {"rng_algorithm", e.rng_algorithm},
              {"os", e.os},
              {"arch", e.arch},
              {"timestamp", e.timestamp}};
}

inline EnvRecord env_from_json(const json& j) {
  EnvRecord e;
  e.artifact_version = j.at("artifact_version").get<std::string>();
  e.dtype = j.at("dtype").get<std::string>();
  e.rng_algorithm = j.at("rng_algorithm").get<std::string>();
  e.os = j.at("os").get<std::string>();
  e.arch = j.at("arch").get<std::string>();
  e.timestamp = j.at("timestamp").get<std::string>();
  for (const std::string* f :
       {&e.artifact_version, &e.dtype, &e.rng_algorithm, &e.os, &e.arch,
        &e.timestamp}) {
    if (f->empty()) throw ConfigInvalid("environment record field empty");
  }
  return e;
}

/// One run in the append-only ledger: content-addressed config, the
/// environment it ran under, and its per-dataset metric results.
struct LedgerEntry {
  std::string config_hash;
  RunConfig config;
  EnvRecord env;
  json results;  // dataset name -> metrics object
  std::string trajectory_ref;

  json to_json() const {
    return json{{"config_hash", config_hash},
                {"config", config_to_json(config)},
                {"env", env_to_json(env)},
                {"results", results},
                {"trajectory", trajectory_ref}};
  }

  static LedgerEntry from_json(const json& j) {
    LedgerEntry e;
    e.config_hash = j.at("config_hash").get<std::string>();
    e.config = config_from_json(j.at("config"));
    e.env = env_from_json(j.at("env"));
    e.results = j.at("results");
    e.trajectory_ref = j.at("trajectory").get<std::string>();
    if (e.config_hash != config_hash(e.config)) {
      throw ConfigInvalid("ledger entry hash does not match its config");
    }
    return e;
  }
};

inline LedgerEntry record_run(const std::string& ledger_path,
                              const RunConfig& config, const EnvRecord& env,
                              const json& results,
                              const std::string& trajectory_ref = "") {
  if (!results.is_object()) {
    throw ConfigInvalid("results must map dataset names to metric objects");
  }
  LedgerEntry entry;
  entry.config_hash = config_hash(config);
  entry.config = config;
  entry.env = env;
  entry.results = results;
  entry.trajectory_ref = trajectory_ref;
  std::ofstream f(ledger_path, std::ios::app);
  if (!f) throw IoError("cannot open ledger \"" + ledger_path + "\"");
  f << entry.to_json().dump() << "\n";
  if (!f) throw IoError("short write to ledger \"" + ledger_path + "\"");
  return entry;
}

inline std::vector<LedgerEntry> read_ledger(const std::string& ledger_path) {
  std::ifstream f(ledger_path);
  if (!f) throw IoError("cannot open ledger \"" + ledger_path + "\"");
  std::vector<LedgerEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(LedgerEntry::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw IoError("bad ledger line " + std::to_string(out.size() + 1) +
                    ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Determinism twins
// ---------------------------------------------------------------------------

struct ReproReport {
  std::string mode;              // "determinism" or "group_compare"
  bool pass = false;
  bool has_p_value = false;
  double p_value = 0.0;
  std::string details;
};

namespace detail {

inline std::string first_diverging_tensor(const std::string& ckpt_a,
                                          const std::string& ckpt_b) {
  const DtypeTag tag = peek_checkpoint_dtype(ckpt_a);
  auto walk = [](const auto& ta, const auto& tb) -> std::string {
    for (std::size_t i = 0; i < std::min(ta.size(), tb.size()); ++i) {
      if (ta[i].first != tb[i].first) return ta[i].first;
      if (ta[i].second.data() != tb[i].second.data()) return ta[i].first;
    }
    return ta.size() != tb.size() ? "(tensor count)" : "";
  };
  if (tag == DtypeTag::f32) {
    return walk(deserialize_checkpoint<float>(ckpt_a),
                deserialize_checkpoint<float>(ckpt_b));
  }
  return walk(deserialize_checkpoint<double>(ckpt_a),
              deserialize_checkpoint<double>(ckpt_b));
}

}  // namespace detail

/// Train the config `repeats` times and require byte-identical checkpoints
/// and trajectories. On failure the report names the first diverging step
/// and tensor.
inline ReproReport verify_determinism(const RunConfig& cfg, int repeats,
                                      const ExecutionPolicy& policy = {}) {
  if (repeats < 2) {
    throw BadRepeatCount("need at least 2 repeats, got " +
                         std::to_string(repeats));
  }
  const SynthDataset dataset = dataset_from_config(cfg);
  ReproReport report;
  report.mode = "determinism";
  RunArtifacts reference = run_training(cfg, dataset, policy);
  for (int rep = 1; rep < repeats; ++rep) {
    RunArtifacts run = run_training(cfg, dataset, policy);
    const bool traj_equal = run.trajectory_jsonl == reference.trajectory_jsonl;
    const bool ckpt_equal = run.checkpoint == reference.checkpoint;
    if (traj_equal && ckpt_equal) continue;
    report.pass = false;
    std::string details = "repeat " + std::to_string(rep) +
                          " diverges from repeat 0:";
    if (!traj_equal) {
      std::size_t step = 0;
      for (; step < std::min(run.trajectory.size(), reference.trajectory.size());
           ++step) {
        const auto& x = run.trajectory[step];
        const auto& y = reference.trajectory[step];
        if (x.loss != y.loss || x.lr != y.lr || x.tau != y.tau) break;
      }
      details += " first diverging step " + std::to_string(step);
    }
    if (!ckpt_equal) {
      const std::string tensor =
          detail::first_diverging_tensor(reference.checkpoint, run.checkpoint);
      details += std::string(traj_equal ? " " : "; ") + "first diverging tensor " +
                 (tensor.empty() ? "(bytes)" : tensor);
    }
    report.details = details;
    return report;
  }
  report.pass = true;
  report.details = "all " + std::to_string(repeats) +
                   " repeats byte-identical (checkpoint and trajectory)";
  return report;
}

// ---------------------------------------------------------------------------
// Permutation test over run-metric groups
// ---------------------------------------------------------------------------

struct PermutationOptions {
  bool two_sided = true;
  bool force_monte_carlo = false;
  int monte_carlo_samples = 10000;
};

struct PermutationResult {
  double p_value = 0.0;
  std::uint64_t n_splits = 0;  // exhaustive split count or MC samples + 1
  bool exhaustive = false;
};

inline constexpr std::uint64_t kExhaustiveSplitLimit = 20000;

namespace detail {

/// Group-A mean minus rest mean, summing pooled values in ascending index
/// order so equal splits produce bitwise-equal statistics.
inline double split_stat(const std::vector<double>& pooled,
                         const std::vector<char>& in_a, std::size_t na) {
  double sum_a = 0.0, sum_b = 0.0;
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    if (in_a[i]) {
      sum_a += pooled[i];
    } else {
      sum_b += pooled[i];
    }
  }
  return sum_a / static_cast<double>(na) -
         sum_b / static_cast<double>(pooled.size() - na);
}

inline std::uint64_t binomial_capped(std::uint64_t n, std::uint64_t k,
                                     std::uint64_t cap) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t result = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    // result * (n - k + i) / i stays integral at every stage
    result = result * (n - k + i) / i;
    if (result > cap) return cap + 1;
  }
  return result;
}

}  // namespace detail

/// Permutation test on the difference of group means. Exhaustive over all
/// label reassignments when C(n, n_a) <= 20000, otherwise 10000 Monte
/// Carlo resamples from stream(0, 0, "permtest"). The observed split is
/// counted in both numerator and denominator, so p > 0 always.
inline PermutationResult permutation_test(const std::vector<double>& group_a,
                                          const std::vector<double>& group_b,
                                          const PermutationOptions& opts = {}) {
  if (group_a.size() < 2 || group_b.size() < 2) {
    throw GroupTooSmall("each group needs at least 2 values");
  }
  const std::size_t na = group_a.size(), nb = group_b.size();
  const std::size_t n = na + nb;

  // Two-sided statistics are invariant under swapping the groups, so use
  // sorted pooled values and the smaller subset size; p(a,b) == p(b,a)
  // then holds bitwise in both modes.
  std::vector<double> pooled;
  pooled.reserve(n);
  pooled.insert(pooled.end(), group_a.begin(), group_a.end());
  pooled.insert(pooled.end(), group_b.begin(), group_b.end());
  std::size_t k = na;
  if (opts.two_sided) {
    std::sort(pooled.begin(), pooled.end());
    if (nb < na) k = nb;
  }
  auto stat_of = [&](const std::vector<char>& in_a) {
    const double s = detail::split_stat(pooled, in_a, k);
    return opts.two_sided ? std::fabs(s) : s;
  };

  // The observed statistic goes through the same split machinery so the
  // observed split compares bitwise-equal to its enumerated twin.
  std::vector<char> observed_mask(n, 0);
  if (opts.two_sided) {
    std::vector<double> small = (nb < na) ? group_b : group_a;
    std::sort(small.begin(), small.end());
    std::size_t si = 0;
    for (std::size_t i = 0; i < n && si < small.size(); ++i) {
      if (pooled[i] == small[si]) {
        observed_mask[i] = 1;
        ++si;
      }
    }
  } else {
    for (std::size_t i = 0; i < na; ++i) observed_mask[i] = 1;
  }
  const double observed = stat_of(observed_mask);

  PermutationResult result;
  const std::uint64_t splits =
      detail::binomial_capped(n, k, kExhaustiveSplitLimit);
  if (!opts.force_monte_carlo && splits <= kExhaustiveSplitLimit) {
    // Exhaustive enumeration of index combinations.
    std::vector<std::size_t> combo(k);
    for (std::size_t i = 0; i < k; ++i) combo[i] = i;
    std::uint64_t count = 0, total = 0;
    std::vector<char> in_a(n, 0);
    while (true) {
      std::fill(in_a.begin(), in_a.end(), 0);
      for (std::size_t i : combo) in_a[i] = 1;
      if (stat_of(in_a) >= observed) ++count;
      ++total;
      // advance combination
      std::size_t i = k;
      while (i > 0 && combo[i - 1] == n - k + (i - 1)) --i;
      if (i == 0) break;
      ++combo[i - 1];
      for (std::size_t j = i; j < k; ++j) combo[j] = combo[j - 1] + 1;
    }
    result.p_value = static_cast<double>(count) / static_cast<double>(total);
    result.n_splits = total;
    result.exhaustive = true;
    return result;
  }

  RngStream s = stream(0, 0, "permtest");
  const int m = opts.monte_carlo_samples;
  std::uint64_t count = 0;
  std::vector<char> in_a(n, 0);
  for (int r = 0; r < m; ++r) {
    const std::vector<std::size_t> perm = shuffle(s, n);
    std::fill(in_a.begin(), in_a.end(), 0);
    for (std::size_t i = 0; i < k; ++i) in_a[perm[i]] = 1;
    if (stat_of(in_a) >= observed) ++count;
  }
  result.p_value = static_cast<double>(count + 1) / static_cast<double>(m + 1);
  result.n_splits = static_cast<std::uint64_t>(m) + 1;
  result.exhaustive = false;
  return result;
}

/// Group comparison wrapped as a ReproReport; "pass" means the groups are
/// statistically indistinguishable at the given threshold.
inline ReproReport compare_groups(const std::vector<double>& group_a,
                                  const std::vector<double>& group_b,
                                  double alpha = 0.05,
                                  const PermutationOptions& opts = {}) {
  const PermutationResult r = permutation_test(group_a, group_b, opts);
  ReproReport report;
  report.mode = "group_compare";
  report.has_p_value = true;
  report.p_value = r.p_value;
  report.pass = r.p_value >= alpha;
  report.details = std::string(r.exhaustive ? "exhaustive" : "monte_carlo") +
                   " splits=" + std::to_string(r.n_splits);
  return report;
}

}  // namespace duet
