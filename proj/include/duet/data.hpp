#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/checkpoint.hpp"
#include "duet/errors.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kDefaultContextLimit = 77;

/// H x W x 3 image, pixels in [0,1], row-major HWC.
struct SynthImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;
  int concept_id = -1;

  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

struct Caption {
  std::string text;
  std::vector<int> token_ids;
  int concept_id = -1;
};

struct Vocab {
  std::vector<std::string> words;  // index == id; 0 is <pad>, 1 is <unk>
  std::map<std::string, int> ids;

  static Vocab from_words(std::vector<std::string> vocab_words) {
    Vocab v;
    v.words = std::move(vocab_words);
    for (std::size_t i = 0; i < v.words.size(); ++i) {
      v.ids[v.words[i]] = static_cast<int>(i);
    }
    return v;
  }

  int size() const { return static_cast<int>(words.size()); }
};

/// Crop geometry plus the raw (pre-clamp) samples that produced it.
struct CropGeometry {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  double area_fraction = 0.0;  // as sampled, before clamping
  double aspect = 1.0;         // as sampled
};

struct AugmentSpec {
  double scale_min = 0.7;
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  int out_size = 32;
  std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
  std::array<double, 3> std{0.26862954, 0.26130258, 0.27577711};

  void validate() const {
    if (!(scale_min > 0.0) || !(scale_min <= scale_max) || !(scale_max <= 1.0)) {
      throw BadSpec("require 0 < scale_min <= scale_max <= 1");
    }
    if (!(ratio_min > 0.0) || !(ratio_min <= ratio_max)) {
      throw BadSpec("require 0 < ratio_min <= ratio_max");
    }
    if (out_size < 1) throw BadSpec("out_size must be >= 1");
    for (double s : std) {
      if (!(s > 0.0)) throw BadSpec("std components must be > 0");
    }
  }
};

/// The caption templates used both for synthetic caption generation and
/// for building the zero-shot classifier.
inline const std::vector<std::string>& default_prompt_templates() {
  static const std::vector<std::string> templates = {
      "a histopathology slide showing {}",
      "histopathology image of {}",
      "pathology tissue showing {}",
      "presence of {} tissue on image",
  };
  return templates;
}

inline std::string fill_template(const std::string& tmpl,
                                 const std::string& label) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos) {
    throw BadSpec("template \"" + tmpl + "\" has no {} placeholder");
  }
  std::string out = tmpl;
  out.replace(pos, 2, label);
  return out;
}

/// Lowercase, split on anything non-alphanumeric, map through the vocab
/// (unknown words become <unk>), truncate to the context limit.
inline std::vector<int> tokenize(const std::string& text, const Vocab& vocab,
                                 int context_limit = kDefaultContextLimit) {
  std::vector<int> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    if (static_cast<int>(ids.size()) < context_limit) {
      auto it = vocab.ids.find(word);
      ids.push_back(it == vocab.ids.end() ? kUnkId : it->second);
    }
    word.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

inline std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
  }
  if (!word.empty()) out.push_back(word);
  return out;
}

struct SynthDataset {
  std::vector<std::string> concepts;
  int n_per_concept = 0;
  int image_size = 0;
  Vocab vocab;
  std::vector<SynthImage> images;
  std::vector<Caption> captions;

  std::size_t size() const { return images.size(); }
};

/// Deterministic synthetic image-caption pairs. Each concept gets its own
/// texture family: a base brightness, stripe frequency, and orientation
/// parameterized by the concept index, with small per-image jitter drawn
/// from stream(seed, 0, "synth"). Brightness separation is what gives the
/// contrastive objective signal at desk scale.
inline SynthDataset synth_dataset(const std::vector<std::string>& concepts,
                                  int n_per_concept, int image_size,
                                  std::uint64_t seed) {
  if (concepts.size() < 2) throw BadConcepts("need at least 2 concepts");
  {
    std::set<std::string> uniq(concepts.begin(), concepts.end());
    if (uniq.size() != concepts.size()) {
      throw BadConcepts("duplicate concept names");
    }
  }
  if (n_per_concept < 1) throw BadConcepts("n_per_concept must be >= 1");
  if (image_size < 8) throw BadSpec("image_size must be >= 8");

  SynthDataset ds;
  ds.concepts = concepts;
  ds.n_per_concept = n_per_concept;
  ds.image_size = image_size;

  // Vocabulary from every template filled with every concept name.
  std::set<std::string> word_set;
  for (const auto& name : concepts) {
    for (const auto& tmpl : default_prompt_templates()) {
      for (const auto& w : tokenize_words(fill_template(tmpl, name))) {
        word_set.insert(w);
      }
    }
  }
  std::vector<std::string> words = {"<pad>", "<unk>"};
  words.insert(words.end(), word_set.begin(), word_set.end());
  ds.vocab = Vocab::from_words(std::move(words));

  RngStream s = stream(seed, 0, "synth");
  const int c_count = static_cast<int>(concepts.size());
  const auto& templates = default_prompt_templates();
  for (int c = 0; c < c_count; ++c) {
    const double brightness = 0.2 + 0.6 * c / (c_count - 1);
    const double base_freq = 2.0 + 3.0 * c;
    const double angle = std::numbers::pi * c / c_count;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int i = 0; i < n_per_concept; ++i) {
      const double phase = s.uniform(0.0, 2.0 * std::numbers::pi);
      const double freq = base_freq * s.uniform(0.9, 1.1);
      const double jitter = s.uniform(-0.03, 0.03);
      SynthImage img;
      img.height = img.width = image_size;
      img.concept_id = c;
      img.pixels.resize(static_cast<std::size_t>(image_size) * image_size * 3);
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          const double t =
              2.0 * std::numbers::pi * freq * (x * ca + y * sa) / image_size +
              phase;
          for (int ch = 0; ch < 3; ++ch) {
            const double wave =
                std::sin(t + ch * (2.0 * std::numbers::pi / 3.0));
            const double v =
                std::clamp(brightness + jitter + 0.18 * wave, 0.0, 1.0);
            img.pixels[(static_cast<std::size_t>(y) * image_size + x) * 3 +
                       ch] = static_cast<float>(v);
          }
        }
      }
      ds.images.push_back(std::move(img));

      Caption cap;
      cap.concept_id = c;
      cap.text = fill_template(templates[i % templates.size()], concepts[c]);
      cap.token_ids = tokenize(cap.text, ds.vocab);
      ds.captions.push_back(std::move(cap));
    }
  }
  return ds;
}

namespace detail {
// Uniform over [a, b] that tolerates a == b; always consumes one raw draw
// so crop geometry uses a fixed draw count.
inline double sample_range(RngStream& s, double a, double b) {
  if (a == b) {
    s.next_u64();
    return a;
  }
  return s.uniform(a, b);
}
}  // namespace detail

/// Sample crop geometry: area fraction ~ U[scale_min, scale_max], aspect
/// ~ exp(U[log ratio_min, log ratio_max]), then clamp the derived box to
/// the image and place it uniformly. Exactly four raw draws.
inline CropGeometry sample_crop(int height, int width, const AugmentSpec& spec,
                                RngStream& s) {
  spec.validate();
  if (spec.out_size > std::min(height, width)) {
    throw BadSpec("out_size exceeds image dimensions");
  }
  CropGeometry g;
  g.area_fraction = detail::sample_range(s, spec.scale_min, spec.scale_max);
  const double log_ratio =
      detail::sample_range(s, std::log(spec.ratio_min), std::log(spec.ratio_max));
  g.aspect = std::exp(log_ratio);
  const double target_area =
      g.area_fraction * static_cast<double>(height) * width;
  int w = static_cast<int>(std::lround(std::sqrt(target_area * g.aspect)));
  int h = static_cast<int>(std::lround(std::sqrt(target_area / g.aspect)));
  w = std::clamp(w, 1, width);
  h = std::clamp(h, 1, height);
  g.width = w;
  g.height = h;
  g.top = static_cast<int>(s.bounded(static_cast<std::uint64_t>(height - h + 1)));
  g.left = static_cast<int>(s.bounded(static_cast<std::uint64_t>(width - w + 1)));
  return g;
}

/// Bilinear resize with half-pixel centers of the crop region to
/// out_size x out_size. An identity-geometry crop copies pixels bit-exactly.
inline SynthImage resize_bilinear(const SynthImage& img, int top, int left,
                                  int crop_h, int crop_w, int out_size) {
  SynthImage out;
  out.height = out.width = out_size;
  out.concept_id = img.concept_id;
  out.pixels.resize(static_cast<std::size_t>(out_size) * out_size * 3);
  const double sy_scale = static_cast<double>(crop_h) / out_size;
  const double sx_scale = static_cast<double>(crop_w) / out_size;
  for (int oy = 0; oy < out_size; ++oy) {
    double sy = (oy + 0.5) * sy_scale - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(crop_h - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, crop_h - 1);
    const double fy = sy - y0;
    for (int ox = 0; ox < out_size; ++ox) {
      double sx = (ox + 0.5) * sx_scale - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(crop_w - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, crop_w - 1);
      const double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        const double p00 = img.at(top + y0, left + x0, c);
        const double p01 = img.at(top + y0, left + x1, c);
        const double p10 = img.at(top + y1, left + x0, c);
        const double p11 = img.at(top + y1, left + x1, c);
        const double v = p00 * (1 - fy) * (1 - fx) + p01 * (1 - fy) * fx +
                         p10 * fy * (1 - fx) + p11 * fy * fx;
        out.pixels[(static_cast<std::size_t>(oy) * out_size + ox) * 3 + c] =
            static_cast<float>(v);
      }
    }
  }
  return out;
}

inline SynthImage random_resized_crop(const SynthImage& img,
                                      const AugmentSpec& spec, RngStream& s) {
  const CropGeometry g = sample_crop(img.height, img.width, spec, s);
  return resize_bilinear(img, g.top, g.left, g.height, g.width, spec.out_size);
}

/// Deterministic evaluation transform: full-image resize, no randomness.
inline SynthImage center_resize(const SynthImage& img, int out_size) {
  return resize_bilinear(img, 0, 0, img.height, img.width, out_size);
}

/// Per channel (pixel - mean_c) / std_c, same HWC layout.
inline std::vector<float> normalize_image(const SynthImage& img,
                                          const std::array<double, 3>& mean,
                                          const std::array<double, 3>& stddev) {
  for (double s : stddev) {
    if (!(s > 0.0)) throw BadSpec("std components must be > 0");
  }
  std::vector<float> out(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const int c = static_cast<int>(i % 3);
    out[i] = static_cast<float>((img.pixels[i] - mean[c]) / stddev[c]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset on disk: manifest.json + one record container
// ---------------------------------------------------------------------------

inline void save_dataset(const std::string& dir, const SynthDataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["concepts"] = ds.concepts;
  manifest["counts"] = std::vector<int>(ds.concepts.size(), ds.n_per_concept);
  manifest["n_per_concept"] = ds.n_per_concept;
  manifest["image_size"] = ds.image_size;
  manifest["vocab"] = ds.vocab.words;
  {
    std::ofstream f(dir + "/manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write manifest.json in " + dir);
    f << manifest.dump(2) << "\n";
  }

  std::vector<std::pair<std::string, Tensor<float>>> records;
  char name[32];
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto& img = ds.images[i];
    std::snprintf(name, sizeof(name), "img/%06zu", i);
    records.emplace_back(
        name, Tensor<float>::from({static_cast<std::size_t>(img.height),
                                   static_cast<std::size_t>(img.width), 3},
                                  img.pixels));
    const auto& cap = ds.captions[i];
    std::vector<float> toks(cap.token_ids.begin(), cap.token_ids.end());
    std::snprintf(name, sizeof(name), "tok/%06zu", i);
    records.emplace_back(name,
                         Tensor<float>::from({toks.size()}, std::move(toks)));
  }
  {
    std::vector<float> labels(ds.images.size());
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      labels[i] = static_cast<float>(ds.images[i].concept_id);
    }
    records.emplace_back(
        "labels", Tensor<float>::from({labels.size()}, std::move(labels)));
  }
  write_file(dir + "/records.bin", serialize_checkpoint(records));
}

inline SynthDataset load_dataset(const std::string& dir) {
  nlohmann::json manifest;
  {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot read manifest.json in " + dir);
    f >> manifest;
  }
  SynthDataset ds;
  ds.concepts = manifest.at("concepts").get<std::vector<std::string>>();
  ds.n_per_concept = manifest.at("n_per_concept").get<int>();
  ds.image_size = manifest.at("image_size").get<int>();
  ds.vocab =
      Vocab::from_words(manifest.at("vocab").get<std::vector<std::string>>());

  const std::string bytes = read_file(dir + "/records.bin");
  std::map<std::string, Tensor<float>> by_name;
  for (auto& [name, t] : deserialize_checkpoint<float>(bytes)) {
    by_name.emplace(name, t);
  }
  const auto labels_it = by_name.find("labels");
  if (labels_it == by_name.end()) throw IoError("records.bin missing labels");
  const auto& labels = labels_it->second.data();
  char name[32];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::snprintf(name, sizeof(name), "img/%06zu", i);
    const auto img_it = by_name.find(name);
    std::snprintf(name, sizeof(name), "tok/%06zu", i);
    const auto tok_it = by_name.find(name);
    if (img_it == by_name.end() || tok_it == by_name.end()) {
      throw IoError("records.bin missing record " + std::to_string(i));
    }
    SynthImage img;
    img.height = static_cast<int>(img_it->second.shape()[0]);
    img.width = static_cast<int>(img_it->second.shape()[1]);
    img.pixels = img_it->second.data();
    img.concept_id = static_cast<int>(labels[i]);
    ds.images.push_back(std::move(img));

    Caption cap;
    cap.concept_id = static_cast<int>(labels[i]);
    for (float t : tok_it->second.data()) {
      cap.token_ids.push_back(static_cast<int>(t));
    }
    // Reconstruct advisory text from ids; casing/punctuation are not kept.
    std::string text;
    for (int id : cap.token_ids) {
      if (!text.empty()) text.push_back(' ');
      text += ds.vocab.words.at(static_cast<std::size_t>(id));
    }
    cap.text = std::move(text);
    ds.captions.push_back(std::move(cap));
  }
  return ds;
}

}  // namespace duet
