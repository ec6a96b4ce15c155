// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Labeled image sources (synthetic ShapesGrid, CIFAR-10 binary batches),
// conflicting image/caption pair construction, prompt encoding and the
// behavioral breakdown of predictions.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "conflictlens/binio.hpp"
#include "conflictlens/errors.hpp"
#include "conflictlens/numerics.hpp"
#include "conflictlens/prompt.hpp"

namespace conflictlens {

struct ClassSet {
  std::vector<std::string> names;

  ClassSet() = default;
  explicit ClassSet(std::vector<std::string> n) : names(std::move(n)) {
    std::set<std::string> seen(names.begin(), names.end());
    if (seen.size() != names.size()) throw ConfigError("ClassSet: class names must be unique");
  }

  std::size_t size() const { return names.size(); }

  static ClassSet cifar10() {
    return ClassSet({"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse",
                     "ship", "truck"});
  }
  // CIFAR-10 names when n == 10, otherwise class_0 ... class_{n-1}.
  static ClassSet synthetic(std::size_t n) {
    if (n == 10) return cifar10();
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back("class_" + std::to_string(i));
    return ClassSet(std::move(v));
  }
};

// grid rows are patches in row-major grid order, columns are patch channels.
struct LabeledImage {
  Mat grid;
  std::size_t class_id = 0;

  friend bool operator==(const LabeledImage&, const LabeledImage&) = default;
};

// ---------------------------------------------------------------------------
// ShapesGrid

struct ShapesGridSpec {
  std::size_t n_classes = 10;
  std::size_t grid = 4;
  std::size_t patch_dim = 8;
  double noise = 0.05;
  double signal = 1.0;
};

// Class k lights channel (k mod patch_dim) in one patch of quadrant
// (k + k / patch_dim) mod 4; the patch within the quadrant is random.
inline std::size_t shapes_channel(const ShapesGridSpec& s, std::size_t k) {
  return k % s.patch_dim;
}
inline std::size_t shapes_quadrant(const ShapesGridSpec& s, std::size_t k) {
  return (k + k / s.patch_dim) % 4;
}

inline LabeledImage make_shapes_image(const ShapesGridSpec& s, std::size_t cls, Rng& rng) {
  if (s.grid < 2 || s.grid % 2 != 0) throw ConfigError("ShapesGrid: grid must be even and >= 2");
  if (cls >= s.n_classes) throw IndexError("ShapesGrid: class out of range");
  LabeledImage img{Mat(s.grid * s.grid, s.patch_dim), cls};
  for (auto& v : img.grid.data) v = static_cast<float>(rng.normal() * s.noise);
  const std::size_t half = s.grid / 2;
  const std::size_t q = shapes_quadrant(s, cls);
  const std::size_t r = (q / 2) * half + rng.uniform_int(half);
  const std::size_t c = (q % 2) * half + rng.uniform_int(half);
  img.grid(r * s.grid + c, shapes_channel(s, cls)) += static_cast<float>(s.signal);
  return img;
}

// Balanced classes (index mod n_classes), shuffled.
inline std::vector<LabeledImage> generate_shapes_grid(const ShapesGridSpec& s, std::size_t n,
                                                      Rng& rng) {
  if (s.patch_dim * 4 < s.n_classes)
    throw ConfigError("ShapesGrid: too many classes for distinct channel/quadrant signatures");
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % s.n_classes;
  rng.shuffle(labels.begin(), labels.end());
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t cls : labels) out.push_back(make_shapes_image(s, cls, rng));
  return out;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
// (R, G, B planes of 32x32, row-major). Pixels are scaled to [0, 1] and
// average-pooled over 8x8 blocks into a 4x4 grid; patch channels beyond RGB
// are zero.

inline constexpr std::size_t kCifarRecord = 3073;

inline std::vector<LabeledImage> parse_cifar10_binary(std::span<const unsigned char> bytes,
                                                      std::size_t patch_dim = 3) {
  if (patch_dim < 3) throw ConfigError("CIFAR-10: patch_dim must be >= 3");
  const std::size_t n = bytes.size() / kCifarRecord;
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError("CIFAR-10: truncated record (" +
                          std::to_string(bytes.size() % kCifarRecord) + " of " +
                          std::to_string(kCifarRecord) + " bytes)",
                      n * kCifarRecord);
  }
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = i * kCifarRecord;
    const unsigned label = bytes[base];
    if (label > 9) throw FormatError("CIFAR-10: label " + std::to_string(label) + " > 9", base);
    LabeledImage img{Mat(16, patch_dim), label};
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const unsigned char* plane = bytes.data() + base + 1 + ch * 1024;
      for (std::size_t gr = 0; gr < 4; ++gr) {
        for (std::size_t gc = 0; gc < 4; ++gc) {
          std::uint32_t sum = 0;
          for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x) sum += plane[(gr * 8 + y) * 32 + gc * 8 + x];
          img.grid(gr * 4 + gc, ch) = static_cast<float>(static_cast<double>(sum) / (64.0 * 255.0));
        }
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

inline std::vector<LabeledImage> parse_cifar10_binary(const std::string& bytes,
                                                      std::size_t patch_dim = 3) {
  return parse_cifar10_binary(
      std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(bytes.data()),
                                     bytes.size()),
      patch_dim);
}

// ---------------------------------------------------------------------------
// Dataset file: "CGEN", u32 |C|, u32 G, u32 patch_dim, u32 n, then n records
// of (u16 class id, G*G*patch_dim f32 LE).

inline std::string serialize_dataset(std::span<const LabeledImage> images, std::size_t n_classes,
                                     std::size_t grid, std::size_t patch_dim) {
  binio::Writer w;
  w.bytes("CGEN");
  w.u32(static_cast<std::uint32_t>(n_classes));
  w.u32(static_cast<std::uint32_t>(grid));
  w.u32(static_cast<std::uint32_t>(patch_dim));
  w.u32(static_cast<std::uint32_t>(images.size()));
  for (const auto& im : images) {
    if (im.grid.rows != grid * grid || im.grid.cols != patch_dim)
      throw DimensionError("serialize_dataset: image grid shape mismatch");
    w.u16(static_cast<std::uint16_t>(im.class_id));
    w.f32s(im.grid.data);
  }
  return w.buffer();
}

struct DatasetFile {
  std::size_t n_classes = 0;
  std::size_t grid = 0;
  std::size_t patch_dim = 0;
  std::vector<LabeledImage> images;
};

inline DatasetFile deserialize_dataset(const std::string& bytes) {
  binio::Reader r(bytes);
  r.expect_magic("CGEN");
  DatasetFile f;
  f.n_classes = r.u32();
  f.grid = r.u32();
  f.patch_dim = r.u32();
  const std::size_t n = r.u32();
  const std::size_t record = 2 + 4 * f.grid * f.grid * f.patch_dim;
  if (r.remaining() != n * record)
    throw FormatError("CGEN: body size does not match header count", r.offset());
  f.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    LabeledImage im{Mat(f.grid * f.grid, f.patch_dim), r.u16()};
    if (im.class_id >= f.n_classes) throw FormatError("CGEN: class id out of range", at);
    r.f32s(std::span<float>(im.grid.data));
    f.images.push_back(std::move(im));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Pairs

enum class Segments : std::uint8_t { Both, ImageOnly, CaptionOnly };

struct ConflictPair {
  LabeledImage image;
  std::size_t caption_class = 0;
  bool consistent = true;
  Modality target = Modality::Image;
  Segments segments = Segments::Both;

  std::size_t label(Modality m) const {
    return m == Modality::Image ? image.class_id : caption_class;
  }
  std::size_t target_label() const { return label(target); }
  std::size_t nontarget_label() const { return label(other(target)); }
};

enum class PairMode : std::uint8_t { Consistent, Inconsistent, UnimodalImage, UnimodalCaption };

inline std::size_t sample_false_label(std::size_t true_class, std::size_t n_classes, Rng& rng) {
  if (n_classes < 2)
    throw DegenerateDataError("sample_false_label: cannot build a conflict with a single class");
  if (true_class >= n_classes) throw IndexError("sample_false_label: class out of range");
  const std::size_t r = rng.uniform_int(n_classes - 1);
  return r >= true_class ? r + 1 : r;
}

inline std::size_t sample_false_label(std::size_t true_class, const ClassSet& classes, Rng& rng) {
  return sample_false_label(true_class, classes.size(), rng);
}

// One pair per image. Unimodal modes keep the absent modality's label equal
// to the present one and force the target to the present modality.
inline std::vector<ConflictPair> make_pairs(std::span<const LabeledImage> images,
                                            std::size_t n_classes, PairMode mode,
                                            Modality target, Rng& rng) {
  std::vector<ConflictPair> out;
  out.reserve(images.size());
  for (const auto& im : images) {
    ConflictPair p{im, im.class_id, true, target, Segments::Both};
    switch (mode) {
      case PairMode::Consistent:
        break;
      case PairMode::Inconsistent:
        p.caption_class = sample_false_label(im.class_id, n_classes, rng);
        p.consistent = false;
        break;
      case PairMode::UnimodalImage:
        p.segments = Segments::ImageOnly;
        p.target = Modality::Image;
        break;
      case PairMode::UnimodalCaption:
        p.segments = Segments::CaptionOnly;
        p.target = Modality::Caption;
        break;
    }
    out.push_back(std::move(p));
  }
  return out;
}

struct PromptFormat {
  Vocabulary vocab;
  std::size_t template_index = 2;  // "an image of a {class}"
  std::size_t n_options = 5;
};

inline std::vector<std::size_t> sample_options(std::size_t image_class, std::size_t caption_class,
                                               std::size_t n_classes, std::size_t n_options,
                                               Rng& rng) {
  std::vector<std::size_t> opts;
  if (n_classes <= n_options) {
    opts.resize(n_classes);
    for (std::size_t i = 0; i < n_classes; ++i) opts[i] = i;
  } else {
    opts.push_back(image_class);
    if (caption_class != image_class) opts.push_back(caption_class);
    std::vector<std::size_t> pool;
    for (std::size_t c = 0; c < n_classes; ++c)
      if (c != image_class && c != caption_class) pool.push_back(c);
    // Partial Fisher-Yates: uniform without replacement.
    for (std::size_t i = 0; opts.size() < n_options; ++i) {
      const std::size_t j = i + rng.uniform_int(pool.size() - i);
      std::swap(pool[i], pool[j]);
      opts.push_back(pool[i]);
    }
  }
  rng.shuffle(opts.begin(), opts.end());
  return opts;
}

// [IMG x n, SEP, caption..., SEP, query, options..., ANSWER]; unimodal pairs
// drop the absent segment and its separator.
inline EncodedPrompt build_prompt(const ConflictPair& pair, const PromptFormat& fmt, Rng& rng) {
  const auto& vocab = fmt.vocab;
  EncodedPrompt ep;
  ep.target = pair.target;
  ep.options = sample_options(pair.image.class_id, pair.caption_class, vocab.n_classes(),
                              fmt.n_options, rng);
  if (pair.segments != Segments::CaptionOnly) {
    ep.patches = pair.image.grid;
    for (std::size_t i = 0; i < pair.image.grid.rows; ++i) ep.tokens.push_back(Vocabulary::kImg);
    ep.tokens.push_back(Vocabulary::kSep);
  }
  if (pair.segments != Segments::ImageOnly) {
    for (auto t : caption_tokens(vocab, fmt.template_index, pair.caption_class)) ep.tokens.push_back(t);
    ep.tokens.push_back(Vocabulary::kSep);
  }
  ep.tokens.push_back(vocab.query_token(pair.target));
  for (std::size_t c : ep.options) ep.tokens.push_back(vocab.answer_token(c));
  ep.tokens.push_back(Vocabulary::kAnswer);
  return ep;
}

// ---------------------------------------------------------------------------
// Behavioral breakdown

enum class Behavior : std::uint8_t { Correct, Misled, InOptionIncorrect, OutOfOption };

inline std::string_view to_string(Behavior b) {
  switch (b) {
    case Behavior::Correct: return "correct";
    case Behavior::Misled: return "misled";
    case Behavior::InOptionIncorrect: return "in_option_incorrect";
    case Behavior::OutOfOption: return "out_of_option";
  }
  return "?";
}

inline Behavior classify_prediction(std::optional<std::size_t> predicted, const ConflictPair& pair,
                                    std::span<const std::size_t> options) {
  if (!predicted) return Behavior::OutOfOption;
  if (*predicted == pair.target_label()) return Behavior::Correct;
  if (*predicted == pair.nontarget_label()) return Behavior::Misled;
  if (std::find(options.begin(), options.end(), *predicted) != options.end())
    return Behavior::InOptionIncorrect;
  return Behavior::OutOfOption;
}

struct BehavioralBreakdown {
  std::size_t correct = 0;
  std::size_t misled = 0;
  std::size_t in_option_incorrect = 0;
  std::size_t out_of_option = 0;

  void add(Behavior b) {
    switch (b) {
      case Behavior::Correct: ++correct; break;
      case Behavior::Misled: ++misled; break;
      case Behavior::InOptionIncorrect: ++in_option_incorrect; break;
      case Behavior::OutOfOption: ++out_of_option; break;
    }
  }
  std::size_t total() const { return correct + misled + in_option_incorrect + out_of_option; }
  double accuracy() const {
    return total() ? static_cast<double>(correct) / static_cast<double>(total()) : 0.0;
  }
  double fraction(Behavior b) const {
    if (!total()) return 0.0;
    std::size_t n = b == Behavior::Correct ? correct
                    : b == Behavior::Misled ? misled
                    : b == Behavior::InOptionIncorrect ? in_option_incorrect
                                                       : out_of_option;
    return static_cast<double>(n) / static_cast<double>(total());
  }
};

// ---------------------------------------------------------------------------
// First-token collisions. `answers[c]` is the token sequence that spells
// class c's answer.

using AnswerTokenization = std::vector<std::vector<std::int32_t>>;

inline AnswerTokenization single_token_answers(const Vocabulary& vocab) {
  AnswerTokenization t(vocab.n_classes());
  for (std::size_t c = 0; c < vocab.n_classes(); ++c) t[c] = {vocab.answer_token(c)};
  return t;
}

// Drops inconsistent pairs whose image-label and caption-label answers start
// with the same token, since the next-token readout cannot tell them apart.
inline std::vector<ConflictPair> filter_first_token_collisions(std::span<const ConflictPair> pairs,
                                                               const AnswerTokenization& answers) {
  std::vector<ConflictPair> out;
  for (const auto& p : pairs) {
    if (p.image.class_id != p.caption_class) {
      const auto& a = answers.at(p.image.class_id);
      const auto& b = answers.at(p.caption_class);
      if (!a.empty() && !b.empty() && a.front() == b.front()) continue;
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace conflictlens
