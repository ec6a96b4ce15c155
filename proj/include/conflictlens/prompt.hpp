// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "conflictlens/errors.hpp"
#include "conflictlens/numerics.hpp"

namespace conflictlens {

enum class Modality : std::uint8_t { Image = 0, Caption = 1 };

inline Modality other(Modality m) {
  return m == Modality::Image ? Modality::Caption : Modality::Image;
}

inline std::string_view to_string(Modality m) {
  return m == Modality::Image ? "image" : "caption";
}

inline Modality modality_from_string(std::string_view s) {
  if (s == "image") return Modality::Image;
  if (s == "caption") return Modality::Caption;
  throw ConfigError("unknown modality '" + std::string(s) + "'");
}

// Token id layout:
//   [0, 5)                      structural tokens
//   [5, 5 + kWords)             caption template words
//   [caption_base, +n_classes)  caption class names
//   [answer_base, +n_classes)   answer / option class names
class Vocabulary {
 public:
  static constexpr std::int32_t kImg = 0;
  static constexpr std::int32_t kSep = 1;
  static constexpr std::int32_t kQueryImage = 2;
  static constexpr std::int32_t kQueryCaption = 3;
  static constexpr std::int32_t kAnswer = 4;
  static constexpr std::int32_t kWordBase = 5;

  static constexpr std::array<std::string_view, 7> kWords = {
      "this", "is", "an", "image", "of", "a", "photo"};

  explicit Vocabulary(std::size_t n_classes = 0) : n_classes_(n_classes) {}

  std::size_t n_classes() const { return n_classes_; }
  std::size_t size() const { return caption_base() + 2 * n_classes_; }

  std::int32_t word(std::string_view w) const {
    for (std::size_t i = 0; i < kWords.size(); ++i)
      if (kWords[i] == w) return kWordBase + static_cast<std::int32_t>(i);
    throw IndexError("unknown template word '" + std::string(w) + "'");
  }

  std::int32_t caption_base() const {
    return kWordBase + static_cast<std::int32_t>(kWords.size());
  }
  std::int32_t answer_base() const {
    return caption_base() + static_cast<std::int32_t>(n_classes_);
  }

  std::int32_t caption_token(std::size_t cls) const {
    check_class(cls);
    return caption_base() + static_cast<std::int32_t>(cls);
  }
  std::int32_t answer_token(std::size_t cls) const {
    check_class(cls);
    return answer_base() + static_cast<std::int32_t>(cls);
  }

  bool is_answer_token(std::int32_t tok) const {
    return tok >= answer_base() &&
           tok < answer_base() + static_cast<std::int32_t>(n_classes_);
  }
  std::size_t answer_class(std::int32_t tok) const {
    return static_cast<std::size_t>(tok - answer_base());
  }

  std::int32_t query_token(Modality m) const {
    return m == Modality::Image ? kQueryImage : kQueryCaption;
  }

 private:
  void check_class(std::size_t cls) const {
    if (cls >= n_classes_) {
      throw IndexError("class id " + std::to_string(cls) + " out of range for " +
                       std::to_string(n_classes_) + " classes");
    }
  }

  std::size_t n_classes_;
};

// Caption templates mirroring the image-classification caption set; the
// class name always comes last.
inline constexpr std::array<std::string_view, 6> kCaptionTemplates = {
    "this is an image of a", "this is a photo of a", "an image of a",
    "a photo of a",          "this is a",            "a"};

inline std::vector<std::int32_t> caption_tokens(const Vocabulary& vocab,
                                                std::size_t template_index,
                                                std::size_t cls) {
  if (template_index >= kCaptionTemplates.size()) {
    throw ConfigError("caption template index " + std::to_string(template_index) +
                      " out of range (have " +
                      std::to_string(kCaptionTemplates.size()) + ")");
  }
  std::vector<std::int32_t> out;
  std::string_view t = kCaptionTemplates[template_index];
  while (!t.empty()) {
    const auto sp = t.find(' ');
    out.push_back(vocab.word(t.substr(0, sp)));
    if (sp == std::string_view::npos) break;
    t.remove_prefix(sp + 1);
  }
  out.push_back(vocab.caption_token(cls));
  return out;
}

// A tokenized prompt. Every kImg token consumes the next row of `patches`
// in order. The answer is predicted from the final position.
struct EncodedPrompt {
  std::vector<std::int32_t> tokens;
  Mat patches;                       // n_image_tokens x patch_dim, or 0 rows
  std::vector<std::size_t> options;  // class ids, in presentation order
  Modality target = Modality::Image;

  std::size_t answer_position() const { return tokens.size() - 1; }
  std::size_t length() const { return tokens.size(); }
};

}  // namespace conflictlens
