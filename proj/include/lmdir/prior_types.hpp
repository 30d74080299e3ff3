#pragma once

#include <cstdint>
#include <string>

#include "lmdir/image.hpp"
#include "lmdir/tensor.hpp"

namespace lmdir::prior {

struct PriorTexts {
  std::string degradation_text;
  std::string content_text;
  std::string provider_id;
  std::string prompt_template_id;

  friend bool operator==(const PriorTexts&, const PriorTexts&) = default;
};

// Token embeddings of one text, (N, Ctext).
struct TextEmbedding {
  Tensor<float> tokens;
  std::string source_text_hash;
  std::string encoder_id;

  friend bool operator==(const TextEmbedding&, const TextEmbedding&) = default;
};

struct DiffusionMeta {
  int steps = 30;
  std::int64_t seed = 0;
  std::string negative_prompt;

  friend bool operator==(const DiffusionMeta&, const DiffusionMeta&) = default;
};

// Everything the restoration network needs from the large models for one
// input image. Immutable once built; safe to share between threads.
struct PriorBundle {
  std::string image_id;
  PriorTexts texts;
  TextEmbedding e_d;
  TextEmbedding e_c;
  TensorImage reference;
  DiffusionMeta diffusion_meta;
  std::string created_at;

  // A constant-valued reference carries no texture; callers may warn.
  bool degenerate_reference() const { return !reference.empty() && reference.is_constant(); }

  friend bool operator==(const PriorBundle&, const PriorBundle&) = default;
};

}  // namespace lmdir::prior
