#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "dml/codebook.hpp"
#include "dml/transformer.hpp"

namespace dml {

// How the mode vector enters the masked decoder: added to every input
// embedding, or prepended as an extra leading position.
enum class ModeConditioning { kAdditive, kPrepended };

struct ModelConfig {
  std::string preset = "desk";
  std::size_t vocab_size = 0;
  std::size_t d_img = 32;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t max_len = 24;
  std::size_t mode_encoder_layers = 1;
  std::size_t masked_decoder_layers = 1;
  std::size_t image_encoder_layers = 1;
  std::size_t caption_decoder_layers = 1;
  double dropout = 0.0;
  std::size_t codebook_size = 16;
  ModeConditioning nat_conditioning = ModeConditioning::kAdditive;
  // Let the captioning loss update the codebook through q (off: q is detached).
  bool mic_updates_codebook = false;
  // false builds the plain captioner used as the no-mode baseline.
  bool use_modes = true;
  std::uint64_t seed = 1;

  TransformerConfig transformer(std::size_t layers) const;
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Small configuration that trains on one CPU core in minutes.
ModelConfig desk_model_preset(std::size_t vocab_size, std::size_t d_img);
// 768 hidden, 12 heads, 6-layer mode encoder, 2-layer masked decoder, k = 64.
ModelConfig paper_model_preset(std::size_t vocab_size, std::size_t d_img);

// All parameters of both branches plus the shared codebook.
//
//   cdvae.mode_encoder.*    E_m over [MODE] + caption
//   cdvae.masked_decoder.*  D_m over [MASK] x T, cross-attending to the image
//   cdvae.codebook.*        the k x d mode embeddings
//   mic.image_encoder.*     E_c over projected region features
//   mic.caption_decoder.*   autoregressive D_c with the mode offset
class DmlModel {
 public:
  explicit DmlModel(const ModelConfig& cfg);
  DmlModel(const DmlModel&) = delete;
  DmlModel& operator=(const DmlModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

  const TokenEmbedding& mode_embedding() const { return mode_embed_; }
  const TransformerEncoder& mode_encoder() const { return mode_encoder_; }
  const TokenEmbedding& nat_embedding() const { return nat_embed_; }
  const TransformerDecoder& masked_decoder() const { return masked_decoder_; }
  const Linear& image_projection() const { return image_proj_; }
  const TransformerEncoder& image_encoder() const { return image_encoder_; }
  const TokenEmbedding& caption_embedding() const { return caption_embed_; }
  const TransformerDecoder& caption_decoder() const { return caption_decoder_; }

  static bool is_image_encoder_param(const std::string& name);
  static constexpr const char* kCodebookName = "cdvae.codebook.shared.entries";

 private:
  ModelConfig cfg_;
  ParameterStore params_;
  TokenEmbedding mode_embed_;
  TransformerEncoder mode_encoder_;
  TokenEmbedding nat_embed_;
  TransformerDecoder masked_decoder_;
  Linear image_proj_;
  TransformerEncoder image_encoder_;
  TokenEmbedding caption_embed_;
  TransformerDecoder caption_decoder_;
  Codebook codebook_;
};

}  // namespace dml
