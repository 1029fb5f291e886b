#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dml/tensor.hpp"

namespace dml {

struct TransformerConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t n_layers = 1;
  std::size_t max_len = 24;
  double dropout = 0.0;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

// Named parameter registry. Names follow `<branch>.<component>.<layer>.<tensor>`.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  Tensor normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng);
  Tensor constant(const std::string& name, Shape shape, double value);
  // Registers an existing tensor (e.g. the codebook) under `name`.
  Tensor adopt(const std::string& name, Tensor t);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  void zero_grad();

 private:
  Tensor& add(const std::string& name, Tensor t);
  std::vector<Entry> entries_;
};

// Inverted dropout with its own seeded stream. p == 0 is the identity.
class Dropout {
 public:
  Dropout(double p, std::uint64_t seed) : p_(p), rng_(seed) {}
  Tensor apply(const Tensor& x);

 private:
  double p_;
  std::mt19937_64 rng_;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear create(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                       std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams create(ParameterStore& store, const std::string& prefix, std::size_t d);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias, 1e-5); }
};

// Multi-head scaled dot-product attention over already projected q, k, v
// (each [t x d_model]); heads are contiguous column blocks. Scaling is
// 1/sqrt(d_model / n_heads). Optional `weights_out` receives one [tq x tk]
// weight matrix per head.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                            std::size_t n_heads, std::vector<Tensor>* weights_out = nullptr);

struct AttentionBlock {
  Linear query, key, value, output;
  std::size_t n_heads = 1;

  static AttentionBlock create(ParameterStore& store, const std::string& prefix, const TransformerConfig& cfg,
                               std::mt19937_64& rng);
  Tensor forward(const Tensor& x, const Tensor& memory, const AttentionMask& mask) const;
};

struct FeedForward {
  Linear up, down;

  static FeedForward create(ParameterStore& store, const std::string& prefix, const TransformerConfig& cfg,
                            std::mt19937_64& rng);
  Tensor forward(const Tensor& x, Dropout* dropout) const;
};

struct EncoderLayer {
  LayerNormParams norm_attn, norm_ff;
  AttentionBlock self_attn;
  FeedForward ff;

  Tensor forward(const Tensor& x, const AttentionMask& mask, Dropout* dropout) const;
};

struct DecoderLayer {
  LayerNormParams norm_self, norm_cross, norm_ff;
  AttentionBlock self_attn, cross_attn;
  FeedForward ff;

  Tensor forward(const Tensor& x, const Tensor& memory, const AttentionMask& self_mask,
                 const AttentionMask& memory_mask, Dropout* dropout) const;
};

// Pre-norm encoder stack followed by a final layer norm.
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(ParameterStore& store, const std::string& prefix, const TransformerConfig& cfg,
                     std::mt19937_64& rng, bool final_norm = true);

  // The residual layer stack alone; zero layers is the identity.
  Tensor forward_layers(const Tensor& inputs, const std::vector<bool>& key_is_pad, Dropout* dropout = nullptr) const;
  // Layers plus the final norm, if the encoder has one.
  Tensor forward(const Tensor& inputs, const std::vector<bool>& key_is_pad, Dropout* dropout = nullptr) const;
  const TransformerConfig& config() const { return cfg_; }

 private:
  TransformerConfig cfg_;
  std::vector<EncoderLayer> layers_;
  std::optional<LayerNormParams> final_norm_;
};

class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(ParameterStore& store, const std::string& prefix, const TransformerConfig& cfg,
                     std::mt19937_64& rng);

  Tensor forward_layers(const Tensor& inputs, const Tensor& memory, const AttentionMask& self_mask,
                        const std::vector<bool>& memory_is_pad, Dropout* dropout = nullptr) const;
  Tensor forward(const Tensor& inputs, const Tensor& memory, const AttentionMask& self_mask,
                 const std::vector<bool>& memory_is_pad, Dropout* dropout = nullptr) const;
  const TransformerConfig& config() const { return cfg_; }

 private:
  TransformerConfig cfg_;
  std::vector<DecoderLayer> layers_;
  LayerNormParams final_norm_;
};

// Token plus learned positional embeddings; the token table doubles as the
// (bias-free) output projection.
class TokenEmbedding {
 public:
  TokenEmbedding() = default;
  TokenEmbedding(ParameterStore& store, const std::string& prefix, std::size_t vocab_size, std::size_t d_model,
                 std::size_t max_len, std::mt19937_64& rng);

  // token_emb + pos_emb, plus `mode_offset` added at every position when given.
  Tensor embed(std::span<const int> ids, const std::optional<Tensor>& mode_offset = std::nullopt) const;
  // Same, with rows offset by `position_offset` into the positional table.
  Tensor embed_at(std::span<const int> ids, std::size_t position_offset,
                  const std::optional<Tensor>& mode_offset = std::nullopt) const;
  Tensor lm_head(const Tensor& hidden) const;

  const Tensor& tokens() const { return tokens_; }
  const Tensor& positions() const { return positions_; }
  std::size_t vocab_size() const { return tokens_.size(0); }
  std::size_t max_len() const { return positions_.size(0); }

 private:
  Tensor tokens_;
  Tensor positions_;
};

}  // namespace dml
