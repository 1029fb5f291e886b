#include "dml/transformer.hpp"

#include <cmath>
#include <numeric>

namespace dml {

void TransformerConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                                std::to_string(n_heads) + ")");
  }
  if (d_ff == 0 || max_len == 0) throw std::invalid_argument("d_ff and max_len must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
}

// ---------------------------------------------------------------------------

Tensor& ParameterStore::add(const std::string& name, Tensor t) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name " + name);
  entries_.push_back({name, std::move(t)});
  return entries_.back().tensor;
}

Tensor ParameterStore::normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return add(name, Tensor::from(std::move(shape), std::move(values), true));
}

Tensor ParameterStore::constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value, true));
}

const Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw std::out_of_range("unknown parameter " + name);
}

Tensor ParameterStore::adopt(const std::string& name, Tensor t) { return add(name, std::move(t)); }

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

Tensor Dropout::apply(const Tensor& x) {
  if (p_ <= 0.0) return x;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return dropout(x, p_, [this, &u] { return u(rng_); });
}

// ---------------------------------------------------------------------------

Linear Linear::create(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                      std::mt19937_64& rng) {
  return Linear{store.normal(prefix + "_w", {in, out}, 0.02, rng), store.constant(prefix + "_b", {out}, 0.0)};
}

Tensor Linear::forward(const Tensor& x) const { return add_rowvec(matmul(x, weight), bias); }

LayerNormParams LayerNormParams::create(ParameterStore& store, const std::string& prefix, std::size_t d) {
  return LayerNormParams{store.constant(prefix + "_g", {d}, 1.0), store.constant(prefix + "_b", {d}, 0.0)};
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                            std::size_t n_heads, std::vector<Tensor>* weights_out) {
  if (q.dim() != 2 || k.dim() != 2 || v.dim() != 2) throw DimensionError("attention inputs must be matrices");
  const std::size_t d = q.size(1);
  if (k.size(1) != d || v.size(1) != d || k.size(0) != v.size(0)) {
    throw DimensionError("attention: incompatible q/k/v shapes " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: width not divisible by head count");
  const std::size_t hd = d / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (n_heads == 1) {
    auto w = masked_softmax(scale(matmul(q, transpose(k)), inv_scale), mask);
    if (weights_out) weights_out->push_back(w);
    return matmul(w, v);
  }
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    auto qh = slice_cols(q, h * hd, hd);
    auto kh = slice_cols(k, h * hd, hd);
    auto vh = slice_cols(v, h * hd, hd);
    auto w = masked_softmax(scale(matmul(qh, transpose(kh)), inv_scale), mask);
    if (weights_out) weights_out->push_back(w);
    heads.push_back(matmul(w, vh));
  }
  return concat_cols(heads);
}

AttentionBlock AttentionBlock::create(ParameterStore& store, const std::string& prefix, const TransformerConfig& cfg,
                                      std::mt19937_64& rng) {
  AttentionBlock b;
  b.query = Linear::create(store, prefix + "_q", cfg.d_model, cfg.d_model, rng);
  b.key = Linear::create(store, prefix + "_k", cfg.d_model, cfg.d_model, rng);
  b.value = Linear::create(store, prefix + "_v", cfg.d_model, cfg.d_model, rng);
  b.output = Linear::create(store, prefix + "_o", cfg.d_model, cfg.d_model, rng);
  b.n_heads = cfg.n_heads;
  return b;
}

Tensor AttentionBlock::forward(const Tensor& x, const Tensor& memory, const AttentionMask& mask) const {
  auto ctx = multi_head_attention(query.forward(x), key.forward(memory), value.forward(memory), mask, n_heads);
  return output.forward(ctx);
}

FeedForward FeedForward::create(ParameterStore& store, const std::string& prefix, const TransformerConfig& cfg,
                                std::mt19937_64& rng) {
  return FeedForward{Linear::create(store, prefix + "_up", cfg.d_model, cfg.d_ff, rng),
                     Linear::create(store, prefix + "_down", cfg.d_ff, cfg.d_model, rng)};
}

Tensor FeedForward::forward(const Tensor& x, Dropout* dropout) const {
  auto h = gelu(up.forward(x));
  if (dropout) h = dropout->apply(h);
  return down.forward(h);
}

namespace {

Tensor residual(const Tensor& x, const Tensor& branch, Dropout* dropout) {
  return add(x, dropout ? dropout->apply(branch) : branch);
}

}  // namespace

Tensor EncoderLayer::forward(const Tensor& x, const AttentionMask& mask, Dropout* dropout) const {
  auto h = norm_attn.forward(x);
  auto y = residual(x, self_attn.forward(h, h, mask), dropout);
  return residual(y, ff.forward(norm_ff.forward(y), dropout), dropout);
}

Tensor DecoderLayer::forward(const Tensor& x, const Tensor& memory, const AttentionMask& self_mask,
                             const AttentionMask& memory_mask, Dropout* dropout) const {
  auto h = norm_self.forward(x);
  auto y = residual(x, self_attn.forward(h, h, self_mask), dropout);
  y = residual(y, cross_attn.forward(norm_cross.forward(y), memory, memory_mask), dropout);
  return residual(y, ff.forward(norm_ff.forward(y), dropout), dropout);
}

// ---------------------------------------------------------------------------

TransformerEncoder::TransformerEncoder(ParameterStore& store, const std::string& prefix,
                                       const TransformerConfig& cfg, std::mt19937_64& rng, bool final_norm)
    : cfg_(cfg) {
  cfg.validate();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = prefix + "." + std::to_string(l) + ".";
    EncoderLayer layer;
    layer.norm_attn = LayerNormParams::create(store, p + "ln_attn", cfg.d_model);
    layer.self_attn = AttentionBlock::create(store, p + "self_attn", cfg, rng);
    layer.norm_ff = LayerNormParams::create(store, p + "ln_ff", cfg.d_model);
    layer.ff = FeedForward::create(store, p + "ff", cfg, rng);
    layers_.push_back(std::move(layer));
  }
  if (final_norm) final_norm_ = LayerNormParams::create(store, prefix + ".final.ln", cfg.d_model);
}

Tensor TransformerEncoder::forward_layers(const Tensor& inputs, const std::vector<bool>& key_is_pad,
                                          Dropout* dropout) const {
  const std::size_t t = inputs.size(0);
  if (!key_is_pad.empty() && key_is_pad.size() != t) {
    throw DimensionError("encoder: pad mask length " + std::to_string(key_is_pad.size()) + " vs sequence " +
                         std::to_string(t));
  }
  const auto mask =
      key_is_pad.empty() ? AttentionMask::all_visible(t, t) : AttentionMask::key_padding(t, key_is_pad);
  Tensor x = inputs;
  for (const auto& layer : layers_) x = layer.forward(x, mask, dropout);
  return x;
}

Tensor TransformerEncoder::forward(const Tensor& inputs, const std::vector<bool>& key_is_pad,
                                   Dropout* dropout) const {
  auto h = forward_layers(inputs, key_is_pad, dropout);
  return final_norm_ ? final_norm_->forward(h) : h;
}

TransformerDecoder::TransformerDecoder(ParameterStore& store, const std::string& prefix,
                                       const TransformerConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg.validate();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = prefix + "." + std::to_string(l) + ".";
    DecoderLayer layer;
    layer.norm_self = LayerNormParams::create(store, p + "ln_self", cfg.d_model);
    layer.self_attn = AttentionBlock::create(store, p + "self_attn", cfg, rng);
    layer.norm_cross = LayerNormParams::create(store, p + "ln_cross", cfg.d_model);
    layer.cross_attn = AttentionBlock::create(store, p + "cross_attn", cfg, rng);
    layer.norm_ff = LayerNormParams::create(store, p + "ln_ff", cfg.d_model);
    layer.ff = FeedForward::create(store, p + "ff", cfg, rng);
    layers_.push_back(std::move(layer));
  }
  final_norm_ = LayerNormParams::create(store, prefix + ".final.ln", cfg.d_model);
}

Tensor TransformerDecoder::forward_layers(const Tensor& inputs, const Tensor& memory, const AttentionMask& self_mask,
                                          const std::vector<bool>& memory_is_pad, Dropout* dropout) const {
  const std::size_t t = inputs.size(0), r = memory.size(0);
  if (self_mask.rows != t || self_mask.cols != t) {
    throw DimensionError("decoder: self mask does not match sequence length " + std::to_string(t));
  }
  if (!memory_is_pad.empty() && memory_is_pad.size() != r) {
    throw DimensionError("decoder: memory pad mask length mismatch");
  }
  const auto mem_mask =
      memory_is_pad.empty() ? AttentionMask::all_visible(t, r) : AttentionMask::key_padding(t, memory_is_pad);
  Tensor x = inputs;
  for (const auto& layer : layers_) x = layer.forward(x, memory, self_mask, mem_mask, dropout);
  return x;
}

Tensor TransformerDecoder::forward(const Tensor& inputs, const Tensor& memory, const AttentionMask& self_mask,
                                   const std::vector<bool>& memory_is_pad, Dropout* dropout) const {
  return final_norm_.forward(forward_layers(inputs, memory, self_mask, memory_is_pad, dropout));
}

// ---------------------------------------------------------------------------

TokenEmbedding::TokenEmbedding(ParameterStore& store, const std::string& prefix, std::size_t vocab_size,
                               std::size_t d_model, std::size_t max_len, std::mt19937_64& rng)
    : tokens_(store.normal(prefix + ".emb.token", {vocab_size, d_model}, 0.02, rng)),
      positions_(store.normal(prefix + ".emb.position", {max_len, d_model}, 0.02, rng)) {}

Tensor TokenEmbedding::embed(std::span<const int> ids, const std::optional<Tensor>& mode_offset) const {
  return embed_at(ids, 0, mode_offset);
}

Tensor TokenEmbedding::embed_at(std::span<const int> ids, std::size_t position_offset,
                                const std::optional<Tensor>& mode_offset) const {
  if (ids.size() + position_offset > max_len()) {
    throw DimensionError("sequence of length " + std::to_string(ids.size() + position_offset) +
                         " exceeds max_len " + std::to_string(max_len()));
  }
  std::vector<int> pos(ids.size());
  std::iota(pos.begin(), pos.end(), static_cast<int>(position_offset));
  auto x = add(embedding(tokens_, ids), embedding(positions_, pos));
  if (mode_offset) x = add_rowvec(x, *mode_offset);
  return x;
}

Tensor TokenEmbedding::lm_head(const Tensor& hidden) const { return matmul(hidden, transpose(tokens_)); }

}  // namespace dml
