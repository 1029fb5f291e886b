#include "dml/model.hpp"

namespace dml {

TransformerConfig ModelConfig::transformer(std::size_t layers) const {
  TransformerConfig t;
  t.d_model = d_model;
  t.n_heads = n_heads;
  t.d_ff = d_ff;
  t.n_layers = layers;
  t.max_len = max_len;
  t.dropout = dropout;
  return t;
}

void ModelConfig::validate() const {
  if (vocab_size <= 6) throw std::invalid_argument("vocabulary must contain tokens beyond the specials");
  if (d_img == 0) throw std::invalid_argument("d_img must be positive");
  if (codebook_size == 0) throw std::invalid_argument("codebook size must be positive");
  if (max_len < 3) throw std::invalid_argument("max_len too small");
  transformer(1).validate();
}

namespace {

const char* conditioning_name(ModeConditioning c) { return c == ModeConditioning::kAdditive ? "additive" : "prepended"; }

ModeConditioning parse_conditioning(const std::string& s) {
  if (s == "additive") return ModeConditioning::kAdditive;
  if (s == "prepended") return ModeConditioning::kPrepended;
  throw std::invalid_argument("unknown mode conditioning '" + s + "'");
}

}  // namespace

nlohmann::json ModelConfig::to_json() const {
  return {{"preset", preset},
          {"vocab_size", vocab_size},
          {"d_img", d_img},
          {"d_model", d_model},
          {"n_heads", n_heads},
          {"d_ff", d_ff},
          {"max_len", max_len},
          {"mode_encoder_layers", mode_encoder_layers},
          {"masked_decoder_layers", masked_decoder_layers},
          {"image_encoder_layers", image_encoder_layers},
          {"caption_decoder_layers", caption_decoder_layers},
          {"dropout", dropout},
          {"codebook_size", codebook_size},
          {"nat_conditioning", conditioning_name(nat_conditioning)},
          {"mic_updates_codebook", mic_updates_codebook},
          {"use_modes", use_modes},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.preset = j.at("preset").get<std::string>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_img = j.at("d_img").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.mode_encoder_layers = j.at("mode_encoder_layers").get<std::size_t>();
  c.masked_decoder_layers = j.at("masked_decoder_layers").get<std::size_t>();
  c.image_encoder_layers = j.at("image_encoder_layers").get<std::size_t>();
  c.caption_decoder_layers = j.at("caption_decoder_layers").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.codebook_size = j.at("codebook_size").get<std::size_t>();
  c.nat_conditioning = parse_conditioning(j.at("nat_conditioning").get<std::string>());
  c.mic_updates_codebook = j.at("mic_updates_codebook").get<bool>();
  c.use_modes = j.at("use_modes").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

ModelConfig desk_model_preset(std::size_t vocab_size, std::size_t d_img) {
  ModelConfig c;
  c.preset = "desk";
  c.vocab_size = vocab_size;
  c.d_img = d_img;
  return c;
}

ModelConfig paper_model_preset(std::size_t vocab_size, std::size_t d_img) {
  ModelConfig c;
  c.preset = "paper";
  c.vocab_size = vocab_size;
  c.d_img = d_img;
  c.d_model = 768;
  c.n_heads = 12;
  c.d_ff = 3072;
  c.max_len = 24;
  c.mode_encoder_layers = 6;
  c.masked_decoder_layers = 2;
  c.image_encoder_layers = 6;
  c.caption_decoder_layers = 6;
  c.dropout = 0.1;
  c.codebook_size = 64;
  return c;
}

// ---------------------------------------------------------------------------

DmlModel::DmlModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  mode_embed_ = TokenEmbedding(params_, "cdvae.mode_encoder", cfg.vocab_size, cfg.d_model, cfg.max_len, rng);
  mode_encoder_ = TransformerEncoder(params_, "cdvae.mode_encoder", cfg.transformer(cfg.mode_encoder_layers), rng,
                                     false);
  nat_embed_ = TokenEmbedding(params_, "cdvae.masked_decoder", cfg.vocab_size, cfg.d_model, cfg.max_len, rng);
  masked_decoder_ =
      TransformerDecoder(params_, "cdvae.masked_decoder", cfg.transformer(cfg.masked_decoder_layers), rng);
  image_proj_ = Linear::create(params_, "mic.image_encoder.proj.in", cfg.d_img, cfg.d_model, rng);
  image_encoder_ = TransformerEncoder(params_, "mic.image_encoder", cfg.transformer(cfg.image_encoder_layers), rng);
  caption_embed_ = TokenEmbedding(params_, "mic.caption_decoder", cfg.vocab_size, cfg.d_model, cfg.max_len, rng);
  caption_decoder_ =
      TransformerDecoder(params_, "mic.caption_decoder", cfg.transformer(cfg.caption_decoder_layers), rng);
  codebook_ = init_codebook(cfg.codebook_size, cfg.d_model, rng());
  params_.adopt(kCodebookName, codebook_.entries());
}

bool DmlModel::is_image_encoder_param(const std::string& name) { return name.rfind("mic.image_encoder.", 0) == 0; }

}  // namespace dml
