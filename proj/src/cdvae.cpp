#include "dml/cdvae.hpp"

#include <algorithm>
#include <random>
#include <sstream>
#include <stdexcept>

#include "dml/corpus.hpp"

namespace dml {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

void check_probability(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("mask probability must lie in [0, 1]");
}

double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

}  // namespace

MaskingStrategy MaskingStrategy::fixed(double p) {
  check_probability(p);
  return {Kind::kFixed, p, p};
}

MaskingStrategy MaskingStrategy::linear(double p_start, double p_end) {
  check_probability(p_start);
  check_probability(p_end);
  return {Kind::kLinear, p_start, p_end};
}

MaskingStrategy MaskingStrategy::parse(const std::string& text) {
  if (text == "full") return full();
  std::vector<std::string> parts;
  std::size_t begin = 0;
  while (true) {
    auto colon = text.find(':', begin);
    parts.push_back(text.substr(begin, colon - begin));
    if (colon == std::string::npos) break;
    begin = colon + 1;
  }
  if (parts[0] == "fixed" && parts.size() == 2) return fixed(parse_double(parts[1]));
  if (parts[0] == "linear" && parts.size() == 3) return linear(parse_double(parts[1]), parse_double(parts[2]));
  throw std::invalid_argument("unknown masking strategy '" + text + "' (expected full, fixed:p or linear:a:b)");
}

std::string MaskingStrategy::to_string() const {
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  switch (kind) {
    case Kind::kFull:
      return "full";
    case Kind::kFixed:
      return "fixed:" + num(p_start);
    case Kind::kLinear:
      return "linear:" + num(p_start) + ":" + num(p_end);
  }
  return "full";
}

double MaskingStrategy::probability(std::size_t step, std::size_t total_steps) const {
  switch (kind) {
    case Kind::kFull:
      return 1.0;
    case Kind::kFixed:
      return p_start;
    case Kind::kLinear: {
      const double frac =
          total_steps == 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
      return p_start + (p_end - p_start) * frac;
    }
  }
  return 1.0;
}

std::vector<int> apply_masking(std::span<const int> caption, const MaskingStrategy& strategy, std::size_t step,
                               std::size_t total_steps, std::uint64_t seed) {
  const double p = strategy.probability(step, total_steps);
  std::vector<int> out(caption.begin(), caption.end());
  if (p >= 1.0) {
    std::fill(out.begin(), out.end(), Vocabulary::kMask);
    return out;
  }
  if (p <= 0.0) return out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& id : out)
    if (u(rng) < p) id = Vocabulary::kMask;
  return out;
}

Tensor encode_mode(const DmlModel& model, std::span<const int> caption, Dropout* dropout) {
  if (caption.empty()) throw std::invalid_argument("encode_mode: empty caption");
  std::vector<int> ids;
  ids.reserve(caption.size() + 1);
  ids.push_back(Vocabulary::kMode);
  ids.insert(ids.end(), caption.begin(), caption.end());
  auto x = model.mode_embedding().embed(ids);
  auto h = model.mode_encoder().forward(x, {}, dropout);
  return row(h, 0);
}

Tensor nat_logits(const DmlModel& model, std::span<const int> decoder_inputs, const Tensor& q,
                  const Tensor& image_memory, Dropout* dropout) {
  if (decoder_inputs.empty()) throw std::invalid_argument("nat decoder: zero-length caption");
  const auto memory = detach(image_memory);
  const std::size_t t = decoder_inputs.size();
  if (model.config().nat_conditioning == ModeConditioning::kAdditive) {
    auto x = model.nat_embedding().embed(decoder_inputs, q);
    auto h = model.masked_decoder().forward(x, memory, AttentionMask::all_visible(t, t), {}, dropout);
    return model.nat_embedding().lm_head(h);
  }
  auto x = concat_rows(q, model.nat_embedding().embed_at(decoder_inputs, 1));
  auto h = model.masked_decoder().forward(x, memory, AttentionMask::all_visible(t + 1, t + 1), {}, dropout);
  return model.nat_embedding().lm_head(slice_rows(h, 1, t));
}

Tensor nat_reconstruction_loss(const DmlModel& model, std::span<const int> caption,
                               std::span<const int> decoder_inputs, const Tensor& q, const Tensor& image_memory,
                               double smoothing, Dropout* dropout) {
  if (caption.size() != decoder_inputs.size()) throw DimensionError("nat decoder inputs must match caption length");
  return cross_entropy_smoothed(nat_logits(model, decoder_inputs, q, image_memory, dropout), caption, smoothing,
                                Vocabulary::kPad);
}

AssignStrategy parse_assign_strategy(const std::string& text) {
  if (text == "hungarian") return AssignStrategy::kHungarian;
  if (text == "nearest") return AssignStrategy::kNearest;
  throw std::invalid_argument("unknown assignment strategy '" + text + "' (expected hungarian or nearest)");
}

std::string to_string(AssignStrategy s) { return s == AssignStrategy::kHungarian ? "hungarian" : "nearest"; }

ModeAssignment assign_modes(const DmlModel& model, const std::vector<std::vector<int>>& captions,
                            AssignStrategy strategy) {
  NoGradGuard guard;
  std::vector<Tensor> embeddings;
  for (const auto& c : captions) embeddings.push_back(encode_mode(model, c));
  const auto stacked = stack_rows(embeddings);
  return strategy == AssignStrategy::kHungarian ? hungarian_assign(stacked, model.codebook())
                                                : nearest_assign(stacked, model.codebook());
}

std::vector<int> caption_modes(const DmlModel& model, const std::vector<TrainingExample>& examples,
                               AssignStrategy strategy) {
  std::vector<int> out;
  for (const auto& ex : examples)
    for (auto j : assign_modes(model, ex.captions, strategy).entry_of_caption) out.push_back(static_cast<int>(j));
  return out;
}

CdvaeOutput cdvae_step(DmlModel& model, const std::vector<std::vector<int>>& captions, const Tensor& image_memory,
                       const CdvaeOptions& options) {
  if (captions.empty()) throw std::invalid_argument("cdvae_step: image without captions");
  std::vector<Tensor> embeddings;
  embeddings.reserve(captions.size());
  for (const auto& c : captions) embeddings.push_back(encode_mode(model, c, options.dropout));

  Codebook& codebook = model.codebook();
  const auto stacked = detach(stack_rows(embeddings));
  CdvaeOutput out;
  out.assignment = options.assign == AssignStrategy::kHungarian ? hungarian_assign(stacked, codebook)
                                                                : nearest_assign(stacked, codebook);
  if (options.record_usage) codebook.record(out.assignment);

  const auto memory = detach(image_memory);
  std::vector<Tensor> nat_terms, cb_terms, commit_terms;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    auto q = row(codebook.entries(), out.assignment.entry_of_caption[i]);
    auto vq = vq_losses(embeddings[i], q, options.beta);
    auto q_st = straight_through(embeddings[i], q);
    auto inputs = apply_masking(captions[i], options.masking, options.step, options.total_steps,
                                mix_seed(options.mask_seed, i));
    nat_terms.push_back(nat_reconstruction_loss(model, captions[i], inputs, q_st, memory, options.smoothing,
                                                options.dropout));
    cb_terms.push_back(vq.codebook_loss);
    commit_terms.push_back(vq.commitment_loss);
    out.quantized.push_back(q);
  }
  out.nat_loss = sum(stack_rows(nat_terms));
  out.codebook_loss = sum(stack_rows(cb_terms));
  out.commitment_loss = sum(stack_rows(commit_terms));
  out.total = add(add(out.nat_loss, out.codebook_loss), out.commitment_loss);
  return out;
}

}  // namespace dml
