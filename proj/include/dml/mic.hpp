#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dml/model.hpp"

namespace dml {

// Projects region features to d_model and runs the image encoder. Regions
// carry no positional encoding.
Tensor encode_image(const DmlModel& model, const Tensor& features, Dropout* dropout = nullptr);

// Decoder logits [t x V] for `inputs` (starting with [BOS]) under a causal mask.
Tensor ar_logits(const DmlModel& model, std::span<const int> inputs, const std::optional<Tensor>& mode_offset,
                 const Tensor& memory, Dropout* dropout = nullptr);

// Teacher-forced loss of [BOS]+caption -> caption+[EOS]. The mode vector is
// detached unless the model lets captioning update the codebook.
Tensor ar_loss(const DmlModel& model, std::span<const int> caption, const std::optional<Tensor>& q,
               const Tensor& memory, double smoothing, Dropout* dropout = nullptr);

struct DecodeSpec {
  enum class Kind { kGreedy, kBeam };
  Kind kind = Kind::kGreedy;
  std::size_t width = 1;
  double length_alpha = 0.0;  // score / len^alpha; 0 keeps the plain sum

  // "greedy" or "beam:<width>".
  static DecodeSpec parse(const std::string& text);
  std::string to_string() const;
};

struct GenerationRequest {
  Tensor features;     // [r x d_img]
  int mode = -1;       // codebook row, -1 for no offset
  DecodeSpec decode;
  std::size_t max_len = 21;  // generated tokens including [EOS]
};

struct GeneratedCaption {
  std::vector<int> tokens;  // without [BOS]/[EOS]
  double logprob = 0.0;
  int mode = -1;
  bool truncated = false;
};

// Next-token log-probabilities given the tokens generated so far.
using StepScorer = std::function<std::vector<double>(std::span<const int> prefix)>;

GeneratedCaption greedy_search(const StepScorer& scorer, std::size_t max_steps, int eos);
GeneratedCaption beam_search(const StepScorer& scorer, std::size_t width, std::size_t max_steps, double length_alpha,
                             int eos);

// Scorer over a fixed image memory and optional offset.
StepScorer make_step_scorer(const DmlModel& model, const Tensor& memory, const std::optional<Tensor>& offset);

GeneratedCaption greedy_decode(const DmlModel& model, const GenerationRequest& request);
GeneratedCaption beam_decode(const DmlModel& model, const GenerationRequest& request);
GeneratedCaption decode(const DmlModel& model, const GenerationRequest& request);

// Decoding with an explicit offset in place of a codebook row.
GeneratedCaption decode_with_offset(const DmlModel& model, const Tensor& memory, const std::optional<Tensor>& offset,
                                    const DecodeSpec& spec, std::size_t max_len);

// One caption per requested mode (default: every entry with usage > 0), in
// mode order. A model trained without modes yields a single caption.
std::vector<GeneratedCaption> generate_all_modes(const DmlModel& model, const Tensor& features,
                                                 const DecodeSpec& spec, std::size_t max_len,
                                                 const std::optional<std::vector<int>>& modes = std::nullopt);

}  // namespace dml
