#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dml/codebook.hpp"
#include "dml/corpus.hpp"
#include "dml/model.hpp"

namespace dml {

struct MaskingStrategy {
  enum class Kind { kFull, kFixed, kLinear };
  Kind kind = Kind::kFull;
  double p_start = 1.0;
  double p_end = 1.0;

  static MaskingStrategy full() { return {}; }
  static MaskingStrategy fixed(double p);
  static MaskingStrategy linear(double p_start, double p_end);
  // "full", "fixed:<p>" or "linear:<start>:<end>".
  static MaskingStrategy parse(const std::string& text);
  std::string to_string() const;

  // Mask probability in effect at `step` of `total_steps`.
  double probability(std::size_t step, std::size_t total_steps) const;
};

// Decoder input ids: each position is [MASK] with the scheduled probability,
// otherwise the ground-truth token. The draw is a pure function of `seed`.
std::vector<int> apply_masking(std::span<const int> caption, const MaskingStrategy& strategy, std::size_t step,
                               std::size_t total_steps, std::uint64_t seed);

// e(y): hidden state at the [MODE] position of [MODE] + caption.
Tensor encode_mode(const DmlModel& model, std::span<const int> caption, Dropout* dropout = nullptr);

// Masked-decoder logits [T x V]. The mode vector conditions every position and
// the decoder cross-attends to a detached copy of `image_memory`.
Tensor nat_logits(const DmlModel& model, std::span<const int> decoder_inputs, const Tensor& q,
                  const Tensor& image_memory, Dropout* dropout = nullptr);

Tensor nat_reconstruction_loss(const DmlModel& model, std::span<const int> caption,
                               std::span<const int> decoder_inputs, const Tensor& q, const Tensor& image_memory,
                               double smoothing, Dropout* dropout = nullptr);

enum class AssignStrategy { kHungarian, kNearest };
AssignStrategy parse_assign_strategy(const std::string& text);
std::string to_string(AssignStrategy s);

struct CdvaeOptions {
  AssignStrategy assign = AssignStrategy::kHungarian;
  MaskingStrategy masking;
  double beta = 0.25;
  double smoothing = 0.1;
  std::size_t step = 0;
  std::size_t total_steps = 1;
  std::uint64_t mask_seed = 0;  // per-image; caption i uses a derived stream
  bool record_usage = true;
  Dropout* dropout = nullptr;
};

struct CdvaeOutput {
  Tensor total;  // nat + codebook + commitment, summed over captions
  Tensor nat_loss;
  Tensor codebook_loss;
  Tensor commitment_loss;
  ModeAssignment assignment;
  std::vector<Tensor> quantized;  // q(y_i), rows of the codebook with gradient
};

// Encodes all captions of one image, assigns modes, and reconstructs each
// caption from (q, image) with the fully non-autoregressive decoder.
CdvaeOutput cdvae_step(DmlModel& model, const std::vector<std::vector<int>>& captions, const Tensor& image_memory,
                       const CdvaeOptions& options);

// Mode assignment of one image's captions without touching usage counts.
ModeAssignment assign_modes(const DmlModel& model, const std::vector<std::vector<int>>& captions,
                            AssignStrategy strategy);

// Assigned mode of every caption of every example, flattened in order.
std::vector<int> caption_modes(const DmlModel& model, const std::vector<TrainingExample>& examples,
                               AssignStrategy strategy);

// Stable 64-bit mixing used for every derived seed.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace dml
