#include "dml/mic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dml/corpus.hpp"

namespace dml {

Tensor encode_image(const DmlModel& model, const Tensor& features, Dropout* dropout) {
  if (features.dim() != 2 || features.size(1) != model.config().d_img) {
    throw DimensionError("image features " + shape_str(features.shape()) + " do not match d_img " +
                         std::to_string(model.config().d_img));
  }
  if (features.size(0) == 0) throw DimensionError("image without regions");
  return model.image_encoder().forward(model.image_projection().forward(features), {}, dropout);
}

Tensor ar_logits(const DmlModel& model, std::span<const int> inputs, const std::optional<Tensor>& mode_offset,
                 const Tensor& memory, Dropout* dropout) {
  auto x = model.caption_embedding().embed(inputs, mode_offset);
  auto h = model.caption_decoder().forward(x, memory, AttentionMask::causal(inputs.size()), {}, dropout);
  return model.caption_embedding().lm_head(h);
}

Tensor ar_loss(const DmlModel& model, std::span<const int> caption, const std::optional<Tensor>& q,
               const Tensor& memory, double smoothing, Dropout* dropout) {
  std::vector<int> inputs{Vocabulary::kBos};
  inputs.insert(inputs.end(), caption.begin(), caption.end());
  std::vector<int> targets(caption.begin(), caption.end());
  targets.push_back(Vocabulary::kEos);
  std::optional<Tensor> offset;
  if (q) offset = model.config().mic_updates_codebook ? *q : detach(*q);
  return cross_entropy_smoothed(ar_logits(model, inputs, offset, memory, dropout), targets, smoothing, Vocabulary::kPad);
}

DecodeSpec DecodeSpec::parse(const std::string& text) {
  if (text == "greedy") return {};
  if (text.rfind("beam:", 0) == 0) {
    const std::string w = text.substr(5);
    if (!w.empty() && std::all_of(w.begin(), w.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      DecodeSpec s;
      s.kind = Kind::kBeam;
      s.width = std::stoul(w);
      if (s.width >= 1) return s;
    }
  }
  throw std::invalid_argument("unknown decode kind '" + text + "' (expected greedy or beam:<width>)");
}

std::string DecodeSpec::to_string() const {
  return kind == Kind::kGreedy ? "greedy" : "beam:" + std::to_string(width);
}

namespace {

std::size_t argmax_lowest(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

struct Hypothesis {
  std::vector<int> tokens;
  double logprob = 0.0;
  bool finished = false;
};

double normalized(const Hypothesis& h, double alpha) {
  if (alpha == 0.0) return h.logprob;
  return h.logprob / std::pow(static_cast<double>(std::max<std::size_t>(1, h.tokens.size())), alpha);
}

GeneratedCaption to_caption(const Hypothesis& h, int eos) {
  GeneratedCaption c;
  c.logprob = h.logprob;
  c.tokens = h.tokens;
  if (h.finished && !c.tokens.empty() && c.tokens.back() == eos) {
    c.tokens.pop_back();
  } else {
    c.truncated = true;
  }
  return c;
}

}  // namespace

GeneratedCaption greedy_search(const StepScorer& scorer, std::size_t max_steps, int eos) {
  Hypothesis h;
  for (std::size_t step = 0; step < max_steps; ++step) {
    auto scores = scorer(h.tokens);
    for (auto& v : scores) v += h.logprob;
    const auto tok = argmax_lowest(scores);
    h.tokens.push_back(static_cast<int>(tok));
    h.logprob = scores[tok];
    if (static_cast<int>(tok) == eos) {
      h.finished = true;
      break;
    }
  }
  return to_caption(h, eos);
}

GeneratedCaption beam_search(const StepScorer& scorer, std::size_t width, std::size_t max_steps, double length_alpha,
                             int eos) {
  if (width == 0) throw std::invalid_argument("beam width must be at least 1");
  struct Candidate {
    double score;
    std::size_t beam;
    std::size_t token;
  };
  std::vector<Hypothesis> live(1), finished;
  for (std::size_t step = 0; step < max_steps && !live.empty(); ++step) {
    std::vector<Candidate> cands;
    std::vector<std::vector<double>> scores(live.size());
    for (std::size_t b = 0; b < live.size(); ++b) {
      scores[b] = scorer(live[b].tokens);
      for (std::size_t t = 0; t < scores[b].size(); ++t) cands.push_back({live[b].logprob + scores[b][t], b, t});
    }
    const std::size_t keep = std::min(width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h = live[cands[i].beam];
      h.tokens.push_back(static_cast<int>(cands[i].token));
      h.logprob = cands[i].score;
      if (static_cast<int>(cands[i].token) == eos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    // With the plain sum, live scores only fall, so a finished leader is final.
    if (length_alpha == 0.0 && !finished.empty() && !live.empty()) {
      double best_finished = finished[0].logprob;
      for (const auto& f : finished) best_finished = std::max(best_finished, f.logprob);
      double best_live = live[0].logprob;
      for (const auto& l : live) best_live = std::max(best_live, l.logprob);
      if (best_finished >= best_live) live.clear();
    }
  }
  // Hypotheses still live here hit the length limit and compete as truncated.
  std::vector<Hypothesis> pool = std::move(finished);
  pool.insert(pool.end(), live.begin(), live.end());
  const Hypothesis* best = &pool.front();
  for (const auto& h : pool)
    if (normalized(h, length_alpha) > normalized(*best, length_alpha)) best = &h;
  return to_caption(*best, eos);
}

StepScorer make_step_scorer(const DmlModel& model, const Tensor& memory, const std::optional<Tensor>& offset) {
  return [&model, memory, offset](std::span<const int> prefix) {
    NoGradGuard guard;
    std::vector<int> inputs{Vocabulary::kBos};
    inputs.insert(inputs.end(), prefix.begin(), prefix.end());
    const auto logits = ar_logits(model, inputs, offset, memory);
    const auto lp = log_softmax_rows(logits);
    const std::size_t v = logits.size(1);
    return std::vector<double>(lp.end() - static_cast<std::ptrdiff_t>(v), lp.end());
  };
}

namespace {

std::optional<Tensor> mode_offset(const DmlModel& model, int mode) {
  if (mode < 0) return std::nullopt;
  if (static_cast<std::size_t>(mode) >= model.codebook().size()) {
    throw std::out_of_range("mode " + std::to_string(mode) + " outside codebook of size " +
                            std::to_string(model.codebook().size()));
  }
  NoGradGuard guard;
  return detach(row(model.codebook().entries(), static_cast<std::size_t>(mode)));
}

std::size_t step_budget(const DmlModel& model, std::size_t max_len) {
  return std::min(max_len, model.config().max_len - 1);
}

}  // namespace

GeneratedCaption decode_with_offset(const DmlModel& model, const Tensor& memory, const std::optional<Tensor>& offset,
                                    const DecodeSpec& spec, std::size_t max_len) {
  const auto scorer = make_step_scorer(model, memory, offset);
  const std::size_t steps = step_budget(model, max_len);
  if (spec.kind == DecodeSpec::Kind::kGreedy) return greedy_search(scorer, steps, Vocabulary::kEos);
  return beam_search(scorer, spec.width, steps, spec.length_alpha, Vocabulary::kEos);
}

GeneratedCaption decode(const DmlModel& model, const GenerationRequest& request) {
  Tensor memory;
  {
    NoGradGuard guard;
    memory = encode_image(model, request.features);
  }
  auto c = decode_with_offset(model, memory, mode_offset(model, request.mode), request.decode, request.max_len);
  c.mode = request.mode;
  return c;
}

GeneratedCaption greedy_decode(const DmlModel& model, const GenerationRequest& request) {
  auto r = request;
  r.decode = DecodeSpec{};
  return decode(model, r);
}

GeneratedCaption beam_decode(const DmlModel& model, const GenerationRequest& request) {
  auto r = request;
  if (r.decode.kind != DecodeSpec::Kind::kBeam) {
    r.decode.kind = DecodeSpec::Kind::kBeam;
    r.decode.width = std::max<std::size_t>(1, r.decode.width);
  }
  return decode(model, r);
}

std::vector<GeneratedCaption> generate_all_modes(const DmlModel& model, const Tensor& features,
                                                 const DecodeSpec& spec, std::size_t max_len,
                                                 const std::optional<std::vector<int>>& modes) {
  Tensor memory;
  {
    NoGradGuard guard;
    memory = encode_image(model, features);
  }
  std::vector<int> selected;
  if (!model.config().use_modes) {
    selected.push_back(-1);
  } else if (modes) {
    selected = *modes;
  } else {
    for (auto j : usage_report(model.codebook()).active_entries()) selected.push_back(static_cast<int>(j));
  }
  std::vector<GeneratedCaption> out;
  out.reserve(selected.size());
  for (int m : selected) {
    auto c = decode_with_offset(model, memory, mode_offset(model, m), spec, max_len);
    c.mode = m;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace dml
