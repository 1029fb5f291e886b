#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "doctest.h"
#include "dml/corpus.hpp"
#include "dml/mic.hpp"
#include "model_fixtures.hpp"

using namespace dml;
using namespace dml::testing;

namespace {

struct Sequence {
  std::vector<int> tokens;
  double score = 0.0;
  bool finished = false;
};

// Every sequence that ends in eos within max_steps, or runs to max_steps.
std::vector<Sequence> enumerate_sequences(const StepScorer& scorer, std::size_t vocab, std::size_t max_steps,
                                          int eos) {
  std::vector<Sequence> out;
  std::function<void(Sequence)> rec = [&](Sequence s) {
    if (s.tokens.size() == max_steps) {
      out.push_back(s);
      return;
    }
    const auto lp = scorer(s.tokens);
    for (std::size_t t = 0; t < vocab; ++t) {
      Sequence n = s;
      n.tokens.push_back(static_cast<int>(t));
      n.score += lp[t];
      if (static_cast<int>(t) == eos) {
        n.finished = true;
        out.push_back(n);
      } else {
        rec(n);
      }
    }
  };
  rec({});
  return out;
}

Sequence best_of(const std::vector<Sequence>& all) {
  return *std::max_element(all.begin(), all.end(),
                           [](const Sequence& a, const Sequence& b) { return a.score < b.score; });
}

// Random normalized next-token distribution per prefix, memoized.
StepScorer random_scorer(std::size_t vocab, std::uint64_t seed) {
  auto cache = std::make_shared<std::map<std::vector<int>, std::vector<double>>>();
  return [vocab, seed, cache](std::span<const int> prefix) {
    std::vector<int> key(prefix.begin(), prefix.end());
    auto it = cache->find(key);
    if (it != cache->end()) return it->second;
    std::uint64_t h = seed;
    for (int t : key) h = mix_seed(h, static_cast<std::uint64_t>(t) + 1);
    std::mt19937_64 rng(h);
    std::vector<double> p(vocab);
    double total = 0;
    for (auto& v : p) total += (v = std::uniform_real_distribution<double>(0.05, 1.0)(rng));
    for (auto& v : p) v = std::log(v / total);
    (*cache)[key] = p;
    return p;
  };
}

GenerationRequest request_for(const Tensor& features, int mode, const std::string& decode = "greedy") {
  GenerationRequest r;
  r.features = features;
  r.mode = mode;
  r.decode = DecodeSpec::parse(decode);
  r.max_len = 6;
  return r;
}

}  // namespace

TEST_CASE("hand-built three-step distribution: beam 3 finds what greedy misses") {
  // Tokens 0, 1 and EOS = 2. Greedy takes 0 first (0.6) but every path after
  // it is flat; starting with 1 leads to a near-certain continuation.
  auto scorer = [](std::span<const int> prefix) -> std::vector<double> {
    if (prefix.empty()) return {std::log(0.6), std::log(0.4), std::log(1e-9)};
    if (prefix[0] == 0) return {std::log(0.34), std::log(0.33), std::log(0.33)};
    return {std::log(0.01), std::log(0.98), std::log(0.01)};
  };
  const auto all = enumerate_sequences(scorer, 3, 3, 2);
  const auto oracle = best_of(all);
  const auto beam = beam_search(scorer, 3, 3, 0.0, 2);
  CHECK(oracle.tokens == std::vector<int>{1, 1, 1});
  CHECK(beam.tokens == oracle.tokens);
  CHECK(beam.truncated);
  CHECK(beam.logprob == doctest::Approx(oracle.score).epsilon(1e-15));
  const auto greedy = greedy_search(scorer, 3, 2);
  CHECK(greedy.tokens.front() == 0);
  CHECK(beam.logprob > greedy.logprob);
}

TEST_CASE("an exhaustive beam equals enumeration on random distributions") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const std::size_t vocab = 3 + seed % 2, steps = 3;
    auto scorer = random_scorer(vocab, seed);
    const auto oracle = best_of(enumerate_sequences(scorer, vocab, steps, 0));
    const auto beam = beam_search(scorer, 100, steps, 0.0, 0);
    std::vector<int> expect = oracle.tokens;
    if (oracle.finished) expect.pop_back();
    CAPTURE(seed);
    CHECK(beam.tokens == expect);
    CHECK(beam.truncated == !oracle.finished);
    CHECK(beam.logprob == doctest::Approx(oracle.score).epsilon(1e-14));
  }
}

TEST_CASE("width 1 bit-matches greedy and wider beams never score lower") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto scorer = random_scorer(5, seed);
    const auto g = greedy_search(scorer, 6, 4);
    const auto b1 = beam_search(scorer, 1, 6, 0.0, 4);
    CHECK(g.tokens == b1.tokens);
    CHECK(g.logprob == b1.logprob);
    CHECK(g.truncated == b1.truncated);
    for (std::size_t w : {2, 3, 5}) CHECK(beam_search(scorer, w, 6, 0.0, 4).logprob >= g.logprob);
  }
}

TEST_CASE("decode spec parsing") {
  CHECK(DecodeSpec::parse("greedy").kind == DecodeSpec::Kind::kGreedy);
  auto b = DecodeSpec::parse("beam:4");
  CHECK(b.kind == DecodeSpec::Kind::kBeam);
  CHECK(b.width == 4);
  CHECK(b.to_string() == "beam:4");
  CHECK_THROWS(DecodeSpec::parse("beam:0"));
  CHECK_THROWS(DecodeSpec::parse("beam"));
  CHECK_THROWS(DecodeSpec::parse("sample"));
}

TEST_CASE("region order only permutes the image memory") {
  DmlModel model(toy_config());
  std::mt19937_64 rng(1);
  auto f = random_tensor(rng, {4, 5}, -1, 1, false);
  std::vector<double> swapped(f.values().begin(), f.values().end());
  for (std::size_t c = 0; c < 5; ++c) std::swap(swapped[c], swapped[3 * 5 + c]);
  auto g = Tensor::from({4, 5}, swapped);
  auto m1 = encode_image(model, f), m2 = encode_image(model, g);
  for (std::size_t c = 0; c < 8; ++c) {
    CHECK(m1.at(0, c) == doctest::Approx(m2.at(3, c)).epsilon(1e-13));
    CHECK(m1.at(3, c) == doctest::Approx(m2.at(0, c)).epsilon(1e-13));
    CHECK(m1.at(1, c) == doctest::Approx(m2.at(1, c)).epsilon(1e-13));
  }
  CHECK_THROWS_AS(encode_image(model, Tensor::zeros({4, 6})), DimensionError);
}

TEST_CASE("captioning loss reaches the image encoder") {
  DmlModel model(toy_config());
  std::mt19937_64 rng(2);
  auto memory = encode_image(model, random_tensor(rng, {3, 5}, -1, 1, false));
  backward(ar_loss(model, std::vector<int>{6, 7, 8}, std::nullopt, memory, 0.1));
  const auto& w = model.params().get("mic.image_encoder.proj.in_w");
  REQUIRE(w.has_grad());
  CHECK(std::any_of(w.grad().begin(), w.grad().end(), [](double g) { return g != 0.0; }));
}

TEST_CASE("q is detached on the captioning path unless allowed through") {
  for (bool through : {false, true}) {
    auto cfg = toy_config();
    cfg.mic_updates_codebook = through;
    DmlModel model(cfg);
    std::mt19937_64 rng(3);
    auto memory = encode_image(model, random_tensor(rng, {3, 5}, -1, 1, false));
    auto q = row(model.codebook().entries(), 1);
    backward(ar_loss(model, std::vector<int>{6, 7}, q, memory, 0.1));
    CHECK(model.params().get(DmlModel::kCodebookName).has_grad() == through);
  }
}

TEST_CASE("a zero mode vector is the unconditioned captioner") {
  DmlModel model(toy_config());
  std::mt19937_64 rng(4);
  auto memory = encode_image(model, random_tensor(rng, {3, 5}, -1, 1, false));
  std::vector<int> cap{6, 9, 11};
  CHECK(ar_loss(model, cap, Tensor::zeros({8}), memory, 0.1).item() ==
        ar_loss(model, cap, std::nullopt, memory, 0.1).item());
}

TEST_CASE("teacher-forced loss equals a prefix-by-prefix re-implementation") {
  DmlModel model(toy_config());
  std::mt19937_64 rng(5);
  auto memory = encode_image(model, random_tensor(rng, {3, 5}, -1, 1, false));
  auto q = row(model.codebook().entries(), 2);
  std::vector<int> cap{6, 9, 11, 7};
  std::vector<int> targets = cap;
  targets.push_back(Vocabulary::kEos);
  const double eps = 0.1;
  double total = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    std::vector<int> prefix{Vocabulary::kBos};
    prefix.insert(prefix.end(), cap.begin(), cap.begin() + static_cast<std::ptrdiff_t>(t));
    const auto lp = log_softmax_rows(ar_logits(model, prefix, q, memory));
    const std::size_t v = 12, base = t * v;
    double mean_lp = 0;
    for (std::size_t j = 0; j < v; ++j) mean_lp += lp[base + j];
    mean_lp /= static_cast<double>(v);
    total += -(1 - eps) * lp[base + static_cast<std::size_t>(targets[t])] - eps * mean_lp;
  }
  const double oracle = total / static_cast<double>(targets.size());
  CHECK(ar_loss(model, cap, q, memory, eps).item() == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("changing one target only moves losses at and after it") {
  DmlModel model(toy_config());
  std::mt19937_64 rng(6);
  auto memory = encode_image(model, random_tensor(rng, {3, 5}, -1, 1, false));
  std::vector<int> a{6, 7, 8, 9}, b{6, 7, 10, 9};
  std::vector<int> in_a{Vocabulary::kBos, 6, 7, 8, 9}, in_b{Vocabulary::kBos, 6, 7, 10, 9};
  auto la = log_softmax_rows(ar_logits(model, in_a, std::nullopt, memory));
  auto lb = log_softmax_rows(ar_logits(model, in_b, std::nullopt, memory));
  const std::size_t v = 12;
  for (std::size_t pos = 0; pos < 5; ++pos) {
    bool same = true;
    for (std::size_t j = 0; j < v; ++j) same = same && la[pos * v + j] == lb[pos * v + j];
    // Input position 3 holds the changed token; rows before it are unaffected.
    CHECK(same == (pos < 3));
  }
}

TEST_CASE("decoding is deterministic and self-consistent") {
  DmlModel model(toy_config());
  std::mt19937_64 rng(7);
  auto f = random_tensor(rng, {3, 5}, -1, 1, false);
  const auto a = greedy_decode(model, request_for(f, 1)), b = greedy_decode(model, request_for(f, 1));
  CHECK(a.tokens == b.tokens);
  CHECK(a.logprob == b.logprob);
  CHECK(a.mode == 1);
  CHECK((a.truncated || a.tokens.size() < 6));
  // Re-score the output with one teacher-forced pass.
  Tensor memory;
  {
    NoGradGuard g;
    memory = encode_image(model, f);
  }
  std::vector<int> inputs{Vocabulary::kBos};
  inputs.insert(inputs.end(), a.tokens.begin(), a.tokens.end());
  auto targets = a.tokens;
  if (!a.truncated) targets.push_back(Vocabulary::kEos);
  if (a.truncated) inputs.pop_back();
  const auto q = detach(row(model.codebook().entries(), 1));
  const auto lp = log_softmax_rows(ar_logits(model, inputs, q, memory));
  double rescored = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto rowp = lp.begin() + static_cast<std::ptrdiff_t>(t * 12);
    rescored += rowp[targets[t]];
    // Fixed point: the chosen token is the argmax of its row.
    CHECK(std::max_element(rowp, rowp + 12) - rowp == targets[t]);
  }
  CHECK(rescored == doctest::Approx(a.logprob).epsilon(1e-12));
  const auto beam = beam_decode(model, request_for(f, 1, "beam:3"));
  CHECK(beam.logprob >= a.logprob);
  const auto beam1 = decode(model, request_for(f, 1, "beam:1"));
  CHECK(beam1.tokens == a.tokens);
  CHECK(beam1.logprob == a.logprob);
}

TEST_CASE("a mode reproduces bit-exactly from another mode's pathway plus the offset difference") {
  DmlModel model(toy_config());
  std::mt19937_64 rng(8);
  // Dyadic entries keep Omega[b] + (Omega[a] - Omega[b]) exact.
  for (auto& v : model.codebook().entries().mutable_values())
    v = std::round(std::uniform_real_distribution<double>(-1, 1)(rng) * 64) / 64;
  auto f = random_tensor(rng, {3, 5}, -1, 1, false);
  Tensor memory;
  {
    NoGradGuard g;
    memory = encode_image(model, f);
  }
  auto ra = detach(row(model.codebook().entries(), 0)), rb = detach(row(model.codebook().entries(), 3));
  auto injected = add(rb, sub(ra, rb));
  const auto via_a = decode(model, request_for(f, 0, "beam:2"));
  const auto via_b = decode_with_offset(model, memory, injected, DecodeSpec::parse("beam:2"), 6);
  CHECK(via_a.tokens == via_b.tokens);
  CHECK(via_a.logprob == via_b.logprob);
}

TEST_CASE("one caption per active mode, in mode order") {
  DmlModel model(toy_config(12, 6));
  std::mt19937_64 rng(9);
  model.codebook().set_usage_counts({0, 3, 0, 1, 5, 0});
  auto f = random_tensor(rng, {3, 5}, -1, 1, false);
  auto caps = generate_all_modes(model, f, DecodeSpec{}, 6);
  REQUIRE(caps.size() == 3);
  CHECK(caps[0].mode == 1);
  CHECK(caps[1].mode == 3);
  CHECK(caps[2].mode == 4);
  for (const auto& c : caps) CHECK((c.truncated || c.tokens.size() < 6));
  auto some = generate_all_modes(model, f, DecodeSpec{}, 6, std::vector<int>{5, 0});
  CHECK(some[0].mode == 5);
  CHECK_THROWS(generate_all_modes(model, f, DecodeSpec{}, 6, std::vector<int>{6}));
  auto base_cfg = toy_config();
  base_cfg.use_modes = false;
  DmlModel baseline(base_cfg);
  auto single = generate_all_modes(baseline, f, DecodeSpec{}, 6);
  REQUIRE(single.size() == 1);
  CHECK(single[0].mode == -1);
}
