#include <cmath>
#include <random>

#include "brute_force.hpp"
#include "doctest.h"
#include "dml/metrics.hpp"

using namespace dml;

namespace {

Tokens t(const std::string& s) { return split_tokens(s); }

constexpr double kTight = 1e-9;

}  // namespace

TEST_CASE("bleu hand values") {
  CHECK(bleu(t("a dog runs in the park"), {t("a dog runs in the park")}) == doctest::Approx(1.0).epsilon(kTight));
  // p1 = 1/3 (clip "a" to 1), c = 3 > r = 2 so no brevity penalty.
  CHECK(std::abs(bleu(t("a a a"), {t("a b")}, 1) - 1.0 / 3.0) < kTight);
  // Brevity: c = 2, closest r = 4: BP = exp(1 - 4/2).
  CHECK(std::abs(bleu(t("a b"), {t("a b c d")}, 1) - std::exp(1.0 - 2.0)) < kTight);
  // Closest reference length wins, shorter on ties: c = 3, refs 2 and 4 -> r = 2, BP = 1.
  CHECK(std::abs(bleu(t("a b c"), {t("a b c d"), t("a b")}, 1) - 1.0) < kTight);
  // BLEU-2 of "a b c" vs "a b d": p1 = 2/3, p2 = 1/2.
  CHECK(std::abs(bleu(t("a b c"), {t("a b d")}, 2) - std::sqrt(2.0 / 3.0 * 0.5)) < kTight);
  // Zero matches are floored at 1e-9 at sentence level.
  CHECK(std::abs(bleu(t("x y"), {t("a b")}, 1) - 1e-9 / 2.0) < 1e-18);
  CHECK(bleu(t("x y"), {t("a b")}, 1, false) == 0.0);
  CHECK(bleu({}, {t("a b")}) == 0.0);
}

TEST_CASE("adding a matching reference never lowers bleu") {
  std::mt19937_64 rng(1);
  const std::vector<std::string> words{"a", "b", "c", "d", "e"};
  auto sentence = [&](std::size_t n) {
    Tokens s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(words[rng() % words.size()]);
    return s;
  };
  for (int trial = 0; trial < 200; ++trial) {
    auto cand = sentence(2 + rng() % 5);
    std::vector<Tokens> refs{sentence(2 + rng() % 5)};
    const double before = bleu(cand, refs);
    refs.push_back(cand);
    CHECK(bleu(cand, refs) >= before);
  }
}

TEST_CASE("corpus bleu pools counts before the mean") {
  // Unigram: matches (1 + 2) over (2 + 2) candidates; lengths c = 4, r = 4.
  std::vector<Tokens> cands{t("a x"), t("b c")};
  std::vector<std::vector<Tokens>> refs{{t("a b")}, {t("b c")}};
  CHECK(std::abs(corpus_bleu(cands, refs, 1) - 0.75) < kTight);
  // Bigram: matches (0 + 1) over (1 + 1).
  CHECK(std::abs(corpus_bleu(cands, refs, 2) - std::sqrt(0.75 * 0.5)) < kTight);
}

TEST_CASE("rouge-l hand values") {
  CHECK(lcs_length(t("a b c d"), t("a c d")) == 3);
  const double p = 0.75, r = 1.0, b2 = 1.2 * 1.2;
  CHECK(std::abs(rouge_l(t("a b c d"), {t("a c d")}) - (1 + b2) * p * r / (r + b2 * p)) < kTight);
  CHECK(rouge_l(t("a b"), {t("a b")}) == doctest::Approx(1.0).epsilon(kTight));
  CHECK(rouge_l(t("a b"), {t("c d")}) == 0.0);
}

TEST_CASE("cider-d degenerate single-image corpus") {
  IdfTable idf({{t("a dog runs")}});
  CHECK(cider_d(t("a dog runs"), {t("a dog runs")}, idf) == 0.0);
}

TEST_CASE("cider-d two-image hand computation") {
  // Image 1 refs {"a b c"}, image 2 refs {"a d e"}; N = 2.
  IdfTable idf({{t("a b c")}, {t("a d e")}});
  CHECK(idf.document_frequency(t("a")) == 2.0);
  CHECK(idf.document_frequency(t("b")) == 1.0);
  // Candidate "a b d" for image 1. Unigrams: a has weight 0; b, d weigh log 2,
  // ref has b, c. Cosine = l2^2 / (sqrt2 l2)^2 = 1/2. Bigrams "a b", "b d"
  // against "a b", "b c" (unseen "b d" has df floored to 1): also 1/2.
  // Trigram and 4-gram: 0. Lengths equal, one reference, times 10.
  const double score = cider_d(t("a b d"), {t("a b c")}, idf);
  CHECK(std::abs(score - 10.0 * (0.5 + 0.5) / 4.0) < kTight);
  CHECK(std::abs(cider_d(t("a b c"), {t("a b c")}, idf) - 10.0 * 3.0 / 4.0) < kTight);
}

TEST_CASE("cider-d length penalty and reference averaging") {
  IdfTable idf({{t("a b c")}, {t("x y z")}});
  // Candidate "a b c c" vs "a b c": one more bigram, penalty exp(-1 / 72);
  // the extra "c" is clipped on the candidate side of the min.
  const double with_extra = cider_d(t("a b c c"), {t("a b c")}, idf);
  // Every n-gram has df 1 (or 0, floored to 1), so all weights are log 2 = l.
  // Unigram: cand a:l, b:l, c:2l; ref a:l, b:l, c:l. min*ref = 3 l^2; norms sqrt6 l and sqrt3 l.
  const double u = 3.0 / std::sqrt(18.0);
  // Bigram: cand "a b","b c","c c"; ref "a b","b c". 2 l^2 / (sqrt3 l * sqrt2 l).
  const double bi = 2.0 / std::sqrt(6.0);
  // Trigram: cand "a b c","b c c"; ref "a b c". 1 / sqrt2.
  const double tri = 1.0 / std::sqrt(2.0);
  // 4-gram: ref has none.
  const double expected = 10.0 * std::exp(-1.0 / 72.0) * (u + bi + tri + 0.0) / 4.0;
  CHECK(std::abs(with_extra - expected) < kTight);
  // Two references: mean over them.
  const double one = cider_d(t("a b c"), {t("a b c")}, idf);
  const double other = cider_d(t("a b c"), {t("x y z")}, idf);
  CHECK(std::abs(cider_d(t("a b c"), {t("a b c"), t("x y z")}, idf) - (one + other) / 2.0) < kTight);
}

TEST_CASE("scaling idf weights leaves cider unchanged") {
  IdfTable idf({{t("a b c d")}, {t("a d e")}, {t("b c e f")}});
  const double base = cider_d(t("a b c e"), {t("a b c d"), t("b c e f")}, idf);
  idf.set_scale(3.7);
  CHECK(std::abs(cider_d(t("a b c e"), {t("a b c d"), t("b c e f")}, idf) - base) < kTight);
}

TEST_CASE("div-n hand values") {
  std::vector<Tokens> same(5, t("a b c d"));
  CHECK(std::abs(div_n_set(same, 1) - 0.2) < kTight);
  CHECK(std::abs(div_n_set({t("a b"), t("c d"), t("e f")}, 1) - 1.0) < kTight);
  // Bigrams: "a b","b c" and "a b","b d" -> 3 distinct of 4.
  CHECK(std::abs(div_n_set({t("a b c"), t("a b d")}, 2) - 0.75) < kTight);
  CHECK(std::abs(div_n({same, {t("a b"), t("c d")}}, 1) - 0.6) < kTight);
}

TEST_CASE("mbleu hand values") {
  std::vector<Tokens> same(5, t("a dog runs in the park"));
  CHECK(std::abs(mbleu_set(same) - 1.0) < kTight);
  CHECK(mbleu_set({t("a b c d"), t("e f g h"), t("i j k l")}) < 1e-8);
  const auto a = t("a b c d e"), b = t("a b c x e");
  CHECK(std::abs(mbleu_set({a, b}) - 0.5 * (bleu(a, {b}) + bleu(b, {a}))) < kTight);
}

TEST_CASE("selfcider endpoints") {
  CHECK(std::abs(spectral_diversity(std::vector<double>(16, 1.0), 4)) < kTight);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 5)] = 1.0;
  CHECK(std::abs(spectral_diversity(eye, 4) - 1.0) < kTight);
  IdfTable idf({{t("a b c")}, {t("d e f")}, {t("g h i")}, {t("a d g")}});
  CHECK(std::abs(self_cider_set(std::vector<Tokens>(3, t("a b c")), idf)) < kTight);
  CHECK(std::abs(self_cider_set({t("a b c"), t("d e f"), t("g h i")}, idf) - 1.0) < kTight);
  const double mid = self_cider_set({t("a b c"), t("a b f"), t("g h i")}, idf);
  CHECK(mid > 0.0);
  CHECK(mid < 1.0);
  CHECK_THROWS(self_cider_set({t("a b c")}, idf));
}

TEST_CASE("purity and adjusted rand by hand") {
  auto same = mode_purity({3, 3, 7, 7, 1}, {0, 0, 1, 1, 2});
  CHECK(same.purity == 1.0);
  CHECK(std::abs(same.adjusted_rand - 1.0) < kTight);
  auto one = mode_purity({0, 0, 0, 0, 0}, {0, 0, 1, 1, 1});
  CHECK(std::abs(one.purity - 0.6) < kTight);
  CHECK_THROWS(mode_purity({0, 1}, {0}));
}

TEST_CASE("purity and adjusted rand match brute force") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 20;
    std::vector<int> a(n), b(n);
    for (auto& x : a) x = static_cast<int>(rng() % 5);
    for (auto& x : b) x = static_cast<int>(rng() % 4);
    const auto r = mode_purity(a, b);
    CHECK(std::abs(r.purity - dml::testing::brute_force_purity(a, b)) < kTight);
    CHECK(std::abs(r.adjusted_rand - dml::testing::brute_force_ari(a, b)) < 1e-9);
  }
}

TEST_CASE("oracle aggregation") {
  std::vector<ImageCandidates> images{
      {"i1", {t("a dog runs on the grass"), t("a dog is running")},
       {{0, t("a dog runs on the grass")}, {1, t("a cat sits")}}},
      {"i2", {t("a red bus on the street"), t("a bus drives by")},
       {{0, t("a car parks")}, {1, t("a red bus on the street")}}},
      {"i3", {t("two birds in the sky"), t("birds flying high")}, {{0, t("two birds in the sky")}, {1, t("a bird")}}}};
  const auto report = evaluate(images);
  for (const auto& metric : {"cider_d", "bleu4", "rouge_l"})
    for (const auto& [mode, scores] : report.per_mode) {
      CAPTURE(metric);
      CHECK(report.oracle.at(metric) >= scores.at(metric));
    }
  // The oracle beats each mode here because the best mode differs per image.
  CHECK(report.oracle.at("cider_d") > report.per_mode.at(0).at("cider_d"));
  CHECK(report.oracle.at("cider_d") > report.per_mode.at(1).at("cider_d"));
  // Single candidate per image: oracle is the plain mean.
  std::vector<ImageCandidates> single;
  for (const auto& im : images) single.push_back({im.image_id, im.references, {im.candidates[0]}});
  const auto s = evaluate(single);
  CHECK(std::abs(s.oracle.at("cider_d") - s.per_mode.at(0).at("cider_d")) < kTight);
  CHECK(report.oracle.at("cider_d") >= s.oracle.at("cider_d"));
  // Candidates never enter the idf table.
  std::vector<std::vector<Tokens>> refs;
  for (const auto& im : images) refs.push_back(im.references);
  IdfTable idf(refs);
  CHECK(std::abs(report.per_image[1][1].cider_d - cider_d(images[1].candidates[1].tokens, images[1].references, idf)) <
        kTight);
  const auto j = report.to_json();
  CHECK(j.contains("corpus"));
  CHECK(j.contains("oracle"));
  CHECK(j["diversity"].contains("self_cider"));
  CHECK(j["per_mode"].contains("0"));
}

TEST_CASE("score bounds on random inputs") {
  std::mt19937_64 rng(9);
  const std::vector<std::string> words{"a", "b", "c", "d", "e", "f"};
  auto sentence = [&] {
    Tokens s;
    for (std::size_t i = 0, n = 1 + rng() % 6; i < n; ++i) s.push_back(words[rng() % words.size()]);
    return s;
  };
  std::vector<std::vector<Tokens>> refs;
  for (int i = 0; i < 6; ++i) refs.push_back({sentence(), sentence()});
  IdfTable idf(refs);
  for (int trial = 0; trial < 100; ++trial) {
    auto c = sentence();
    const auto& r = refs[static_cast<std::size_t>(trial % 6)];
    const double b = bleu(c, r), rl = rouge_l(c, r), cd = cider_d(c, r, idf);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0 + 1e-12);
    CHECK(rl >= 0.0);
    CHECK(rl <= 1.0 + 1e-12);
    CHECK(cd >= 0.0);
    std::vector<Tokens> set{sentence(), sentence(), sentence()};
    const double sc = self_cider_set(set, idf);
    CHECK(sc >= -1e-12);
    CHECK(sc <= 1.0 + 1e-12);
  }
}
