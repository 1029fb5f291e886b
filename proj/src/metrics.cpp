#include "dml/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

namespace dml {

namespace {

constexpr double kBleuEpsilon = 1e-9;

using NgramCounts = std::map<std::string, double>;

std::string ngram_key(const Tokens& t, std::size_t start, std::size_t n) {
  std::string key = t[start];
  for (std::size_t i = 1; i < n; ++i) {
    key += ' ';
    key += t[start + i];
  }
  return key;
}

NgramCounts ngram_counts(const Tokens& t, std::size_t n) {
  NgramCounts out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) out[ngram_key(t, i, n)] += 1.0;
  return out;
}

struct BleuStats {
  std::vector<double> matched, total;
  double cand_len = 0.0;
  double ref_len = 0.0;
};

BleuStats bleu_stats(const Tokens& cand, const std::vector<Tokens>& refs, int max_n) {
  if (refs.empty()) throw std::invalid_argument("bleu: at least one reference is required");
  BleuStats s;
  s.matched.assign(static_cast<std::size_t>(max_n), 0.0);
  s.total.assign(static_cast<std::size_t>(max_n), 0.0);
  for (int n = 1; n <= max_n; ++n) {
    const auto cc = ngram_counts(cand, static_cast<std::size_t>(n));
    NgramCounts max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r, static_cast<std::size_t>(n))) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : cc) {
      auto it = max_ref.find(g);
      s.matched[n - 1] += std::min(c, it == max_ref.end() ? 0.0 : it->second);
      s.total[n - 1] += c;
    }
  }
  s.cand_len = static_cast<double>(cand.size());
  // Closest reference length; the shorter one on ties.
  double best = static_cast<double>(refs[0].size());
  for (const auto& r : refs) {
    const double len = static_cast<double>(r.size());
    const double d = std::abs(len - s.cand_len), bd = std::abs(best - s.cand_len);
    if (d < bd || (d == bd && len < best)) best = len;
  }
  s.ref_len = best;
  return s;
}

double brevity_penalty(double c, double r) {
  if (c <= 0.0) return 0.0;
  return c > r ? 1.0 : std::exp(1.0 - r / c);
}

double combine(const BleuStats& s, int max_n, bool smooth) {
  if (s.cand_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (int n = 0; n < max_n; ++n) {
    double m = s.matched[n];
    const double t = std::max(s.total[n], 1.0);
    if (m == 0.0) {
      if (!smooth) return 0.0;
      m = kBleuEpsilon;
    }
    log_sum += std::log(m / t);
  }
  return brevity_penalty(s.cand_len, s.ref_len) * std::exp(log_sum / max_n);
}

}  // namespace

double bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n, bool smooth) {
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be at least 1");
  return combine(bleu_stats(candidate, references, max_n), max_n, smooth);
}

double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                   int max_n) {
  if (candidates.size() != references.size()) throw std::invalid_argument("corpus_bleu: size mismatch");
  BleuStats pooled;
  pooled.matched.assign(static_cast<std::size_t>(max_n), 0.0);
  pooled.total.assign(static_cast<std::size_t>(max_n), 0.0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto s = bleu_stats(candidates[i], references[i], max_n);
    for (int n = 0; n < max_n; ++n) {
      pooled.matched[n] += s.matched[n];
      pooled.total[n] += s.total[n];
    }
    pooled.cand_len += s.cand_len;
    pooled.ref_len += s.ref_len;
  }
  return combine(pooled, max_n, false);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references, double beta) {
  if (references.empty()) throw std::invalid_argument("rouge_l: at least one reference is required");
  if (candidate.empty()) return 0.0;
  double p_max = 0.0, r_max = 0.0;
  for (const auto& r : references) {
    if (r.empty()) continue;
    const double l = static_cast<double>(lcs_length(candidate, r));
    p_max = std::max(p_max, l / static_cast<double>(candidate.size()));
    r_max = std::max(r_max, l / static_cast<double>(r.size()));
  }
  if (p_max == 0.0 || r_max == 0.0) return 0.0;
  const double b2 = beta * beta;
  return (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max);
}

// ---------------------------------------------------------------------------

IdfTable::IdfTable(const std::vector<std::vector<Tokens>>& references_per_image) {
  images_ = references_per_image.size();
  if (images_ == 0) throw std::invalid_argument("IdfTable: empty reference corpus");
  log_n_ = std::log(static_cast<double>(images_));
  for (const auto& refs : references_per_image) {
    std::set<std::string> seen;
    for (const auto& r : refs)
      for (std::size_t n = 1; n <= 4; ++n)
        for (const auto& [g, c] : ngram_counts(r, n)) seen.insert(g);
    for (const auto& g : seen) df_[g] += 1.0;
  }
}

double IdfTable::document_frequency(const Tokens& ngram) const {
  if (ngram.empty()) return 0.0;
  auto it = df_.find(ngram_key(ngram, 0, ngram.size()));
  return it == df_.end() ? 0.0 : it->second;
}

double IdfTable::weight(const std::string& ngram_key, std::size_t) const {
  auto it = df_.find(ngram_key);
  const double df = it == df_.end() ? 0.0 : it->second;
  return scale_ * (log_n_ - std::log(std::max(1.0, df)));
}

namespace {

struct CiderVector {
  std::array<NgramCounts, 4> vec;
  std::array<double, 4> norm{};
  double length = 0.0;  // bigram count, as in the reference implementation
};

CiderVector cider_vector(const Tokens& t, const IdfTable& idf) {
  CiderVector v;
  for (std::size_t n = 1; n <= 4; ++n) {
    for (const auto& [g, tf] : ngram_counts(t, n)) {
      const double w = tf * idf.weight(g, n);
      v.vec[n - 1][g] = w;
      v.norm[n - 1] += w * w;
      if (n == 2) v.length += tf;
    }
  }
  for (auto& x : v.norm) x = std::sqrt(x);
  return v;
}

std::array<double, 4> cider_sim(const CiderVector& hyp, const CiderVector& ref, double sigma) {
  std::array<double, 4> val{};
  const double delta = hyp.length - ref.length;
  const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
  for (std::size_t n = 0; n < 4; ++n) {
    for (const auto& [g, w] : hyp.vec[n]) {
      auto it = ref.vec[n].find(g);
      const double r = it == ref.vec[n].end() ? 0.0 : it->second;
      val[n] += std::min(w, r) * r;
    }
    if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val[n] /= hyp.norm[n] * ref.norm[n];
    val[n] *= penalty;
  }
  return val;
}

}  // namespace

double cider_d(const Tokens& candidate, const std::vector<Tokens>& references, const IdfTable& idf, double sigma) {
  if (idf.image_count() == 0) throw std::invalid_argument("cider_d: empty idf table");
  if (references.empty()) throw std::invalid_argument("cider_d: at least one reference is required");
  const auto hyp = cider_vector(candidate, idf);
  std::array<double, 4> acc{};
  for (const auto& r : references) {
    const auto v = cider_sim(hyp, cider_vector(r, idf), sigma);
    for (std::size_t n = 0; n < 4; ++n) acc[n] += v[n];
  }
  const double mean_n = (acc[0] + acc[1] + acc[2] + acc[3]) / 4.0;
  return mean_n / static_cast<double>(references.size()) * 10.0;
}

// ---------------------------------------------------------------------------

double div_n_set(const std::vector<Tokens>& captions, int n) {
  std::set<std::string> distinct;
  double total = 0.0;
  for (const auto& c : captions) {
    for (const auto& [g, cnt] : ngram_counts(c, static_cast<std::size_t>(n))) {
      distinct.insert(g);
      total += cnt;
    }
  }
  return total == 0.0 ? 0.0 : static_cast<double>(distinct.size()) / total;
}

double div_n(const std::vector<std::vector<Tokens>>& caption_sets, int n) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& set : caption_sets) {
    bool any = false;
    for (const auto& c : set) any = any || c.size() >= static_cast<std::size_t>(n);
    if (!any) continue;
    sum += div_n_set(set, n);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double mbleu_set(const std::vector<Tokens>& captions) {
  if (captions.size() < 2) throw std::invalid_argument("mbleu: needs at least two captions");
  double sum = 0.0;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    std::vector<Tokens> others;
    for (std::size_t j = 0; j < captions.size(); ++j)
      if (j != i) others.push_back(captions[j]);
    sum += bleu(captions[i], others, 4, true);
  }
  return sum / static_cast<double>(captions.size());
}

double mbleu(const std::vector<std::vector<Tokens>>& caption_sets) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& set : caption_sets) {
    if (set.size() < 2) continue;
    sum += mbleu_set(set);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double spectral_diversity(const std::vector<double>& kernel, std::size_t m) {
  if (m < 2) throw std::invalid_argument("spectral diversity needs at least two items");
  if (kernel.size() != m * m) throw std::invalid_argument("kernel must be m x m");
  Eigen::MatrixXd k(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 0.5 * (kernel[i * m + j] + kernel[j * m + i]);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(k, Eigen::EigenvaluesOnly);
  const auto& ev = solver.eigenvalues();
  // Eigenvalues at round-off level relative to the largest are zero.
  const double cutoff = ev.cwiseAbs().maxCoeff() * static_cast<double>(m) * 1e-14;
  double sum_sqrt = 0.0, max_sqrt = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    const double s = ev(i) > cutoff ? std::sqrt(ev(i)) : 0.0;
    sum_sqrt += s;
    max_sqrt = std::max(max_sqrt, s);
  }
  if (sum_sqrt == 0.0) return 0.0;
  const double ratio = max_sqrt / sum_sqrt;
  // Clamp rounding just outside [0, 1].
  return std::clamp(-std::log(ratio) / std::log(static_cast<double>(m)), 0.0, 1.0);
}

double self_cider_set(const std::vector<Tokens>& captions, const IdfTable& idf) {
  const std::size_t m = captions.size();
  if (m < 2) throw std::invalid_argument("self_cider: needs at least two captions");
  std::vector<double> raw(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) raw[i * m + j] = cider_d(captions[i], {captions[j]}, idf);
  std::vector<double> k(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (captions[i] == captions[j]) {
        k[i * m + j] = 1.0;
      } else {
        const double denom = std::sqrt(raw[i * m + i] * raw[j * m + j]);
        k[i * m + j] = denom > 0.0 ? std::min(1.0, raw[i * m + j] / denom) : 0.0;
      }
    }
  }
  return spectral_diversity(k, m);
}

double self_cider(const std::vector<std::vector<Tokens>>& caption_sets, const IdfTable& idf) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& set : caption_sets) {
    if (set.size() < 2) continue;
    sum += self_cider_set(set, idf);
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------

PurityReport mode_purity(const std::vector<int>& modes, const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("mode_purity: ground-truth labels missing");
  if (modes.size() != labels.size()) throw std::invalid_argument("mode_purity: size mismatch");
  std::map<int, std::map<int, double>> table;
  std::map<int, double> row_sum, col_sum;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    table[modes[i]][labels[i]] += 1.0;
    row_sum[modes[i]] += 1.0;
    col_sum[labels[i]] += 1.0;
  }
  const double n = static_cast<double>(modes.size());
  PurityReport r;
  double hits = 0.0;
  for (const auto& [mode, row] : table) {
    double best = 0.0;
    for (const auto& [label, c] : row) best = std::max(best, c);
    hits += best;
  }
  r.purity = hits / n;
  auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };
  double index = 0.0, a = 0.0, b = 0.0;
  for (const auto& [mode, row] : table)
    for (const auto& [label, c] : row) index += comb2(c);
  for (const auto& [k, v] : row_sum) a += comb2(v);
  for (const auto& [k, v] : col_sum) b += comb2(v);
  const double expected = n > 1.0 ? a * b / comb2(n) : 0.0;
  const double max_index = 0.5 * (a + b);
  r.adjusted_rand = max_index == expected ? 1.0 : (index - expected) / (max_index - expected);
  return r;
}

// ---------------------------------------------------------------------------

Tokens split_tokens(const std::string& caption) {
  Tokens out;
  std::istringstream is(caption);
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["corpus"] = corpus;
  j["oracle"] = oracle;
  j["diversity"] = diversity;
  nlohmann::json pm = nlohmann::json::object();
  for (const auto& [mode, scores] : per_mode) pm[std::to_string(mode)] = scores;
  j["per_mode"] = pm;
  j["effective_modes"] = effective_modes;
  if (purity) j["purity"] = *purity;
  if (adjusted_rand) j["adjusted_rand"] = *adjusted_rand;
  return j;
}

MetricsReport evaluate(const std::vector<ImageCandidates>& images) {
  if (images.empty()) throw std::invalid_argument("evaluate: no images");
  std::vector<std::vector<Tokens>> refs;
  refs.reserve(images.size());
  for (const auto& im : images) {
    if (im.references.empty()) throw std::invalid_argument("evaluate: image " + im.image_id + " has no references");
    if (im.candidates.empty()) throw std::invalid_argument("evaluate: image " + im.image_id + " has no candidates");
    refs.push_back(im.references);
  }
  const IdfTable idf(refs);

  MetricsReport rep;
  std::vector<Tokens> pooled_cands;
  std::vector<std::vector<Tokens>> pooled_refs;
  std::map<std::string, double> oracle_sum;
  double rouge_sum = 0.0, cider_sum = 0.0;
  std::size_t n_cands = 0;
  std::map<int, std::map<std::string, double>> mode_sum;
  std::map<int, std::size_t> mode_count;
  std::vector<std::vector<Tokens>> sets;

  for (const auto& im : images) {
    std::vector<SentenceScores> scores;
    std::map<std::string, double> best;
    std::vector<Tokens> set;
    for (const auto& c : im.candidates) {
      SentenceScores s;
      s.bleu4 = bleu(c.tokens, im.references, 4, true);
      s.rouge_l = rouge_l(c.tokens, im.references);
      s.cider_d = cider_d(c.tokens, im.references, idf);
      const std::map<std::string, double> sentence{{"bleu1", bleu(c.tokens, im.references, 1, true)},
                                                   {"bleu2", bleu(c.tokens, im.references, 2, true)},
                                                   {"bleu3", bleu(c.tokens, im.references, 3, true)},
                                                   {"bleu4", s.bleu4},
                                                   {"rouge_l", s.rouge_l},
                                                   {"cider_d", s.cider_d}};
      auto& ms = mode_sum[c.mode];
      for (const auto& [k, v] : sentence) {
        auto it = best.find(k);
        if (it == best.end() || v > it->second) best[k] = v;
        ms[k] += v;
      }
      ++mode_count[c.mode];
      rouge_sum += s.rouge_l;
      cider_sum += s.cider_d;
      ++n_cands;
      pooled_cands.push_back(c.tokens);
      pooled_refs.push_back(im.references);
      set.push_back(c.tokens);
      scores.push_back(s);
    }
    for (const auto& [k, v] : best) oracle_sum[k] += v;
    rep.per_image.push_back(std::move(scores));
    sets.push_back(std::move(set));
  }

  const double inv_images = 1.0 / static_cast<double>(images.size());
  for (const auto& [k, v] : oracle_sum) rep.oracle[k] = v * inv_images;
  for (int n = 1; n <= 4; ++n) rep.corpus["bleu" + std::to_string(n)] = corpus_bleu(pooled_cands, pooled_refs, n);
  rep.corpus["rouge_l"] = rouge_sum / static_cast<double>(n_cands);
  rep.corpus["cider_d"] = cider_sum / static_cast<double>(n_cands);
  for (const auto& [mode, sums] : mode_sum) {
    for (const auto& [k, v] : sums) rep.per_mode[mode][k] = v / static_cast<double>(mode_count[mode]);
    if (mode >= 0) ++rep.effective_modes;
  }
  rep.diversity["div1"] = div_n(sets, 1);
  rep.diversity["div2"] = div_n(sets, 2);
  rep.diversity["mbleu"] = mbleu(sets);
  rep.diversity["self_cider"] = self_cider(sets, idf);
  return rep;
}

}  // namespace dml
