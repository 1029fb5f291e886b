#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace dml {

using Tokens = std::vector<std::string>;

// Sentence BLEU with uniform weights over 1..max_n and the closest reference
// length for the brevity penalty. Zero match counts are floored at 1e-9 when
// `smooth` is set. An empty candidate scores 0.
double bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n = 4, bool smooth = true);
// Corpus BLEU: clipped counts and lengths pooled before the geometric mean,
// no smoothing.
double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                   int max_n = 4);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
// LCS F-measure with the best precision and best recall over references.
double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references, double beta = 1.2);

// Document frequencies of 1..4-grams over the per-image reference sets.
class IdfTable {
 public:
  IdfTable() = default;
  explicit IdfTable(const std::vector<std::vector<Tokens>>& references_per_image);

  std::size_t image_count() const { return images_; }
  double document_frequency(const Tokens& ngram) const;
  // (log N - log max(1, df)) times the table's scale.
  double weight(const std::string& ngram_key, std::size_t n) const;
  void set_scale(double c) { scale_ = c; }

 private:
  std::size_t images_ = 0;
  double log_n_ = 0.0;
  double scale_ = 1.0;
  std::unordered_map<std::string, double> df_;
};

// CIDEr-D: clipped TF-IDF cosine for n = 1..4 with a Gaussian length penalty
// (sigma 6), averaged over n and references, times 10.
double cider_d(const Tokens& candidate, const std::vector<Tokens>& references, const IdfTable& idf,
               double sigma = 6.0);

// Distinct n-grams over total n-grams within one caption set.
double div_n_set(const std::vector<Tokens>& captions, int n);
// Mean of div_n_set over images that contain at least one n-gram.
double div_n(const std::vector<std::vector<Tokens>>& caption_sets, int n);

// Each caption scored by smoothed BLEU-4 against the others, averaged.
double mbleu_set(const std::vector<Tokens>& captions);
double mbleu(const std::vector<std::vector<Tokens>>& caption_sets);

// Diversity from the spectrum of the pairwise CIDEr kernel:
// -log_m(sqrt(l_max) / sum_i sqrt(l_i)); 0 for identical captions, 1 for
// mutually dissimilar ones.
double self_cider_set(const std::vector<Tokens>& captions, const IdfTable& idf);
double self_cider(const std::vector<std::vector<Tokens>>& caption_sets, const IdfTable& idf);
// The spectral score of an explicit symmetric similarity kernel (row-major m x m).
double spectral_diversity(const std::vector<double>& kernel, std::size_t m);

struct PurityReport {
  double purity = 0.0;
  double adjusted_rand = 0.0;
};
PurityReport mode_purity(const std::vector<int>& modes, const std::vector<int>& labels);

struct ModeCandidate {
  int mode = -1;
  Tokens tokens;
};

struct ImageCandidates {
  std::string image_id;
  std::vector<Tokens> references;
  std::vector<ModeCandidate> candidates;
};

struct SentenceScores {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider_d = 0.0;
};

struct MetricsReport {
  std::map<std::string, double> corpus;
  std::map<std::string, double> oracle;
  std::map<std::string, double> diversity;
  std::map<int, std::map<std::string, double>> per_mode;
  std::vector<std::vector<SentenceScores>> per_image;  // [image][candidate]
  std::size_t effective_modes = 0;
  std::optional<double> purity;
  std::optional<double> adjusted_rand;

  nlohmann::json to_json() const;
};

// Scores every candidate against its image's references (idf built from the
// references alone), then aggregates corpus, oracle, per-mode and diversity
// numbers.
MetricsReport evaluate(const std::vector<ImageCandidates>& images);

Tokens split_tokens(const std::string& caption);

}  // namespace dml
