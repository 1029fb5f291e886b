#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "dml/tensor.hpp"

namespace dml {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kMaxCaptionTokens = 20;

// Lowercase, drop punctuation, split on whitespace, cap at kMaxCaptionTokens.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;
  static constexpr int kMode = 4;
  static constexpr int kUnk = 5;
  static constexpr std::size_t kNumSpecials = 6;

  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, int min_count);

  std::size_t size() const { return tokens_.size(); }
  int min_count() const { return min_count_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  std::vector<int> encode(std::string_view caption) const;
  // Joins ids with spaces, skipping specials other than [UNK].
  std::string decode(std::span<const int> ids) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int min_count_ = 1;
};

struct SceneInstance {
  std::string image_id;
  std::vector<std::vector<double>> features;  // r x d_img
  std::vector<std::string> captions;
  std::optional<std::vector<int>> mode_labels;  // evaluation only
};

struct Dataset {
  std::vector<SceneInstance> instances;

  std::size_t feature_dim() const;
  bool has_labels() const;
};

// What the trainer sees of a scene: no generator labels.
struct TrainingExample {
  std::string image_id;
  Tensor features;                        // [r x d_img]
  std::vector<std::vector<int>> captions;  // token ids, no BOS/EOS
};

std::vector<TrainingExample> to_training_examples(const Dataset& data, const Vocabulary& vocab);

struct CorpusConfig {
  std::size_t n_images = 2000;
  std::size_t caps_per_image = 5;
  std::size_t n_families = 8;
  std::size_t n_objects = 12;
  std::size_t n_colors = 8;
  std::size_t n_places = 8;
  std::size_t d_img = 32;
  std::size_t regions = 6;
  double feature_noise = 0.1;
  std::uint64_t seed = 7;
};

struct CorpusSplits {
  Dataset train, val, test;
};

std::size_t template_family_count();
std::string_view template_family_name(std::size_t family);
// Index of the family whose surface pattern matches `caption`, or -1.
int match_template_family(std::string_view caption);

// Deterministic synthetic corpus; 90/5/5 split.
CorpusSplits generate_corpus(const CorpusConfig& cfg);

nlohmann::json scene_to_json(const SceneInstance& s);
SceneInstance scene_from_json(const nlohmann::json& j, std::size_t line);

void write_dataset(const std::filesystem::path& path, const Dataset& data);
// Validates every line; `expected_d_img` == 0 accepts the first line's width.
Dataset load_dataset(const std::filesystem::path& path, std::size_t expected_d_img = 0);

Vocabulary build_vocab(const Dataset& data, int min_count = 1);

}  // namespace dml
