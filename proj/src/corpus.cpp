#include "dml/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <regex>
#include <set>

namespace dml {

namespace {

const std::array<std::string, 6> kSpecials{"[PAD]", "[BOS]", "[EOS]", "[MASK]", "[MODE]", "[UNK]"};

const std::vector<std::string> kObjects{"dog",  "cat",  "horse", "car",   "bus",  "bike",
                                        "man",  "woman", "boat", "bird",  "train", "kite",
                                        "sheep", "truck", "girl", "boy"};
const std::vector<std::string> kColors{"red", "blue", "green", "white", "black", "brown", "pink", "gray", "purple", "tan"};
const std::vector<std::string> kPlaces{"park", "street", "field", "beach", "room", "yard", "kitchen", "garden",
                                       "forest", "lake"};

struct TemplateFamily {
  std::string_view name;
  std::string_view pattern;  // slots: {o1} {o2} {c1} {c2} {p}
};

const std::array<TemplateFamily, 8> kFamilies{{
    {"existential", "there is a {c1} {o1} near a {o2}"},
    {"enumerative", "a {c1} {o1} and a {c2} {o2} and a {p}"},
    {"brief", "a {o1} in the {p}"},
    {"verbose", "a picture of a large {c1} {o1} standing next to a small {c2} {o2} in the {p}"},
    {"passive", "a {o2} is being watched by a {c1} {o1}"},
    {"close_up", "a close up of a {c1} {o1}"},
    {"colors", "the {o1} is {c1} and the {o2} is {c2}"},
    {"location_first", "in the {p} there is a {o1} with a {o2}"},
}};

struct Scene {
  std::size_t obj1, obj2, color1, color2, place;
};

std::string fill_template(std::string_view pattern, const Scene& s) {
  std::string out(pattern);
  auto replace = [&out](const std::string& slot, const std::string& word) {
    for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot)) out.replace(pos, slot.size(), word);
  };
  replace("{o1}", kObjects[s.obj1]);
  replace("{o2}", kObjects[s.obj2]);
  replace("{c1}", kColors[s.color1]);
  replace("{c2}", kColors[s.color2]);
  replace("{p}", kPlaces[s.place]);
  return out;
}

std::string alternation(const std::vector<std::string>& words) {
  std::string out = "(?:";
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += '|';
    out += words[i];
  }
  return out + ")";
}

const std::vector<std::regex>& family_regexes() {
  static const std::vector<std::regex> regexes = [] {
    std::vector<std::regex> out;
    const auto obj = alternation(kObjects), col = alternation(kColors), plc = alternation(kPlaces);
    for (const auto& f : kFamilies) {
      std::string p(f.pattern);
      auto replace = [&p](const std::string& slot, const std::string& re) {
        for (auto pos = p.find(slot); pos != std::string::npos; pos = p.find(slot)) p.replace(pos, slot.size(), re);
      };
      replace("{o1}", obj);
      replace("{o2}", obj);
      replace("{c1}", col);
      replace("{c2}", col);
      replace("{p}", plc);
      out.emplace_back("^" + p + "$");
    }
    return out;
  }();
  return regexes;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Fixed pseudo-random direction for (kind, id), independent of corpus seed.
std::vector<double> projection(std::uint64_t kind, std::size_t id, std::size_t d) {
  std::mt19937_64 rng(splitmix64(kind * 1000003ULL + id));
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(d);
  for (auto& x : v) x = dist(rng);
  return v;
}

enum ProjectionKind : std::uint64_t { kObjectKind = 1, kColorKind = 2, kPlaceKind = 3, kRoleKind = 4 };

void add_into(std::vector<double>& a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  if (out.size() > kMaxCaptionTokens) out.resize(kMaxCaptionTokens);
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, int min_count) : tokens_(std::move(tokens)), min_count_(min_count) {
  if (tokens_.size() < kNumSpecials) throw DataError("vocabulary is missing special tokens");
  for (std::size_t i = 0; i < kNumSpecials; ++i) {
    if (tokens_[i] != kSpecials[i]) throw DataError("vocabulary special token " + std::to_string(i) + " must be " + kSpecials[i]);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) throw DataError("duplicate vocabulary token " + tokens_[i]);
  }
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw std::out_of_range("token id " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view caption) const {
  std::vector<int> ids;
  for (const auto& t : tokenize(caption)) ids.push_back(id(t));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id >= 0 && id < kUnk) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::ordered_json j;
  j["tokens"] = tokens_;
  j["min_count"] = min_count_;
  return nlohmann::json::parse(j.dump());
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  if (!j.contains("tokens") || !j["tokens"].is_array()) throw DataError("vocabulary JSON lacks a \"tokens\" array");
  return Vocabulary(j["tokens"].get<std::vector<std::string>>(), j.value("min_count", 1));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  nlohmann::ordered_json j;
  j["tokens"] = tokens_;
  j["min_count"] = min_count_;
  os << j.dump() << '\n';
  if (!os) throw DataError("write failed for " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  try {
    return from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

std::size_t Dataset::feature_dim() const {
  if (instances.empty() || instances[0].features.empty()) return 0;
  return instances[0].features[0].size();
}

bool Dataset::has_labels() const {
  return !instances.empty() &&
         std::all_of(instances.begin(), instances.end(), [](const SceneInstance& s) { return s.mode_labels.has_value(); });
}

std::vector<TrainingExample> to_training_examples(const Dataset& data, const Vocabulary& vocab) {
  std::vector<TrainingExample> out;
  out.reserve(data.instances.size());
  for (const auto& s : data.instances) {
    TrainingExample ex;
    ex.image_id = s.image_id;
    const std::size_t r = s.features.size(), d = s.features.at(0).size();
    std::vector<double> flat;
    flat.reserve(r * d);
    for (const auto& f : s.features) flat.insert(flat.end(), f.begin(), f.end());
    ex.features = Tensor::from({r, d}, std::move(flat));
    for (const auto& c : s.captions) {
      auto ids = vocab.encode(c);
      if (ids.empty()) throw DataError("caption of " + s.image_id + " is empty after tokenization");
      ex.captions.push_back(std::move(ids));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::size_t template_family_count() { return kFamilies.size(); }

std::string_view template_family_name(std::size_t family) { return kFamilies.at(family).name; }

int match_template_family(std::string_view caption) {
  std::string joined;
  for (const auto& t : tokenize(caption)) {
    if (!joined.empty()) joined += ' ';
    joined += t;
  }
  const auto& res = family_regexes();
  for (std::size_t f = 0; f < res.size(); ++f)
    if (std::regex_match(joined, res[f])) return static_cast<int>(f);
  return -1;
}

CorpusSplits generate_corpus(const CorpusConfig& cfg) {
  if (cfg.n_families == 0 || cfg.n_families > kFamilies.size()) {
    throw std::invalid_argument("n_families must be in [1, " + std::to_string(kFamilies.size()) + "]");
  }
  if (cfg.caps_per_image == 0 || cfg.caps_per_image > cfg.n_families) {
    throw std::invalid_argument("infeasible corpus: " + std::to_string(cfg.caps_per_image) +
                                " captions per image need at least as many template families (have " +
                                std::to_string(cfg.n_families) + ")");
  }
  if (cfg.n_objects < 2 || cfg.n_objects > kObjects.size() || cfg.n_colors < 2 || cfg.n_colors > kColors.size() ||
      cfg.n_places < 1 || cfg.n_places > kPlaces.size()) {
    throw std::invalid_argument("lexicon sizes out of range (objects 2.." + std::to_string(kObjects.size()) +
                                ", colors 2.." + std::to_string(kColors.size()) + ", places 1.." +
                                std::to_string(kPlaces.size()) + ")");
  }
  if (cfg.regions < 3) throw std::invalid_argument("scenes need at least 3 regions");
  if (cfg.d_img == 0 || cfg.n_images < 3) throw std::invalid_argument("need d_img > 0 and at least 3 images");

  std::mt19937_64 rng(cfg.seed);
  auto pick = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  std::normal_distribution<double> noise(0.0, cfg.feature_noise);

  std::vector<std::size_t> families(cfg.n_families);
  std::vector<SceneInstance> all;
  all.reserve(cfg.n_images);
  for (std::size_t i = 0; i < cfg.n_images; ++i) {
    Scene s{};
    s.obj1 = pick(cfg.n_objects);
    do s.obj2 = pick(cfg.n_objects); while (s.obj2 == s.obj1);
    s.color1 = pick(cfg.n_colors);
    do s.color2 = pick(cfg.n_colors); while (s.color2 == s.color1);
    s.place = pick(cfg.n_places);

    std::vector<std::vector<double>> regions(cfg.regions, std::vector<double>(cfg.d_img, 0.0));
    add_into(regions[0], projection(kObjectKind, s.obj1, cfg.d_img));
    add_into(regions[0], projection(kColorKind, s.color1, cfg.d_img));
    add_into(regions[0], projection(kRoleKind, 0, cfg.d_img));
    add_into(regions[1], projection(kObjectKind, s.obj2, cfg.d_img));
    add_into(regions[1], projection(kColorKind, s.color2, cfg.d_img));
    add_into(regions[1], projection(kRoleKind, 1, cfg.d_img));
    add_into(regions[2], projection(kPlaceKind, s.place, cfg.d_img));
    for (auto& region : regions)
      for (auto& x : region) x += noise(rng);
    std::shuffle(regions.begin(), regions.end(), rng);

    std::iota(families.begin(), families.end(), std::size_t{0});
    std::shuffle(families.begin(), families.end(), rng);
    SceneInstance inst;
    char id[32];
    std::snprintf(id, sizeof id, "img_%05zu", i);
    inst.image_id = id;
    inst.features = std::move(regions);
    std::vector<int> labels;
    for (std::size_t c = 0; c < cfg.caps_per_image; ++c) {
      inst.captions.push_back(fill_template(kFamilies[families[c]].pattern, s));
      labels.push_back(static_cast<int>(families[c]));
    }
    inst.mode_labels = std::move(labels);
    all.push_back(std::move(inst));
  }

  const std::size_t n_train = cfg.n_images * 90 / 100;
  const std::size_t n_val = cfg.n_images * 5 / 100;
  CorpusSplits out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dst.instances.push_back(std::move(all[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json scene_to_json(const SceneInstance& s) {
  nlohmann::ordered_json j;
  j["image_id"] = s.image_id;
  j["features"] = s.features;
  j["captions"] = s.captions;
  if (s.mode_labels) j["mode_labels"] = *s.mode_labels;
  return nlohmann::json::parse(j.dump());
}

SceneInstance scene_from_json(const nlohmann::json& j, std::size_t line) {
  auto fail = [line](const std::string& what) { return DataError("line " + std::to_string(line) + ": " + what); };
  if (!j.is_object()) throw fail("expected a JSON object");
  for (const char* key : {"image_id", "features", "captions"})
    if (!j.contains(key)) throw fail(std::string("missing \"") + key + "\" key");
  SceneInstance s;
  if (!j["image_id"].is_string()) throw fail("\"image_id\" must be a string");
  s.image_id = j["image_id"].get<std::string>();
  const auto& feats = j["features"];
  if (!feats.is_array() || feats.empty()) throw fail("\"features\" must be a non-empty array of vectors");
  for (const auto& row : feats) {
    if (!row.is_array() || row.empty()) throw fail("each feature row must be a non-empty array");
    std::vector<double> v;
    v.reserve(row.size());
    for (const auto& x : row) {
      if (!x.is_number()) throw fail("feature values must be numbers");
      const double d = x.get<double>();
      if (!std::isfinite(d)) throw fail("non-finite feature value");
      v.push_back(d);
    }
    if (!s.features.empty() && v.size() != s.features[0].size()) throw fail("feature rows have inconsistent widths");
    s.features.push_back(std::move(v));
  }
  const auto& caps = j["captions"];
  if (!caps.is_array() || caps.empty()) throw fail("\"captions\" must be a non-empty array");
  for (const auto& c : caps) {
    if (!c.is_string()) throw fail("captions must be strings");
    auto text = c.get<std::string>();
    if (tokenize(text).empty()) throw fail("empty caption");
    s.captions.push_back(std::move(text));
  }
  if (j.contains("mode_labels")) {
    const auto& labels = j["mode_labels"];
    if (!labels.is_array() || labels.size() != s.captions.size()) {
      throw fail("\"mode_labels\" must list one integer per caption");
    }
    std::vector<int> ls;
    for (const auto& l : labels) {
      if (!l.is_number_integer()) throw fail("mode labels must be integers");
      ls.push_back(l.get<int>());
    }
    s.mode_labels = std::move(ls);
  }
  return s;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& s : data.instances) {
    nlohmann::ordered_json j;
    j["image_id"] = s.image_id;
    j["features"] = s.features;
    j["captions"] = s.captions;
    if (s.mode_labels) j["mode_labels"] = *s.mode_labels;
    os << j.dump() << '\n';
  }
  if (!os) throw DataError("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path, std::size_t expected_d_img) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset " + path.string());
  Dataset data;
  std::string text;
  std::size_t line = 0;
  std::set<std::string> ids;
  while (std::getline(is, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ": line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
    }
    SceneInstance s;
    try {
      s = scene_from_json(j, line);
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
    const std::size_t d = s.features[0].size();
    if (expected_d_img == 0) expected_d_img = d;
    if (d != expected_d_img) {
      throw DataError(path.string() + ": line " + std::to_string(line) + ": feature dimension " + std::to_string(d) +
                      " does not match expected " + std::to_string(expected_d_img));
    }
    if (!ids.insert(s.image_id).second) {
      throw DataError(path.string() + ": line " + std::to_string(line) + ": duplicate image_id " + s.image_id);
    }
    data.instances.push_back(std::move(s));
  }
  if (data.instances.empty()) throw DataError(path.string() + ": no instances");
  return data;
}

Vocabulary build_vocab(const Dataset& data, int min_count) {
  std::map<std::string, int> counts;
  for (const auto& s : data.instances)
    for (const auto& c : s.captions)
      for (const auto& t : tokenize(c)) ++counts[t];
  if (counts.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  std::vector<std::string> tokens(kSpecials.begin(), kSpecials.end());
  for (const auto& [tok, n] : counts)
    if (n >= min_count) tokens.push_back(tok);
  return Vocabulary(std::move(tokens), min_count);
}

}  // namespace dml
