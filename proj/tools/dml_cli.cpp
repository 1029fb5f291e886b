#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "dml/cdvae.hpp"
#include "dml/corpus.hpp"
#include "dml/metrics.hpp"
#include "dml/mic.hpp"
#include "dml/projection.hpp"
#include "dml/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dml;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Options and config files

struct CorpusArgs {
  std::size_t images = 2000, caps = 5, families = 8;
  std::uint64_t seed = 7;
  double noise = 0.1;
  std::string out;
};

struct TrainArgs {
  std::string preset = "desk", data, out, assign = "hungarian", mask = "full", resume;
  std::optional<std::size_t> k, steps, batch, warmup, checkpoint_every;
  std::optional<double> lr;
  std::uint64_t seed = 1;
  bool baseline = false;
};

struct GenerateArgs {
  std::string ckpt, data, out, modes = "all", decode = "greedy";
  std::size_t max_len = 21;
};

struct EvaluateArgs {
  std::string captions, data, out, ckpt, assign = "hungarian";
  bool purity = false;
};

struct ProjectArgs {
  std::string ckpt, data, out, svg, assign = "hungarian";
};

// Every non-help option of `sub` keyed by its long name.
std::map<std::string, CLI::Option*> long_options(CLI::App* sub) {
  std::map<std::string, CLI::Option*> out;
  for (auto* opt : sub->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const auto& name = opt->get_lnames().front();
    if (name != "help" && name != "config") out[name] = opt;
  }
  return out;
}

// Turns a JSON config object into command-line tokens for `sub`.
std::vector<std::string> config_tokens(CLI::App* sub, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path.string() + " must hold a JSON object");
  const auto known = long_options(sub);
  std::vector<std::string> tokens;
  for (const auto& [key, value] : j.items()) {
    auto it = known.find(key);
    if (it == known.end()) throw UsageError("config " + path.string() + ": unknown key '" + key + "'");
    if (it->second->get_expected_min() == 0) {
      if (!value.is_boolean()) throw UsageError("config key '" + key + "' must be a boolean");
      if (value.get<bool>()) tokens.push_back("--" + key);
    } else {
      tokens.push_back("--" + key);
      tokens.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  return tokens;
}

json effective_options(CLI::App* sub) {
  json j = json::object();
  for (const auto& [name, opt] : long_options(sub)) {
    if (opt->get_expected_min() == 0) {
      j[name] = opt->count() > 0;
    } else if (opt->count() > 0) {
      j[name] = opt->results().back();
    } else if (!opt->get_default_str().empty()) {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

void echo(const std::string& command, const json& config) {
  std::cout << json{{"command", command}, {"effective_config", config}}.dump(2) << std::endl;
}

// ---------------------------------------------------------------------------
// Shared loading

Vocabulary vocab_for(const fs::path& data_dir, const Dataset& train) {
  if (fs::exists(data_dir / "vocab.json")) return Vocabulary::load(data_dir / "vocab.json");
  return build_vocab(train);
}

struct LoadedModel {
  std::unique_ptr<DmlModel> model;
  Vocabulary vocab;
};

LoadedModel load_checkpoint(const std::string& dir) {
  std::optional<Vocabulary> vocab;
  LoadedModel out;
  out.model = load_model(dir, &vocab);
  if (!vocab) throw DataError("checkpoint " + dir + " has no vocab.json");
  out.vocab = std::move(*vocab);
  return out;
}

std::vector<int> parse_mode_list(const std::string& text, const DmlModel& model) {
  std::vector<int> modes;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int m = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      modes.push_back(m);
    } catch (const std::exception&) {
      throw UsageError("--modes expects 'all' or a comma list of integers, got '" + text + "'");
    }
  }
  for (int m : modes) {
    if (m < 0 || static_cast<std::size_t>(m) >= model.config().codebook_size) {
      throw UsageError("mode " + std::to_string(m) + " outside the codebook of size " +
                       std::to_string(model.config().codebook_size));
    }
  }
  return modes;
}

std::ostream& output(std::ofstream& file, const std::string& path) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw DataError("cannot write " + path);
  return file;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_corpus(const CorpusArgs& a, const json& config) {
  CorpusConfig c;
  c.n_images = a.images;
  c.caps_per_image = a.caps;
  c.n_families = a.families;
  c.seed = a.seed;
  c.feature_noise = a.noise;
  CorpusSplits splits;
  try {
    splits = generate_corpus(c);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  echo("corpus", config);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_dataset(out / "train.jsonl", splits.train);
  write_dataset(out / "val.jsonl", splits.val);
  write_dataset(out / "test.jsonl", splits.test);
  const auto vocab = build_vocab(splits.train);
  vocab.save(out / "vocab.json");
  std::map<int, std::size_t> per_family;
  for (const auto& s : splits.train.instances)
    for (int f : *s.mode_labels) ++per_family[f];
  json families = json::object();
  for (const auto& [f, n] : per_family) families[std::string(template_family_name(static_cast<std::size_t>(f)))] = n;
  std::cout << json{{"train", splits.train.instances.size()},
                    {"val", splits.val.instances.size()},
                    {"test", splits.test.instances.size()},
                    {"vocab_size", vocab.size()},
                    {"train_captions_per_family", families}}
                   .dump(2)
            << std::endl;
  return kOk;
}

int cmd_train(const TrainArgs& a, json config) {
  const fs::path data_dir(a.data);
  const auto train_set = load_dataset(data_dir / "train.jsonl");
  auto vocab = vocab_for(data_dir, train_set);
  auto examples = to_training_examples(train_set, vocab);

  if (!a.resume.empty()) {
    auto trainer = Trainer::resume(a.resume, std::move(examples));
    trainer.set_vocabulary(vocab);
    config["model"] = trainer.model().config().to_json();
    config["train"] = trainer.config().to_json();
    config["resumed_at_step"] = trainer.step();
    echo("train", config);
    const auto last = trainer.run(a.out);
    std::cout << last.to_json().dump() << std::endl;
    return kOk;
  }

  ModelConfig mc;
  TrainConfig tc;
  if (a.preset == "desk") {
    mc = desk_model_preset(vocab.size(), train_set.feature_dim());
    tc = desk_train_preset();
  } else if (a.preset == "paper") {
    mc = paper_model_preset(vocab.size(), train_set.feature_dim());
    tc = paper_train_preset();
  } else {
    throw UsageError("--preset must be desk or paper, got '" + a.preset + "'");
  }
  try {
    tc.assign = parse_assign_strategy(a.assign);
    tc.masking = MaskingStrategy::parse(a.mask);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.k) mc.codebook_size = *a.k;
  if (a.steps) tc.total_steps = *a.steps;
  if (a.batch) tc.images_per_batch = *a.batch;
  if (a.warmup) tc.warmup_steps = *a.warmup;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.checkpoint_every) tc.checkpoint_interval = *a.checkpoint_every;
  mc.seed = a.seed;
  tc.seed = a.seed;
  mc.use_modes = !a.baseline;
  try {
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  config["model"] = mc.to_json();
  config["train"] = tc.to_json();
  echo("train", config);

  Trainer trainer(mc, tc, std::move(examples));
  trainer.set_vocabulary(vocab);
  fs::create_directories(a.out);
  std::ofstream(fs::path(a.out) / "config.json") << config.dump(2) << "\n";
  const auto last = trainer.run(a.out);
  std::cout << last.to_json().dump() << std::endl;
  return kOk;
}

int cmd_generate(const GenerateArgs& a, const json& config) {
  auto loaded = load_checkpoint(a.ckpt);
  const auto& model = *loaded.model;
  DecodeSpec spec;
  try {
    spec = DecodeSpec::parse(a.decode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::optional<std::vector<int>> modes;
  if (a.modes != "all") modes = parse_mode_list(a.modes, model);
  const auto data = load_dataset(a.data, model.config().d_img);
  echo("generate", config);

  std::ofstream file;
  auto& out = output(file, a.out);
  out.precision(17);
  for (const auto& inst : data.instances) {
    const auto features = to_training_examples(Dataset{{inst}}, loaded.vocab).front().features;
    for (const auto& g : generate_all_modes(model, features, spec, a.max_len, modes)) {
      out << json{{"image_id", inst.image_id},
                  {"mode", g.mode},
                  {"caption", loaded.vocab.decode(g.tokens)},
                  {"logprob", g.logprob}}
                 .dump()
          << "\n";
    }
  }
  return kOk;
}

int cmd_evaluate(const EvaluateArgs& a, const json& config) {
  const auto data = load_dataset(a.data);
  std::map<std::string, std::vector<ModeCandidate>> by_image;
  std::ifstream in(a.captions);
  if (!in) throw DataError("cannot read " + a.captions);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      by_image[j.at("image_id").get<std::string>()].push_back(
          {j.at("mode").get<int>(), tokenize(j.at("caption").get<std::string>())});
    } catch (const json::exception& e) {
      throw DataError(a.captions + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  std::set<std::string> ref_ids, cand_ids;
  for (const auto& inst : data.instances) ref_ids.insert(inst.image_id);
  for (const auto& [id, _] : by_image) cand_ids.insert(id);
  if (ref_ids != cand_ids) {
    std::size_t missing = 0, extra = 0;
    for (const auto& id : ref_ids) missing += cand_ids.count(id) == 0;
    for (const auto& id : cand_ids) extra += ref_ids.count(id) == 0;
    throw DataError("image_id sets differ: " + std::to_string(missing) + " reference images without candidates, " +
                    std::to_string(extra) + " candidate images without references");
  }
  if (a.purity && a.ckpt.empty()) throw UsageError("--purity needs --ckpt");
  if (a.purity && !data.has_labels()) throw DataError(a.data + " carries no mode_labels; purity is undefined");
  AssignStrategy assign;
  try {
    assign = parse_assign_strategy(a.assign);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  echo("evaluate", config);

  std::vector<ImageCandidates> images;
  for (const auto& inst : data.instances) {
    ImageCandidates ic;
    ic.image_id = inst.image_id;
    for (const auto& c : inst.captions) ic.references.push_back(tokenize(c));
    ic.candidates = by_image.at(inst.image_id);
    images.push_back(std::move(ic));
  }
  auto report = evaluate(images);
  if (a.purity) {
    auto loaded = load_checkpoint(a.ckpt);
    const auto modes = caption_modes(*loaded.model, to_training_examples(data, loaded.vocab), assign);
    std::vector<int> labels;
    for (const auto& inst : data.instances) labels.insert(labels.end(), inst.mode_labels->begin(), inst.mode_labels->end());
    const auto p = mode_purity(modes, labels);
    report.purity = p.purity;
    report.adjusted_rand = p.adjusted_rand;
  }
  std::ofstream file;
  output(file, a.out) << report.to_json().dump(2) << std::endl;
  return kOk;
}

int cmd_project(const ProjectArgs& a, const json& config) {
  auto loaded = load_checkpoint(a.ckpt);
  AssignStrategy assign;
  try {
    assign = parse_assign_strategy(a.assign);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto data = load_dataset(a.data, loaded.model->config().d_img);
  echo("project", config);
  const auto rows = project_modes_and_captions(*loaded.model, to_training_examples(data, loaded.vocab), assign);
  write_projection_csv(a.out, rows);
  if (!a.svg.empty()) write_projection_svg(a.svg, rows);
  std::size_t modes = 0;
  for (const auto& r : rows) modes += r.kind == "mode";
  std::cout << json{{"rows", rows.size()}, {"active_modes", modes}}.dump() << std::endl;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete mode learning: corpus, training, generation, evaluation"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  CorpusArgs ca;
  auto* corpus = app.add_subcommand("corpus", "Generate the synthetic mode-structured corpus");
  corpus->add_option("--images", ca.images, "Number of images")->capture_default_str();
  corpus->add_option("--caps", ca.caps, "Captions per image")->capture_default_str();
  corpus->add_option("--families", ca.families, "Template families")->capture_default_str();
  corpus->add_option("--seed", ca.seed, "Generator seed")->capture_default_str();
  corpus->add_option("--noise", ca.noise, "Feature noise")->capture_default_str();
  corpus->add_option("--out", ca.out, "Output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--preset", ta.preset, "desk or paper")->capture_default_str();
  train->add_option("--data", ta.data, "Corpus directory with train.jsonl")->required();
  train->add_option("--out", ta.out, "Run directory")->required();
  train->add_option("--assign", ta.assign, "hungarian or nearest")->capture_default_str();
  train->add_option("--mask", ta.mask, "full, fixed:P or linear:START:END")->capture_default_str();
  train->add_option("--k", ta.k, "Codebook size");
  train->add_option("--steps", ta.steps, "Training steps");
  train->add_option("--batch", ta.batch, "Images per batch");
  train->add_option("--warmup", ta.warmup, "Warmup steps");
  train->add_option("--lr", ta.lr, "Peak learning rate");
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Intermediate checkpoint interval");
  train->add_option("--seed", ta.seed, "Model and data-order seed")->capture_default_str();
  train->add_flag("--baseline", ta.baseline, "Train the captioner without modes");
  train->add_option("--resume", ta.resume, "Continue from a checkpoint directory");

  GenerateArgs ga;
  auto* generate = app.add_subcommand("generate", "Caption images under each mode");
  generate->add_option("--ckpt", ga.ckpt, "Checkpoint directory")->required();
  generate->add_option("--data", ga.data, "Dataset JSONL")->required();
  generate->add_option("--modes", ga.modes, "all or a comma list")->capture_default_str();
  generate->add_option("--decode", ga.decode, "greedy or beam:N")->capture_default_str();
  generate->add_option("--max-len", ga.max_len, "Generated tokens including [EOS]")->capture_default_str();
  generate->add_option("--out", ga.out, "Output JSONL (default stdout)");

  EvaluateArgs ea;
  auto* eval = app.add_subcommand("evaluate", "Score generated captions");
  eval->add_option("--captions", ea.captions, "Generation JSONL")->required();
  eval->add_option("--data", ea.data, "Reference dataset JSONL")->required();
  eval->add_flag("--purity", ea.purity, "Add mode purity against the dataset's mode labels");
  eval->add_option("--ckpt", ea.ckpt, "Checkpoint used for --purity");
  eval->add_option("--assign", ea.assign, "Assignment used for --purity")->capture_default_str();
  eval->add_option("--out", ea.out, "Report path (default stdout)");

  ProjectArgs pa;
  auto* proj = app.add_subcommand("project", "2-D PCA of mode and caption embeddings");
  proj->add_option("--ckpt", pa.ckpt, "Checkpoint directory")->required();
  proj->add_option("--data", pa.data, "Dataset JSONL")->required();
  proj->add_option("--out", pa.out, "CSV path")->required();
  proj->add_option("--svg", pa.svg, "Optional SVG scatter");
  proj->add_option("--assign", pa.assign, "Assignment used to colour captions")->capture_default_str();

  std::string config_path;
  for (auto* sub : {corpus, train, generate, eval, proj})
    sub->add_option("--config", config_path, "JSON file of option values; flags override it");

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
    if (!config_path.empty()) {
      auto* sub = app.get_subcommands().front();
      auto tokens = config_tokens(sub, config_path);
      std::vector<std::string> merged{args.front()};
      merged.insert(merged.end(), tokens.begin(), tokens.end());
      merged.insert(merged.end(), args.begin() + 1, args.end());
      app.clear();
      app.parse(std::vector<std::string>(merged.rbegin(), merged.rend()));
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }

  auto* sub = app.get_subcommands().front();
  json config = effective_options(sub);
  if (!config_path.empty()) config["config"] = config_path;
  try {
    if (sub == corpus) return cmd_corpus(ca, config);
    if (sub == train) return cmd_train(ta, config);
    if (sub == generate) return cmd_generate(ga, config);
    if (sub == eval) return cmd_evaluate(ea, config);
    return cmd_project(pa, config);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kData;
  } catch (const InfeasibleAssignment& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
