#include "dml/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "dml/mic.hpp"

namespace dml {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

void TrainConfig::validate(std::size_t caps_per_image) const {
  if (total_steps == 0) throw std::invalid_argument("total_steps must be positive");
  if (images_per_batch == 0) throw std::invalid_argument("images_per_batch must be positive");
  if (sampled_caps_per_image == 0 || sampled_caps_per_image > caps_per_image) {
    throw std::invalid_argument("sampled_caps_per_image must lie in [1, " + std::to_string(caps_per_image) + "]");
  }
  if (!(grad_clip_norm > 0.0)) throw std::invalid_argument("grad_clip_norm must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be nonnegative");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw std::invalid_argument("label_smoothing must lie in [0, 1)");
  if (beta < 0.0) throw std::invalid_argument("beta must be nonnegative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"preset", preset},
          {"total_steps", total_steps},
          {"images_per_batch", images_per_batch},
          {"sampled_caps_per_image", sampled_caps_per_image},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"warmup_steps", warmup_steps},
          {"grad_clip_norm", grad_clip_norm},
          {"label_smoothing", label_smoothing},
          {"beta", beta},
          {"masking", masking.to_string()},
          {"assign", dml::to_string(assign)},
          {"seed", seed},
          {"usage_interval", usage_interval},
          {"checkpoint_interval", checkpoint_interval}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.preset = j.at("preset").get<std::string>();
  c.total_steps = j.at("total_steps").get<std::size_t>();
  c.images_per_batch = j.at("images_per_batch").get<std::size_t>();
  c.sampled_caps_per_image = j.at("sampled_caps_per_image").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<std::size_t>();
  c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  c.label_smoothing = j.at("label_smoothing").get<double>();
  c.beta = j.at("beta").get<double>();
  c.masking = MaskingStrategy::parse(j.at("masking").get<std::string>());
  c.assign = parse_assign_strategy(j.at("assign").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.usage_interval = j.at("usage_interval").get<std::size_t>();
  c.checkpoint_interval = j.at("checkpoint_interval").get<std::size_t>();
  return c;
}

TrainConfig desk_train_preset() { return TrainConfig{}; }

TrainConfig paper_train_preset() {
  TrainConfig c;
  c.preset = "paper";
  c.total_steps = 100000;
  c.images_per_batch = 64;
  c.sampled_caps_per_image = 1;
  c.learning_rate = 2e-4;
  c.warmup_steps = 2000;
  c.checkpoint_interval = 10000;
  return c;
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  if (step >= cfg.total_steps) return 0.0;
  if (step < cfg.warmup_steps) {
    return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  const double progress = static_cast<double>(step - cfg.warmup_steps) / span;
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_gradients(std::vector<std::span<double>> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("max_norm must be positive");
  double sq = 0.0;
  for (auto g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0;
  const double factor = max_norm / norm;
  for (auto g : grads)
    for (double& v : g) v *= factor;
  return factor;
}

double clip_gradients(ParameterStore& params, double max_norm) {
  std::vector<std::span<double>> grads;
  for (auto& e : params.entries())
    if (e.tensor.has_grad()) grads.push_back(e.tensor.mutable_grad());
  return clip_gradients(std::move(grads), max_norm);
}

// ---------------------------------------------------------------------------

void AdamW::update(const std::string& name, std::span<double> value, std::span<const double> grad, double lr,
                   bool decay) {
  auto& st = state_[name];
  if (st.m.empty()) {
    st.m.assign(value.size(), 0.0);
    st.v.assign(value.size(), 0.0);
  }
  const double t = static_cast<double>(t_);
  const double bc1 = 1.0 - std::pow(opt_.beta1, t);
  const double bc2 = 1.0 - std::pow(opt_.beta2, t);
  const double shrink = decay ? 1.0 - lr * opt_.weight_decay : 1.0;
  for (std::size_t i = 0; i < value.size(); ++i) {
    st.m[i] = opt_.beta1 * st.m[i] + (1.0 - opt_.beta1) * grad[i];
    st.v[i] = opt_.beta2 * st.v[i] + (1.0 - opt_.beta2) * grad[i] * grad[i];
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    value[i] = value[i] * shrink - lr * mhat / (std::sqrt(vhat) + opt_.eps);
  }
}

void AdamW::step(ParameterStore& params, double lr) {
  advance();
  for (auto& e : params.entries()) {
    if (!e.tensor.has_grad()) continue;
    const bool decay = e.tensor.dim() >= 2 && e.name != DmlModel::kCodebookName;
    update(e.name, e.tensor.mutable_values(), e.tensor.grad(), lr, decay);
  }
}

nlohmann::json StepMetrics::to_json() const {
  return {{"step", step},
          {"total_loss", total_loss},
          {"cdvae_loss", cdvae_loss},
          {"mic_loss", mic_loss},
          {"nat_loss", nat_loss},
          {"vq_loss", vq_loss},
          {"commit_loss", commit_loss},
          {"lr", lr},
          {"grad_norm_scale", grad_norm_scale},
          {"effective_modes", effective_modes}};
}

// ---------------------------------------------------------------------------

Trainer::Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, std::vector<TrainingExample> data)
    : model_(std::make_unique<DmlModel>(model_cfg)), cfg_(train_cfg), data_(std::move(data)) {
  if (data_.empty()) throw DataError("training set is empty");
  std::size_t min_caps = data_[0].captions.size();
  for (const auto& ex : data_) min_caps = std::min(min_caps, ex.captions.size());
  cfg_.validate(min_caps);
  if (model_cfg.use_modes && cfg_.assign == AssignStrategy::kHungarian && min_caps > model_cfg.codebook_size) {
    throw InfeasibleAssignment("codebook of size " + std::to_string(model_cfg.codebook_size) + " cannot host " +
                               std::to_string(min_caps) + " distinct modes per image");
  }
  AdamW::Options o;
  o.weight_decay = cfg_.weight_decay;
  opt_ = AdamW(o);
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t n = data_.size();
  std::vector<std::size_t> out;
  out.reserve(cfg_.images_per_batch);
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < cfg_.images_per_batch; ++i) {
    const std::size_t flat = step * cfg_.images_per_batch + i;
    const std::size_t epoch = flat / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix_seed(cfg_.seed, 0x65706f6368ULL + epoch));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[flat % n]);
  }
  return out;
}

std::vector<std::size_t> Trainer::sampled_captions(std::size_t step, std::size_t image, std::size_t n_caps) const {
  std::vector<std::size_t> idx(n_caps);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(mix_seed(mix_seed(cfg_.seed, step), 0x6d6963ULL + image));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(cfg_.sampled_caps_per_image, n_caps));
  return idx;
}

namespace {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

StepMetrics Trainer::train_step() {
  try {
    return checked_step();
  } catch (const NumericError& e) {
    write_diagnostic(pending_, e.what());
    throw;
  }
}

StepMetrics Trainer::checked_step() {
  DmlModel& model = *model_;
  const bool use_modes = model.config().use_modes;
  model.params().zero_grad();

  StepMetrics& m = pending_;
  m = StepMetrics{};
  m.step = step_;
  m.lr = learning_rate_at(cfg_, step_);

  const auto batch = batch_indices(step_);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  const std::uint64_t step_seed = mix_seed(cfg_.seed, step_);
  std::vector<Tensor> cdvae_terms, mic_terms, nat_terms, cb_terms, commit_terms;

  for (std::size_t slot = 0; slot < batch.size(); ++slot) {
    const auto& ex = data_[batch[slot]];
    Dropout dropout(model.config().dropout, mix_seed(step_seed, 0x64726f70ULL + slot));
    Dropout* drop = model.config().dropout > 0.0 ? &dropout : nullptr;
    const auto memory = encode_image(model, ex.features, drop);

    std::vector<Tensor> quantized;
    if (use_modes) {
      CdvaeOptions opts;
      opts.assign = cfg_.assign;
      opts.masking = cfg_.masking;
      opts.beta = cfg_.beta;
      opts.smoothing = cfg_.label_smoothing;
      opts.step = step_;
      opts.total_steps = cfg_.total_steps;
      opts.mask_seed = mix_seed(step_seed, 0x6d61736bULL + slot);
      opts.dropout = drop;
      auto out = cdvae_step(model, ex.captions, memory, opts);
      if (cfg_.assign == AssignStrategy::kHungarian) {
        if (!out.assignment.injective()) {
          throw std::logic_error("non-injective Hungarian assignment at step " + std::to_string(step_));
        }
        ++injectivity_checks_;
      }
      cdvae_terms.push_back(out.total);
      nat_terms.push_back(out.nat_loss);
      cb_terms.push_back(out.codebook_loss);
      commit_terms.push_back(out.commitment_loss);
      quantized = std::move(out.quantized);
    }
    for (auto c : sampled_captions(step_, batch[slot], ex.captions.size())) {
      std::optional<Tensor> q;
      if (use_modes) q = quantized[c];
      mic_terms.push_back(ar_loss(model, ex.captions[c], q, memory, cfg_.label_smoothing, drop));
    }
  }

  auto mic_total = scale(sum(stack_rows(mic_terms)), inv_batch);
  Tensor loss = mic_total;
  m.mic_loss = mic_total.item();
  if (use_modes) {
    auto cdvae_total = scale(sum(stack_rows(cdvae_terms)), inv_batch);
    m.cdvae_loss = cdvae_total.item();
    m.nat_loss = sum(stack_rows(nat_terms)).item() * inv_batch;
    m.vq_loss = sum(stack_rows(cb_terms)).item() * inv_batch;
    m.commit_loss = sum(stack_rows(commit_terms)).item() * inv_batch;
    for (const auto& leaf : reachable_leaves(cdvae_total)) {
      for (const auto& e : model.params().entries()) {
        if (e.tensor.impl() == leaf && DmlModel::is_image_encoder_param(e.name)) {
          throw std::logic_error("captioning image encoder parameter " + e.name + " reachable from the CdVAE loss");
        }
      }
    }
    ++isolation_checks_;
    loss = add(cdvae_total, mic_total);
  }
  m.total_loss = loss.item();
  m.effective_modes = usage_report(model.codebook()).effective_modes;

  if (!std::isfinite(m.total_loss)) throw NumericError("non-finite loss at step " + std::to_string(step_));
  backward(loss);
  for (const auto& e : model.params().entries()) {
    if (e.tensor.has_grad() && !all_finite(e.tensor.grad())) {
      throw NumericError("non-finite gradient in " + e.name + " at step " + std::to_string(step_));
    }
  }
  m.grad_norm_scale = clip_gradients(model.params(), cfg_.grad_clip_norm);
  opt_.step(model.params(), m.lr);
  ++step_;
  last_ = m;
  return m;
}

void Trainer::write_diagnostic(const StepMetrics& partial, const std::string& reason) const {
  if (out_dir_.empty()) return;
  nlohmann::json d = partial.to_json();
  d["reason"] = reason;
  d["total_loss"] = std::isfinite(partial.total_loss) ? nlohmann::json(partial.total_loss) : nlohmann::json("nan");
  d["batch"] = batch_indices(partial.step);
  std::ofstream(out_dir_ / "diagnostic.json") << d.dump(2) << "\n";
}

StepMetrics Trainer::run(const std::filesystem::path& out_dir, std::optional<std::size_t> stop_at) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  out_dir_ = out_dir;
  const std::size_t end = std::min(stop_at.value_or(cfg_.total_steps), cfg_.total_steps);
  const auto mode = step_ == 0 ? std::ios::trunc : std::ios::app;
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::out | mode);
  std::ofstream usage(out_dir / "usage.jsonl", std::ios::out | mode);
  if (!log || !usage) throw std::runtime_error("cannot open logs under " + out_dir.string());

  while (step_ < end) {
    const auto m = train_step();
    log << m.to_json().dump() << "\n";
    const bool usage_due = step_ % cfg_.usage_interval == 0 || step_ == cfg_.total_steps;
    if (usage_due && cfg_.usage_interval > 0) {
      const auto rep = usage_report(model_->codebook());
      usage << nlohmann::json{{"step", step_}, {"effective_modes", rep.effective_modes}, {"counts", rep.counts}}.dump()
            << "\n";
    }
    if (cfg_.checkpoint_interval > 0 && step_ % cfg_.checkpoint_interval == 0 && step_ < cfg_.total_steps) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%07zu", step_);
      save(out_dir / name);
    }
    if (!log || !usage) throw std::runtime_error("write failure under " + out_dir.string() + " (disk full?)");
  }
  if (step_ == cfg_.total_steps) save(out_dir / "final");
  return last_;
}

void Trainer::save(const std::filesystem::path& dir) const {
  CheckpointContents c;
  c.model_config = model_->config();
  c.train_config = cfg_;
  c.step = step_;
  c.metrics = last_.to_json();
  c.usage_counts = model_->codebook().usage_counts();
  for (const auto& e : model_->params().entries()) {
    c.tensors[e.name] = {e.tensor.shape(), std::vector<double>(e.tensor.values().begin(), e.tensor.values().end())};
  }
  for (const auto& [name, st] : opt_.state()) {
    const auto& shape = model_->params().get(name).shape();
    c.tensors["optimizer.m." + name] = {shape, st.m};
    c.tensors["optimizer.v." + name] = {shape, st.v};
  }
  c.tensors["optimizer.step"] = {{1}, {static_cast<double>(opt_.steps_taken())}};
  c.vocab = vocab_;
  write_checkpoint(dir, c);
}

namespace {

void restore_parameters(DmlModel& model, const CheckpointContents& c) {
  for (auto& e : model.params().entries()) {
    auto it = c.tensors.find(e.name);
    if (it == c.tensors.end()) throw CheckpointError("checkpoint lacks parameter " + e.name);
    if (it->second.first != e.tensor.shape()) {
      throw CheckpointError("parameter " + e.name + " has shape " + shape_str(it->second.first) + ", expected " +
                            shape_str(e.tensor.shape()));
    }
    std::copy(it->second.second.begin(), it->second.second.end(), e.tensor.mutable_values().begin());
  }
  model.codebook().set_usage_counts(c.usage_counts);
}

}  // namespace

Trainer Trainer::resume(const std::filesystem::path& checkpoint_dir, std::vector<TrainingExample> data) {
  const auto c = read_checkpoint(checkpoint_dir);
  Trainer t(c.model_config, c.train_config, std::move(data));
  restore_parameters(*t.model_, c);
  for (const auto& e : t.model_->params().entries()) {
    auto m = c.tensors.find("optimizer.m." + e.name);
    auto v = c.tensors.find("optimizer.v." + e.name);
    if (m == c.tensors.end() || v == c.tensors.end()) continue;
    t.opt_.state()[e.name] = AdamW::State{m->second.second, v->second.second};
  }
  auto os = c.tensors.find("optimizer.step");
  if (os == c.tensors.end()) throw CheckpointError("checkpoint lacks optimizer.step");
  t.opt_.set_steps_taken(static_cast<std::uint64_t>(os->second.second.at(0)));
  t.step_ = c.step;
  t.vocab_ = c.vocab;
  if (c.metrics.contains("step")) {
    t.last_.step = c.metrics.at("step").get<std::size_t>();
    t.last_.cdvae_loss = c.metrics.at("cdvae_loss").get<double>();
    t.last_.mic_loss = c.metrics.at("mic_loss").get<double>();
    t.last_.vq_loss = c.metrics.at("vq_loss").get<double>();
    t.last_.commit_loss = c.metrics.at("commit_loss").get<double>();
    t.last_.lr = c.metrics.at("lr").get<double>();
    t.last_.effective_modes = c.metrics.at("effective_modes").get<std::size_t>();
    t.last_.total_loss = c.metrics.at("total_loss").get<double>();
    t.last_.nat_loss = c.metrics.at("nat_loss").get<double>();
    t.last_.grad_norm_scale = c.metrics.at("grad_norm_scale").get<double>();
  }
  return t;
}

std::unique_ptr<DmlModel> load_model(const std::filesystem::path& dir, std::optional<Vocabulary>* vocab) {
  const auto c = read_checkpoint(dir);
  auto model = std::make_unique<DmlModel>(c.model_config);
  restore_parameters(*model, c);
  if (vocab) *vocab = c.vocab;
  return model;
}

// ---------------------------------------------------------------------------

void write_checkpoint(const std::filesystem::path& dir, const CheckpointContents& c) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["step"] = c.step;
  manifest["model_config"] = c.model_config.to_json();
  manifest["train_config"] = c.train_config.to_json();
  manifest["metrics"] = c.metrics;
  manifest["usage_counts"] = c.usage_counts;
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  std::ofstream blob(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw CheckpointError("cannot write " + (dir / "tensors.bin").string());
  std::uint64_t offset = 0;
  for (const auto& [name, entry] : c.tensors) {
    const auto& [shape, values] = entry;
    if (shape_numel(shape) != values.size()) throw CheckpointError("tensor " + name + " size does not match shape");
    index.push_back({{"name", name}, {"shape", shape}, {"offset", offset}});
    blob.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 8));
    offset += values.size() * 8;
  }
  blob.flush();
  if (!blob) throw CheckpointError("short write to " + (dir / "tensors.bin").string() + " (disk full?)");
  manifest["tensors"] = index;
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  if (!mf) throw CheckpointError("cannot write manifest in " + dir.string());
  if (c.vocab) c.vocab->save(dir / "vocab.json");
}

CheckpointContents read_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw CheckpointError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  }
  CheckpointContents c;
  try {
    c.model_config = ModelConfig::from_json(manifest.at("model_config"));
    c.train_config = TrainConfig::from_json(manifest.at("train_config"));
    c.step = manifest.at("step").get<std::size_t>();
    c.metrics = manifest.at("metrics");
    c.usage_counts = manifest.at("usage_counts").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("manifest in " + dir.string() + ": " + e.what());
  }

  std::ifstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) throw CheckpointError("no tensors.bin in " + dir.string());
  const auto blob_size = fs::file_size(dir / "tensors.bin");
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    std::vector<double> values(shape_numel(shape));
    if (offset + values.size() * 8 > blob_size) throw CheckpointError("tensor " + name + " runs past tensors.bin");
    blob.seekg(static_cast<std::streamoff>(offset));
    blob.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * 8));
    c.tensors[name] = {shape, std::move(values)};
  }
  if (fs::exists(dir / "vocab.json")) c.vocab = Vocabulary::load(dir / "vocab.json");
  return c;
}

}  // namespace dml
