#include "vlab/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace vlab::cfg {

namespace {

nlohmann::json default_doc() {
  nlohmann::json j;
  j["data"] = {{"train_images", 4096},
               {"train_videos", 512},
               {"eval_images", 224},
               {"eval_videos", 32},
               {"video_batch_period", 5},
               {"export_samples", 64}};
  j["encoder"] = {{"size_tag", "S"},
                  {"image_size", 48},
                  {"patch_size", 6},
                  {"dim", 0},    // 0: derived from size_tag
                  {"depth", 0},
                  {"heads", 0},
                  {"pretrain_mode", "supervised"},
                  {"pretrain_steps", 300},
                  {"pretrain_batch", 32}};
  j["tiny_lm"] = {{"dim", 64}, {"depth", 2}, {"heads", 4}, {"max_seq_len", 96}};
  j["large_lm"] = {{"dim", 192}, {"depth", 4}, {"heads", 12}, {"max_seq_len", 96}};
  j["adapter"] = {{"kind", "resampler_baseline"},
                  {"tlm_checkpoint", ""},
                  {"resampler",
                   {{"n_queries", 16},
                    {"query_dim", 64},
                    {"hidden_dim", 64},
                    {"n_layers", -1},  // -1: 6 for the baseline, 1 for the vadapter
                    {"ln_mode", "separate"},
                    {"final_ln", false},
                    {"use_ffn", true},
                    {"use_time_embedding", true},
                    {"kv_concat_queries", true}}}};
  j["optimizer"] = {{"base_lr", 5e-4},
                    {"warmup_steps", 1000},
                    {"beta1", 0.9},
                    {"beta2", 0.999},
                    {"weight_decay", 1e-4},
                    {"batch_size", 64},
                    {"clip_norm", 1.0}};
  j["stages"] = {{"stage1_steps", 3000},
                 {"stage2_steps", 3000},
                 {"baseline_steps", 6000},
                 {"lm_pretrain_steps", 1500},
                 {"large_lm_pretrain_steps", 1500},
                 {"lm_pretrain_batch", 64},
                 {"lm_pretrain_lr", 1e-3},
                 {"val_interval", 100},
                 {"val_samples", 256},
                 {"val_batch", 32},
                 {"log_interval", 25},
                 {"frame_target", 8},
                 {"convergence_threshold", 0.8}};
  j["eval"] = {{"n_samples", 64},
               {"max_new", 16},
               {"pseudo_examples", 4},
               {"split", "test"}};
  j["quantize"] = {{"temperature_init", 2.0},
                   {"decay", "none"},
                   {"decay_rate", std::pow(0.5, 1.0 / 500.0)},
                   {"hard_forward", true},
                   {"steps", 0}};
  return j;
}

void merge_strict(nlohmann::json& base, const nlohmann::json& user,
                  const std::string& path) {
  check(user.is_object(), "config: expected an object at '" +
                              (path.empty() ? std::string("<root>") : path) + "'");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string here = path.empty() ? it.key() : path + "." + it.key();
    check(base.contains(it.key()), "config: unknown key '" + here + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), here);
    } else {
      const bool ok =
          (slot.is_number() && it.value().is_number()) ||
          (slot.is_boolean() && it.value().is_boolean()) ||
          (slot.is_string() && it.value().is_string());
      check(ok, "config: type mismatch at '" + here + "' (expected " +
                    std::string(slot.type_name()) + ", got " +
                    std::string(it.value().type_name()) + ")");
      slot = it.value();
    }
  }
}

Index as_index(const nlohmann::json& j, const char* path) {
  check(j.is_number(), std::string("config: '") + path + "' must be a number");
  return j.get<Index>();
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  cfg.doc_ = default_doc();
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json user;
  if (!text.empty()) {
    try {
      user = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ContractError(std::string("config: malformed JSON: ") + e.what());
    }
  } else {
    user = nlohmann::json::object();
  }
  ExperimentConfig cfg;
  cfg.doc_ = default_doc();
  merge_strict(cfg.doc_, user, "");
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  if (path.empty()) return ExperimentConfig::defaults();
  std::ifstream is(path);
  check(is.good(), "config: cannot open '" + path + "'");
  std::ostringstream os;
  os << is.rdbuf();
  return parse_config(os.str());
}

void ExperimentConfig::set_override(const std::string& assignment, bool validate_now) {
  const auto eq = assignment.find('=');
  check(eq != std::string::npos && eq > 0,
        "config: override must look like section.key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  // Navigate the dotted path.
  nlohmann::json* slot = &doc_;
  std::string walked;
  std::istringstream parts(path);
  for (std::string key; std::getline(parts, key, '.');) {
    walked = walked.empty() ? key : walked + "." + key;
    check(slot->is_object() && slot->contains(key),
          "config: unknown key '" + walked + "'");
    slot = &(*slot)[key];
  }
  check(!slot->is_object(), "config: '" + path + "' is a section, not a value");

  nlohmann::json value;
  if (slot->is_string()) {
    value = raw;
  } else if (slot->is_boolean()) {
    check(raw == "true" || raw == "false",
          "config: '" + path + "' expects true/false, got '" + raw + "'");
    value = raw == "true";
  } else {
    try {
      value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
      throw ContractError("config: '" + path + "' expects a number, got '" + raw + "'");
    }
    check(value.is_number(), "config: '" + path + "' expects a number, got '" + raw + "'");
  }
  *slot = value;
  if (validate_now) validate();
}

void ExperimentConfig::validate() const {
  encoder_config().validate();
  tiny_lm_config().validate();
  large_lm_config().validate();
  adapter_spec().validate();
  check(tiny_lm_config().dim < large_lm_config().dim,
        "config: tiny_lm.dim must be smaller than large_lm.dim");
  optimizer_config(stage_steps("stage1")).validate();
  optimizer_config(stage_steps("stage2")).validate();
  optimizer_config(stage_steps("baseline")).validate();
  quantizer_config().validate();
  const auto& s = doc_.at("stages");
  check(as_index(s.at("frame_target"), "stages.frame_target") >= 1 &&
            as_index(s.at("frame_target"), "stages.frame_target") <= data::kFrames,
        "config: stages.frame_target must be in [1, 8]");
  check(as_index(s.at("val_samples"), "stages.val_samples") %
                as_index(s.at("val_batch"), "stages.val_batch") ==
            0,
        "config: stages.val_samples must be a multiple of stages.val_batch");
  const std::string split = doc_.at("eval").at("split").get<std::string>();
  check(split == "val" || split == "test", "config: eval.split must be val or test");
}

data::DataConfig ExperimentConfig::data_config() const {
  const auto& d = doc_.at("data");
  data::DataConfig cfg;
  cfg.train_images = as_index(d.at("train_images"), "data.train_images");
  cfg.train_videos = as_index(d.at("train_videos"), "data.train_videos");
  cfg.eval_images = as_index(d.at("eval_images"), "data.eval_images");
  cfg.eval_videos = as_index(d.at("eval_videos"), "data.eval_videos");
  cfg.video_batch_period = as_index(d.at("video_batch_period"), "data.video_batch_period");
  return cfg;
}

vision::VitConfig ExperimentConfig::encoder_config() const {
  const auto& e = doc_.at("encoder");
  auto cfg = vision::VitConfig::for_tag(e.at("size_tag").get<std::string>());
  cfg.image_size = as_index(e.at("image_size"), "encoder.image_size");
  cfg.patch_size = as_index(e.at("patch_size"), "encoder.patch_size");
  if (as_index(e.at("dim"), "encoder.dim") > 0) cfg.dim = e.at("dim").get<Index>();
  if (as_index(e.at("depth"), "encoder.depth") > 0) cfg.depth = e.at("depth").get<Index>();
  if (as_index(e.at("heads"), "encoder.heads") > 0) cfg.heads = e.at("heads").get<Index>();
  return cfg;
}

vision::PretrainMode ExperimentConfig::encoder_pretrain_mode() const {
  const std::string mode = doc_.at("encoder").at("pretrain_mode").get<std::string>();
  if (mode == "supervised") return vision::PretrainMode::Supervised;
  if (mode == "random_init") return vision::PretrainMode::RandomInit;
  throw ContractError("config: encoder.pretrain_mode must be supervised or random_init");
}

Index ExperimentConfig::encoder_pretrain_steps() const {
  return as_index(doc_.at("encoder").at("pretrain_steps"), "encoder.pretrain_steps");
}

namespace {
lm::LmConfig lm_config_from(const nlohmann::json& j, const std::string& tag) {
  lm::LmConfig cfg;
  cfg.size_tag = tag;
  cfg.vocab_size = lm::tokenizer().vocab_size();
  cfg.dim = j.at("dim").get<Index>();
  cfg.depth = j.at("depth").get<Index>();
  cfg.heads = j.at("heads").get<Index>();
  cfg.max_seq_len = j.at("max_seq_len").get<Index>();
  return cfg;
}
}  // namespace

lm::LmConfig ExperimentConfig::tiny_lm_config() const {
  return lm_config_from(doc_.at("tiny_lm"), "tiny");
}

lm::LmConfig ExperimentConfig::large_lm_config() const {
  return lm_config_from(doc_.at("large_lm"), "large");
}

adapters::AdapterSpec ExperimentConfig::adapter_spec() const {
  const auto& a = doc_.at("adapter");
  adapters::AdapterSpec spec;
  spec.kind = adapters::adapter_kind_from_name(a.at("kind").get<std::string>());
  spec.tlm_checkpoint = a.at("tlm_checkpoint").get<std::string>();
  const auto& r = a.at("resampler");
  spec.resampler.n_queries = r.at("n_queries").get<Index>();
  spec.resampler.query_dim = r.at("query_dim").get<Index>();
  spec.resampler.hidden_dim = r.at("hidden_dim").get<Index>();
  const Index layers = r.at("n_layers").get<Index>();
  spec.resampler.n_layers =
      layers >= 1 ? layers
                  : (spec.kind == adapters::AdapterKind::Palm2VAdapter ? 1 : 6);
  spec.resampler.ln_mode = adapters::ln_mode_from_name(r.at("ln_mode").get<std::string>());
  spec.resampler.final_ln = r.at("final_ln").get<bool>();
  spec.resampler.use_ffn = r.at("use_ffn").get<bool>();
  spec.resampler.use_time_embedding = r.at("use_time_embedding").get<bool>();
  spec.resampler.kv_concat_queries = r.at("kv_concat_queries").get<bool>();
  return spec;
}

train::OptimizerConfig ExperimentConfig::optimizer_config(Index total_steps) const {
  const auto& o = doc_.at("optimizer");
  train::OptimizerConfig cfg;
  cfg.base_lr = o.at("base_lr").get<double>();
  cfg.warmup_steps = std::min<Index>(o.at("warmup_steps").get<Index>(),
                                     std::max<Index>(1, total_steps / 3));
  cfg.total_steps = total_steps;
  cfg.beta1 = o.at("beta1").get<double>();
  cfg.beta2 = o.at("beta2").get<double>();
  cfg.weight_decay = o.at("weight_decay").get<double>();
  cfg.batch_size = o.at("batch_size").get<Index>();
  cfg.clip_norm = o.at("clip_norm").get<double>();
  return cfg;
}

Index ExperimentConfig::stage_steps(const std::string& which) const {
  const auto& s = doc_.at("stages");
  if (which == "stage1") return s.at("stage1_steps").get<Index>();
  if (which == "stage2") return s.at("stage2_steps").get<Index>();
  if (which == "baseline") return s.at("baseline_steps").get<Index>();
  throw ContractError("config: unknown stage '" + which + "'");
}

train::TrainSettings ExperimentConfig::stage_settings(const std::string& which,
                                                      std::uint64_t seed) const {
  train::TrainSettings settings;
  settings.opt = optimizer_config(stage_steps(which));
  const auto& s = doc_.at("stages");
  settings.val_interval = s.at("val_interval").get<Index>();
  settings.val_samples = s.at("val_samples").get<Index>();
  settings.val_batch = s.at("val_batch").get<Index>();
  settings.log_interval = s.at("log_interval").get<Index>();
  settings.frame_target = s.at("frame_target").get<Index>();
  settings.convergence_threshold = s.at("convergence_threshold").get<double>();
  settings.seed = seed;
  return settings;
}

train::OptimizerConfig ExperimentConfig::lm_pretrain_config(const std::string& which) const {
  const auto& s = doc_.at("stages");
  train::OptimizerConfig cfg;
  cfg.base_lr = s.at("lm_pretrain_lr").get<double>();
  cfg.total_steps = which == "large" ? s.at("large_lm_pretrain_steps").get<Index>()
                                     : s.at("lm_pretrain_steps").get<Index>();
  cfg.warmup_steps = std::max<Index>(1, cfg.total_steps / 10);
  cfg.batch_size = s.at("lm_pretrain_batch").get<Index>();
  return cfg;
}

eval::EvalOptions ExperimentConfig::eval_options(std::uint64_t seed) const {
  const auto& e = doc_.at("eval");
  eval::EvalOptions opts;
  opts.n_samples = e.at("n_samples").get<Index>();
  opts.max_new = e.at("max_new").get<Index>();
  opts.pseudo_examples = e.at("pseudo_examples").get<Index>();
  opts.frame_target = doc_.at("stages").at("frame_target").get<Index>();
  opts.seed = derive_seed(seed, "eval");
  return opts;
}

data::Split ExperimentConfig::eval_split() const {
  return data::split_from_name(doc_.at("eval").at("split").get<std::string>());
}

quant::QuantizerConfig ExperimentConfig::quantizer_config() const {
  const auto& q = doc_.at("quantize");
  quant::QuantizerConfig cfg;
  cfg.temperature_init = q.at("temperature_init").get<double>();
  const std::string decay = q.at("decay").get<std::string>();
  check(decay == "none" || decay == "exponential",
        "config: quantize.decay must be none or exponential");
  cfg.decay = decay == "exponential" ? quant::QuantizerConfig::Decay::Exponential
                                     : quant::QuantizerConfig::Decay::None;
  cfg.decay_rate = q.at("decay_rate").get<double>();
  cfg.hard_forward = q.at("hard_forward").get<bool>();
  return cfg;
}

Index ExperimentConfig::quantize_steps() const {
  const Index steps = doc_.at("quantize").at("steps").get<Index>();
  return steps > 0 ? steps : stage_steps("baseline");
}

std::string ExperimentConfig::serialize() const { return doc_.dump(2) + "\n"; }

std::string ExperimentConfig::digest() const {
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(fnv1a64(doc_.dump())));
  return hex;
}

RunDirectory RunDirectory::create(const std::string& path, const ExperimentConfig& config) {
  namespace fs = std::filesystem;
  RunDirectory dir{path};
  fs::create_directories(fs::path(path) / "checkpoints");
  fs::create_directories(fs::path(path) / "reports");
  std::ofstream snap(fs::path(path) / "config.snapshot");
  check(snap.good(), "run dir: cannot write config snapshot in '" + path + "'");
  snap << config.serialize();
  return dir;
}

std::string RunDirectory::checkpoints_dir() const { return root + "/checkpoints"; }
std::string RunDirectory::reports_dir() const { return root + "/reports"; }
std::string RunDirectory::metrics_path() const { return root + "/metrics.jsonl"; }
std::string RunDirectory::timings_path() const { return root + "/timings.jsonl"; }

}  // namespace vlab::cfg
