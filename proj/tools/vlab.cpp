// vlab: desk-scale vision-language adapter laboratory.
//
// Subcommands cover data generation, LM pretraining, the progressive
// alignment stages, the ablation grids, evaluation, the quantization study
// and the finite-difference gradient suite. Exit codes: 0 success, 1
// contract error, 2 bad usage.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "vlab/fdsuite.hpp"
#include "vlab/harness.hpp"

namespace fs = std::filesystem;
using namespace vlab;

namespace {

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 42;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Experiment config (JSON)");
  cmd->add_option("--seed", args.seed, "Root seed; all randomness derives from it");
  cmd->add_option("--out", args.out, "Run directory");
  cmd->add_option("--set", args.sets, "Dotted override, e.g. adapter.resampler.n_layers=6");
}

cfg::ExperimentConfig load_config(const CommonArgs& args) {
  auto config = cfg::load_config_file(args.config_path);
  for (const auto& s : args.sets) config.set_override(s, /*validate_now=*/false);
  config.validate();
  return config;
}

struct RunIo {
  cfg::RunDirectory dir;
  std::ofstream metrics, timings;
};

RunIo open_run(const CommonArgs& args, const cfg::ExperimentConfig& config,
               const std::string& name) {
  const std::string out =
      args.out.empty() ? "runs/" + name + "-seed" + std::to_string(args.seed) : args.out;
  RunIo io{cfg::RunDirectory::create(out, config), {}, {}};
  io.metrics.open(io.dir.metrics_path());
  io.timings.open(io.dir.timings_path());
  check(io.metrics.good() && io.timings.good(),
        "cannot open metrics/timings files under '" + out + "'");
  return io;
}

void write_report(const RunIo& io, const std::string& name, const std::string& content) {
  std::ofstream os(fs::path(io.dir.reports_dir()) / name);
  check(os.good(), "cannot write report '" + name + "'");
  os << content;
}

void save_model(const RunIo& io, const harness::AlignedModel& model,
                const cfg::ExperimentConfig& config, std::uint64_t seed, Index step,
                const std::string& name, const train::StageResult* stage = nullptr) {
  auto ckpt = harness::pack_model(model, config, seed, step);
  if (stage != nullptr) {
    ckpt.opt_m = stage->opt_m;
    ckpt.opt_v = stage->opt_v;
  }
  train::save_checkpoint(ckpt, (fs::path(io.dir.checkpoints_dir()) / name).string());
}

lm::LmParams tlm_from_flags(const cfg::ExperimentConfig& config, std::uint64_t seed,
                            const std::string& tlm_checkpoint, const std::string& tlm_init) {
  if (!tlm_checkpoint.empty()) {
    auto ckpt = train::load_checkpoint(tlm_checkpoint);
    check(ckpt.has_tag("stage1") || ckpt.has_tag("lm_pretrained"),
          "stage 2 needs an upstream stage1 or lm_pretrained checkpoint, got tags from '" +
              tlm_checkpoint + "'");
    Rng rng(1);
    auto params = lm::LmParamsT<float>::make(config.tiny_lm_config(), rng);
    ParamSet set;
    const std::string prefix = ckpt.has_tensor("tlm.tok_table") ? "tlm" : "lm";
    params.visit(prefix, set.collector());
    ckpt.restore(set);
    return params;
  }
  check(tlm_init == "random" || tlm_init == "pretrained",
        "--tlm-init must be random or pretrained");
  return harness::build_tlm(config, seed,
                            tlm_init == "random" ? harness::TlmInit::Random
                                                 : harness::TlmInit::Pretrained);
}

lm::LmParams llm_from_flags(const cfg::ExperimentConfig& config, std::uint64_t seed,
                            const std::string& llm_checkpoint, harness::Backbones& bb) {
  if (llm_checkpoint.empty()) return bb.llm;
  auto ckpt = train::load_checkpoint(llm_checkpoint);
  return harness::unpack_lm(ckpt, config.large_lm_config());
}

std::string count_row(harness::AlignedModel& model) {
  ParamSet total;
  model.encoder.visit("enc", total.collector());
  model.llm.visit("llm", total.collector());
  ParamSet trainable;
  using W = harness::AlignedModel::Wiring;
  if (model.wiring == W::Stage1Decoder || model.wiring == W::VAdapter) {
    model.tlm.visit("tlm", total.collector());
  }
  if (model.kind == adapters::AdapterKind::AttentionalPooler) {
    model.pool.visit("pool", total.collector());
    model.pool.visit("pool", trainable.collector());
  } else {
    model.res.visit("adapter", total.collector());
    model.res.visit("adapter", trainable.collector());
  }
  if (model.wiring == W::Stage1Decoder) {
    model.tlm.visit("tlm", trainable.collector());
  } else if (model.wiring == W::VAdapter) {
    model.tlm.visit_trunk("tlm", trainable.collector());
    total.add("proj", model.proj);
    trainable.add("proj", model.proj);
  } else if (model.wiring == W::QuantizedBaseline) {
    total.add("quantizer.projection", model.qparams.projection);
    trainable.add("quantizer.projection", model.qparams.projection);
  }
  return std::to_string(total.total_elements()) + "/" +
         std::to_string(trainable.total_elements());
}

void print_eval(harness::AlignedModel& model, const eval::EvalReport& report) {
  const auto counts = count_row(model);
  const auto slash = counts.find('/');
  std::vector<std::vector<std::string>> rows;
  for (const auto& [task, tr] : report.tasks) {
    char cider_s[32], em_s[32], ta_s[32];
    std::snprintf(cider_s, sizeof(cider_s), "%.3f", tr.cider);
    std::snprintf(em_s, sizeof(em_s), "%.3f", tr.exact_match);
    std::snprintf(ta_s, sizeof(ta_s), "%.3f", tr.token_accuracy);
    rows.push_back({std::string(harness::wiring_name(model.wiring)) + "/" +
                        adapters::adapter_kind_name(model.kind),
                    counts.substr(0, slash), counts.substr(slash + 1), task, cider_s, em_s,
                    ta_s});
  }
  std::cout << eval::fixed_table({"Method", "#Total Params", "#Trainable Params", "Task",
                                  "CIDEr", "EM", "TokenAcc"},
                                 rows);
}

std::string fmt_steps(const std::optional<Index>& steps) {
  return steps ? std::to_string(*steps) : std::string("inf");
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonArgs& args) {
  auto config = load_config(args);
  auto io = open_run(args, config, "gen-data");
  const Index n = config.doc().at("data").at("export_samples").get<Index>();
  for (auto split : {data::Split::Train, data::Split::Val, data::Split::Test}) {
    data::export_split(config.data_config(), split, io.dir.root + "/data", n);
    std::cout << "exported " << n << " samples to " << io.dir.root << "/data/"
              << data::split_name(split) << "\n";
  }
  return 0;
}

int cmd_pretrain_lm(const CommonArgs& args, const std::string& model) {
  check(model == "tiny" || model == "large", "--model must be tiny or large");
  auto config = load_config(args);
  auto io = open_run(args, config, "pretrain-lm-" + model);
  const auto lm_cfg = model == "tiny" ? config.tiny_lm_config() : config.large_lm_config();
  auto result = lm::pretrain_tlm(config.data_config(), lm_cfg,
                                 config.lm_pretrain_config(model),
                                 derive_seed(args.seed, model == "tiny" ? "tlm-pretrain"
                                                                        : "llm-pretrain"));
  const double ppl =
      lm::text_perplexity(config.data_config(), result.params, derive_seed(args.seed, "ppl"));
  auto ckpt = harness::pack_lm(result.params, model, config, args.seed);
  const std::string path =
      (fs::path(io.dir.checkpoints_dir()) / ("lm_" + model + ".vlab")).string();
  train::save_checkpoint(ckpt, path);
  nlohmann::json j{{"model", model},
                   {"final_loss", result.final_loss},
                   {"heldout_perplexity", ppl},
                   {"checkpoint", path}};
  write_report(io, "pretrain_lm.json", j.dump(2));
  std::cout << "pretrained " << model << " lm: final loss " << result.final_loss
            << ", held-out perplexity " << ppl << "\n"
            << "checkpoint: " << path << "\n";
  return 0;
}

int cmd_align_stage1(const CommonArgs& args, const std::string& tlm_checkpoint,
                     const std::string& tlm_init) {
  auto config = load_config(args);
  auto io = open_run(args, config, "align-stage1");
  auto backbones = harness::build_backbones(config, args.seed, /*with_llm=*/false);
  auto tlm = tlm_from_flags(config, args.seed, tlm_checkpoint, tlm_init);
  auto spec = config.adapter_spec();
  const auto kind = spec.kind == adapters::AdapterKind::AttentionalPooler
                        ? adapters::AdapterKind::AttentionalPooler
                        : adapters::AdapterKind::ResamplerBaseline;
  adapters::ResamplerConfig rcfg = spec.resampler;
  if (spec.kind == adapters::AdapterKind::Palm2VAdapter) rcfg.n_layers = 1;
  auto out = harness::run_stage1_pipeline(config, args.seed, backbones, std::move(tlm),
                                          kind, rcfg, &io.metrics, &io.timings);
  save_model(io, out.model, config, args.seed, out.stage1.steps_run, "stage1.vlab",
             &out.stage1);
  auto report = harness::evaluate_model(out.model, config, args.seed, {eval::Task::Caption});
  write_report(io, "stage1_eval.json", report.to_json());
  const auto probe = train::convergence_probe(
      out.stage1.log, config.stage_settings("stage1", args.seed).convergence_threshold);
  std::cout << "stage1 done: final val acc " << out.stage1.final_val_acc
            << ", convergence step " << fmt_steps(probe) << "\n";
  print_eval(out.model, report);
  return 0;
}

int cmd_align_stage2(const CommonArgs& args, const std::string& tlm_checkpoint,
                     const std::string& tlm_init, const std::string& llm_checkpoint,
                     const std::string& resume_path) {
  auto config = load_config(args);
  check(!tlm_checkpoint.empty() || !tlm_init.empty(),
        "stage 2 needs --tlm-checkpoint (stage1 or lm_pretrained) or an explicit --tlm-init");
  auto io = open_run(args, config, "align-stage2");
  auto backbones = harness::build_backbones(config, args.seed);
  backbones.llm = llm_from_flags(config, args.seed, llm_checkpoint, backbones);
  auto tlm = tlm_from_flags(config, args.seed, tlm_checkpoint, tlm_init);

  auto spec = config.adapter_spec();
  adapters::ResamplerConfig rcfg = spec.resampler;
  if (spec.kind != adapters::AdapterKind::Palm2VAdapter) rcfg.n_layers = 1;

  auto setup_settings = config.stage_settings("stage2", args.seed);
  train::AlignmentSetup setup;
  setup.data_cfg = config.data_config();
  setup.enc_cfg = backbones.enc_cfg;
  setup.encoder = backbones.encoder;
  setup.tlm_cfg = backbones.tlm_cfg;
  setup.llm_cfg = backbones.llm_cfg;
  setup.settings = setup_settings;

  std::optional<train::Checkpoint> resume;
  if (!resume_path.empty()) resume = train::load_checkpoint(resume_path);
  auto r = train::run_stage2(setup, rcfg, std::move(tlm), backbones.llm, &io.metrics,
                             resume ? &*resume : nullptr);

  harness::AlignedModel model;
  model.wiring = harness::AlignedModel::Wiring::VAdapter;
  model.enc_cfg = backbones.enc_cfg;
  model.encoder = backbones.encoder;
  model.tlm_cfg = backbones.tlm_cfg;
  model.llm_cfg = backbones.llm_cfg;
  model.llm = backbones.llm;
  model.kind = adapters::AdapterKind::Palm2VAdapter;
  model.rcfg = rcfg;
  model.res = std::move(r.res);
  model.tlm = std::move(r.tlm);
  model.proj = r.proj;
  save_model(io, model, config, args.seed, r.stage.steps_run, "stage2.vlab", &r.stage);

  auto report = harness::evaluate_model(model, config, args.seed,
                                        {eval::Task::Caption, eval::Task::ImageQa,
                                         eval::Task::VideoQa});
  write_report(io, "stage2_eval.json", report.to_json());
  const auto probe = train::convergence_probe(r.stage.log, setup_settings.convergence_threshold);
  std::cout << "stage2 done: final val acc " << r.stage.final_val_acc
            << ", convergence step " << fmt_steps(probe) << "\n";
  print_eval(model, report);
  return 0;
}

int cmd_train_baseline(const CommonArgs& args, const std::string& llm_checkpoint,
                       const std::string& resume_path) {
  auto config = load_config(args);
  auto io = open_run(args, config, "train-baseline");
  auto backbones = harness::build_backbones(config, args.seed);
  backbones.llm = llm_from_flags(config, args.seed, llm_checkpoint, backbones);
  auto rcfg = config.adapter_spec().resampler;

  train::AlignmentSetup setup;
  setup.data_cfg = config.data_config();
  setup.enc_cfg = backbones.enc_cfg;
  setup.encoder = backbones.encoder;
  setup.tlm_cfg = backbones.tlm_cfg;
  setup.llm_cfg = backbones.llm_cfg;
  setup.settings = config.stage_settings("baseline", args.seed);

  std::optional<train::Checkpoint> resume;
  if (!resume_path.empty()) resume = train::load_checkpoint(resume_path);
  auto r = train::run_baseline(setup, rcfg, backbones.llm, &io.metrics,
                               resume ? &*resume : nullptr);

  harness::AlignedModel model;
  model.wiring = harness::AlignedModel::Wiring::Baseline;
  model.enc_cfg = backbones.enc_cfg;
  model.encoder = backbones.encoder;
  model.tlm_cfg = backbones.tlm_cfg;
  model.llm_cfg = backbones.llm_cfg;
  model.llm = backbones.llm;
  model.kind = adapters::AdapterKind::ResamplerBaseline;
  model.rcfg = rcfg;
  model.res = std::move(r.res);
  save_model(io, model, config, args.seed, r.stage.steps_run, "baseline.vlab", &r.stage);

  auto report = harness::evaluate_model(model, config, args.seed,
                                        {eval::Task::Caption, eval::Task::ImageQa,
                                         eval::Task::VideoQa});
  write_report(io, "baseline_eval.json", report.to_json());
  const auto probe = train::convergence_probe(
      r.stage.log, config.stage_settings("baseline", args.seed).convergence_threshold);
  std::cout << "baseline done: final val acc " << r.stage.final_val_acc
            << ", convergence step " << fmt_steps(probe) << "\n";
  print_eval(model, report);
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint) {
  check(!checkpoint.empty(), "--checkpoint is required");
  auto config = load_config(args);
  auto io = open_run(args, config, "eval");
  auto ckpt = train::load_checkpoint(checkpoint);
  if (ckpt.config_digest != config.digest()) {
    std::cerr << "warning: checkpoint config digest " << ckpt.config_digest
              << " differs from the active config " << config.digest() << "\n";
  }
  auto model = harness::unpack_model(ckpt, config);
  auto report = harness::evaluate_model(model, config, args.seed,
                                        {eval::Task::Caption, eval::Task::ImageQa,
                                         eval::Task::VideoQa});
  write_report(io, "eval.json", report.to_json());
  print_eval(model, report);
  return 0;
}

int cmd_ablate_table1(const CommonArgs& args) {
  auto config = load_config(args);
  auto io = open_run(args, config, "ablate-table1");
  auto backbones = harness::build_backbones(config, args.seed);
  auto rows = adapters::table1_rows(config.adapter_spec().resampler);

  nlohmann::json out = nlohmann::json::array();
  std::vector<std::vector<std::string>> cells;
  for (const auto& row : rows) {
    auto result = harness::run_baseline_pipeline(config, args.seed, backbones, row.cfg,
                                                 &io.metrics, &io.timings);
    bool finite = std::isfinite(result.stage2.final_loss);
    char loss_s[32], acc_s[32];
    std::snprintf(loss_s, sizeof(loss_s), "%.4f", result.stage2.final_loss);
    std::snprintf(acc_s, sizeof(acc_s), "%.3f", result.stage2.final_val_acc);
    cells.push_back({row.section, row.label, loss_s, acc_s, finite ? "yes" : "NO"});
    out.push_back({{"section", row.section},
                   {"label", row.label},
                   {"final_loss", result.stage2.final_loss},
                   {"val_acc", result.stage2.final_val_acc},
                   {"finite", finite}});
    std::cout << "(" << row.section << ") " << row.label << ": loss " << loss_s
              << " val_acc " << acc_s << "\n";
  }
  write_report(io, "table1.json", out.dump(2));
  std::cout << "\n"
            << eval::fixed_table({"Sec", "Configuration", "Final loss", "Val acc", "Finite"},
                                 cells);
  return 0;
}

int cmd_ablate_table3(const CommonArgs& args) {
  auto config = load_config(args);
  auto io = open_run(args, config, "ablate-table3");
  auto backbones = harness::build_backbones(config, args.seed);

  struct Row {
    const char* language_only;
    const char* stage1;
    harness::TlmInit init;
    bool run_stage1;
  };
  const Row grid[] = {{"no", "no", harness::TlmInit::Random, false},
                      {"yes", "no", harness::TlmInit::Pretrained, false},
                      {"yes", "yes", harness::TlmInit::Pretrained, true}};

  nlohmann::json out = nlohmann::json::array();
  std::vector<std::vector<std::string>> cells;
  for (const auto& row : grid) {
    auto tlm = harness::build_tlm(config, args.seed, row.init);
    auto result = harness::run_vadapter_pipeline(config, args.seed, backbones,
                                                 std::move(tlm), row.run_stage1,
                                                 &io.metrics, &io.timings);
    auto report =
        harness::evaluate_model(result.model, config, args.seed, {eval::Task::Caption});
    const auto& tr = report.tasks.at("caption");
    char cider_s[32], em_s[32];
    std::snprintf(cider_s, sizeof(cider_s), "%.3f", tr.cider);
    std::snprintf(em_s, sizeof(em_s), "%.3f", tr.exact_match);
    cells.push_back({row.language_only, row.stage1, cider_s, em_s});
    out.push_back({{"language_only", row.language_only},
                   {"vision_language_stage1", row.stage1},
                   {"cider", tr.cider},
                   {"exact_match", tr.exact_match},
                   {"final_val_acc", result.stage2.final_val_acc}});
    std::cout << "language_only=" << row.language_only << " stage1=" << row.stage1
              << " cider=" << cider_s << "\n";
  }
  write_report(io, "table3.json", out.dump(2));
  std::cout << "\n"
            << eval::fixed_table(
                   {"Language Only", "Vision-language (Stage 1)", "CIDEr", "EM"}, cells);
  return 0;
}

int cmd_ablate_table4(const CommonArgs& args) {
  auto config = load_config(args);
  auto io = open_run(args, config, "ablate-table4");
  auto backbones = harness::build_backbones(config, args.seed);

  struct Row {
    adapters::AdapterKind kind;
    Index layers;
  };
  const Row grid[] = {{adapters::AdapterKind::AttentionalPooler, 1},
                      {adapters::AdapterKind::ResamplerBaseline, 1},
                      {adapters::AdapterKind::ResamplerBaseline, 6}};

  nlohmann::json out = nlohmann::json::array();
  std::vector<std::vector<std::string>> cells;
  for (const auto& row : grid) {
    adapters::ResamplerConfig rcfg = config.adapter_spec().resampler;
    rcfg.n_layers = row.layers;
    auto tlm = harness::build_tlm(config, args.seed, harness::TlmInit::Pretrained);
    auto result = harness::run_stage1_pipeline(config, args.seed, backbones, std::move(tlm),
                                               row.kind, rcfg, &io.metrics, &io.timings);
    auto report =
        harness::evaluate_model(result.model, config, args.seed, {eval::Task::Caption});
    const auto& tr = report.tasks.at("caption");
    char cider_s[32], acc_s[32];
    std::snprintf(cider_s, sizeof(cider_s), "%.3f", tr.cider);
    std::snprintf(acc_s, sizeof(acc_s), "%.3f", result.stage1.final_val_acc);
    cells.push_back({adapters::adapter_kind_name(row.kind), std::to_string(row.layers),
                     cider_s, acc_s});
    out.push_back({{"module", adapters::adapter_kind_name(row.kind)},
                   {"layers", row.layers},
                   {"cider", tr.cider},
                   {"val_acc", result.stage1.final_val_acc}});
  }
  write_report(io, "table4.json", out.dump(2));
  std::cout << eval::fixed_table({"Cross-attention Module", "#Layers", "CIDEr", "Val acc"},
                                 cells);
  return 0;
}

int cmd_scale_study(const CommonArgs& args, const std::vector<std::string>& tags) {
  auto config = load_config(args);
  auto io = open_run(args, config, "scale-study");
  nlohmann::json out = nlohmann::json::array();
  std::vector<std::vector<std::string>> cells;

  for (const auto& tag : tags) {
    auto tag_config = config;
    tag_config.set_override("encoder.size_tag=" + tag);
    auto backbones = harness::build_backbones(tag_config, args.seed);
    const double threshold =
        tag_config.stage_settings("stage2", args.seed).convergence_threshold;

    // Progressive vadapter.
    auto tlm = harness::build_tlm(tag_config, args.seed, harness::TlmInit::Pretrained);
    auto vres = harness::run_vadapter_pipeline(tag_config, args.seed, backbones,
                                               std::move(tlm), /*run_stage1_first=*/true,
                                               &io.metrics, &io.timings);
    auto vreport =
        harness::evaluate_model(vres.model, tag_config, args.seed, {eval::Task::Caption});
    auto vconv = train::convergence_probe(vres.stage2.log, threshold);

    // 6-layer resampler baseline.
    auto bres = harness::run_baseline_pipeline(tag_config, args.seed, backbones,
                                               tag_config.adapter_spec().resampler,
                                               &io.metrics, &io.timings);
    auto breport =
        harness::evaluate_model(bres.model, tag_config, args.seed, {eval::Task::Caption});
    auto bconv = train::convergence_probe(bres.stage2.log, threshold);

    for (const auto& [method, report, conv] :
         {std::tuple{"Perceiver Res.", &breport, bconv},
          std::tuple{"PaLM2-VAdapter", &vreport, vconv}}) {
      const auto& tr = report->tasks.at("caption");
      char cider_s[32];
      std::snprintf(cider_s, sizeof(cider_s), "%.3f", tr.cider);
      cells.push_back({method, tag, fmt_steps(conv), cider_s});
      out.push_back({{"method", method},
                     {"encoder", tag},
                     {"convergence_steps", conv ? nlohmann::json(*conv) : nlohmann::json()},
                     {"cider", tr.cider}});
    }
  }
  write_report(io, "table2.json", out.dump(2));
  std::cout << eval::fixed_table({"Method", "Vision Enc.", "Converg. Steps", "CIDEr"}, cells);
  return 0;
}

int cmd_quantize_study(const CommonArgs& args, const std::string& baseline_checkpoint) {
  auto config = load_config(args);
  auto io = open_run(args, config, "quantize-study");
  auto backbones = harness::build_backbones(config, args.seed);
  auto rcfg = config.adapter_spec().resampler;

  train::AlignmentSetup setup;
  setup.data_cfg = config.data_config();
  setup.enc_cfg = backbones.enc_cfg;
  setup.encoder = backbones.encoder;
  setup.tlm_cfg = backbones.tlm_cfg;
  setup.llm_cfg = backbones.llm_cfg;
  setup.settings = config.stage_settings("baseline", args.seed);
  setup.settings.opt.total_steps = config.quantize_steps();

  double baseline_cider = 0, baseline_em = 0;
  if (!baseline_checkpoint.empty()) {
    auto ckpt = train::load_checkpoint(baseline_checkpoint);
    check(ckpt.has_tag("baseline"), "quantize study expects a trained baseline checkpoint");
    auto model = harness::unpack_model(ckpt, config);
    auto report = harness::evaluate_model(model, config, args.seed, {eval::Task::Caption});
    baseline_cider = report.tasks.at("caption").cider;
    baseline_em = report.tasks.at("caption").exact_match;
  } else {
    auto bres = harness::run_baseline_pipeline(config, args.seed, backbones, rcfg,
                                               &io.metrics, &io.timings);
    auto report =
        harness::evaluate_model(bres.model, config, args.seed, {eval::Task::Caption});
    baseline_cider = report.tasks.at("caption").cider;
    baseline_em = report.tasks.at("caption").exact_match;
  }

  auto study = quant::run_quantize_study(setup, rcfg, baseline_cider, baseline_em,
                                         backbones.llm, config.eval_options(args.seed),
                                         &io.metrics);
  write_report(io, "table8.json", study.to_json());
  std::cout << study.table();
  return 0;
}

int cmd_grad_check(const CommonArgs& args) {
  (void)args;
  auto report = fdsuite::run_fd_suite();
  std::cout << report.summary() << "\n";
  return report.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vlab: vision-language adapter laboratory"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string model = "tiny";
  std::string tlm_checkpoint, tlm_init, llm_checkpoint, resume_path, checkpoint;
  std::vector<std::string> scale_tags{"S", "M", "L"};

  auto* gen = app.add_subcommand("gen-data", "Export the synthetic splits to disk");
  add_common(gen, args);

  auto* pre = app.add_subcommand("pretrain-lm", "Text-only LM pretraining");
  add_common(pre, args);
  pre->add_option("--model", model, "tiny or large")->default_str("tiny");

  auto* s1 = app.add_subcommand("align-stage1", "TLM trained as the caption decoder");
  add_common(s1, args);
  s1->add_option("--tlm-checkpoint", tlm_checkpoint, "lm_pretrained checkpoint");
  s1->add_option("--tlm-init", tlm_init, "random or pretrained")->default_str("pretrained");

  auto* s2 = app.add_subcommand("align-stage2", "TLM trained as the adapter");
  add_common(s2, args);
  s2->add_option("--tlm-checkpoint", tlm_checkpoint, "stage1 or lm_pretrained checkpoint");
  s2->add_option("--tlm-init", tlm_init, "random or pretrained");
  s2->add_option("--llm-checkpoint", llm_checkpoint, "pretrained large LM checkpoint");
  s2->add_option("--resume", resume_path, "resume from a stage2 checkpoint");

  auto* base = app.add_subcommand("train-baseline", "N-layer resampler baseline");
  add_common(base, args);
  base->add_option("--llm-checkpoint", llm_checkpoint, "pretrained large LM checkpoint");
  base->add_option("--resume", resume_path, "resume from a baseline checkpoint");

  auto* t1 = app.add_subcommand("ablate-table1", "Resampler component grid (16 rows)");
  add_common(t1, args);
  auto* t3 = app.add_subcommand("ablate-table3", "Adapter pre-training settings grid");
  add_common(t3, args);
  auto* t4 = app.add_subcommand("ablate-table4", "Cross-attention module comparison");
  add_common(t4, args);

  auto* scale = app.add_subcommand("scale-study", "Encoder scaling comparison");
  add_common(scale, args);
  scale->add_option("--tags", scale_tags, "Encoder size tags to sweep");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(ev, args);
  ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

  auto* qs = app.add_subcommand("quantize-study", "Gumbel-softmax quantization grid");
  add_common(qs, args);
  qs->add_option("--baseline-checkpoint", checkpoint, "trained baseline checkpoint");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  add_common(gc, args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  if (tlm_init.empty() && s1->parsed()) tlm_init = "pretrained";

  try {
    if (gen->parsed()) return cmd_gen_data(args);
    if (pre->parsed()) return cmd_pretrain_lm(args, model);
    if (s1->parsed()) return cmd_align_stage1(args, tlm_checkpoint, tlm_init);
    if (s2->parsed()) return cmd_align_stage2(args, tlm_checkpoint, tlm_init,
                                              llm_checkpoint, resume_path);
    if (base->parsed()) return cmd_train_baseline(args, llm_checkpoint, resume_path);
    if (t1->parsed()) return cmd_ablate_table1(args);
    if (t3->parsed()) return cmd_ablate_table3(args);
    if (t4->parsed()) return cmd_ablate_table4(args);
    if (scale->parsed()) return cmd_scale_study(args, scale_tags);
    if (ev->parsed()) return cmd_eval(args, checkpoint);
    if (qs->parsed()) return cmd_quantize_study(args, checkpoint);
    if (gc->parsed()) return cmd_grad_check(args);
  } catch (const VlabError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
