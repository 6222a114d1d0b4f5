#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vlab/config.hpp"

using namespace vlab;
using namespace vlab::cfg;

TEST_CASE("empty document materializes all defaults") {
  auto cfg = parse_config("");
  CHECK(cfg.doc().at("optimizer").at("base_lr").get<double>() == 5e-4);
  CHECK(cfg.doc().at("optimizer").at("warmup_steps").get<Index>() == 1000);
  CHECK(cfg.doc().at("optimizer").at("beta1").get<double>() == 0.9);
  CHECK(cfg.doc().at("optimizer").at("beta2").get<double>() == 0.999);
  CHECK(cfg.doc().at("optimizer").at("weight_decay").get<double>() == 1e-4);
  CHECK(cfg.doc().at("stages").at("stage1_steps").get<Index>() == 3000);
  CHECK(cfg.adapter_spec().resampler.n_queries == 16);
  CHECK(cfg.adapter_spec().resampler.n_layers == 6);  // baseline default
  CHECK(cfg.encoder_config().size_tag == "S");
  CHECK(cfg.tiny_lm_config().dim == 64);
  CHECK(cfg.large_lm_config().dim == 192);
}

TEST_CASE("misspelled and ill-typed keys are rejected by dotted path") {
  try {
    parse_config(R"({"optimizer": {"base_lrr": 1.0}})");
    FAIL("expected error");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("optimizer.base_lrr") != std::string::npos);
  }
  try {
    parse_config(R"({"encoder": {"size_tag": 3}})");
    FAIL("expected error");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("encoder.size_tag") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("{nonsense"), ContractError);
}

TEST_CASE("serialization round trip is idempotent") {
  const std::string text = R"({"adapter": {"resampler": {"n_layers": 3}},
                               "optimizer": {"batch_size": 16}})";
  auto once = parse_config(text).serialize();
  auto twice = parse_config(once).serialize();
  auto thrice = parse_config(twice).serialize();
  CHECK(once == twice);
  CHECK(twice == thrice);
}

TEST_CASE("digest is stable and content-sensitive") {
  auto a = parse_config("");
  auto b = parse_config("{}");
  CHECK(a.digest() == b.digest());
  auto c = parse_config(R"({"optimizer": {"batch_size": 32}})");
  CHECK(a.digest() != c.digest());
  CHECK(a.digest().size() == 16);
}

TEST_CASE("dotted overrides with validation") {
  auto cfg = parse_config("");
  cfg.set_override("adapter.resampler.n_layers=3");
  CHECK(cfg.adapter_spec().resampler.n_layers == 3);
  cfg.set_override("encoder.size_tag=M");
  CHECK(cfg.encoder_config().dim == 96);
  cfg.set_override("adapter.resampler.final_ln=true");
  CHECK(cfg.adapter_spec().resampler.final_ln);

  CHECK_THROWS_AS(cfg.set_override("adapter.resampler.n_layerz=3"), ContractError);
  CHECK_THROWS_AS(cfg.set_override("adapter.resampler.n_layers=three"), ContractError);
  CHECK_THROWS_AS(cfg.set_override("adapter.resampler=3"), ContractError);
  CHECK_THROWS_AS(cfg.set_override("nonsense"), ContractError);
  // Invariant violations are caught at override time.
  CHECK_THROWS_AS(cfg.set_override("encoder.patch_size=7"), ContractError);
}

TEST_CASE("vadapter kind defaults the resampler to one layer") {
  auto cfg = parse_config(R"({"adapter": {"kind": "palm2_vadapter"}})");
  CHECK(cfg.adapter_spec().kind == adapters::AdapterKind::Palm2VAdapter);
  CHECK(cfg.adapter_spec().resampler.n_layers == 1);
  // Explicit depth overrides the kind default (Table 4 ablation).
  auto deep = parse_config(
      R"({"adapter": {"kind": "palm2_vadapter", "resampler": {"n_layers": 6}}})");
  CHECK(deep.adapter_spec().resampler.n_layers == 6);
}

TEST_CASE("typed views carry paper-pinned values into module configs") {
  auto cfg = parse_config("");
  auto opt = cfg.optimizer_config(250000);
  CHECK(train::lr_at(0, opt) == 0.0);
  CHECK(train::lr_at(1000, opt) == doctest::Approx(5e-4));
  CHECK(train::lr_at(250000, opt) == 0.0);
  auto q = cfg.quantizer_config();
  CHECK(q.temperature_at(0) == doctest::Approx(2.0));
  auto settings = cfg.stage_settings("stage1", 7);
  CHECK(settings.val_interval == 100);
  CHECK(settings.val_samples == 256);
  CHECK(settings.convergence_threshold == 0.8);
  CHECK(settings.opt.total_steps == 3000);
}

TEST_CASE("run directory layout") {
  auto cfg = parse_config("");
  auto dir = RunDirectory::create("/tmp/vlab_cfg_test_run", cfg);
  CHECK(std::filesystem::exists("/tmp/vlab_cfg_test_run/config.snapshot"));
  CHECK(std::filesystem::is_directory(dir.checkpoints_dir()));
  CHECK(std::filesystem::is_directory(dir.reports_dir()));
  std::ifstream snap("/tmp/vlab_cfg_test_run/config.snapshot");
  std::ostringstream os;
  os << snap.rdbuf();
  CHECK(os.str() == cfg.serialize());
  std::filesystem::remove_all("/tmp/vlab_cfg_test_run");
}
