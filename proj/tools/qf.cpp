// qf: dataset generation, warm-up, adaptation, evaluation, pairing, verification.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "quadformer/config.hpp"
#include "quadformer/ops.hpp"
#include "quadformer/pipeline.hpp"
#include "quadformer/verify.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kContract = 1;
constexpr int kVerifyFailed = 2;

qf::RunConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  qf::RunConfig cfg = path.empty() ? qf::RunConfig{} : qf::RunConfig::from_file(path);
  return cfg.with_overrides(sets, "--set");
}

int verify(const std::string& fault) {
  if (fault == "gelu") {
    qf::inject_fault(qf::Fault::kGeluBackward);
  } else if (fault == "linear") {
    qf::inject_fault(qf::Fault::kLinearBackward);
  } else if (!fault.empty()) {
    throw qf::ContractError("unknown fault '" + fault + "' (gelu or linear)");
  }
  bool all = true;
  for (const auto& r : qf::run_verification()) {
    std::printf("%-18s %s  %s (%.1fs)\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.detail.c_str(), r.seconds);
    all = all && r.passed;
  }
  return all ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QuadFormer-style cross-domain power-line segmentation at desk scale"};
  app.require_subcommand(1);

  std::string spec_file, out, data, config_file, resume, warm, pairs, ckpt, domain = "target", fault;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("generate", "write the two-domain micro-benchmark");
  gen->add_option("--spec", spec_file, "dataset spec (key = value); defaults built in");
  gen->add_option("--seed", seed, "override the spec seed");
  gen->add_option("--out", out, "output directory")->required();

  auto add_run_options = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "run config (key = value)");
    sub->add_option("--set", sets, "override one config key, e.g. --set iterations=100");
    sub->add_option("--data", data, "dataset root")->required();
  };

  auto* warmup = app.add_subcommand("warmup", "source-only training, then pseudo labels for the target set");
  add_run_options(warmup);
  warmup->add_option("--out", out, "checkpoint path; pseudo labels go to <out>.pseudo/")->required();
  warmup->add_option("--resume", resume, "continue a warm-up checkpoint");

  auto* adapt = app.add_subcommand("adapt", "cross-domain retraining from a warm-up checkpoint");
  add_run_options(adapt);
  adapt->add_option("--warmup", warm, "warm-up checkpoint")->required();
  adapt->add_option("--out", out, "checkpoint path")->required();
  adapt->add_option("--pairs", pairs, "persisted pair file (from `qf pair`)");

  auto* eval = app.add_subcommand("eval", "IoU report and masks on the validation split");
  eval->add_option("--checkpoint", ckpt, "checkpoint")->required();
  eval->add_option("--data", data, "dataset root")->required();
  eval->add_option("--out", out, "report directory")->required();
  eval->add_option("--domain", domain, "target (source-free) or source (held-out)")
      ->check(CLI::IsMember({"target", "source"}));

  auto* pair = app.add_subcommand("pair", "two-way SSIM pairing of source and target training images");
  add_run_options(pair);
  pair->add_option("--out", out, "pair file")->required();

  auto* ver = app.add_subcommand("verify", "gradient, shape, SSIM, EMA and pairing self-checks");
  ver->add_option("--inject-fault", fault, "corrupt a backward rule (gelu or linear) to prove detection");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kContract;
  }

  try {
    if (*gen) {
      qf::DatasetSpec spec = spec_file.empty() ? qf::DatasetSpec{} : qf::DatasetSpec::from_file(spec_file);
      if (gen->count("--seed")) spec.seed = seed;
      qf::cmd_generate(spec, out);
      std::cout << "wrote " << spec.source_count << " source and " << spec.target_train + spec.target_val
                << " target samples to " << out << "\n";
    } else if (*warmup) {
      qf::cmd_warmup(load_config(config_file, sets), data, {out, resume});
      std::cout << "warm-up checkpoint " << out << ", pseudo labels in " << out << ".pseudo\n";
    } else if (*adapt) {
      qf::cmd_adapt(load_config(config_file, sets), data, {warm, out, pairs});
      std::cout << "adapted checkpoint " << out << "\n";
    } else if (*eval) {
      const auto report = qf::cmd_eval(ckpt, data, out, domain == "target");
      std::cout << domain << " IoU " << report.pooled.value() << " (mean per image " << report.mean_iou() << ", "
                << report.rows.size() << " images)\n";
    } else if (*pair) {
      const auto set = qf::cmd_pair(load_config(config_file, sets), data, out);
      std::cout << set.pairs.size() << " pairs written to " << out << "\n";
    } else if (*ver) {
      return verify(fault);
    }
  } catch (const std::exception& e) {
    std::cerr << "qf: " << e.what() << "\n";
    return kContract;
  }
  return kOk;
}
