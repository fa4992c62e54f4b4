// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "cimsim/error.hpp"
#include "cimsim/harness.hpp"

using namespace cimsim;
using nlohmann::json;

namespace {

json read_json(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw SimError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error &e) {
    throw ConfigError("$", std::string("JSON parse error in ") + path + ": " + e.what());
  }
}

void emit(const json &j, const std::string &out) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream os(out);
  if (!os) throw SimError("cannot write " + out);
  os << j.dump(2) << '\n';
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Bit-exact simulator of a CIM self-attention accelerator"};
  app.require_subcommand(1);

  std::string config, out, oracle = "FloatAttention", vary, csv, mode = "fixed:15", overrides, json_out;
  std::uint64_t seed = 1;
  std::size_t n = 1024, d_head = 64, rows = 1000;
  double scale = 0.01;
  bool event_log = false;

  auto *run = app.add_subcommand("run", "Simulate a configured workload and write the output bundle");
  run->add_option("--config", config, "Config JSON")->required();
  run->add_option("--out", out, "Output directory")->required();
  run->add_flag("--event-log", event_log, "Write the CIM event log (events.log)");

  auto *gen = app.add_subcommand("gen", "Generate a workload bundle");
  gen->add_option("--config", config, "Config JSON")->required();
  gen->add_option("--seed", seed, "Generator seed")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto *cmp = app.add_subcommand("compare", "Check an output bundle against an oracle");
  cmp->add_option("--out", out, "Bundle directory written by run")->required();
  cmp->add_option("--oracle", oracle, "FloatAttention, IntegerGemm or SafeSoftmax");
  cmp->add_option("--json", json_out, "Write the report here instead of stdout");

  auto *sweep = app.add_subcommand("sweep", "Cycle-model sweep over one config field");
  sweep->add_option("--config", config, "Base config JSON")->required();
  sweep->add_option("--vary", vary, "<field>=<v1>,<v2>,...")->required();
  sweep->add_option("--csv", csv, "CSV output path")->required();

  auto *sm = app.add_subcommand("softmax-eval", "Split softmax against the safe reference on random rows");
  sm->add_option("--n", n, "Row length");
  sm->add_option("--scale", scale, "Real value of one score code");
  sm->add_option("--mode", mode, "exact or fixed:<fraction bits>");
  sm->add_option("--seed", seed, "Row generator seed");
  sm->add_option("--rows", rows, "Number of rows");
  sm->add_option("--json", json_out, "Write the report here instead of stdout");

  auto *lat = app.add_subcommand("latency-eval", "Split vs non-split schedule for one encoder head");
  lat->add_option("--n", n, "Sequence length");
  lat->add_option("--d-head", d_head, "Head dimension");
  lat->add_option("--cost-overrides", overrides, "JSON object of CostModel overrides");
  lat->add_option("--json", json_out, "Write the report here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) {
      const auto cfg = load_config(config);
      const auto r = run_simulation(cfg, out, event_log);
      std::cout << r.summary;
      for (const auto &f : r.invariant_failures) std::cerr << "invariant: " << f << '\n';
      std::cout << "status: " << (r.exit_code == kExitOk ? "PASS" : "FAILED") << '\n';
      return r.exit_code;
    }
    if (*gen) {
      auto cfg = load_config(config);
      cfg.seed = seed;
      write_workload(generate_workload(cfg), cfg.attn.n_heads, out);
      std::ofstream(std::filesystem::path(out) / "config.json") << cfg.to_json().dump(2) << '\n';
      return kExitOk;
    }
    if (*cmp) {
      const auto kind = parse_oracle(oracle);
      if (!kind) throw ConfigError("--oracle", "expected FloatAttention, IntegerGemm or SafeSoftmax");
      const auto rep = compare_bundle(out, *kind);
      emit(rep.to_json(), json_out);
      return rep.passed() ? kExitOk : kExitBudget;
    }
    if (*sweep) {
      const auto text = run_sweep(read_json(config), vary, sweep_threads());
      std::ofstream os(csv);
      if (!os) throw SimError("cannot write " + csv);
      os << text;
      return kExitOk;
    }
    if (*sm) {
      const auto ev = evaluate_softmax(n, scale, parse_lut_mode(mode, "--mode"), seed, rows);
      emit(ev.to_json(), json_out);
      return ev.violations == 0 ? kExitOk : kExitBudget;
    }
    if (*lat) {
      CostModel costs;
      if (!overrides.empty()) costs = CostModel::from_json(read_json(overrides), costs);
      const auto r = compare_latency(n, d_head, costs);
      json j = r.to_json();
      j["n"] = n;
      j["d_head"] = d_head;
      j["assumptions"] = assumption_ledger();
      emit(j, json_out);
      std::cerr << "latency reduction split vs non-split: " << 100.0 * r.reduction << "% (non-split softmax share "
                << 100.0 * r.softmax_share << "%)\n";
      return r.sensitivity_ok() ? kExitOk : kExitBudget;
    }
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InvariantViolation &e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return kExitInvariant;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
