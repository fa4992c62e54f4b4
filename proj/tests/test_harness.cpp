#include <filesystem>
#include <fstream>
#include <sstream>

#include "cimsim/error.hpp"
#include "cimsim/harness.hpp"
#include "cimsim/tensor_io.hpp"
#include "doctest.h"

using namespace cimsim;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string &name) {
  auto p = fs::temp_directory_path() / ("cimsim_test_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error_field(const json &j) {
  try {
    parse_config(j);
  } catch (const ConfigError &e) {
    return e.field();
  }
  return "";
}

} // namespace

TEST_CASE("minimal config gets defaults") {
  const auto c = parse_config(json{{"mode", "decoder"}, {"N", 8}, {"d_model", 32}, {"h", 2}});
  CHECK(c.attn.mode == AttentionMode::DecoderOnly);
  CHECK(c.attn.causal);
  CHECK(c.attn.d_head() == 16);
  CHECK(c.pipeline == Pipeline::SplitLut);
  CHECK(c.seed == 1);
  CHECK(c.luts.recip_index_bits == 8);

  const auto ed = parse_config(json{{"mode", "encoder_decoder"}, {"N", 8}, {"d_model", 32}, {"h", 2}});
  CHECK(ed.attn.n_enc == 8);
  CHECK_FALSE(ed.attn.causal);
}

TEST_CASE("config errors name the field") {
  const json base{{"mode", "encoder"}, {"N", 8}, {"d_model", 32}, {"h", 2}};
  auto with = [&](const char *k, json v) {
    json j = base;
    j[k] = std::move(v);
    return j;
  };
  CHECK(config_error_field(with("h", 3)) == "$.h");
  CHECK(config_error_field(with("N", 0)) == "$.N");
  CHECK(config_error_field(with("N", -4)) == "$.N");
  CHECK(config_error_field(with("mode", "bidirectional")) == "$.mode");
  CHECK(config_error_field(with("n_enc", 4)) == "$.n_enc");
  CHECK(config_error_field(with("colour", "red")) == "$.colour");
  CHECK(config_error_field(with("lut", json{{"exp_mode", "fixed:2"}})) == "$.lut.exp_mode");
  CHECK(config_error_field(with("lut", json{{"recip_k", 40}})) == "$.lut.recip_k");
  CHECK(config_error_field(with("costs", json{{"cycles_per_matvec", 0}})) == "$.costs.cycles_per_matvec");
  CHECK(config_error_field(with("sparsity", json{{"activation", 1.5}})) == "$.sparsity.activation");
  CHECK(config_error_field(json{{"mode", "decoder"}, {"N", 8}, {"d_model", 32}, {"h", 2}, {"causal", false}}) ==
        "$.causal");
  json missing = base;
  missing.erase("d_model");
  CHECK(config_error_field(missing) == "$.d_model");

  json tiny_denom = with("N", 64);
  tiny_denom["lut"] = {{"denom_int_bits", 4}};
  CHECK(config_error_field(tiny_denom) == "$.lut.denom_int_bits");
}

TEST_CASE("config echo parses back to the same config") {
  const json j{{"mode", "encoder_decoder"}, {"N", 5}, {"n_enc", 9}, {"d_model", 48}, {"h", 3},
               {"flow", "deferred"}, {"pipeline", "nonsplit"}, {"seed", 77},
               {"lut", {{"exp_mode", "fixed:UQ1.12"}, {"recip_k", 6}}}, {"sparsity", {{"activation", 0.5}}}};
  const auto c = parse_config(j);
  CHECK(parse_config(c.to_json()).to_json() == c.to_json());
  CHECK(c.to_json()["lut"]["exp_mode"] == "fixed:UQ1.12");
}

TEST_CASE("lut mode strings") {
  CHECK(parse_lut_mode("exact", "f").is_exact());
  CHECK(parse_lut_mode("fixed:15", "f").to_string() == "fixed:UQ1.15");
  CHECK(parse_lut_mode("fixed:UQ2.10", "f").to_string() == "fixed:UQ2.10");
  CHECK_THROWS_AS(parse_lut_mode("fixed:", "f"), ConfigError);
  CHECK_THROWS_AS(parse_lut_mode("fixed:12x", "f"), ConfigError);
  CHECK_THROWS_AS(parse_lut_mode("float", "f"), ConfigError);
}

TEST_CASE("workload generator is seeded and spans the int8 range") {
  auto c = parse_config(json{{"mode", "encoder_decoder"}, {"N", 40}, {"n_enc", 24}, {"d_model", 64}, {"h", 4}});
  const auto a = generate_workload(c), b = generate_workload(c);
  CHECK(a.x.codes == b.x.codes);
  CHECK(a.wo.codes == b.wo.codes);
  CHECK(a.x_enc.rows() == 24);
  c.seed = 2;
  CHECK(generate_workload(c).x.codes != a.x.codes);

  std::vector<std::int8_t> all = a.wq.codes;
  all.insert(all.end(), a.wk.codes.begin(), a.wk.codes.end());
  CHECK(*std::min_element(all.begin(), all.end()) == -128);
  CHECK(*std::max_element(all.begin(), all.end()) == 127);
  CHECK(a.x.scale == doctest::Approx(1.0 / 127));
  CHECK(a.wq.scale == doctest::Approx(1.0 / (127.0 * 8.0)));

  const auto dir = scratch("workload");
  write_workload(a, 4, dir);
  CHECK(fs::exists(dir / "Wq.h3.cimt"));
  CHECK(read_quant_tensor(dir / "Wk.h1.cimt").shape == Shape{64, 16});
  CHECK_FALSE(fs::exists(dir / "Wq.cimt"));
  const auto r = read_workload(dir, c);
  CHECK(r.x_enc.codes == a.x_enc.codes);
  CHECK(r.wv.codes == a.wv.codes);
  CHECK(r.wv.scale == a.wv.scale);
}

TEST_CASE("split_heads takes column blocks") {
  auto c = parse_config(json{{"mode", "encoder"}, {"N", 4}, {"d_model", 32}, {"h", 4}});
  const auto w = generate_workload(c);
  const auto hw = split_heads(w, 4);
  REQUIRE(hw.heads.size() == 4);
  CHECK(hw.heads[2].wk.cols() == 8);
  CHECK(hw.heads[2].wk.at(5, 3) == w.wk.at(5, 19));
  CHECK(hw.heads[3].wq.at(31, 7) == w.wq.at(31, 31));
}

TEST_CASE("single-token run returns the value row") {
  const auto c = parse_config(json{{"mode", "encoder"}, {"N", 1}, {"d_model", 32}, {"h", 2}});
  const auto dir = scratch("single");
  const auto r = run_simulation(c, dir, false);
  CHECK(r.exit_code == kExitOk);
  for (int h = 0; h < 2; ++h) {
    const auto v = read_quant_tensor(dir / ("V.h" + std::to_string(h) + ".cimt"));
    const auto a = read_quant_tensor(dir / ("attn.h" + std::to_string(h) + ".cimt"));
    CHECK(a.codes == v.codes);
    CHECK(a.scale == v.scale);
  }
}

TEST_CASE("runs pass every oracle in each mode and flow") {
  for (const char *mode : {"encoder", "decoder", "encoder_decoder"})
    for (const char *flow : {"normalize_then_matmul", "deferred"}) {
      CAPTURE(mode);
      CAPTURE(flow);
      const auto c = parse_config(json{{"mode", mode}, {"N", 37}, {"d_model", 48}, {"h", 3}, {"flow", flow}});
      const auto dir = scratch("modes");
      const auto r = run_simulation(c, dir, true);
      CHECK(r.exit_code == kExitOk);
      CHECK(r.invariant_failures.empty());
      CHECK(fs::exists(dir / "events.log"));
      CHECK(r.error_report["status"] == "PASS");
      CHECK(compare_bundle(dir, OracleKind::IntegerGemm).max_abs_error == 0.0);
      CHECK(compare_bundle(dir, OracleKind::FloatAttention).passed());
      const auto sm = compare_bundle(dir, OracleKind::SafeSoftmax);
      CHECK(sm.passed());
      CHECK(sm.row_sum_max_deviation <= 0.05);
    }
}

TEST_CASE("runs dump the tables they used") {
  const auto c = parse_config(json{{"mode", "encoder"}, {"N", 30}, {"d_model", 32}, {"h", 2}});
  const auto dir = scratch("luts");
  run_simulation(c, dir, false);
  const auto scores = read_quant_tensor(dir / "scores.h1.cimt");
  const auto lut = ExpLut::from_blob(decode_tensor(read_bytes(dir / "exp_lut.h1.cimt")));
  const auto rebuilt = ExpLut::build(scores.scale, c.luts.exp_mode, c.luts.z_quant_max);
  for (int z = -128; z <= 127; ++z) CHECK(lut.raw(static_cast<std::int8_t>(z)) == rebuilt.raw(static_cast<std::int8_t>(z)));
  const auto recip = RecipLut::from_blob(decode_tensor(read_bytes(dir / "recip_lut.cimt")));
  const auto want = RecipLut::build(c.luts.recip_index_bits, c.luts.recip_mode);
  for (std::size_t t = 0; t < (std::size_t{1} << c.luts.recip_index_bits); ++t) CHECK(recip.raw(t) == want.raw(t));
}

TEST_CASE("exact LUTs reproduce the reference softmax") {
  const auto c = parse_config(json{{"mode", "encoder"},
                                   {"N", 50},
                                   {"d_model", 64},
                                   {"h", 2},
                                   {"lut", {{"exp_mode", "exact"}, {"recip_mode", "exact"}}}});
  const auto dir = scratch("exact");
  CHECK(run_simulation(c, dir, false).exit_code == kExitOk);
  const auto rep = compare_bundle(dir, OracleKind::SafeSoftmax);
  CHECK(rep.max_abs_error <= 1e-9);
  CHECK(rep.passed());
}

TEST_CASE("existing workload bundles are reused") {
  auto c = parse_config(json{{"mode", "encoder"}, {"N", 20}, {"d_model", 32}, {"h", 1}, {"seed", 9}});
  const auto wdir = scratch("wl_src");
  write_workload(generate_workload(c), 1, wdir);
  const auto a = scratch("wl_a");
  run_simulation(c, a, false);
  c.workload = wdir.string();
  c.seed = 12345; // ignored once a workload is given
  const auto b = scratch("wl_b");
  run_simulation(c, b, false);
  CHECK(slurp(a / "out.cimt") == slurp(b / "out.cimt"));
}

TEST_CASE("identical configs give identical bundles") {
  const auto c = parse_config(json{{"mode", "encoder_decoder"}, {"N", 21}, {"n_enc", 33}, {"d_model", 32}, {"h", 2}});
  const auto a = scratch("repro_a"), b = scratch("repro_b");
  run_simulation(c, a, true);
  run_simulation(c, b, true);
  std::size_t files = 0;
  for (const auto &e : fs::directory_iterator(a)) {
    ++files;
    CAPTURE(e.path().filename().string());
    CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  }
  CHECK(files > 20);
}

TEST_CASE("split and non-split runs share outputs but not cycles") {
  auto c = parse_config(json{{"mode", "encoder"}, {"N", 70}, {"d_model", 64}, {"h", 2}});
  const auto a = scratch("pipe_a"), b = scratch("pipe_b");
  const auto ra = run_simulation(c, a, false);
  c.pipeline = Pipeline::NonSplitBaseline;
  const auto rb = run_simulation(c, b, false);
  CHECK(slurp(a / "out.cimt") == slurp(b / "out.cimt"));
  CHECK(ra.cycle_report["schedule"]["total_latency_cycles"] != rb.cycle_report["schedule"]["total_latency_cycles"]);
}

TEST_CASE("sweep emits two rows per value") {
  const json base{{"mode", "encoder"}, {"N", 16}, {"d_model", 64}, {"h", 2}};
  const auto csv = run_sweep(base, "N=16,64,256", 3);
  std::istringstream in(csv);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  REQUIRE(lines.size() == 7);
  CHECK(lines[0].rfind("sweep:N,", 0) == 0);
  CHECK(lines[1].find(",split,") != std::string::npos);
  CHECK(lines[2].find(",nonsplit,") != std::string::npos);
  CHECK(lines[5].rfind("256,", 0) == 0);
  CHECK(run_sweep(base, "N=16,64,256", 1) == csv);

  CHECK(run_sweep(base, "sparsity.activation=0.5,0.875", 2).find("0.875") != std::string::npos);
  CHECK_THROWS_AS(run_sweep(base, "N", 1), ConfigError);
  CHECK_THROWS_AS(run_sweep(base, "h=5", 1), ConfigError);
}

TEST_CASE("softmax evaluation") {
  const auto exact = evaluate_softmax(300, 0.05, LutEntryMode::exact(), 4, 40);
  CHECK(exact.max_abs_error <= 1e-9);
  CHECK(exact.violations == 0);

  const auto fixed = evaluate_softmax(2, 0.005, parse_lut_mode("fixed:15", "m"), 4, 500);
  CHECK(fixed.violations == 0);
  CHECK(fixed.argmax_rows > 0);
  CHECK(fixed.argmax_rate() >= 0.99);
  CHECK(fixed.row_sum_max_deviation <= 0.05);

  SoftmaxEval acc;
  accumulate(acc, exact);
  accumulate(acc, fixed);
  CHECK(acc.rows == 540);
  CHECK(acc.n == 300);

  CHECK_THROWS_AS(evaluate_softmax(0, 0.1, LutEntryMode::exact(), 1, 1), ConfigError);
}
