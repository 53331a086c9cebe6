#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gift/checkpoint.hpp"
#include "gift/cli.hpp"
#include "gift/format.hpp"

namespace gift::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json tiny_config() {
  return json::parse(R"({
    "schema_version": 1,
    "seed": 3,
    "schedule": {"steps": 50, "beta_start": 1e-3, "beta_end": 0.05},
    "data": {
      "concepts": [
        {"id": 0, "name": "blob", "family": "gaussian-blobs", "role": "malicious", "scale": 0.3, "offset": [2, 0]},
        {"id": 1, "name": "ring", "family": "ring", "role": "safe", "scale": 0.5, "offset": [-2, 0]},
        {"id": 2, "name": "moons", "family": "two-moons", "role": "safe", "scale": 0.5, "offset": [0, 2]}
      ],
      "counts": {"defense": 20, "attack": 20, "safe": 60}
    },
    "model": {"width": 8, "trunk_blocks": 1, "cond_blocks": 1, "embed_dim": 4, "attn_dim": 4, "time_dim": 4},
    "pretrain": {"steps": 30, "batch_size": 16},
    "immunize": {"total_iterations": 40, "batch_size": 8, "checkpoint_every": 10},
    "attack": {"steps": 20, "batch_size": 8, "trace_every": 5},
    "eval": {"samples": 40, "heldout": 40, "mi_bins": 4, "probe": {"train_per_concept": 60, "test_per_concept": 40, "steps": 200}},
    "analysis": {"batch_size": 4, "alpha_p_grid": [1e-2, 3e-3, 1e-3, 3e-4, 1e-4]}
  })");
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() / ("gift_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  void TearDown() override { fs::remove_all(root); }

  fs::path write_config(const json& j, const std::string& name = "config.json") {
    const fs::path p = root / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  CommandOptions options(const fs::path& config, const std::string& out) {
    CommandOptions o;
    o.config = config;
    o.out_dir = root / out;
    return o;
  }

  // make-data + pretrain on the tiny config; returns (dataset, checkpoint).
  std::pair<fs::path, fs::path> prepared(const fs::path& config) {
    run_command("make-data", options(config, "data"));
    auto o = options(config, "pre");
    o.dataset = root / "data/dataset.json";
    run_command("pretrain", o);
    return {root / "data/dataset.json", root / "pre/pretrained.ckpt"};
  }

  fs::path root;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "gift");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return main(static_cast<int>(argv.size()), argv.data());
}

TEST(Config, ResolvedFormRoundTrips) {
  const ExperimentConfig c = parse_config(tiny_config().dump());
  const ExperimentConfig back = parse_config(to_json(c).dump());
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(c.immunize.seed, 3u);
  EXPECT_EQ(c.table_rows(), 3);
}

TEST(Config, SeedOverrideChangesHash) {
  const ExperimentConfig a = parse_config(tiny_config().dump());
  const ExperimentConfig b = parse_config(tiny_config().dump(), 9);
  EXPECT_EQ(b.seed, 9u);
  EXPECT_EQ(b.attack.seed, 9u);
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, ErrorsNameTheField) {
  auto message = [](const json& j) {
    try {
      parse_config(j.dump());
    } catch (const ValidationError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  json j = tiny_config();
  j.erase("schema_version");
  EXPECT_NE(message(j).find("/schema_version: missing required field"), std::string::npos);
  j = tiny_config();
  j["schema_version"] = 7;
  EXPECT_NE(message(j).find("unsupported version 7"), std::string::npos);
  j = tiny_config();
  j["immunize"]["betta"] = 1.0;
  EXPECT_NE(message(j).find("/immunize/betta: unknown field"), std::string::npos);
  j = tiny_config();
  j["immunize"]["beta"] = "big";
  EXPECT_NE(message(j).find("/immunize/beta: expected a number"), std::string::npos);
  j = tiny_config();
  j["data"]["concepts"][1].erase("family");
  EXPECT_NE(message(j).find("/data/concepts/1/family: missing required field"), std::string::npos);
  j = tiny_config();
  j["attack"]["method"] = "prompt";
  EXPECT_NE(message(j).find("/attack/method"), std::string::npos);
  j = tiny_config();
  j["immunize"]["alpha_outer"] = -1.0;
  EXPECT_NE(message(j).find("/immunize"), std::string::npos);
}

TEST(Config, SyntaxErrorsCarryLineAndColumn) {
  try {
    parse_config("{\n  \"schema_version\": 1,\n  \"seed\": ,\n}", {}, "bad.json");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json:3:"), std::string::npos) << e.what();
  }
}

TEST(Config, DefensePlusAttackCountsExpressDirectly) {
  json j = tiny_config();
  j["data"]["counts"] = {{"defense", 20}, {"attack", 20}, {"safe", 500}};
  const ExperimentConfig c = parse_config(j.dump());
  EXPECT_EQ(c.counts.defense + c.counts.attack, 40);
}

TEST_F(CliTest, MakeDataIsIdempotent) {
  const fs::path cfg = write_config(tiny_config());
  const RunManifest a = run_command("make-data", options(cfg, "a"));
  const RunManifest b = run_command("make-data", options(cfg, "b"));
  EXPECT_EQ(a.config_hash, b.config_hash);
  EXPECT_EQ(file_digest(root / "a/dataset.json"), file_digest(root / "b/dataset.json"));
  const RunManifest m = read_manifest(root / "a/manifest.json");
  for (const auto& out : m.outputs) {
    EXPECT_TRUE(fs::exists(out.path));
    EXPECT_EQ(file_digest(out.path), out.digest);
  }
  EXPECT_EQ(m.config_hash, config_hash(parse_config(m.config.dump())));
}

TEST_F(CliTest, MakeDataNeedsConcepts) {
  json j = tiny_config();
  j["data"].erase("concepts");
  try {
    run_command("make-data", options(write_config(j), "a"));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("/data/concepts"), std::string::npos);
  }
}

TEST_F(CliTest, ImmunizeZeroIterationsKeepsCheckpoint) {
  json j = tiny_config();
  const auto [data, ckpt] = prepared(write_config(j));
  j["immunize"]["total_iterations"] = 0;
  auto o = options(write_config(j, "zero.json"), "imm");
  o.dataset = data;
  o.checkpoints = {ckpt.string()};
  run_command("immunize", o);
  EXPECT_EQ(load_checkpoint(root / "imm/immunized.ckpt").theta, load_checkpoint(ckpt).theta);
}

TEST_F(CliTest, ImmunizeDefaultCadenceAndNaiveTags) {
  json j = tiny_config();
  const auto [data, ckpt] = prepared(write_config(j));
  j["immunize"]["total_iterations"] = 1000;
  j["immunize"]["checkpoint_every"] = 100;
  auto o = options(write_config(j, "long.json"), "imm");
  o.dataset = data;
  o.checkpoints = {ckpt.string()};
  run_command("immunize", o);
  int n = 0;
  for (const auto& e : fs::directory_iterator(root / "imm/checkpoints")) n += e.path().extension() == ".ckpt";
  EXPECT_EQ(n, 10);
  EXPECT_TRUE(fs::exists(root / "imm/checkpoints/iter_001000.ckpt"));

  j["immunize"]["total_iterations"] = 10;
  j["immunize"]["naive"] = true;
  o = options(write_config(j, "naive.json"), "naive");
  o.dataset = data;
  o.checkpoints = {ckpt.string()};
  run_command("immunize", o);
  std::ifstream csv(root / "naive/history.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "iteration,level,max,noise,prior,total");
  int rows = 0;
  while (std::getline(csv, line)) {
    EXPECT_NE(line.find(",naive,"), std::string::npos);
    ++rows;
  }
  EXPECT_EQ(rows, 10);
}

TEST_F(CliTest, DivergentImmunizationKeepsPartialArtifacts) {
  json j = tiny_config();
  const auto [data, ckpt] = prepared(write_config(j));
  j["immunize"]["alpha_outer"] = 1e6;
  j["immunize"]["beta"] = 1e6;
  const fs::path cfg = write_config(j, "wild.json");
  const int code = invoke({"immunize", "--config", cfg.string(), "--dataset", data.string(), "--checkpoint",
                           ckpt.string(), "--out-dir", (root / "wild").string()});
  EXPECT_EQ(code, kNumerical);
  EXPECT_TRUE(fs::exists(root / "wild/history.csv"));
  EXPECT_TRUE(fs::exists(root / "wild/last_good.ckpt"));
  EXPECT_FALSE(fs::exists(root / "wild/manifest.json"));
}

TEST_F(CliTest, LowRankZeroStepsIsIdentityAndTokenIsRecorded) {
  json j = tiny_config();
  const auto [data, ckpt] = prepared(write_config(j));
  j["attack"]["method"] = "lowrank_adapter";
  j["attack"]["steps"] = 0;
  j["attack"]["rank"] = 2;
  auto o = options(write_config(j, "lr.json"), "lr");
  o.dataset = data;
  o.checkpoints = {ckpt.string()};
  run_command("attack", o);
  CheckpointInfo info;
  const Params attacked = load_checkpoint(root / "lr/attacked.ckpt", &info);
  const Params base = load_checkpoint(ckpt);
  EXPECT_EQ(attacked.theta.head(base.size()), base.theta);
  ASSERT_EQ(info.tokens.count(0), 1u);
  EXPECT_EQ(info.tokens.at(0), 3);
  std::ifstream f(root / "lr/adapter.json");
  const Adapter adapter = adapter_from_json(json::parse(f));
  for (const auto& factor : adapter.factors) EXPECT_EQ(factor.A.norm(), 0.0);
}

TEST_F(CliTest, PairedAttacksAreDeterministicAndBenignRejectsMalicious) {
  json j = tiny_config();
  const auto [data, ckpt] = prepared(write_config(j));
  const fs::path cfg = write_config(j, "atk.json");
  for (const char* out : {"a1", "a2"}) {
    auto o = options(cfg, out);
    o.dataset = data;
    o.checkpoints = {ckpt.string()};
    run_command("attack", o);
  }
  EXPECT_EQ(slurp(root / "a1/trace.csv"), slurp(root / "a2/trace.csv"));
  EXPECT_EQ(file_digest(root / "a1/attacked.ckpt"), file_digest(root / "a2/attacked.ckpt"));

  j["attack"]["method"] = "benign_pi";
  const int code = invoke({"attack", "--config", write_config(j, "benign.json").string(), "--dataset", data.string(),
                           "--checkpoint", ckpt.string(), "--out-dir", (root / "b").string()});
  EXPECT_EQ(code, kValidation);
}

TEST_F(CliTest, EvalRowsRepeatAndRoundTrip) {
  json j = tiny_config();
  const auto [data, ckpt] = prepared(write_config(j));
  const fs::path cfg = write_config(j, "eval.json");
  auto o = options(cfg, "ev");
  o.dataset = data;
  o.checkpoints = {"first=" + ckpt.string(), "second=" + ckpt.string()};
  run_command("eval", o);
  const MetricsReport r = parse_report(root / "ev/report.json");
  ASSERT_EQ(r.rows.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.rows[i].state, "first");
    EXPECT_EQ(r.rows[i + 3].state, "second");
    EXPECT_EQ(r.rows[i].heldout_denoise_loss, r.rows[i + 3].heldout_denoise_loss);
    EXPECT_EQ(r.rows[i].probe_accuracy, r.rows[i + 3].probe_accuracy);
    EXPECT_EQ(r.rows[i].mmd, r.rows[i + 3].mmd);
    EXPECT_EQ(r.rows[i].mi_proxy, r.rows[i + 3].mi_proxy);
    EXPECT_GE(r.rows[i].mmd, 0.0);
  }
  ASSERT_EQ(r.provenance.size(), 2u);
  EXPECT_EQ(r.provenance[0].config_hash, read_manifest(root / "pre/manifest.json").config_hash);
  const std::string text = slurp(root / "ev/report.json");
  EXPECT_NE(text.find("disclaimer"), std::string::npos);

  const ReplayResult rep = cmd_replay(root / "ev/manifest.json", root / "ev2");
  EXPECT_TRUE(rep.identical());
  EXPECT_EQ(slurp(root / "ev/metrics.csv"), slurp(root / "ev2/metrics.csv"));
}

TEST_F(CliTest, InseparableConceptsMarkProbeAbsent) {
  json j = tiny_config();
  j["data"]["concepts"][2]["family"] = "ring";
  j["data"]["concepts"][2]["offset"] = {-2, 0};
  const auto [data, ckpt] = prepared(write_config(j));
  auto o = options(write_config(j, "eval.json"), "ev");
  o.dataset = data;
  o.checkpoints = {ckpt.string()};
  run_command("eval", o);
  const MetricsReport r = parse_report(root / "ev/report.json");
  EXPECT_EQ(r.probe_status.rfind("absent", 0), 0u) << r.probe_status;
  for (const auto& row : r.rows) EXPECT_FALSE(row.probe_accuracy.has_value());
  EXPECT_NE(slurp(root / "ev/metrics.csv").find(",NA,"), std::string::npos);
}

TEST_F(CliTest, AnalyzeHealthyCorruptedAndQuadratic) {
  json j = tiny_config();
  const auto [data, ckpt] = prepared(write_config(j));
  auto o = options(write_config(j, "an.json"), "an");
  o.dataset = data;
  o.checkpoints = {ckpt.string()};
  run_command("analyze", o);
  std::ifstream f(root / "an/analysis.json");
  const json summary = json::parse(f);
  EXPECT_TRUE(summary.at("failed_gradient_checks").empty());
  EXPECT_EQ(summary.at("grad_checks").size(), 4u);
  EXPECT_EQ(summary.at("taylor_status"), "fitted");

  j["analysis"]["corrupt_gradient"] = "noise";
  const fs::path bad = write_config(j, "bad.json");
  try {
    o = options(bad, "bad");
    o.dataset = data;
    o.checkpoints = {ckpt.string()};
    run_command("analyze", o);
    FAIL();
  } catch (const GradientCheckFailed& e) {
    EXPECT_NE(std::string(e.what()).find("noise"), std::string::npos);
  }
  EXPECT_NE(slurp(root / "bad/gradcheck.csv").find("noise,"), std::string::npos);
  EXPECT_EQ(invoke({"analyze", "--config", bad.string(), "--dataset", data.string(), "--out-dir",
                    (root / "bad2").string()}),
            kNumerical);

  j["analysis"]["corrupt_gradient"] = "";
  j["analysis"]["mode"] = "quadratic_probe";
  o = options(write_config(j, "quad.json"), "quad");
  run_command("analyze", o);
  std::ifstream q(root / "quad/analysis.json");
  EXPECT_EQ(json::parse(q).at("taylor_status"), "exact");
}

TEST_F(CliTest, ExitCodes) {
  const fs::path cfg = write_config(tiny_config());
  EXPECT_EQ(invoke({"make-data", "--config", cfg.string(), "--out-dir", (root / "ok").string()}), kOk);
  EXPECT_EQ(invoke({"make-data", "--config", (root / "missing.json").string()}), kValidation);
  EXPECT_EQ(invoke({"frobnicate"}), kValidation);
  std::ofstream(root / "broken.json") << "{ \"schema_version\": 1, ";
  EXPECT_EQ(invoke({"make-data", "--config", (root / "broken.json").string(), "--out-dir", (root / "x").string()}),
            kValidation);
  std::ofstream(root / "junk.ckpt") << "not a checkpoint";
  EXPECT_EQ(invoke({"immunize", "--config", cfg.string(), "--dataset", (root / "ok/dataset.json").string(),
                    "--checkpoint", (root / "junk.ckpt").string(), "--out-dir", (root / "y").string()}),
            kIo);
  EXPECT_EQ(invoke({"replay", (root / "ok/manifest.json").string(), "--out-dir", (root / "again").string()}), kOk);
}

}  // namespace
}  // namespace gift::cli
