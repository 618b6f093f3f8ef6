#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "equiquant/cli.hpp"
#include "support.hpp"

using namespace eqtest;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = 0;
  std::string out, err;

  std::vector<json> records(const std::string& table) const {
    std::vector<json> r;
    std::stringstream ss(out);
    for (std::string line; std::getline(ss, line);) {
      if (line.empty() || line.front() != '{') continue;
      json j = json::parse(line);
      if (j.value("table", "") == table) r.push_back(std::move(j));
    }
    return r;
  }
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "equiquant");
  std::ostringstream out, err;
  Result r;
  r.code = run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Each test works inside its own scratch directory.
class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("eq_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    old_ = fs::current_path();
    fs::current_path(dir_);
  }
  void TearDown() override {
    fs::current_path(old_);
    fs::remove_all(dir_);
  }

  static void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

  static std::string small_config_text(const std::string& data, std::size_t epochs, std::size_t warmup) {
    return "# tiny run\n"
           "data = " + data + "\n"
           "epochs = " + std::to_string(epochs) + "\n"
           "warmup_epochs = " + std::to_string(warmup) + "\n"
           "lr = 0.001\nbatch_size = 4\nseed = 3\ncalibration_molecules = 8\n"
           "F0 = 8\nF1 = 6\nn_layers = 2\nn_rbf = 6\nd_attn = 8\n"
           "species = Ne, Ar\nsplit = 0.6, 0.2, 0.2\n";
  }

  fs::path dir_, old_;
};

json read_json(const std::string& path) {
  std::ifstream f(path);
  return json::parse(f);
}

}  // namespace

TEST_F(Cli, DiagEmptyTable) {
  const Result r = run_cli({"diag-mddq", "--bits", "8", "--samples", "0"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.records("diag-mddq").empty());
  EXPECT_NE(r.out.find("bits  quantizer"), std::string::npos);
}

TEST_F(Cli, DiagRecordsParseBackExactly) {
  const Result r = run_cli({"diag-mddq", "--bits", "2,4,8", "--samples", "500", "--seed", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = r.records("diag-mddq");
  const auto rows = angular_error_report({2, 4, 8}, 500, 4);
  ASSERT_EQ(recs.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(recs[i]["bits"].get<int>(), rows[i].bits);
    EXPECT_EQ(recs[i]["quantizer"].get<std::string>(), rows[i].quantizer);
    EXPECT_EQ(recs[i]["mean_cosine"].get<double>(), rows[i].mean_cosine);
    EXPECT_EQ(recs[i]["mean_angle_rad"].get<double>(), rows[i].mean_angle_rad);
  }
  const json m = read_json("equiquant-diag-mddq.manifest.json");
  EXPECT_EQ(m["subcommand"], "diag-mddq");
  EXPECT_EQ(m["seed"], 4);
  EXPECT_TRUE(m["versions"].contains("equiquant"));
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({"diag-mddq", "--frobnicate"}).code, 1);
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"teleport"}).code, 1);
  EXPECT_EQ(run_cli({"gen-data", "--out", "x.xyz", "--atoms", "8-16"}).code, 1);
  EXPECT_EQ(run_cli({"diag-mddq", "--bits", "12"}).code, 1);
  const Result r = run_cli({"eval", "--ckpt", "a"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--data"), std::string::npos);
}

TEST_F(Cli, DataAndModelErrors) {
  EXPECT_EQ(run_cli({"eval", "--ckpt", "missing.ckpt", "--data", "missing.xyz"}).code, 2);
  write("bad.xyz", "3\nenergy=1\nNe 0 0 0\n");
  write("cfg.txt", small_config_text("bad.xyz", 2, 1));
  const Result r = run_cli({"train", "--config", "cfg.txt", "--out", "m.ckpt"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 4"), std::string::npos) << r.err;
  write("cfg2.txt", "epochs = 3\nwibble = 1\n");
  EXPECT_EQ(run_cli({"train", "--config", "cfg2.txt", "--out", "m.ckpt"}).code, 1);
  EXPECT_EQ(run_cli({"gen-data", "--out", "x.xyz", "--atoms", "1..3"}).code, 2);
}

TEST_F(Cli, GenDataWritesDatasetAndManifest) {
  const Result r = run_cli({"gen-data", "--out", "d.xyz", "--n", "12", "--atoms", "4..6", "--seed", "9"});
  ASSERT_EQ(r.code, 0) << r.err;
  GenConfig gc;
  gc.n_molecules = 12;
  gc.atoms_min = 4;
  gc.atoms_max = 6;
  gc.seed = 9;
  std::ifstream f("d.xyz");
  std::stringstream ss;
  ss << f.rdbuf();
  EXPECT_EQ(ss.str(), write_xyz(gen_synthetic(gc)));
  const json m = read_json("d.xyz.manifest.json");
  EXPECT_EQ(m["seed"], 9);
  EXPECT_EQ(m["artifacts"][0], "d.xyz");
  EXPECT_EQ(r.records("gen-data").at(0)["molecules"], 12);
}

TEST_F(Cli, TrainQuantizeEvalLeeBench) {
  ASSERT_EQ(run_cli({"gen-data", "--out", "d.xyz", "--n", "20", "--atoms", "4..6", "--seed", "2"}).code, 0);
  write("cfg.txt", small_config_text("d.xyz", 3, 1));

  const Result t8 = run_cli({"train", "--config", "cfg.txt", "--scheme", "int8-full", "--out", "q.ckpt"});
  ASSERT_EQ(t8.code, 0) << t8.err;
  EXPECT_TRUE(fs::exists("q.ckpt.log.jsonl"));
  const json man = read_json("q.ckpt.manifest.json");
  EXPECT_EQ(man["config"]["scheme"], "int8-full");
  EXPECT_EQ(man["seed"], 3);

  const Result qz = run_cli({"quantize", "--ckpt", "q.ckpt", "--out", "q.int"});
  ASSERT_EQ(qz.code, 0) << qz.err;
  EXPECT_LT(qz.records("quantize").at(0)["ratio"].get<double>(), 0.5);

  const Result ev = run_cli({"eval", "--ckpt", "q.int", "--data", "d.xyz", "--rotations", "2"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const json e = ev.records("eval").at(0);
  const IntegerModel im(load_checkpoint("q.int"));
  const Dataset ds = parse_xyz(cli::read_file("d.xyz"));
  const EvalResult expect = evaluate(im.predictor(), ds, {2, 0});
  EXPECT_EQ(e["e_mae_mev"].get<double>(), expect.e_mae_mev);
  EXPECT_EQ(e["f_mae_mev_a"].get<double>(), expect.f_mae_mev_a);
  EXPECT_EQ(e["lee_mev_a"].get<double>(), expect.lee_mev_a);
  EXPECT_GT(expect.lee_mev_a, 0.0);
  EXPECT_TRUE(fs::exists("equiquant-eval.manifest.json"));

  const Result lr = run_cli({"lee", "--ckpt", "q.ckpt", "--data", "d.xyz", "--rotations", "3", "--seed", "5"});
  ASSERT_EQ(lr.code, 0) << lr.err;
  EXPECT_EQ(lr.records("lee").size(), 20u);
  EXPECT_EQ(lr.records("lee-summary").at(0)["rotations"], 3);

  ASSERT_EQ(run_cli({"train", "--config", "cfg.txt", "--scheme", "fp32", "--out", "f.ckpt"}).code, 0);
  const Result b = run_cli({"--manifest", "bench.json", "bench", "--ckpt-fp32", "f.ckpt", "--ckpt-int", "q.int", "--runs",
                            "20"});
  ASSERT_EQ(b.code, 0) << b.err;
  const auto lat = b.records("latency");
  ASSERT_EQ(lat.size(), 2u);
  EXPECT_EQ(lat[0]["variant"], "fp32");
  EXPECT_EQ(lat[1]["variant"], "int");
  EXPECT_EQ(lat[0]["speedup"].get<double>(), 1.0);
  EXPECT_EQ(b.records("memory").size(), 1u);
  EXPECT_EQ(read_json("bench.json")["subcommand"], "bench");
}

TEST_F(Cli, EvalOnFp32CheckpointHasTinyLee) {
  ASSERT_EQ(run_cli({"gen-data", "--out", "d.xyz", "--n", "20", "--atoms", "4..6", "--seed", "2"}).code, 0);
  write("cfg.txt", small_config_text("d.xyz", 3, 1));
  ASSERT_EQ(run_cli({"train", "--config", "cfg.txt", "--scheme", "fp32", "--out", "f.ckpt"}).code, 0);
  const Result ev = run_cli({"eval", "--ckpt", "f.ckpt", "--data", "d.xyz"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_LT(ev.records("eval").at(0)["lee_mev_a"].get<double>(), 1e-4);
}

TEST_F(Cli, TrainingIsReproducibleFromManifest) {
  ASSERT_EQ(run_cli({"gen-data", "--out", "d.xyz", "--n", "15", "--atoms", "4..6", "--seed", "2"}).code, 0);
  write("cfg.txt", small_config_text("d.xyz", 2, 1));
  ASSERT_EQ(run_cli({"train", "--config", "cfg.txt", "--scheme", "int8-scalar", "--out", "a.ckpt"}).code, 0);
  // rebuild a config purely from the manifest and train again
  const json m = read_json("a.ckpt.manifest.json");
  std::string text;
  for (const auto& [k, v] : m["config"].items()) text += k + " = " + v.get<std::string>() + "\n";
  write("from_manifest.txt", text);
  ASSERT_EQ(run_cli({"train", "--config", "from_manifest.txt", "--out", "b.ckpt"}).code, 0);
  EXPECT_EQ(serialize(load_checkpoint("a.ckpt")), serialize(load_checkpoint("b.ckpt")));
}

TEST_F(Cli, SeedFromEnvironment) {
  ASSERT_EQ(run_cli({"gen-data", "--out", "d.xyz", "--n", "15", "--atoms", "4..6", "--seed", "2"}).code, 0);
  write("cfg.txt", small_config_text("d.xyz", 2, 1));
  ::setenv("EQUIQUANT_SEED", "41", 1);
  const Result r = run_cli({"train", "--config", "cfg.txt", "--out", "a.ckpt"});
  ::unsetenv("EQUIQUANT_SEED");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_json("a.ckpt.manifest.json")["seed"], 41);
  EXPECT_EQ(read_json("a.ckpt.manifest.json")["config"]["seed"], "41");
}

TEST(Config, ParsesKeyValues) {
  const KeyValues kv = parse_key_values("a = 1\n  # comment\n\nb=two words # trailing\n");
  EXPECT_EQ(kv.at("a"), "1");
  EXPECT_EQ(kv.at("b"), "two words");
  EXPECT_THROW(parse_key_values("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(parse_key_values("just text\n"), ConfigError);
}

TEST(Config, ResolvesAndDescribesRoundTrip) {
  const RunConfig rc = resolve_config(parse_key_values("epochs = 7\nlambda_lee = 0\nspecies = Ne,Ar\nscheme = w4a8\n"));
  EXPECT_EQ(rc.train.epochs, 7u);
  EXPECT_EQ(rc.train.lambda_lee, 0.0);
  EXPECT_EQ(rc.train.scheme, Scheme::w4a8);
  EXPECT_EQ(rc.model.species, (std::vector<int>{10, 18}));
  const RunConfig back = resolve_config(describe(rc));
  EXPECT_EQ(describe(back), describe(rc));
  EXPECT_THROW(resolve_config(parse_key_values("epochs = x\n")), ConfigError);
  EXPECT_THROW(resolve_config(parse_key_values("epochs = 3\nwarmup_epochs = 3\n")), TrainingError);
}
