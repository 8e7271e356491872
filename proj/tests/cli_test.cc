// Runs the adaptsense binary end to end on a tiny configuration.

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "adaptsense/config.h"
#include "adaptsense/efficiency.h"
#include "adaptsense/pipeline.h"
#include "support/tiny.h"

namespace as = adaptsense;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string err;
};

// Runs the CLI with `args`; stdout is discarded, stderr captured.
Result Cli(const std::string& args) {
  static int n = 0;
  const fs::path err = fs::temp_directory_path() /
                       ("adaptsense_cli_err_" + std::to_string(::getpid()) + "_" +
                        std::to_string(n++));
  const std::string cmd = std::string(ADAPTSENSE_CLI) + " " + args +
                          " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err);
  std::stringstream ss;
  ss << in.rdbuf();
  r.err = ss.str();
  fs::remove(err);
  return r;
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json ReadJson(const fs::path& p) { return json::parse(Slurp(p)); }

// Tiny run configuration shared by the tests.
std::string TinyConfig(const std::string& dir) {
  json c = {{"data", {{"n_episodes", 10}, {"T", 3}}},
            {"train", {{"epochs1", 1}, {"epochs2", 1}, {"epochs3", 1}}},
            {"eval", {{"snr_sweep", json::array()}}}};
  const std::string path = dir + "/tiny.json";
  std::ofstream(path) << c.dump(2);
  return path;
}

// Asserts that a failure is one "ERROR:" line.
void ExpectOneErrorLine(const Result& r) {
  EXPECT_EQ(r.err.rfind("ERROR: ", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
}

// Every file under `dir` except the manifest is listed with its hash.
void ExpectCompleteManifest(const fs::path& dir) {
  const json m = ReadJson(dir / as::kManifestFile);
  std::set<std::string> listed;
  for (const auto& a : m.at("artifacts")) {
    listed.insert(a.at("path").get<std::string>());
    EXPECT_EQ(a.at("sha1"), as::GitBlobHashFile((dir / a.at("path").get<std::string>()).string()));
  }
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == as::kManifestFile) continue;
    EXPECT_TRUE(listed.count(rel)) << rel << " missing from the manifest";
  }
  EXPECT_EQ(m.at("content_hash"), as::ContentHash(dir.string()));
}

}  // namespace

TEST(Cli, GitBlobHashMatchesGit) {
  // `printf 'hello\n' | git hash-object --stdin`
  EXPECT_EQ(as::GitBlobHash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(as::GitBlobHash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(Cli("--help").code, 0);
  EXPECT_EQ(Cli("train --help").code, 0);
  const Result none = Cli("");
  EXPECT_EQ(none.code, 2);
  ExpectOneErrorLine(none);
  EXPECT_EQ(Cli("frobnicate").code, 2);
  EXPECT_EQ(Cli("train").code, 2);  // --out is required
}

TEST(Cli, GenDataWritesAManifestAndIsReproducible) {
  const std::string dir = as::testing::ScratchDir("cli_gen");
  ASSERT_EQ(Cli("gen-data -o " + dir + "/a").code, 0);
  const json manifest = ReadJson(fs::path(dir) / "a/manifest.json");
  EXPECT_EQ(manifest.at("format"), "adaptsense.episode.v1");
  EXPECT_EQ(as::LoadDataset(dir + "/a").episodes.size(), 100u);
  ExpectCompleteManifest(fs::path(dir) / "a");
  ASSERT_EQ(Cli("gen-data -o " + dir + "/b").code, 0);
  EXPECT_EQ(as::ContentHash(dir + "/a"), as::ContentHash(dir + "/b"));
  // The manifest hash is stable too.
  EXPECT_EQ(ReadJson(fs::path(dir) / "a" / as::kManifestFile).at("content_hash"),
            ReadJson(fs::path(dir) / "b" / as::kManifestFile).at("content_hash"));
}

TEST(Cli, MalformedConfigExitsTwo) {
  const std::string dir = as::testing::ScratchDir("cli_badcfg");
  std::ofstream(dir + "/bad.json") << "{ \"data\": ";
  const Result r = Cli("gen-data -c " + dir + "/bad.json -o " + dir + "/out");
  EXPECT_EQ(r.code, 2);
  ExpectOneErrorLine(r);
  EXPECT_EQ(Cli("gen-data --set data.nope=1 -o " + dir + "/out").code, 2);
  EXPECT_EQ(Cli("gen-data --preset nope -o " + dir + "/out").code, 2);
  EXPECT_FALSE(fs::exists(dir + "/out/manifest.json"));
}

TEST(Cli, TrainEvalAndResume) {
  const std::string dir = as::testing::ScratchDir("cli_train");
  const std::string cfg = TinyConfig(dir);
  const fs::path run = fs::path(dir) / "run";

  // A later stage without its prerequisite checkpoint is refused.
  Result r = Cli("train -c " + cfg + " -o " + dir + "/none --stages 3 --resume -q");
  EXPECT_EQ(r.code, 2);
  ExpectOneErrorLine(r);
  EXPECT_EQ(Cli("train -c " + cfg + " -o " + dir + "/none --stages 2 -q").code, 2);
  EXPECT_EQ(Cli("train -c " + cfg + " -o " + dir + "/none --stages 1,3 -q").code, 2);

  ASSERT_EQ(Cli("train -c " + cfg + " -o " + run.string() +
                " --set eval.snr_sweep=[0] -q")
                .code,
            0);
  for (const char* f : {"config.json", "metrics.csv", "losses.csv", "decisions.csv",
                        "report.json", "checkpoints/stage3_final.ckpt",
                        "checkpoints/stage1_epoch1.ckpt"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  ExpectCompleteManifest(run);
  const json rep = ReadJson(run / "report.json");
  EXPECT_EQ(rep.at("stages_completed"), json::array({1, 2, 3}));

  // Resume equivalence: stage 1, then stage 2 resumed, matches stages 1,2.
  const std::string a = dir + "/a", b = dir + "/b";
  ASSERT_EQ(Cli("train -c " + cfg + " -o " + a + " --stages 1,2 -q").code, 0);
  ASSERT_EQ(Cli("train -c " + cfg + " -o " + b + " --stages 1 -q").code, 0);
  ASSERT_EQ(Cli("train -c " + cfg + " -o " + b + " --stages 2 --resume -q").code, 0);
  EXPECT_EQ(Slurp(a + "/report.json"), Slurp(b + "/report.json"));
  EXPECT_EQ(Slurp(a + "/metrics.csv"), Slurp(b + "/metrics.csv"));
  EXPECT_EQ(Slurp(a + "/checkpoints/stage2_final.ckpt"),
            Slurp(b + "/checkpoints/stage2_final.ckpt"));
  // Resuming with a different configuration is refused.
  EXPECT_EQ(Cli("train -c " + cfg + " --set cost.gamma=3 -o " + b +
                " --stages 3 --resume -q")
                .code,
            2);

  // Eval: oracle, all-on accounting, unknown policy, bad SNR.
  ASSERT_EQ(Cli("eval " + run.string() + " --policy all_on").code, 0);
  const json all_on = ReadJson(run / "eval/all_on_clean/report.json");
  as::Config c;
  from_json(ReadJson(run / "config.json"), c);
  EXPECT_EQ(all_on.at("report").at("mean_macs").get<double>(),
            static_cast<double>(as::CountMacs(as::StudentGraph(c.Student()), nullptr)));
  ASSERT_EQ(Cli("eval " + run.string() + " --policy oracle --snr -10").code, 0);
  EXPECT_TRUE(fs::exists(run / "eval/oracle_snr-10/decisions.csv"));
  ASSERT_EQ(Cli("eval " + run.string() + " --policy learned -o " + dir + "/ev").code, 0);
  ExpectCompleteManifest(fs::path(dir) / "ev");
  r = Cli("eval " + run.string() + " --policy greedy");
  EXPECT_EQ(r.code, 2);
  ExpectOneErrorLine(r);
  EXPECT_EQ(Cli("eval " + run.string() + " --snr loud").code, 2);
  EXPECT_EQ(Cli("eval " + dir + "/missing_run").code, 2);
  EXPECT_EQ(Cli("eval " + b + " --policy learned --snr 0").code, 0);  // stage 2 run

  // Report: read-only over the run, deterministic output, figures.
  const std::string before = as::ContentHash(run.string());
  ASSERT_EQ(Cli("report " + run.string() + " --plots -o " + dir + "/rep").code, 0);
  EXPECT_EQ(as::ContentHash(run.string()), before);
  for (const char* f : {"summary.md", "accuracy_vs_energy.svg", "usage_vs_snr.svg",
                        "loss_curves.svg"})
    EXPECT_TRUE(fs::exists(fs::path(dir) / "rep" / f)) << f;
  const std::string first = Slurp(dir + "/rep/summary.md");
  ASSERT_EQ(Cli("report " + run.string() + " --plots -o " + dir + "/rep").code, 0);
  EXPECT_EQ(Slurp(dir + "/rep/summary.md"), first);
  EXPECT_EQ(Cli("report " + dir + "/nothing_here").code, 2);
  EXPECT_EQ(Cli("report " + run.string() + " -o " + run.string()).code, 2);
}

TEST(Cli, AblationGrid) {
  const std::string dir = as::testing::ScratchDir("cli_ablate");
  TinyConfig(dir);
  json grid = {{"config", "tiny.json"},
               {"grid",
                {{"lambda", {json::array({0, 0, 0}), json::array({1, 0.05, 0.03})}},
                 {"gamma", {0, 10}}}}};
  std::ofstream(dir + "/grid.json") << grid.dump();
  ASSERT_EQ(Cli("ablate " + dir + "/grid.json -o " + dir + "/ab").code, 0);
  std::ifstream csv(dir + "/ab/ablation.csv");
  std::string header, line;
  std::getline(csv, header);
  int rows = 0;
  while (std::getline(csv, line)) rows += !line.empty();
  EXPECT_EQ(rows, 4);
  std::string expect;
  for (const auto& col : as::AblationColumns()) expect += (expect.empty() ? "" : ",") + col;
  // point, then one column per grid key, then the fixed columns.
  EXPECT_EQ(header.rfind("point,cost.gamma,cost.lambda," + expect, 0), 0u) << header;
  ExpectCompleteManifest(fs::path(dir) / "ab");

  ASSERT_EQ(Cli("report " + dir + "/ab --plots").code, 0);
  const std::string svg = Slurp(dir + "/ab_report/accuracy_vs_energy.svg");
  size_t points = 0;
  for (size_t p = svg.find("<circle"); p != std::string::npos; p = svg.find("<circle", p + 1))
    ++points;
  EXPECT_EQ(points, 4u);

  std::ofstream(dir + "/empty.json") << R"({"grid": {}})";
  const Result r = Cli("ablate " + dir + "/empty.json -o " + dir + "/ab2");
  EXPECT_EQ(r.code, 2);
  ExpectOneErrorLine(r);
  std::ofstream(dir + "/bad_key.json") << R"({"grid": {"data.T": [2, 3]}})";
  EXPECT_EQ(Cli("ablate " + dir + "/bad_key.json -o " + dir + "/ab3").code, 2);
}

TEST(Cli, EnvironmentSeedOverridesTheConfig) {
  const std::string dir = as::testing::ScratchDir("cli_env");
  const std::string cfg = TinyConfig(dir);
  const std::string cmd = "train -c " + cfg + " --stages 1 -q -o ";
  ASSERT_EQ(Cli(cmd + dir + "/plain").code, 0);
  ASSERT_EQ(Cli(cmd + dir + "/flag --set seed=5").code, 0);
  ::setenv("ADAPTSENSE_SEED", "5", 1);
  const int code = Cli(cmd + dir + "/env").code;
  ::unsetenv("ADAPTSENSE_SEED");
  ASSERT_EQ(code, 0);
  EXPECT_EQ(ReadJson(dir + "/env/config.json").at("seed"), 5);
  EXPECT_EQ(Slurp(dir + "/env/report.json"), Slurp(dir + "/flag/report.json"));
  EXPECT_NE(Slurp(dir + "/env/report.json"), Slurp(dir + "/plain/report.json"));
}
