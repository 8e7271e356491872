#include "adaptsense/pipeline.h"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "adaptsense/errors.h"
#include "adaptsense/svg.h"

namespace adaptsense {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read {}", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void WriteFile(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write {}", path));
  out << content;
  if (!out) throw IoError(fmt::format("cannot write {}", path));
}

void MakeDirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError(fmt::format("cannot create directory {}", dir.string()));
  }
}

std::string UtcNow() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string Csv(double v) { return fmt::format("{:.17g}", v); }

std::string CkptPath(const fs::path& run, int stage) {
  return (run / "checkpoints" / fmt::format("stage{}_final.ckpt", stage))
      .string();
}

// Removes checkpoints of `stage` and later so a run never mixes stages from
// different invocations.
void DropCheckpointsFrom(const fs::path& run, int stage) {
  const fs::path dir = run / "checkpoints";
  if (!fs::is_directory(dir)) return;
  std::vector<fs::path> doomed;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("stage", 0) != 0 || name.size() < 6) continue;
    const int s = name[5] - '0';
    if (s >= stage && s <= 3) doomed.push_back(e.path());
  }
  for (const auto& p : doomed) fs::remove(p);
}

ParamSet Merged(StudentModel& student, PolicyNet& policy) {
  ParamSet ps;
  ps.Merge("student.", student.params());
  ps.Merge("policy.", policy.params());
  return ps;
}

json ReportJson(const MetricsReport& r) {
  json j = r;
  j.erase("history");
  return j;
}

// Keeps the lines of a CSV whose leading integer column passes `keep`.
std::vector<std::string> KeepRows(const fs::path& path,
                                  const std::function<bool(long)>& keep,
                                  size_t column) {
  std::vector<std::string> rows;
  std::ifstream in(path);
  if (!in) return rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (size_t i = 0; i <= column && std::getline(ss, cell, ','); ++i) {
    }
    if (!cell.empty() && keep(std::stol(cell))) rows.push_back(line);
  }
  return rows;
}

std::string DecisionsCsv(const Evaluation& ev, const ActionSpace& space) {
  std::string out = "episode,t,action,hard,p_select\n";
  for (size_t i = 0; i < ev.traces.size(); ++i) {
    const DecisionTensor& U = ev.traces[i];
    for (int t = 0; t < U.T; ++t) {
      for (int k = 0; k < U.K; ++k) {
        out += fmt::format("{},{},{},{},{}\n", ev.episodes[i], t,
                           space.labels[k], static_cast<int>(U.Hard(t, k)),
                           Csv(U.SoftSelect(t, k)));
      }
    }
  }
  return out;
}

std::string MetricsHeader(const ActionSpace& space) {
  std::string h =
      "stage,epoch,tau,l1,kd,gt,phi,policy,theta,val_loss,val_accuracy";
  for (const auto& l : space.labels) h += ",usage_" + l;
  return h + "\n";
}

std::string MetricsRow(const EpochRecord& r, const ActionSpace& space) {
  std::string row = fmt::format(
      "{},{},{},{},{},{},{},{},{},{},{}", r.stage, r.epoch, Csv(r.tau),
      Csv(r.train.l1), Csv(r.train.kd), Csv(r.train.gt), Csv(r.train.phi),
      Csv(r.train.policy), Csv(r.train.theta), Csv(r.val_loss),
      Csv(r.val_accuracy));
  for (int k = 0; k < space.K; ++k) {
    row += "," + (k < static_cast<int>(r.val_usage.size())
                      ? Csv(r.val_usage[k])
                      : std::string());
  }
  return row;
}

const char* kLossHeader = "step,stage,l1,kd,gt,phi,policy,theta\n";

std::string LossRow(const StepRecord& s) {
  return fmt::format("{},{},{},{},{},{},{},{}", s.step, s.stage,
                     Csv(s.loss.l1), Csv(s.loss.kd), Csv(s.loss.gt),
                     Csv(s.loss.phi), Csv(s.loss.policy), Csv(s.loss.theta));
}

std::string JoinLines(const std::vector<std::string>& rows) {
  std::string out;
  for (const auto& r : rows) out += r + "\n";
  return out;
}

struct LoadedRun {
  Config cfg;
  Dataset data;
  int stage = 0;  // latest stage with a final checkpoint
};

int LatestStage(const fs::path& run) {
  for (int s = 3; s >= 1; --s)
    if (fs::exists(CkptPath(run, s))) return s;
  return 0;
}

Config LoadRunConfig(const fs::path& run) {
  const fs::path p = run / "config.json";
  if (!fs::exists(p)) {
    throw IoError(fmt::format("{} is not a run directory (no config.json)",
                              run.string()));
  }
  Config cfg = ReadJsonFile(p.string()).get<Config>();
  cfg.Validate();
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Hashing and manifests.

std::string GitBlobHash(const std::string& content) {
  const std::string header = fmt::format("blob {}", content.size());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw IoError("cannot allocate a digest context");
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, "\0", 1) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw IoError("SHA-1 digest failed");
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

std::string GitBlobHashFile(const std::string& path) {
  return GitBlobHash(ReadFile(path));
}

namespace {

std::vector<std::pair<std::string, std::string>> HashTree(
    const std::string& dir) {
  std::vector<std::pair<std::string, std::string>> out;
  if (!fs::is_directory(dir)) {
    throw IoError(fmt::format("{} is not a directory", dir));
  }
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == kManifestFile) continue;
    out.emplace_back(rel, GitBlobHashFile(e.path().string()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::string ContentHash(const std::string& dir) {
  std::string listing;
  for (const auto& [rel, h] : HashTree(dir)) listing += h + " " + rel + "\n";
  return GitBlobHash(listing);
}

void WriteManifest(const std::string& dir, const json& config,
                   const std::string& command, const std::string& inputs_hash) {
  json artifacts = json::array();
  std::string listing;
  for (const auto& [rel, h] : HashTree(dir)) {
    artifacts.push_back(
        {{"path", rel},
         {"sha1", h},
         {"bytes", static_cast<uint64_t>(fs::file_size(fs::path(dir) / rel))}});
    listing += h + " " + rel + "\n";
  }
  json m = {{"format", "adaptsense.manifest.v1"},
            {"command", command},
            {"created_utc", UtcNow()},
            {"config", config},
            {"inputs_hash", inputs_hash},
            {"content_hash", GitBlobHash(listing)},
            {"artifacts", artifacts}};
  WriteFile((fs::path(dir) / kManifestFile).string(), m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Data.

void GenData(const Config& cfg, const std::string& out_dir) {
  MakeDirs(out_dir);
  const Dataset ds = GenerateDataset(cfg.data);
  SaveDataset(ds, out_dir);
  const json data_json = cfg.data;
  WriteManifest(out_dir, json(cfg), "gen-data", GitBlobHash(data_json.dump()));
}

Dataset ObtainDataset(const Config& cfg, const std::string& data_dir) {
  if (data_dir.empty()) return GenerateDataset(cfg.data);
  if (!fs::is_directory(data_dir)) {
    throw IoError(fmt::format("dataset directory {} does not exist", data_dir));
  }
  Dataset ds = LoadDataset(data_dir);
  if (json(ds.config) != json(cfg.data)) {
    throw ConfigError(fmt::format(
        "dataset {} was generated with a different data section", data_dir));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Training.

std::vector<int> ParseStages(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok != "1" && tok != "2" && tok != "3") {
      throw ConfigError(fmt::format("bad stage '{}' in '{}'", tok, text));
    }
    out.push_back(tok[0] - '0');
  }
  if (out.empty()) throw ConfigError("no stages requested");
  for (size_t i = 1; i < out.size(); ++i) {
    if (out[i] != out[i - 1] + 1) {
      throw ConfigError(fmt::format(
          "stages '{}' must be ascending and contiguous", text));
    }
  }
  return out;
}

json RunTraining(const Config& cfg, const std::string& run_dir,
                 const TrainRequest& req) {
  cfg.Validate();
  const std::vector<int>& stages = req.stages;
  if (stages.empty()) throw ConfigError("no stages requested");
  for (size_t i = 0; i < stages.size(); ++i) {
    if (stages[i] < 1 || stages[i] > 3 ||
        (i > 0 && stages[i] != stages[i - 1] + 1)) {
      throw ConfigError("stages must be ascending, contiguous and in 1..3");
    }
  }
  const int first = stages.front();
  const fs::path run(run_dir);
  const json cfg_json = cfg;

  if (first > 1 && !req.resume) {
    throw ContractError(fmt::format(
        "stage {} continues from stage {}; pass --resume with an existing run",
        first, first - 1));
  }
  json previous = json::object();
  if (req.resume && first > 1) {
    const Config old = LoadRunConfig(run);
    if (json(old) != cfg_json) {
      throw ConfigError(fmt::format(
          "{} was trained with a different configuration", run.string()));
    }
    if (!fs::exists(CkptPath(run, first - 1))) {
      throw ContractError(fmt::format(
          "stage {} needs {}, which does not exist; run stage {} first", first,
          CkptPath(run, first - 1), first - 1));
    }
    if (fs::exists(run / "report.json")) {
      previous = ReadJsonFile((run / "report.json").string());
    }
  }

  MakeDirs(run / "checkpoints");
  DropCheckpointsFrom(run, first);
  WriteFile((run / "config.json").string(), cfg_json.dump(2) + "\n");

  const Dataset data = ObtainDataset(cfg, req.data_dir);
  const StudentConfig sc = cfg.Student();
  const ActionSpace space = cfg.Actions();
  StudentModel student(sc, cfg.StudentSeed());
  PolicyNet policy(sc, cfg.policy, cfg.PolicySeed());
  if (first > 1) {
    ParamSet all = Merged(student, policy);
    LoadCheckpoint(CkptPath(run, first - 1), all);
  }

  // Rows of earlier stages survive a resume.
  auto earlier = [&](long stage) { return stage < first; };
  std::vector<std::string> metric_rows =
      first > 1 ? KeepRows(run / "metrics.csv", earlier, 0)
                : std::vector<std::string>{};
  std::vector<std::string> loss_rows =
      first > 1 ? KeepRows(run / "losses.csv", earlier, 1)
                : std::vector<std::string>{};

  Trainer trainer(data, cfg.Train(), cfg.Cost(), student, policy);
  trainer.set_checkpoint_dir((run / "checkpoints").string());
  trainer.set_first_step(static_cast<long>(loss_rows.size()));
  trainer.set_epoch_callback([&](const EpochRecord& r) {
    if (req.quiet) return;
    std::string usage;
    for (double u : r.val_usage) usage += fmt::format(" {:.2f}", u);
    std::cerr << fmt::format(
        "stage {} epoch {:>2}  tau {:.3f}  val_loss {:.4f}  val_acc {:.3f}{}\n",
        r.stage, r.epoch, r.tau, r.val_loss, r.val_accuracy,
        usage.empty() ? "" : "  usage" + usage);
  });

  EvalOptions eo;
  eo.seed = cfg.seed;
  eo.energy = cfg.energy;
  const CostModel cost = cfg.Cost();
  auto evaluate = [&](PolicyKind k, double snr) {
    EvalOptions o = eo;
    o.policy = k;
    o.snr_db = snr;
    return Evaluate(data, student, &policy, cost, o);
  };
  const double clean = std::numeric_limits<double>::infinity();

  json stage_reports = previous.value("stages", json::object());
  std::set<int> done;
  for (int s : previous.value("stages_completed", std::vector<int>{}))
    if (s < first) done.insert(s);
  auto finish = [&](int stage) {
    SaveCheckpoint(CkptPath(run, stage), Merged(student, policy));
    const PolicyKind k = stage == 1 ? PolicyKind::kAllOn : PolicyKind::kLearned;
    stage_reports[std::to_string(stage)] = ReportJson(evaluate(k, clean).report);
    done.insert(stage);
  };

  const bool want2 = std::find(stages.begin(), stages.end(), 2) != stages.end();
  const bool want3 = std::find(stages.begin(), stages.end(), 3) != stages.end();
  if (first == 1) {
    trainer.Stage1();
    finish(1);
  }
  if (want3) {
    const int rounds = cfg.train.alternations;
    for (int r = 0; r < rounds; ++r) {
      if (r > 0 || want2) {
        trainer.Stage2(r);
        if (r == 0) finish(2);
      }
      trainer.Stage3(r);
    }
    finish(3);
  } else if (want2) {
    trainer.Stage2(0);
    finish(2);
  }

  for (const auto& r : trainer.history()) {
    metric_rows.push_back(MetricsRow(r, space));
  }
  for (const auto& s : trainer.steps()) loss_rows.push_back(LossRow(s));
  WriteFile((run / "metrics.csv").string(),
            MetricsHeader(space) + JoinLines(metric_rows));
  WriteFile((run / "losses.csv").string(), kLossHeader + JoinLines(loss_rows));

  const int latest = *done.rbegin();
  const bool learned = latest >= 2;
  const PolicyKind final_kind = learned ? PolicyKind::kLearned : PolicyKind::kAllOn;
  const Evaluation final_eval = evaluate(final_kind, clean);
  WriteFile((run / "decisions.csv").string(), DecisionsCsv(final_eval, space));

  json baselines = json::object();
  for (PolicyKind k : {PolicyKind::kAllOn, PolicyKind::kOracle,
                       PolicyKind::kRandom, PolicyKind::kHeuristic}) {
    baselines[PolicyKindName(k)] = ReportJson(evaluate(k, clean).report);
  }
  json sweep = json::array();
  for (double snr : cfg.eval.snr_sweep) {
    json row = {{"snr_db", snr},
                {"all_on", ReportJson(evaluate(PolicyKind::kAllOn, snr).report)}};
    if (learned) {
      row["learned"] = ReportJson(evaluate(PolicyKind::kLearned, snr).report);
    }
    sweep.push_back(row);
  }

  json report = {{"format", kReportFormat},
                 {"task", TaskKindName(cfg.task)},
                 {"preset", cfg.preset},
                 {"seed", cfg.seed},
                 {"stages_completed", std::vector<int>(done.begin(), done.end())},
                 {"stages", stage_reports},
                 {"final", ReportJson(final_eval.report)},
                 {"baselines", baselines},
                 {"snr_sweep", sweep}};
  WriteFile((run / "report.json").string(), report.dump(2) + "\n");

  std::string inputs = GitBlobHash(cfg_json.dump());
  if (!req.data_dir.empty()) inputs = GitBlobHash(inputs + ContentHash(req.data_dir));
  WriteManifest(run.string(), cfg_json, "train", inputs);
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation.

std::string SnrTag(double snr_db) {
  if (!std::isfinite(snr_db)) return "clean";
  return fmt::format("snr{}", snr_db);
}

json RunEval(const std::string& run_dir, const EvalRequest& req) {
  const fs::path run(run_dir);
  const Config cfg = LoadRunConfig(run);
  const int stage = LatestStage(run);
  if (stage == 0) {
    throw IoError(fmt::format("{} has no final checkpoint", run_dir));
  }
  if (req.policy == PolicyKind::kLearned && stage < 2) {
    throw ContractError(fmt::format(
        "the learned policy needs a stage 2 or 3 checkpoint; {} has stage {}",
        run_dir, stage));
  }
  const Dataset data = ObtainDataset(cfg, req.data_dir);
  const StudentConfig sc = cfg.Student();
  StudentModel student(sc, cfg.StudentSeed());
  PolicyNet policy(sc, cfg.policy, cfg.PolicySeed());
  ParamSet all = Merged(student, policy);
  LoadCheckpoint(CkptPath(run, stage), all);

  EvalOptions o;
  o.policy = req.policy;
  o.snr_db = req.snr_db;
  o.seed = cfg.seed;
  o.energy = cfg.energy;
  const Evaluation ev = Evaluate(data, student, &policy, cfg.Cost(), o);

  const fs::path out =
      req.out_dir.empty()
          ? run / "eval" /
                fmt::format("{}_{}", PolicyKindName(req.policy), SnrTag(req.snr_db))
          : fs::path(req.out_dir);
  MakeDirs(out);
  const ActionSpace space = cfg.Actions();
  json report = {{"format", kReportFormat},
                 {"checkpoint", fmt::format("stage{}_final.ckpt", stage)},
                 {"report", ReportJson(ev.report)}};
  WriteFile((out / "report.json").string(), report.dump(2) + "\n");
  WriteFile((out / "decisions.csv").string(), DecisionsCsv(ev, space));
  std::string usage = "action,usage\n";
  for (int k = 0; k < space.K; ++k) {
    usage += fmt::format("{},{}\n", space.labels[k], Csv(ev.report.usage[k]));
  }
  WriteFile((out / "usage.csv").string(), usage);
  WriteManifest(out.string(), json(cfg), "eval",
                GitBlobHashFile(CkptPath(run, stage)));
  return report;
}

// ---------------------------------------------------------------------------
// Ablation.

std::string ResolveGridKey(const std::string& key) {
  static const std::map<std::string, std::string> kAliases = {
      {"lambda", "cost.lambda"},     {"gamma", "cost.gamma"},
      {"alpha", "distill.alpha"},    {"beta", "distill.beta"},
      {"tau_kd", "distill.tau_kd"},  {"eta1", "train.eta1"},
      {"eta2", "train.eta2"},        {"tau_gumbel", "train.tau_gumbel.init"},
      {"tau", "train.tau_gumbel.init"}};
  auto it = kAliases.find(key);
  return it == kAliases.end() ? key : it->second;
}

size_t AblationGrid::Points() const {
  if (values.empty()) return 0;
  size_t n = 1;
  for (const auto& v : values) n *= v.size();
  return n;
}

std::vector<json> AblationGrid::Point(size_t i) const {
  std::vector<json> out(keys.size());
  for (size_t k = keys.size(); k-- > 0;) {
    out[k] = values[k][i % values[k].size()];
    i /= values[k].size();
  }
  return out;
}

AblationGrid ParseGrid(const json& spec, const std::string& base_dir) {
  if (!spec.is_object()) throw ConfigError("grid spec must be a JSON object");
  for (const auto& [key, value] : spec.items()) {
    if (key != "grid" && key != "base" && key != "config" && key != "preset") {
      throw ConfigError(fmt::format("unknown grid spec key '{}'", key));
    }
  }
  AblationGrid g;
  if (spec.contains("base")) {
    if (!spec.at("base").is_object()) throw ConfigError("grid base must be an object");
    g.base = spec.at("base");
  }
  if (spec.contains("config")) {
    fs::path p = spec.at("config").get<std::string>();
    if (p.is_relative()) p = fs::path(base_dir) / p;
    g.config_file = p.string();
  }
  if (spec.contains("preset")) g.preset = spec.at("preset").get<std::string>();
  if (!spec.contains("grid") || !spec.at("grid").is_object() ||
      spec.at("grid").empty()) {
    throw ConfigError("empty grid: list at least one key with values");
  }
  for (const auto& [key, value] : spec.at("grid").items()) {
    if (!value.is_array() || value.empty()) {
      throw ConfigError(fmt::format("empty grid: '{}' has no values", key));
    }
    const std::string path = ResolveGridKey(key);
    if (path.rfind("data.", 0) == 0) {
      throw ConfigError(fmt::format(
          "grid key '{}' would change the shared dataset", key));
    }
    g.keys.push_back(path);
    g.values.emplace_back(value.begin(), value.end());
  }
  return g;
}

std::vector<std::string> AblationColumns() {
  return {"metric",      "score",       "accuracy",      "all_on_accuracy",
          "mean_macs",   "all_on_macs", "macs_fraction", "mean_energy_j"};
}

json RunAblation(const AblationGrid& grid, const std::string& out_dir,
                 bool use_env) {
  if (grid.Points() == 0) throw ConfigError("empty grid");
  const fs::path out(out_dir);
  MakeDirs(out);
  ConfigSources base;
  base.file = grid.config_file;
  base.preset = grid.preset;
  base.patch = grid.base;
  base.use_env = use_env;
  const Config base_cfg = ResolveConfig(base);
  // Every point must be valid before any training starts.
  std::vector<Config> configs;
  for (size_t i = 0; i < grid.Points(); ++i) {
    ConfigSources src = base;
    const auto vals = grid.Point(i);
    for (size_t k = 0; k < grid.keys.size(); ++k)
      src.overrides.push_back(grid.keys[k] + "=" + vals[k].dump());
    configs.push_back(ResolveConfig(src));
  }

  const std::string data_dir = (out / "data").string();
  GenData(base_cfg, data_dir);

  const ActionSpace space = base_cfg.Actions();
  std::string csv = "point";
  for (const auto& k : grid.keys) csv += "," + k;
  for (const auto& c : AblationColumns()) csv += "," + c;
  for (const auto& l : space.labels) csv += ",usage_" + l;
  csv += "\n";

  json rows = json::array();
  for (size_t i = 0; i < configs.size(); ++i) {
    TrainRequest req;
    req.data_dir = data_dir;
    const std::string name = fmt::format("point_{:03d}", i);
    const json report = RunTraining(configs[i], (out / name).string(), req);
    const json& f = report.at("final");
    const double all_on_macs = f.at("all_on_macs").get<double>();
    json row = {{"point", name},
                {"metric", f.at("metric")},
                {"score", f.at("score")},
                {"accuracy", f.at("accuracy")},
                {"all_on_accuracy", report.at("baselines").at("all_on").at("accuracy")},
                {"mean_macs", f.at("mean_macs")},
                {"all_on_macs", all_on_macs},
                {"macs_fraction", f.at("mean_macs").get<double>() / all_on_macs},
                {"mean_energy_j", f.at("mean_energy_j")},
                {"usage", f.at("usage")}};
    const auto vals = grid.Point(i);
    json params = json::object();
    csv += name;
    for (size_t k = 0; k < grid.keys.size(); ++k) {
      params[grid.keys[k]] = vals[k];
      std::string cell = vals[k].dump();
      if (cell.find(',') != std::string::npos) cell = "\"" + cell + "\"";
      csv += "," + cell;
    }
    row["params"] = params;
    csv += "," + row["metric"].get<std::string>();
    for (const char* c : {"score", "accuracy", "all_on_accuracy", "mean_macs",
                          "all_on_macs", "macs_fraction", "mean_energy_j"}) {
      csv += "," + Csv(row[c].get<double>());
    }
    for (double u : row["usage"]) csv += "," + Csv(u);
    csv += "\n";
    rows.push_back(row);
  }
  WriteFile((out / "ablation.csv").string(), csv);
  json doc = {{"format", "adaptsense.ablation.v1"},
              {"keys", grid.keys},
              {"actions", space.labels},
              {"rows", rows}};
  WriteFile((out / "ablation.json").string(), doc.dump(2) + "\n");
  WriteManifest(out.string(), json(base_cfg), "ablate",
                GitBlobHash(json{{"keys", grid.keys}, {"base", json(base_cfg)}}.dump()));
  return rows;
}

// ---------------------------------------------------------------------------
// Reports.

namespace {

std::string Fmt(const json& v, const char* spec = "{:.4g}") {
  if (v.is_null()) return "-";
  if (v.is_number()) return fmt::format(fmt::runtime(spec), v.get<double>());
  return v.is_string() ? v.get<std::string>() : v.dump();
}

std::string UsageCell(const json& r) {
  std::string s;
  const auto& labels = r.at("actions");
  const auto& usage = r.at("usage");
  for (size_t k = 0; k < usage.size(); ++k) {
    if (k) s += " ";
    s += fmt::format("{}={:.2f}", labels[k].get<std::string>(),
                     usage[k].get<double>());
  }
  return s;
}

std::string MetricsTable(const std::vector<std::pair<std::string, json>>& rows) {
  std::string md =
      "| run | metric | score | accuracy | mean MACs | MACs / all-on | "
      "energy (J/segment) | usage |\n"
      "|---|---|---|---|---|---|---|---|\n";
  for (const auto& [name, r] : rows) {
    const double frac =
        r.at("mean_macs").get<double>() / r.at("all_on_macs").get<double>();
    md += fmt::format("| {} | {} | {} | {:.3f} | {:.0f} | {:.3f} | {} | {} |\n",
                      name, Fmt(r.at("metric")), Fmt(r.at("score")),
                      r.at("accuracy").get<double>(),
                      r.at("mean_macs").get<double>(), frac,
                      Fmt(r.at("mean_energy_j")), UsageCell(r));
  }
  return md;
}

void RunReport(const fs::path& in, const fs::path& out, bool plots) {
  const json report = ReadJsonFile((in / "report.json").string());
  std::vector<std::pair<std::string, json>> rows;
  rows.emplace_back("final (" + report.at("final").at("policy").get<std::string>() + ")",
                    report.at("final"));
  for (const auto& [k, v] : report.at("baselines").items()) rows.emplace_back(k, v);
  const fs::path eval_dir = in / "eval";
  if (fs::is_directory(eval_dir)) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(eval_dir))
      if (fs::exists(e.path() / "report.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      rows.emplace_back("eval/" + d.filename().string(),
                        ReadJsonFile((d / "report.json").string()).at("report"));
    }
  }

  std::string md = fmt::format("# Run summary: {}\n\n", in.filename().string());
  md += fmt::format("Task `{}`, preset `{}`, seed {}, stages completed {}.\n\n",
                    report.at("task").get<std::string>(),
                    report.at("preset").get<std::string>(),
                    report.at("seed").get<uint64_t>(),
                    report.at("stages_completed").dump());
  md += "## Test split\n\n" + MetricsTable(rows) + "\n";
  std::vector<std::pair<std::string, json>> stage_rows;
  for (const auto& [k, v] : report.at("stages").items())
    stage_rows.emplace_back("after stage " + k, v);
  md += "## After each stage\n\n" + MetricsTable(stage_rows) + "\n";
  if (!report.at("snr_sweep").empty()) {
    md += "## Audio noise sweep\n\n| SNR (dB) | policy | accuracy | usage |\n"
          "|---|---|---|---|\n";
    for (const auto& s : report.at("snr_sweep")) {
      for (const char* k : {"learned", "all_on"}) {
        if (!s.contains(k)) continue;
        md += fmt::format("| {} | {} | {:.3f} | {} |\n", Fmt(s.at("snr_db")), k,
                          s.at(k).at("accuracy").get<double>(),
                          UsageCell(s.at(k)));
      }
    }
    md += "\n";
  }

  if (plots) {
    svg::Chart scatter{"Accuracy vs energy", "energy per segment (J)",
                       "accuracy", {}};
    for (const auto& [name, r] : rows) {
      scatter.series.push_back({name,
                                {r.at("mean_energy_j").get<double>()},
                                {r.at("accuracy").get<double>()},
                                false,
                                {}});
    }
    svg::Write(scatter, (out / "accuracy_vs_energy.svg").string());

    // Usage per action against SNR, clean data drawn at the highest SNR + 10.
    const json& sweep = report.at("snr_sweep");
    const bool learned = report.at("final").at("policy") == "learned";
    if (learned && !sweep.empty()) {
      std::vector<std::pair<double, json>> pts;
      double top = -1e300;
      for (const auto& s : sweep) {
        pts.emplace_back(s.at("snr_db").get<double>(), s.at("learned"));
        top = std::max(top, s.at("snr_db").get<double>());
      }
      pts.emplace_back(top + 10.0, report.at("final"));
      std::sort(pts.begin(), pts.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
      svg::Chart uc{"Usage over audio SNR (rightmost point: clean)",
                    "SNR (dB)", "usage fraction", {}};
      const auto& labels = report.at("final").at("actions");
      for (size_t k = 0; k < labels.size(); ++k) {
        svg::Series s{labels[k].get<std::string>(), {}, {}, true, {}};
        for (const auto& [x, r] : pts) {
          s.x.push_back(x);
          s.y.push_back(r.at("usage")[k].get<double>());
        }
        uc.series.push_back(s);
      }
      svg::Write(uc, (out / "usage_vs_snr.svg").string());
    }

    std::ifstream lf(in / "losses.csv");
    if (lf) {
      std::string line;
      std::getline(lf, line);
      svg::Chart lc{"Training losses per step", "step", "loss", {}};
      const char* names[] = {"l1", "kd", "gt", "phi", "policy", "theta"};
      for (const char* n : names) lc.series.push_back({n, {}, {}, true, {}});
      while (std::getline(lf, line)) {
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
        if (v.size() < 8) continue;
        for (int k = 0; k < 6; ++k) {
          if (v[2 + k] == 0.0) continue;
          lc.series[k].x.push_back(v[0]);
          lc.series[k].y.push_back(v[2 + k]);
        }
      }
      std::erase_if(lc.series, [](const svg::Series& s) { return s.x.empty(); });
      svg::Write(lc, (out / "loss_curves.svg").string());
    }
    md += "## Figures\n\n";
    for (const char* f :
         {"accuracy_vs_energy.svg", "usage_vs_snr.svg", "loss_curves.svg"}) {
      if (fs::exists(out / f)) md += fmt::format("![{0}]({0})\n", f);
    }
  }
  WriteFile((out / "summary.md").string(), md);
}

void AblationReport(const fs::path& in, const fs::path& out, bool plots) {
  const json doc = ReadJsonFile((in / "ablation.json").string());
  std::string md = fmt::format("# Ablation summary: {}\n\n", in.filename().string());
  md += "| point |";
  for (const auto& k : doc.at("keys")) md += " " + k.get<std::string>() + " |";
  md += " accuracy | all-on accuracy | MACs / all-on | energy (J/segment) | usage |\n|";
  for (size_t i = 0; i < doc.at("keys").size() + 6; ++i) md += "---|";
  md += "\n";
  svg::Series pts{"grid points", {}, {}, false, {}};
  for (const auto& r : doc.at("rows")) {
    md += "| " + r.at("point").get<std::string>() + " |";
    for (const auto& k : doc.at("keys"))
      md += " " + r.at("params").at(k.get<std::string>()).dump() + " |";
    std::string usage;
    const auto& labels = doc.at("actions");
    for (size_t k = 0; k < labels.size(); ++k) {
      usage += fmt::format("{}{}={:.2f}", k ? " " : "",
                           labels[k].get<std::string>(),
                           r.at("usage")[k].get<double>());
    }
    md += fmt::format(" {:.3f} | {:.3f} | {:.3f} | {} | {} |\n",
                      r.at("accuracy").get<double>(),
                      r.at("all_on_accuracy").get<double>(),
                      r.at("macs_fraction").get<double>(),
                      Fmt(r.at("mean_energy_j")), usage);
    pts.x.push_back(r.at("mean_energy_j").get<double>());
    pts.y.push_back(r.at("accuracy").get<double>());
    pts.labels.push_back(r.at("point").get<std::string>());
  }
  if (plots) {
    svg::Chart c{"Accuracy vs energy per grid point", "energy per segment (J)",
                 "accuracy", {pts}};
    svg::Write(c, (out / "accuracy_vs_energy.svg").string());
    md += "\n![accuracy_vs_energy.svg](accuracy_vs_energy.svg)\n";
  }
  WriteFile((out / "summary.md").string(), md);
}

}  // namespace

void WriteReport(const std::string& input_dir, const std::string& out_dir,
                 bool plots) {
  const fs::path in(input_dir), out(out_dir);
  const bool ablation = fs::exists(in / "ablation.json");
  if (!ablation && !fs::exists(in / "report.json")) {
    throw IoError(fmt::format(
        "{} holds neither report.json nor ablation.json", input_dir));
  }
  if (fs::exists(out) && fs::exists(in) && fs::equivalent(in, out)) {
    throw ConfigError("the report directory must differ from its input");
  }
  MakeDirs(out);
  if (ablation) {
    AblationReport(in, out, plots);
  } else {
    RunReport(in, out, plots);
  }
}

}  // namespace adaptsense
