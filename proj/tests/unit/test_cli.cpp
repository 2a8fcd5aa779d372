#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "physfed/app/commands.hpp"
#include "physfed/app/config.hpp"
#include "physfed/app/gradcheck.hpp"
#include "physfed/error.hpp"
#include "physfed/objective.hpp"

using namespace physfed;
using namespace physfed::app;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::InvalidArgument;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("physfed_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string protocol_yaml(const Protocol& p) {
  return fmt::format("{{nv: {}, ndb: {}, pl: {}, dbl: {}, dsr: {}, ddr: {}, pn: {}}}", p.nv, p.ndb, p.pl, p.dbl, p.dsr, p.ddr, p.pn);
}

std::string tiny_yaml(const fs::path& out, const std::string& unseen = "    - builtin: 1\n") {
  return fmt::format(R"(name: tiny
seed: 3
output_dir: {}
dataset:
  image_size: 16
  train_patients: 1
  test_patients: 1
  train_slices: 2
  test_slices: 2
  clients:
    - builtin: 2
    - builtin: 7
model:
  channels: 4
  report_dim: 16
  hidden_dim: 8
  code_dim: 4
  n_heads: 2
  token_count: 2
federation:
  rounds: 2
  local_epochs: 1
  batch_size: 2
  lr: 0.001
  tau: 0.01
provider:
  kind: stub
unseen:
  protocols:
{})",
                     out.string(), unseen);
}

CommandOptions quiet(unsigned threads = 1) {
  static std::ostringstream sink;
  CommandOptions o;
  o.threads = threads;
  o.out = &sink;
  return o;
}

}  // namespace

TEST(Config, PresetsResolve) {
  const auto names = preset_names();
  ASSERT_EQ(names, (std::vector<std::string>{"desk4", "paper8"}));
  const auto desk = preset_config("desk4");
  EXPECT_EQ(desk.client_ids(), (std::vector<int>{2, 3, 6, 7}));
  EXPECT_EQ(desk.dataset.image_size, 64);
  EXPECT_EQ(desk.federation.rounds, 30);
  EXPECT_EQ(desk.unseen.size(), 4u);
  const auto paper = preset_config("paper8");
  EXPECT_EQ(paper.client_ids(), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8}));
  const auto table_a = builtin_known_protocols();
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(paper.dataset.clients[k].protocol, table_a[k]);
  EXPECT_EQ(code_of([] { preset_text("nope"); }), ErrorCode::Config);
}

TEST(Config, PresetFilesMatchBuiltins) {
  const fs::path dir = PHYSFED_PRESET_DIR;
  for (const auto& name : preset_names()) {
    EXPECT_EQ(read_file(dir / (name + ".yaml")), preset_text(name)) << name;
  }
  EXPECT_NO_THROW(load_config(dir / "smoke.yaml"));
}

TEST(Config, EmitParsesBackToSameConfig) {
  for (const auto& name : preset_names()) {
    const auto a = preset_config(name);
    const auto text = emit_config(a);
    const auto b = parse_config_text(text);
    EXPECT_EQ(emit_config(b), text) << name;
    ASSERT_EQ(a.dataset.clients.size(), b.dataset.clients.size());
    for (std::size_t k = 0; k < a.dataset.clients.size(); ++k) {
      EXPECT_EQ(a.dataset.clients[k].train_seeds, b.dataset.clients[k].train_seeds);
      EXPECT_EQ(a.dataset.clients[k].noise_seed, b.dataset.clients[k].noise_seed);
      EXPECT_EQ(a.dataset.clients[k].protocol, b.dataset.clients[k].protocol);
    }
  }
}

TEST(Config, DerivedSeedsAreDistinctAndFollowGlobalSeed) {
  const auto a = preset_config("desk4");
  std::set<std::uint64_t> seen;
  for (const auto& c : a.dataset.clients) {
    for (auto s : c.train_seeds) EXPECT_TRUE(seen.insert(s).second);
    for (auto s : c.test_seeds) EXPECT_TRUE(seen.insert(s).second);
  }
  Overrides ov;
  ov.seed = 99;
  const auto b = preset_config("desk4", ov);
  EXPECT_EQ(b.seed, 99u);
  EXPECT_EQ(b.federation.seed, 99u);
  EXPECT_NE(a.dataset.clients[0].train_seeds, b.dataset.clients[0].train_seeds);
}

TEST(Config, Overrides) {
  Overrides ov;
  ov.output_dir = "/tmp/elsewhere";
  ov.generic = true;
  const auto cfg = preset_config("desk4", ov);
  EXPECT_EQ(cfg.output_dir, fs::path("/tmp/elsewhere"));
  EXPECT_TRUE(cfg.federation.ablation.generic_decoder);
  EXPECT_TRUE(cfg.federation.ablation.disable_scanning);
  EXPECT_TRUE(cfg.federation.ablation.disable_anatomy);
}

TEST(Config, ValidationErrors) {
  const std::string base = tiny_yaml("/tmp/x");
  auto with = [&](const std::string& from, const std::string& to) {
    auto s = base;
    const auto pos = s.find(from);
    EXPECT_NE(pos, std::string::npos) << from;
    return s.replace(pos, from.size(), to);
  };
  const std::vector<std::string> bad = {
      "name: [unclosed",
      with("seed: 3", "seed: 3\nbogus: 1"),
      with("    - builtin: 7", "    - builtin: 2"),
      with("    - builtin: 7", "    - builtin: 9"),
      with("    - builtin: 7", "    - protocol: {nv: 10}"),
      with("  channels: 4", "  channels: 4\n  image_size: 32"),
      with("  kind: stub", "  kind: stub\n  dim: 32"),
      with("  kind: stub", "  kind: carrier-pigeon"),
      with("  rounds: 2", "  rounds: 0"),
      with("  rounds: 2", "  rounds: two"),
      with("  image_size: 16", "  image_size: 8"),
      with("    - builtin: 1\n", "    - builtin: 5\n"),
  };
  for (const auto& text : bad) {
    EXPECT_EQ(code_of([&] { parse_config_text(text); }), ErrorCode::Config) << text;
  }
  EXPECT_EQ(code_of([] { load_config("/nonexistent/config.yaml"); }), ErrorCode::Config);
}

TEST(Exit, CodesAreStable) {
  EXPECT_EQ(exit_code_for(ErrorCode::Config), 1);
  EXPECT_EQ(exit_code_for(ErrorCode::InvalidArgument), 1);
  EXPECT_EQ(exit_code_for(ErrorCode::SeedCollision), 1);
  EXPECT_EQ(exit_code_for(ErrorCode::UnknownClient), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::Timeout), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::VersionMismatch), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::NonFiniteLoss), 2);
}

TEST(Perturb, AlternatesSignAndRounds) {
  const auto p = builtin_known_protocols()[2];
  const auto q = perturb_protocol(p, 0.05);
  EXPECT_EQ(q.nv, static_cast<int>(std::lround(p.nv * 1.05)));
  EXPECT_EQ(q.ndb, static_cast<int>(std::lround(p.ndb * 0.95)));
  EXPECT_DOUBLE_EQ(q.pl, p.pl * 1.05);
  EXPECT_DOUBLE_EQ(q.dbl, p.dbl * 0.95);
  EXPECT_DOUBLE_EQ(q.dsr, p.dsr * 1.05);
  EXPECT_DOUBLE_EQ(q.ddr, p.ddr * 0.95);
  EXPECT_DOUBLE_EQ(q.pn, p.pn * 1.05);
  EXPECT_EQ(perturb_protocol(p, 0.0), p);
}

TEST(Gradcheck, SuitePassesAndReportsEveryOp) {
  const auto results = run_gradcheck_suite();
  ASSERT_FALSE(results.empty());
  std::set<std::string> names;
  for (const auto& r : results) {
    names.insert(r.name);
    EXPECT_TRUE(r.report.pass) << r.name;
    for (const auto& e : r.report.entries) EXPECT_LE(e.max_rel_error, 1e-4) << r.name << ' ' << e.name;
  }
  EXPECT_EQ(names.size(), results.size());
}

TEST(Gradcheck, CommandWritesReportAndFlagsInjectedFault) {
  const auto dir = scratch("gradcheck");
  EXPECT_EQ(cmd_gradcheck(quiet(), dir), kExitOk);
  const auto report = lines_of(dir / "gradcheck_report.txt");
  ASSERT_FALSE(report.empty());
  EXPECT_EQ(report.back(), "gradcheck: all checks passed");
  for (std::size_t i = 0; i + 1 < report.size(); ++i) {
    EXPECT_EQ(report[i].rfind("PASS", 0), 0u) << report[i];
    EXPECT_NE(report[i].find("max_rel_error"), std::string::npos);
  }
  auto faulty = quiet();
  faulty.inject_fault = true;
  EXPECT_EQ(cmd_gradcheck(faulty, dir), kExitRuntime);
  EXPECT_EQ(lines_of(dir / "gradcheck_report.txt").back(), "gradcheck: FAILURES detected");
  EXPECT_EQ(ad::injected_fault(), ad::Fault::None);
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch("pipeline");
    const auto known = builtin_known_protocols();
    cfg_ = parse_config_text(tiny_yaml(root_, "    - builtin: 1\n    - protocol: " + protocol_yaml(known[1]) + "\n"));
    ASSERT_EQ(cmd_simulate(cfg_, quiet()), kExitOk);
    ASSERT_EQ(cmd_train(cfg_, quiet()), kExitOk);
  }
  static inline fs::path root_;
  static inline ExperimentConfig cfg_;
};

TEST_F(Pipeline, SimulateWritesOneDirectoryPerClientAndIsIdempotent) {
  const auto paths = paths_for(cfg_);
  for (int id : cfg_.client_ids()) EXPECT_TRUE(fs::exists(paths.client_data(id)));
  EXPECT_EQ(lines_of(paths.data() / "manifest.csv").size(), 3u);
  std::map<fs::path, std::string> before;
  for (const auto& e : fs::recursive_directory_iterator(paths.data()))
    if (e.is_regular_file()) before[e.path()] = read_file(e.path());
  ASSERT_EQ(cmd_simulate(cfg_, quiet()), kExitOk);
  for (const auto& [p, bytes] : before) EXPECT_EQ(read_file(p), bytes) << p;
}

TEST_F(Pipeline, TrainEmitsOneRowPerClientAndRound) {
  const auto paths = paths_for(cfg_);
  const auto rows = lines_of(paths.train() / "metrics.csv");
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows[0], kMetricsCsvHeader);
  std::map<int, int> per_client;
  for (std::size_t i = 1; i < rows.size(); ++i) ++per_client[std::stoi(split_csv(rows[i])[0])];
  for (int id : cfg_.client_ids()) EXPECT_EQ(per_client[id], cfg_.federation.rounds);
  EXPECT_TRUE(fs::exists(paths.final_checkpoint()));
  EXPECT_TRUE(fs::exists(paths.train() / "codebook.txt"));
  EXPECT_EQ(parse_config_text(read_file(paths.train() / "resolved_config.yaml")).seed, cfg_.seed);
}

TEST_F(Pipeline, IdentityCheckpointReproducesInputMetrics) {
  auto o = quiet();
  o.checkpoint = paths_for(cfg_).init_checkpoint();
  ASSERT_EQ(cmd_eval(cfg_, o), kExitOk);
  const auto eval = lines_of(paths_for(cfg_).eval() / "metrics.csv");
  const auto inputs = lines_of(paths_for(cfg_).train() / "input_metrics.csv");
  EXPECT_EQ(eval[0], kMetricsCsvHeader);
  int matched = 0;
  for (std::size_t i = 1; i < eval.size(); ++i) {
    const auto e = split_csv(eval[i]);
    for (std::size_t j = 1; j < inputs.size(); ++j) {
      const auto in = split_csv(inputs[j]);
      if (in[0] != e[0] || in[2] != e[2]) continue;
      EXPECT_EQ(in[3], e[3]);
      EXPECT_EQ(in[4], e[4]);
      ++matched;
    }
  }
  EXPECT_EQ(matched, 2);
}

TEST_F(Pipeline, DumpImagesWritesThreePgmsPerSample) {
  auto o = quiet();
  o.dump_images = true;
  o.clients = {7};
  ASSERT_EQ(cmd_eval(cfg_, o), kExitOk);
  const auto dir = paths_for(cfg_).eval() / "images" / "client_7";
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ".pgm";
  EXPECT_EQ(n, 3 * 2);
  EXPECT_EQ(lines_of(paths_for(cfg_).eval() / "metrics.csv").size(), 2u);
}

TEST_F(Pipeline, EvalErrors) {
  auto o = quiet();
  o.clients = {5};
  EXPECT_EQ(code_of([&] { cmd_eval(cfg_, o); }), ErrorCode::UnknownClient);
  const auto bogus = root_ / "bogus.pfm";
  std::ofstream(bogus) << "NOTACHECKPOINT";
  auto b = quiet();
  b.checkpoint = bogus;
  EXPECT_EQ(code_of([&] { cmd_eval(cfg_, b); }), ErrorCode::VersionMismatch);
}

TEST_F(Pipeline, UnseenReportRoutesKnownProtocolAtZeroDistance) {
  ASSERT_EQ(cmd_infer_unseen(cfg_, quiet()), kExitOk);
  const auto rows = lines_of(paths_for(cfg_).unseen() / "report.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], kUnseenReportHeader);
  const auto exact = split_csv(rows[2]);
  EXPECT_EQ(exact[8], "2");
  EXPECT_EQ(std::stod(exact[9]), 0.0);
}

TEST_F(Pipeline, DumpCodebookMatchesTrainingDump) {
  ASSERT_EQ(cmd_dump_codebook(cfg_, quiet()), kExitOk);
  EXPECT_EQ(read_file(paths_for(cfg_).codebook() / "codebook.txt"), read_file(paths_for(cfg_).train() / "codebook.txt"));
}

TEST(Reproducibility, SingleThreadRunsAreByteIdentical) {
  std::vector<std::map<std::string, std::string>> runs;
  for (int rep = 0; rep < 2; ++rep) {
    const auto dir = scratch(fmt::format("repro{}", rep));
    const auto cfg = parse_config_text(tiny_yaml(dir));
    ASSERT_EQ(cmd_simulate(cfg, quiet()), kExitOk);
    ASSERT_EQ(cmd_train(cfg, quiet()), kExitOk);
    std::map<std::string, std::string> files;
    for (const auto& e : fs::directory_iterator(paths_for(cfg).train())) {
      const auto ext = e.path().extension();
      if (ext == ".csv" || ext == ".pfm" || ext == ".txt") files[e.path().filename().string()] = read_file(e.path());
    }
    runs.push_back(std::move(files));
  }
  ASSERT_EQ(runs[0].size(), runs[1].size());
  for (const auto& [name, bytes] : runs[0]) {
    if (name == "run_manifest.txt") continue;
    EXPECT_EQ(runs[1].at(name), bytes) << name;
  }
}
