// Acceptance runner: one PASS/FAIL line per criterion.
//
//   physfed_acceptance [--work DIR] [--reuse] [--train-desk4] [criterion numbers...]
//
// With no numbers every criterion runs. Criteria 5, 6 and 7 share the desk4
// runs, which are trained once per invocation; --reuse picks up finished runs
// in the work directory whose resolved config matches.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "physfed/app/commands.hpp"
#include "physfed/app/config.hpp"
#include "physfed/ctphys.hpp"
#include "physfed/error.hpp"
#include "physfed/federation.hpp"
#include "physfed/objective.hpp"
#include "physfed/phantom.hpp"
#include "physfed/pvqs.hpp"
#include "physfed/reportfeat.hpp"

using namespace physfed;
using namespace physfed::app;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Recorded from the first validated desk4 run (seed 7, 30 rounds); printed
// next to the fresh numbers so drift is visible.
constexpr double kRecordedFullPsnr = 45.549;
constexpr double kRecordedGenericPsnr = 45.261;
constexpr double kRecordedInputPsnr = 40.321;

constexpr double kMinGainOverInput = 2.0;
constexpr double kPerturbPsnrWindow = 1.0;

class Verdict {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool pass() const { return failures_.empty(); }
  const std::vector<std::string>& failures() const { return failures_; }
  const std::vector<std::string>& notes() const { return notes_; }

 private:
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

template <typename Fn>
std::optional<ErrorCode> error_code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(std::move(cells));
  }
  return rows;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

CommandOptions quiet_opts(unsigned threads = 0) {
  static std::ostringstream sink;
  CommandOptions o;
  o.threads = threads;
  o.out = &sink;
  return o;
}

// ---------------------------------------------------------------------------
// Shared desk4 runs

struct Desk4 {
  ExperimentConfig full;
  ExperimentConfig generic;
  double train_seconds = 0.0;
};

bool finished_run(const ExperimentConfig& cfg) {
  const auto dir = paths_for(cfg).train();
  return fs::exists(paths_for(cfg).final_checkpoint()) && fs::exists(dir / "resolved_config.yaml") &&
         read_file(dir / "resolved_config.yaml") == emit_config(cfg);
}

Desk4 train_desk4(const fs::path& work, bool reuse) {
  Desk4 d;
  Overrides ov;
  ov.output_dir = work / "desk4_full";
  d.full = preset_config("desk4", ov);
  Overrides gv;
  gv.output_dir = work / "desk4_generic";
  gv.generic = true;
  d.generic = preset_config("desk4", gv);
  const auto t0 = Clock::now();
  for (const auto* cfg : {&d.full, &d.generic}) {
    if (reuse && finished_run(*cfg)) continue;
    fs::remove_all(cfg->output_dir);
    if (cmd_simulate(*cfg, quiet_opts()) != kExitOk) throw Error(ErrorCode::Io, "desk4 simulate failed");
    std::cout << fmt::format("  training desk4 ({})...", cfg->federation.ablation.generic_decoder ? "generic" : "full")
              << std::flush;
    const auto t = Clock::now();
    if (cmd_train(*cfg, quiet_opts()) != kExitOk) throw Error(ErrorCode::Io, "desk4 train failed");
    std::cout << fmt::format(" {:.0f} s\n", seconds_since(t));
  }
  d.train_seconds = seconds_since(t0);
  return d;
}

double final_mean_test_psnr(const ExperimentConfig& cfg) {
  const auto rows = read_csv(paths_for(cfg).train() / "metrics.csv");
  double sum = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    if (std::stoi(r[1]) == cfg.federation.rounds && r[2] == "test") {
      sum += std::stod(r[3]);
      ++n;
    }
  }
  if (n == 0) throw Error(ErrorCode::Io, "no final-round test rows in metrics.csv");
  return sum / n;
}

double input_mean_test_psnr(const ExperimentConfig& cfg) {
  const auto rows = read_csv(paths_for(cfg).train() / "input_metrics.csv");
  double sum = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    if (r[2] == "test") {
      sum += std::stod(r[3]);
      ++n;
    }
  }
  return sum / n;
}

// ---------------------------------------------------------------------------
// Small configs for criteria 9 and 10

std::string small_yaml(const fs::path& out, const std::string& provider_block) {
  return fmt::format(R"(name: small
seed: 11
output_dir: {}
dataset:
  image_size: 32
  train_patients: 1
  test_patients: 1
  train_slices: 3
  test_slices: 2
  clients:
    - builtin: 2
    - builtin: 5
    - builtin: 7
model:
  channels: 8
  report_dim: 16
  hidden_dim: 8
  code_dim: 4
  n_heads: 2
  token_count: 2
federation:
  rounds: 3
  local_epochs: 1
  batch_size: 2
  lr: 0.001
  tau: 0.01
provider:
{})",
                     out.string(), provider_block);
}

std::map<std::string, std::string> run_artifacts(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(paths_for(cfg).train())) {
    const auto ext = e.path().extension();
    if (ext == ".csv" || ext == ".pfm" || e.path().filename() == "codebook.txt") {
      out[e.path().filename().string()] = read_file(e.path());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Criteria

Verdict criterion_1() {
  Verdict v;
  const auto t0 = Clock::now();
  std::ostringstream report;
  auto opts = quiet_opts();
  opts.out = &report;
  const int rc = cmd_gradcheck(opts);
  const double secs = seconds_since(t0);
  v.expect(rc == kExitOk, "gradcheck reported failures");
  v.expect(secs < 120.0, fmt::format("runtime {:.1f} s exceeds 2 min", secs));
  int checks = 0;
  double worst = 0.0;
  std::istringstream in(report.str());
  for (std::string line; std::getline(in, line);) {
    const auto pos = line.find("max_rel_error ");
    if (pos == std::string::npos) continue;
    ++checks;
    worst = std::max(worst, std::stod(line.substr(pos + 14)));
  }
  v.expect(checks > 0, "report lists no checks");
  v.note(fmt::format("{} checks, worst relative error {:.2e}, {:.1f} s", checks, worst, secs));
  return v;
}

ImageGrid disk_image(int n, double pl, double r, double mu) {
  ImageGrid img(n, pl);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double x = (j + 0.5 - 0.5 * n) * pl;
      const double y = (0.5 * n - i - 0.5) * pl;
      if (x * x + y * y <= r * r) img.at(i, j) = mu;
    }
  return img;
}

Verdict criterion_2() {
  Verdict v;
  const auto t0 = Clock::now();
  // Noise-free 360-view, 768-bin FBP of a 64x64 phantom.
  const auto phantom = generate_patient(2024, BodyPart::Abdomen, 1, 32.0);
  const auto ref = rasterize(phantom[0], 64, 1.0).image;
  const Protocol full{360, 768, 1.0, 1.2, 500, 400, 1e5};
  const auto geo = derive_geometry(full, 64);
  const auto rec = fbp_reconstruct(forward_project(ref, geo), geo);
  const double q = psnr(normalize_image(rec), normalize_image(ref));
  v.expect(q >= 25.0, fmt::format("FBP PSNR {:.2f} dB < 25 dB", q));

  // Centered disk: the central ray's integral is the chord 2 r mu.
  const double mu = 0.02, r = 20.0;
  const auto disk = disk_image(64, 1.0, r, mu);
  const auto dgeo = derive_geometry(Protocol{8, 257, 1.0, 1.0, 500, 400, 1e5}, 64);
  const auto sino = forward_project(disk, dgeo);
  double chord_err = 0.0;
  for (int k = 0; k < dgeo.views(); ++k) chord_err = std::max(chord_err, std::abs(sino.at(k, 128) - 2 * r * mu));
  // Rasterization tolerance: one pixel of boundary at each end.
  v.expect(chord_err <= 1e-6 * 2 * r * mu + 2 * mu * 1.0, fmt::format("chord error {:.3e}", chord_err));

  // Poisson counts: mean of I0 exp(-y) over 1e5 draws at y = 1.
  Sinogram clean(100, 1000);
  std::fill(clean.data.begin(), clean.data.end(), 1.0);
  const NoiseConfig noise{1e5, 10.0, 1.0};
  const auto noisy = simulate_low_dose(clean, noise, 77);
  double acc = 0.0;
  for (double y : noisy.data) acc += noise.photon_count * std::exp(-y);
  const double mean = acc / static_cast<double>(noisy.data.size());
  const double expect = 1e5 * std::exp(-1.0);
  const double rel = std::abs(mean - expect) / expect;
  v.expect(rel <= 0.005, fmt::format("count mean off by {:.3f}%", 100 * rel));
  const double secs = seconds_since(t0);
  v.expect(secs < 180.0, fmt::format("runtime {:.1f} s exceeds 3 min", secs));
  v.note(fmt::format("FBP {:.2f} dB, chord error {:.2e}, count mean error {:.4f}%, {:.1f} s", q, chord_err, 100 * rel, secs));
  return v;
}

// The five component combinations of the ablation grid: generic, scanning
// only, anatomy only, both, both with the orthogonality loss.
struct AblationRow {
  AblationFlags flags;
  bool disable_orth;
};
const std::vector<AblationRow> kAblationGrid{{{true, true, true}, true},
                                             {{false, true, false}, true},
                                             {{true, false, false}, true},
                                             {{false, false, false}, true},
                                             {{false, false, false}, false}};

Verdict criterion_3(const ExperimentConfig& desk) {
  Verdict v;
  const StubProvider provider(desk.provider);
  const auto base_clients = load_clients(desk, provider);
  const auto t0 = Clock::now();
  std::size_t images = 0;
  for (std::size_t row = 0; row < kAblationGrid.size(); ++row) {
    auto fed = desk.federation;
    fed.ablation = kAblationGrid[row].flags;
    fed.disable_orth = kAblationGrid[row].disable_orth;
    auto clients = base_clients;
    const auto shared = initial_state(clients, fed, desk.model);
    const auto params = assemble(shared, clients);
    for (const auto& c : clients) {
      for (std::size_t i = 0; i < c.dataset.samples.size(); ++i) {
        const auto& s = c.dataset.samples[i];
        const auto out = predict(params, desk.model, s.low_dose_norm, c.g_hat, c.features[i], c.client_id, fed.ablation);
        ++images;
        if (out.data != s.low_dose_norm.data) {
          v.expect(false, fmt::format("row {} client {} sample {} is not the identity", row + 1, c.client_id, i));
        }
      }
      for (auto split : {Split::Train, Split::Test}) {
        const auto a = evaluate_client(params, desk.model, fed.ablation, c, split, 0);
        const auto b = evaluate_inputs(c, split);
        v.expect(a.psnr_mean == b.psnr_mean && a.ssim_mean == b.ssim_mean,
                 fmt::format("row {} client {}: metrics differ from the input metrics", row + 1, c.client_id));
      }
    }
  }
  const double secs = seconds_since(t0);
  v.expect(secs < 60.0, fmt::format("runtime {:.1f} s exceeds 1 min", secs));
  v.note(fmt::format("{} images over {} configurations bit-exact, {:.1f} s", images, kAblationGrid.size(), secs));
  return v;
}

std::vector<ClientState> tiny_clients(std::vector<int> ids) {
  const auto known = builtin_known_protocols();
  const MinMaxStats stats = protocol_stats(known);
  ProviderConfig pc;
  pc.dim = 16;
  pc.stub_seed = 3;
  const StubProvider provider(pc);
  std::vector<ClientState> out;
  for (int id : ids) {
    ClientSpec spec;
    spec.client_id = id;
    spec.protocol = known[static_cast<std::size_t>(id - 1)];
    const auto base = 100 * static_cast<std::uint64_t>(id);
    spec.train_seeds = {base, base + 1};
    spec.test_seeds = {base + 2};
    spec.train_slices = 2;
    spec.test_slices = 1;
    spec.image_size = 16;
    spec.noise_seed = base;
    out.push_back(make_client_state(build_client_dataset(spec), stats, provider));
  }
  return out;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.channels = 4;
  m.report_dim = 16;
  m.hidden_dim = 8;
  m.code_dim = 4;
  m.n_heads = 2;
  m.token_count = 2;
  m.image_size = 16;
  return m;
}

SharedPartition filled_partition(double a, double b) {
  SharedPartition p;
  p.encoder["w"] = ad::Tensor({3}, {a, b, a - b});
  p.hs["w"] = ad::Tensor({2}, {b, -a});
  p.ha["w"] = ad::Tensor({1}, {a * b});
  return p;
}

Verdict criterion_4() {
  Verdict v;
  const auto t0 = Clock::now();
  // Fixed point: aggregating identical snapshots returns them unchanged.
  const auto p = filled_partition(0.1234567, -7.1);
  const std::vector<SharedPartition> same{p, p, p};
  const std::vector<double> w_same{3, 1, 7};
  v.expect(aggregate(same, w_same) == p, "aggregation of identical snapshots is not a fixed point");
  // Weighted average: (1*0 + 3*4) / 4 = 3 and (2*2 + 4*4 + 2*8) / 8 = 4.5.
  const std::vector<SharedPartition> two{filled_partition(0, 0), filled_partition(4, 4)};
  const std::vector<double> w13{1, 3};
  const auto avg = aggregate(two, w13);
  v.expect(avg.encoder.at("w")[0] == 3.0 && avg.hs.at("w")[1] == -3.0, "weights 1:3 do not give 3");
  const std::vector<SharedPartition> three{filled_partition(2, 0), filled_partition(4, 0), filled_partition(8, 0)};
  const std::vector<double> w242{2, 4, 2};
  v.expect(aggregate(three, w242).encoder.at("w")[0] == 4.5, "weights 2:4:2 do not give 4.5");

  // Partition law over real rounds.
  FederationConfig fed;
  fed.rounds = 3;
  fed.batch_size = 2;
  fed.seed = 17;
  auto clients = tiny_clients({2, 7});
  int rounds_seen = 0;
  run_federation(clients, fed, tiny_model(), [&](const RoundView& view) {
    ++rounds_seen;
    for (const auto& c : view.clients)
      v.expect(c.shared == view.shared, fmt::format("round {}: client {} holds a different shared partition", view.round, c.client_id));
    v.expect(view.clients[0].decoder != view.clients[1].decoder, fmt::format("round {}: decoders did not diverge", view.round));
  });
  v.expect(rounds_seen == fed.rounds, "round hook count");

  // K = 1 equals centralized training on that client.
  auto solo = tiny_clients({3});
  const auto federated = run_federation(solo, fed, tiny_model());
  auto central_clients = tiny_clients({3});
  auto shared = initial_state(central_clients, fed, tiny_model());
  const std::vector<NormalizedProtocol> g{central_clients[0].g_hat};
  for (int round = 1; round <= fed.rounds; ++round) {
    shared = local_train(shared, central_clients[0], fed, tiny_model(), g, 0, round).shared;
  }
  const auto central = assemble(shared, central_clients);
  v.expect(federated.params.encoder == central.encoder && federated.params.hs == central.hs &&
               federated.params.ha == central.ha && federated.params.decoders == central.decoders,
           "K = 1 federation differs from centralized training");
  const double secs = seconds_since(t0);
  v.expect(secs < 120.0, fmt::format("runtime {:.1f} s exceeds 2 min", secs));
  v.note(fmt::format("{:.1f} s", secs));
  return v;
}

Verdict criterion_5(const Desk4& d) {
  Verdict v;
  const double full = final_mean_test_psnr(d.full);
  const double generic = final_mean_test_psnr(d.generic);
  const double input = input_mean_test_psnr(d.full);
  v.expect(full - input >= kMinGainOverInput, fmt::format("gain over input {:.3f} dB < {} dB", full - input, kMinGainOverInput));
  v.expect(full >= generic, fmt::format("full {:.3f} dB below generic {:.3f} dB", full, generic));
  v.note(fmt::format("input {:.3f} dB, generic {:.3f} dB, full {:.3f} dB (recorded: {:.2f} / {:.3f} / {:.3f}); training {:.0f} s",
                     input, generic, full, kRecordedInputPsnr, kRecordedGenericPsnr, kRecordedFullPsnr, d.train_seconds));
  return v;
}

Verdict criterion_6(const Desk4& d) {
  Verdict v;
  const std::vector<std::vector<double>> basis{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  for (std::size_t i = 0; i < basis.size(); ++i) v.expect(orth_loss_value(basis, i) == 0.0, "orthonormal basis loss is not 0");
  const std::vector<std::vector<double>> worked{{1, 1}, {1, -1}, {2, 0}};
  v.expect(orth_loss_value(worked, 2) == 8.0, fmt::format("worked example gives {}", orth_loss_value(worked, 2)));

  std::mt19937_64 rng(9);
  std::normal_distribution<double> gauss(0, 1);
  std::vector<std::vector<double>> codes(4, std::vector<double>(6));
  for (auto& c : codes)
    for (auto& x : c) x = gauss(rng);
  double worst = 0.0;
  for (double k : {0.5, 2.0, 3.7}) {
    auto scaled = codes;
    for (auto& c : scaled)
      for (auto& x : c) x *= k;
    for (std::size_t i = 0; i < codes.size(); ++i) {
      const double base = orth_loss_value(codes, i);
      const double rel = std::abs(orth_loss_value(scaled, i) - std::pow(k, 4) * base) / std::abs(std::pow(k, 4) * base);
      worst = std::max(worst, rel);
    }
  }
  v.expect(worst <= 1e-10, fmt::format("degree-4 homogeneity relative error {:.2e}", worst));

  const auto rows = read_csv(paths_for(d.full).train() / "code_cosine.csv");
  v.expect(rows.size() == static_cast<std::size_t>(d.full.federation.rounds) + 1, "code_cosine.csv row count");
  const double first = std::stod(rows.front()[1]);
  const double last = std::stod(rows.back()[1]);
  v.expect(last < first, fmt::format("max |cos| did not fall: round 0 {:.4f}, round {} {:.4f}", first, rows.size() - 1, last));
  v.note(fmt::format("homogeneity error {:.1e}; max |cos| {:.4f} -> {:.4f}", worst, first, last));
  return v;
}

Verdict criterion_7(const Desk4& d) {
  Verdict v;
  const auto t0 = Clock::now();
  const auto& cfg = d.full;
  const auto trained = trained_from_checkpoint(load_checkpoint(paths_for(cfg).final_checkpoint()), cfg);
  const auto known = cfg.known_protocols();
  const auto book = build_codebook(trained, known);

  // Self-quantization and positive-scale invariance.
  for (const auto& e : book.entries()) {
    const auto q = quantize(book, e.code);
    v.expect(q.client_id == e.client_id && q.distance == 0.0, fmt::format("entry {} self-quantizes to ({}, {})", e.client_id, q.client_id, q.distance));
  }
  std::mt19937_64 rng(41);
  std::normal_distribution<double> gauss(0, 1);
  const std::size_t dim = book.entries().front().code.size();
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> c(dim);
    for (auto& x : c) x = gauss(rng);
    const int base = quantize(book, c).client_id;
    for (double k : {1e-3, 0.5, 7.0, 1e4}) {
      auto s = c;
      for (auto& x : s) x *= k;
      v.expect(quantize(book, s).client_id == base, fmt::format("scale {} changes the argmin", k));
    }
  }

  // A known protocol reproduces that client's own inference bit-exactly.
  const StubProvider provider(cfg.provider);
  const auto clients = load_clients(cfg, provider);
  for (std::size_t k = 0; k < clients.size(); ++k) {
    const auto& c = clients[k];
    for (std::size_t i = 0; i < c.dataset.samples.size(); ++i) {
      const auto& s = c.dataset.samples[i];
      if (s.split != Split::Test) continue;
      const auto r = infer_unseen(trained, book, s.low_dose_norm, known[k], c.features[i]);
      const auto own = predict(trained.params, trained.model, s.low_dose_norm, c.g_hat, c.features[i], c.client_id, trained.flags);
      v.expect(r.match.client_id == c.client_id && r.prediction.data == own.data,
               fmt::format("client {} sample {}: known protocol does not reproduce its inference", c.client_id, i));
    }
  }

  // +-5% perturbations of client #3 route to #3 and stay within 1 dB of its own test PSNR.
  const auto c3 = std::find_if(clients.begin(), clients.end(), [](const ClientState& c) { return c.client_id == 3; });
  const auto e3 = std::find_if(cfg.dataset.clients.begin(), cfg.dataset.clients.end(), [](const ClientEntry& e) { return e.client_id == 3; });
  if (c3 == clients.end() || e3 == cfg.dataset.clients.end()) {
    v.expect(false, "desk4 has no client #3");
  } else {
    const double own = evaluate_client(trained.params, trained.model, trained.flags, *c3, Split::Test, 0).psnr_mean;
    double own_input = 0.0;
    int own_n = 0;
    for (const auto& s : c3->dataset.samples) {
      if (s.split != Split::Test) continue;
      own_input += psnr(s.low_dose_norm, s.reference_norm);
      ++own_n;
    }
    std::string detail;
    for (double frac : {0.05, -0.05}) {
      const auto g = perturb_protocol(e3->protocol, frac);
      ClientSpec spec;
      spec.client_id = 1000;
      spec.protocol = g;
      // Keep #3's training patients too: body parts are assigned by patient index.
      spec.train_seeds = e3->train_seeds;
      spec.test_seeds = e3->test_seeds;
      spec.train_slices = e3->train_slices;
      spec.test_slices = e3->test_slices;
      spec.image_size = cfg.dataset.image_size;
      spec.noise_seed = e3->noise_seed + 1;
      spec.electronic_variance = cfg.dataset.electronic_variance;
      const auto ds = build_client_dataset(spec);
      double sum = 0.0;
      double input_sum = 0.0;
      int routed = 0;
      int n_test = 0;
      for (const auto& s : ds.samples) {
        if (s.split != Split::Test) continue;
        ++n_test;
        const auto f = provider.feature(s.low_dose_norm, s.metadata).values;
        const auto r = infer_unseen(trained, book, s.low_dose_norm, g, f);
        routed += r.match.client_id == 3;
        sum += psnr(r.prediction, s.reference_norm);
        input_sum += psnr(s.low_dose_norm, s.reference_norm);
      }
      const double mean = sum / n_test;
      v.expect(routed == n_test, fmt::format("{:+.0f}% perturbation routed away from #3", 100 * frac));
      v.expect(std::abs(mean - own) <= kPerturbPsnrWindow,
               fmt::format("{:+.0f}% perturbation PSNR {:.3f} dB vs #3 own {:.3f} dB", 100 * frac, mean, own));
      detail += fmt::format(" {:+.0f}%: {:.3f} dB (input {:.3f});", 100 * frac, mean,
                            input_sum / n_test);
    }
    v.note(fmt::format("#3 own {:.3f} dB (input {:.3f});{}", own, own_input / own_n, detail));
  }

  // Every Table B protocol routes without error.
  if (cmd_infer_unseen(cfg, quiet_opts()) != kExitOk) v.expect(false, "infer-unseen failed");
  const auto report = read_csv(paths_for(cfg).unseen() / "report.csv");
  v.expect(report.size() == builtin_unseen_protocols().size(), "unseen report row count");
  std::string routes;
  for (const auto& r : report) routes += fmt::format(" B{}->#{}", r[0], r[8]);
  const double secs = seconds_since(t0);
  v.expect(secs < 300.0, fmt::format("runtime {:.1f} s exceeds 5 min", secs));
  v.note(fmt::format("routes:{}; {:.1f} s", routes, secs));
  return v;
}

// Deterministic hash images; the reference values were produced by
// scikit-image (peak_signal_noise_ratio, structural_similarity with
// gaussian_weights, sigma 1.5, use_sample_covariance=False, data_range 1).
std::vector<double> hash_values(int n, std::uint64_t seed) {
  std::vector<double> out(static_cast<std::size_t>(n) * n);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t x = (i * 2654435761ULL + seed * 40503ULL + 12345ULL) & 0xffffffffULL;
    x ^= x >> 13;
    x = (x * 0x5bd1e995ULL) & 0xffffffffULL;
    x ^= x >> 15;
    out[i] = static_cast<double>(x) / 4294967296.0;
  }
  return out;
}

Verdict criterion_8() {
  Verdict v;
  struct Frozen {
    int n;
    std::uint64_t s1, s2;
    int k;
    double psnr, ssim;
  };
  const Frozen frozen[] = {
      {16, 1, 2, 0, 30.727151532001017, 0.9844348870252578},
      {24, 3, 4, 1, 30.721636468404697, 0.9820475548777807},
      {32, 5, 6, 2, 30.739955344414458, 0.9823144157549425},
      {32, 7, 8, 3, 30.758585454886926, 0.9837628690464694},
      {48, 9, 10, 4, 30.90512470831846, 0.984591760180885},
  };
  double worst_p = 0.0, worst_s = 0.0;
  for (const auto& f : frozen) {
    const auto a = hash_values(f.n, f.s1);
    const auto b = hash_values(f.n, f.s2);
    ImageGrid pred(f.n, 1.0), ref(f.n, 1.0);
    for (int y = 0; y < f.n; ++y)
      for (int x = 0; x < f.n; ++x) {
        const auto i = static_cast<std::size_t>(y) * f.n + x;
        ref.data[i] = 0.5 * a[i] + 0.25 * (1 + std::sin(x / 3.0 + f.k) * std::cos(y / 4.0));
        pred.data[i] = std::clamp(ref.data[i] + 0.1 * (b[i] - 0.5), 0.0, 1.0);
      }
    worst_p = std::max(worst_p, std::abs(psnr(pred, ref) - f.psnr));
    worst_s = std::max(worst_s, std::abs(ssim(pred, ref) - f.ssim));
    v.expect(std::isinf(psnr(ref, ref)) && psnr(ref, ref) > 0, "psnr(a, a) is not +inf");
    v.expect(ssim(ref, ref) == 1.0, "ssim(a, a) is not 1");
  }
  v.expect(worst_p <= 1e-6, fmt::format("PSNR off by {:.2e} dB", worst_p));
  v.expect(worst_s <= 1e-4, fmt::format("SSIM off by {:.2e}", worst_s));
  v.note(fmt::format("worst PSNR error {:.1e} dB, worst SSIM error {:.1e}", worst_p, worst_s));
  return v;
}

Verdict criterion_9(const fs::path& work) {
  Verdict v;
  // Stub determinism and sensitivity.
  ImageGrid img(16, 1.0);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>(i % 13) / 12.0;
  AnatomyMetadata meta;
  meta.tissue_fractions = {{TissueClass::Fat, 0.2}, {TissueClass::Soft, 0.3}, {TissueClass::Blood, 0.05}, {TissueClass::Bone, 0.1}};
  meta.lesion_count = 1;
  ProviderConfig pc;
  pc.dim = 16;
  pc.stub_seed = 5;
  const auto a = stub_feature(img, meta, pc);
  v.expect(a.values == stub_feature(img, meta, pc).values, "stub is not deterministic");
  double n2 = 0.0;
  for (double x : a.values) n2 += x * x;
  v.expect(std::abs(std::sqrt(n2) - 1.0) <= 1e-12, "stub feature is not unit norm");
  auto cos = [](const std::vector<double>& x, const std::vector<double>& y) {
    double d = 0, nx = 0, ny = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      d += x[i] * y[i];
      nx += x[i] * x[i];
      ny += y[i] * y[i];
    }
    return d / std::sqrt(nx * ny);
  };
  auto other_part = meta;
  other_part.body_part = BodyPart::Pelvis;
  v.expect(cos(a.values, stub_feature(img, other_part, pc).values) < 1.0, "body part does not change the feature");
  for (auto t : {TissueClass::Fat, TissueClass::Soft, TissueClass::Blood, TissueClass::Bone}) {
    auto m = meta;
    m.tissue_fractions[t] += 0.1;
    v.expect(cos(a.values, stub_feature(img, m, pc).values) < 1.0 - 1e-6, "tissue perturbation of 0.1 is invisible");
  }

  // Remote client against the mock server.
  auto remote = [](int port, int timeout_ms) {
    ProviderConfig r;
    r.kind = ProviderConfig::Kind::Remote;
    r.dim = 16;
    r.port = port;
    r.timeout_ms = timeout_ms;
    return r;
  };
  {
    MockServerOptions o;
    o.fixed_vector = std::vector<double>(16, 2.0);
    MockServer server(0, o);
    const auto f = remote_feature(img, remote(server.port(), 2000));
    bool ok = f.values.size() == 16;
    for (double x : f.values) ok = ok && std::abs(x - 0.25) < 1e-15;
    v.expect(ok, "echo does not return the normalized vector");
  }
  {
    MockServerOptions o;
    o.behavior = MockServerOptions::Behavior::Delay;
    o.delay_ms = 1500;
    MockServer server(0, o);
    const auto t0 = Clock::now();
    const auto code = error_code_of([&] { remote_feature(img, remote(server.port(), 300)); });
    const double ms = 1000 * seconds_since(t0);
    v.expect(code == ErrorCode::Timeout, "delayed server does not time out");
    v.expect(ms <= 400.0, fmt::format("timeout took {:.0f} ms", ms));
  }
  {
    MockServerOptions o;
    o.behavior = MockServerOptions::Behavior::Malform;
    MockServer server(0, o);
    v.expect(error_code_of([&] { remote_feature(img, remote(server.port(), 2000)); }) == ErrorCode::MalformedResponse,
             "malformed response not detected");
  }
  {
    MockServerOptions o;
    o.behavior = MockServerOptions::Behavior::ShortVector;
    MockServer server(0, o);
    v.expect(error_code_of([&] { remote_feature(img, remote(server.port(), 2000)); }) == ErrorCode::DimensionMismatch,
             "short vector not detected");
  }

  // Provider-agnostic training: the same run through the mock echoing stub vectors.
  const auto stub_cfg = parse_config_text(small_yaml(work / "provider_stub", "  kind: stub\n  stub_seed: 5\n"));
  fs::remove_all(stub_cfg.output_dir);
  cmd_simulate(stub_cfg, quiet_opts());
  cmd_train(stub_cfg, quiet_opts(1));
  const StubProvider stub(stub_cfg.provider);
  std::vector<std::pair<std::vector<double>, std::vector<double>>> table;
  for (const auto& c : load_clients(stub_cfg, stub)) {
    for (std::size_t i = 0; i < c.dataset.samples.size(); ++i) table.emplace_back(c.dataset.samples[i].low_dose_norm.data, c.features[i]);
  }
  MockServerOptions echo;
  echo.responder = [&table](const FeatureRequest& r) {
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> out;
    for (const auto& [pixels, f] : table) {
      double dist = 0.0;
      for (std::size_t k = 0; k < pixels.size(); ++k) dist += (pixels[k] - r.image.data[k]) * (pixels[k] - r.image.data[k]);
      if (dist < best) {
        best = dist;
        out = f;
      }
    }
    return out;
  };
  MockServer server(0, echo);
  const auto remote_cfg = parse_config_text(
      small_yaml(work / "provider_remote", fmt::format("  kind: remote\n  stub_seed: 5\n  port: {}\n", server.port())));
  fs::remove_all(remote_cfg.output_dir);
  cmd_simulate(remote_cfg, quiet_opts());
  cmd_train(remote_cfg, quiet_opts(1));
  const auto sa = run_artifacts(stub_cfg);
  const auto ra = run_artifacts(remote_cfg);
  v.expect(!sa.empty() && sa == ra, "stub and mock-remote runs differ");
  v.note(fmt::format("{} artifacts identical across providers; {} remote requests", sa.size(), server.requests_served()));
  return v;
}

Verdict criterion_10(const fs::path& work) {
  Verdict v;
  std::vector<std::map<std::string, std::string>> runs;
  for (int rep = 0; rep < 2; ++rep) {
    const auto cfg = parse_config_text(small_yaml(work / fmt::format("repro_{}", rep), "  kind: stub\n"));
    fs::remove_all(cfg.output_dir);
    cmd_simulate(cfg, quiet_opts(1));
    cmd_train(cfg, quiet_opts(1));
    runs.push_back(run_artifacts(cfg));
  }
  bool has_csv = false, has_ckpt = false;
  for (const auto& [name, bytes] : runs[0]) {
    has_csv = has_csv || name == "metrics.csv";
    has_ckpt = has_ckpt || name == "checkpoint_final.pfm";
    const auto it = runs[1].find(name);
    v.expect(it != runs[1].end() && it->second == bytes, name + " differs between runs");
  }
  v.expect(has_csv && has_ckpt, "metrics.csv or checkpoint_final.pfm missing");
  v.note(fmt::format("{} files byte-identical", runs[0].size()));
  return v;
}

const std::map<int, std::string> kTitles{
    {1, "gradient correctness"},  {2, "CT physics sanity"},      {3, "identity at init"},
    {4, "federation mechanics"},  {5, "desk-scale learning"},    {6, "orthogonality loss"},
    {7, "protocol quantization"}, {8, "metrics oracle"},         {9, "provider contract"},
    {10, "reproducibility"}};

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "physfed_acceptance";
  std::set<int> wanted;
  bool reuse = false;
  bool train_only = false;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (arg == "--reuse") {
      reuse = true;
    } else if (arg == "--train-desk4") {
      train_only = true;
    } else {
      try {
        wanted.insert(std::stoi(arg));
      } catch (const std::exception&) {
        std::cerr << "usage: physfed_acceptance [--work DIR] [--reuse] [--train-desk4] [criterion numbers...]\n";
        return 1;
      }
    }
  }
  fs::create_directories(work);
  if (train_only) {
    try {
      const auto d = train_desk4(work, reuse);
      std::cout << fmt::format("desk4 runs ready in {} ({:.0f} s)\n", work.string(), d.train_seconds);
      return 0;
    } catch (const std::exception& e) {
      std::cerr << "desk4 training failed: " << e.what() << '\n';
      return 1;
    }
  }
  if (wanted.empty())
    for (const auto& [k, _] : kTitles) wanted.insert(k);

  std::optional<Desk4> desk;
  auto need_desk = [&]() -> const Desk4& {
    if (!desk) desk = train_desk4(work, reuse);
    return *desk;
  };
  // Criterion 3 only needs the desk4 data, not the trained runs.
  auto desk_data = [&]() {
    Overrides ov;
    ov.output_dir = work / "desk4_data";
    const auto cfg = preset_config("desk4", ov);
    if (!fs::exists(paths_for(cfg).data() / "manifest.csv")) cmd_simulate(cfg, quiet_opts());
    return cfg;
  };

  const std::map<int, std::function<Verdict()>> checks{
      {1, [] { return criterion_1(); }},
      {2, [] { return criterion_2(); }},
      {3, [&] { return criterion_3(desk_data()); }},
      {4, [] { return criterion_4(); }},
      {5, [&] { return criterion_5(need_desk()); }},
      {6, [&] { return criterion_6(need_desk()); }},
      {7, [&] { return criterion_7(need_desk()); }},
      {8, [] { return criterion_8(); }},
      {9, [&] { return criterion_9(work); }},
      {10, [&] { return criterion_10(work); }},
  };

  int failed = 0;
  for (int k : wanted) {
    const auto it = checks.find(k);
    if (it == checks.end()) {
      std::cerr << "no criterion " << k << '\n';
      return 1;
    }
    Verdict v;
    try {
      v = it->second();
    } catch (const std::exception& e) {
      v.expect(false, std::string("threw: ") + e.what());
    }
    std::cout << fmt::format("criterion {:>2} {:<22} {}\n", k, kTitles.at(k), v.pass() ? "PASS" : "FAIL");
    for (const auto& n : v.notes()) std::cout << "    " << n << '\n';
    for (const auto& f : v.failures()) std::cout << "    failed: " << f << '\n';
    std::cout.flush();
    failed += !v.pass();
  }
  std::cout << fmt::format("{} of {} criteria passed\n", wanted.size() - static_cast<std::size_t>(failed), wanted.size());
  return failed == 0 ? 0 : 1;
}
