#include "physfed/app/commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "physfed/app/gradcheck.hpp"
#include "physfed/error.hpp"
#include "physfed/parallel.hpp"

#ifndef PHYSFED_VERSION
#define PHYSFED_VERSION "0.1.0-unknown"
#endif

namespace physfed::app {

namespace {

constexpr int kUnseenIdBase = 1000;
constexpr double kPgmLevel = 0.4;
constexpr double kPgmWidth = 0.8;

std::ostream& sink(const CommandOptions& opts) { return opts.out != nullptr ? *opts.out : std::cout; }

unsigned apply_threads(const CommandOptions& opts) {
  const unsigned n = opts.threads != 0 ? opts.threads : std::max(1u, std::thread::hardware_concurrency());
  set_max_threads(n);
  return n;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

ClientSpec spec_for(const ClientEntry& c, const ExperimentConfig& cfg) {
  ClientSpec s;
  s.client_id = c.client_id;
  s.protocol = c.protocol;
  s.train_seeds = c.train_seeds;
  s.test_seeds = c.test_seeds;
  s.train_slices = c.train_slices;
  s.test_slices = c.test_slices;
  s.image_size = cfg.dataset.image_size;
  s.noise_seed = c.noise_seed;
  s.electronic_variance = cfg.dataset.electronic_variance;
  return s;
}

ClientSpec spec_for_unseen(const UnseenEntry& u, std::size_t index, const ExperimentConfig& cfg) {
  ClientSpec s;
  s.client_id = kUnseenIdBase + static_cast<int>(index) + 1;
  s.protocol = u.protocol;
  s.test_seeds = u.test_seeds;
  s.test_slices = u.slices;
  s.train_slices = 0;
  s.image_size = cfg.dataset.image_size;
  s.noise_seed = u.noise_seed;
  s.electronic_variance = cfg.dataset.electronic_variance;
  return s;
}

MinMaxStats known_stats(const ExperimentConfig& cfg) {
  const auto known = cfg.known_protocols();
  try {
    return protocol_stats(known);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::DegenerateColumn && known.size() == 1) {
      // A single client has no spread; every column normalizes to zero.
      auto lo = known[0].as_vector();
      auto hi = lo;
      for (auto& v : hi) v += 1.0;
      return MinMaxStats(lo, hi);
    }
    throw;
  }
}

void write_metrics_file(const std::filesystem::path& path, std::span<const MetricRecord> rows) {
  std::ostringstream os;
  write_metrics_header(os);
  for (const auto& r : rows) write_metric_row(os, r);
  write_text(path, os.str());
}

}  // namespace

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::Config:
    case ErrorCode::InvalidArgument:
    case ErrorCode::DegenerateColumn:
    case ErrorCode::SeedCollision:
    case ErrorCode::InsufficientCoverage:
    case ErrorCode::EmptyList:
      return kExitConfig;
    default:
      return kExitRuntime;
  }
}

std::filesystem::path RunPaths::client_data(int client_id) const { return data() / fmt::format("client_{}", client_id); }

RunPaths paths_for(const ExperimentConfig& cfg) { return RunPaths{cfg.output_dir}; }

std::string version_string() { return PHYSFED_VERSION; }

void write_run_echo(const std::filesystem::path& dir, const ExperimentConfig& cfg, const std::string& command,
                    unsigned threads) {
  ensure_dir(dir);
  write_text(dir / "resolved_config.yaml", emit_config(cfg));
  std::ostringstream os;
  os << "command: " << command << '\n';
  os << "version: " << version_string() << '\n';
  os << "seed: " << cfg.seed << '\n';
  os << "federation_seed: " << cfg.federation.seed << '\n';
  os << "threads: " << threads << '\n';
  os << "config: resolved_config.yaml\n";
  write_text(dir / "run_manifest.txt", os.str());
}

std::vector<ClientState> load_clients(const ExperimentConfig& cfg, const ReportProvider& provider) {
  const auto paths = paths_for(cfg);
  const auto stats = known_stats(cfg);
  std::vector<ClientState> clients;
  for (const auto& c : cfg.dataset.clients) {
    const auto dir = paths.client_data(c.client_id);
    if (!std::filesystem::exists(dir / "manifest.csv")) {
      throw Error(ErrorCode::Io, fmt::format("no dataset for client {} in {}; run 'simulate' first", c.client_id, dir.string()));
    }
    auto ds = load_dataset(dir, c.client_id);
    if (!(ds.protocol == c.protocol)) {
      throw Error(ErrorCode::Config, fmt::format("dataset of client {} was simulated with a different protocol", c.client_id));
    }
    clients.push_back(make_client_state(std::move(ds), stats, provider));
  }
  return clients;
}

TrainedState trained_from_checkpoint(const Checkpoint& ckpt, const ExperimentConfig& cfg) {
  if (!(ckpt.config == cfg.model)) throw Error(ErrorCode::Config, "checkpoint model shape differs from the config");
  TrainedState t;
  t.model = ckpt.config;
  t.flags = ckpt.flags;
  t.params = ckpt.params;
  const auto stats = known_stats(cfg);
  for (const auto& c : cfg.dataset.clients) {
    t.client_ids.push_back(c.client_id);
    t.g_hats.push_back(normalize_protocol(c.protocol, stats));
    t.codes[c.client_id] = evaluate_scanning(t.params.hs, t.g_hats.back()).code;
  }
  return t;
}

Protocol perturb_protocol(const Protocol& p, double fraction) {
  auto v = p.as_vector();
  for (std::size_t k = 0; k < v.size(); ++k) v[k] *= k % 2 == 0 ? 1.0 + fraction : 1.0 - fraction;
  Protocol q;
  q.nv = static_cast<int>(std::lround(v[0]));
  q.ndb = static_cast<int>(std::lround(v[1]));
  q.pl = v[2];
  q.dbl = v[3];
  q.dsr = v[4];
  q.ddr = v[5];
  q.pn = v[6];
  q.validate();
  return q;
}

int cmd_simulate(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const unsigned threads = apply_threads(opts);
  const auto paths = paths_for(cfg);
  ensure_dir(paths.data());
  SeedRegistry registry;
  std::ostringstream manifest;
  manifest << "client_id,nv,ndb,pl,dbl,dsr,ddr,pn,n_train,n_test\n";
  for (const auto& c : cfg.dataset.clients) {
    const auto ds = build_client_dataset(spec_for(c, cfg), &registry);
    save_dataset(paths.client_data(c.client_id), ds);
    const auto& p = c.protocol;
    manifest << std::setprecision(17) << c.client_id << ',' << p.nv << ',' << p.ndb << ',' << p.pl << ',' << p.dbl << ','
             << p.dsr << ',' << p.ddr << ',' << p.pn << ',' << ds.count(Split::Train) << ',' << ds.count(Split::Test) << '\n';
    sink(opts) << fmt::format("simulated client {}: {} train / {} test slices\n", c.client_id, ds.count(Split::Train),
                              ds.count(Split::Test));
  }
  write_text(paths.data() / "manifest.csv", manifest.str());
  write_run_echo(paths.data(), cfg, "simulate", threads);
  return kExitOk;
}

int cmd_train(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const unsigned threads = apply_threads(opts);
  const auto paths = paths_for(cfg);
  const auto provider = make_provider(cfg.provider);
  auto clients = load_clients(cfg, *provider);
  const auto dir = paths.train();
  ensure_dir(dir);
  write_run_echo(dir, cfg, "train", threads);

  std::vector<MetricRecord> inputs;
  for (const auto& c : clients) {
    inputs.push_back(evaluate_inputs(c, Split::Train));
    inputs.push_back(evaluate_inputs(c, Split::Test));
  }
  write_metrics_file(dir / "input_metrics.csv", inputs);

  {
    auto init_clients = clients;
    const auto shared = initial_state(init_clients, cfg.federation, cfg.model);
    save_checkpoint(paths.init_checkpoint(), Checkpoint{cfg.model, cfg.federation.ablation, assemble(shared, init_clients)});
  }

  const auto metrics_path = dir / "metrics.csv";
  std::filesystem::remove(metrics_path);
  write_metrics_file(metrics_path, {});
  auto hook = [&](const RoundView& v) {
    append_metrics_csv(metrics_path, v.metrics);
    double mean = 0.0;
    for (const auto& m : v.metrics) mean += m.psnr_mean / static_cast<double>(v.metrics.size());
    sink(opts) << fmt::format("round {:>4}: mean test PSNR {:.3f} dB\n", v.round, mean);
    if (cfg.checkpoint_every > 0 && v.round % cfg.checkpoint_every == 0) {
      save_checkpoint(dir / fmt::format("checkpoint_round_{:04d}.pfm", v.round),
                      Checkpoint{cfg.model, cfg.federation.ablation, assemble(v.shared, v.clients)});
    }
  };
  const auto trained = run_federation(clients, cfg.federation, cfg.model, hook);
  save_checkpoint(paths.final_checkpoint(), Checkpoint{cfg.model, cfg.federation.ablation, trained.params});

  std::ostringstream cos;
  cos << "round,max_abs_cosine\n" << std::setprecision(17);
  for (std::size_t r = 0; r < trained.max_code_cosine.size(); ++r) cos << r << ',' << trained.max_code_cosine[r] << '\n';
  write_text(dir / "code_cosine.csv", cos.str());

  const auto known = cfg.known_protocols();
  save_codebook(dir / "codebook.txt", build_codebook(trained, known));
  sink(opts) << fmt::format("wrote {}\n", dir.string());
  return kExitOk;
}

int cmd_eval(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const unsigned threads = apply_threads(opts);
  const auto paths = paths_for(cfg);
  const auto ckpt = load_checkpoint(opts.checkpoint.value_or(paths.final_checkpoint()));
  const auto trained = trained_from_checkpoint(ckpt, cfg);
  const auto provider = make_provider(cfg.provider);
  const auto clients = load_clients(cfg, *provider);
  const auto ids = cfg.client_ids();
  for (int id : opts.clients) {
    if (std::find(ids.begin(), ids.end(), id) == ids.end()) {
      throw Error(ErrorCode::UnknownClient, fmt::format("client {} is not in the config", id));
    }
  }
  const auto dir = paths.eval();
  ensure_dir(dir);
  write_run_echo(dir, cfg, "eval", threads);

  std::vector<MetricRecord> rows;
  for (const auto& c : clients) {
    if (!opts.clients.empty() && std::find(opts.clients.begin(), opts.clients.end(), c.client_id) == opts.clients.end()) continue;
    const auto rec = evaluate_client(trained.params, trained.model, trained.flags, c, Split::Test, 0);
    rows.push_back(rec);
    sink(opts) << fmt::format("client {}: PSNR {:.3f} dB, SSIM {:.4f} over {} test slices\n", c.client_id, rec.psnr_mean,
                              rec.ssim_mean, rec.n_samples);
    if (!opts.dump_images) continue;
    const auto img_dir = dir / "images" / fmt::format("client_{}", c.client_id);
    ensure_dir(img_dir);
    for (std::size_t i = 0; i < c.dataset.samples.size(); ++i) {
      const auto& s = c.dataset.samples[i];
      if (s.split != Split::Test) continue;
      const auto pred = predict(trained.params, trained.model, s.low_dose_norm, c.g_hat, c.features[i], c.client_id, trained.flags);
      save_pgm(img_dir / fmt::format("sample_{:04d}_pred.pgm", i), pred, kPgmLevel, kPgmWidth);
      save_pgm(img_dir / fmt::format("sample_{:04d}_input.pgm", i), s.low_dose_norm, kPgmLevel, kPgmWidth);
      save_pgm(img_dir / fmt::format("sample_{:04d}_ref.pgm", i), s.reference_norm, kPgmLevel, kPgmWidth);
    }
  }
  write_metrics_file(dir / "metrics.csv", rows);
  return kExitOk;
}

int cmd_infer_unseen(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const unsigned threads = apply_threads(opts);
  const auto paths = paths_for(cfg);
  if (cfg.unseen.empty()) throw Error(ErrorCode::Config, "config lists no unseen protocols");
  const auto ckpt = load_checkpoint(opts.checkpoint.value_or(paths.final_checkpoint()));
  const auto trained = trained_from_checkpoint(ckpt, cfg);
  const auto known = cfg.known_protocols();
  const auto book = build_codebook(trained, known);

  // The dump written at training time must describe the same codes.
  const auto dump = paths.train() / "codebook.txt";
  if (!opts.checkpoint && std::filesystem::exists(dump)) {
    std::ifstream in(dump);
    const auto stored = read_codebook_codes(in);
    bool same = stored.size() == book.entries().size();
    for (std::size_t k = 0; same && k < stored.size(); ++k) {
      same = stored[k].first == book.entries()[k].client_id && stored[k].second == book.entries()[k].code;
    }
    if (!same) throw Error(ErrorCode::Config, dump.string() + " does not match the checkpoint; retrain or pass --checkpoint");
  }

  const auto provider = make_provider(cfg.provider);
  const auto dir = paths.unseen();
  ensure_dir(dir);
  write_run_echo(dir, cfg, "infer-unseen", threads);

  SeedRegistry registry;
  for (const auto& c : cfg.dataset.clients) {
    std::vector<std::uint64_t> seeds = c.train_seeds;
    seeds.insert(seeds.end(), c.test_seeds.begin(), c.test_seeds.end());
    registry.claim(c.client_id, seeds);
  }

  std::ostringstream report;
  report << kUnseenReportHeader << '\n' << std::setprecision(17);
  for (std::size_t k = 0; k < cfg.unseen.size(); ++k) {
    const auto& u = cfg.unseen[k];
    const auto spec = spec_for_unseen(u, k, cfg);
    const auto ds = build_client_dataset(spec, &registry);
    save_dataset(dir / "data" / fmt::format("unseen_{}", k + 1), ds);
    const auto match = route_protocol(trained, book, u.protocol);
    std::vector<double> p(ds.samples.size());
    std::vector<double> q(ds.samples.size());
    std::vector<double> base(ds.samples.size());
    parallel_for(ds.samples.size(), [&](std::size_t i) {
      const auto& s = ds.samples[i];
      const auto f_t = provider->feature(s.low_dose_norm, s.metadata).values;
      const auto res = infer_unseen(trained, book, s.low_dose_norm, u.protocol, f_t);
      p[i] = psnr(res.prediction, s.reference_norm);
      q[i] = ssim(res.prediction, s.reference_norm);
      base[i] = psnr(s.low_dose_norm, s.reference_norm);
    });
    const double n = static_cast<double>(ds.samples.size());
    const double pm = std::accumulate(p.begin(), p.end(), 0.0) / n;
    const double qm = std::accumulate(q.begin(), q.end(), 0.0) / n;
    const double bm = std::accumulate(base.begin(), base.end(), 0.0) / n;
    const auto& g = u.protocol;
    report << k + 1 << ',' << g.nv << ',' << g.ndb << ',' << g.pl << ',' << g.dbl << ',' << g.dsr << ',' << g.ddr << ',' << g.pn
           << ',' << match.client_id << ',' << match.distance << ',' << pm << ',' << qm << ',' << bm << ',' << ds.samples.size()
           << '\n';
    sink(opts) << fmt::format("unseen {}: matched client {} (distance {:.6g}), PSNR {:.3f} dB (input {:.3f}), SSIM {:.4f}\n", k + 1,
                              match.client_id, match.distance, pm, bm, qm);
  }
  write_text(dir / "report.csv", report.str());
  return kExitOk;
}

int cmd_dump_codebook(const ExperimentConfig& cfg, const CommandOptions& opts) {
  const unsigned threads = apply_threads(opts);
  const auto paths = paths_for(cfg);
  const auto ckpt = load_checkpoint(opts.checkpoint.value_or(paths.final_checkpoint()));
  const auto trained = trained_from_checkpoint(ckpt, cfg);
  const auto book = build_codebook(trained, cfg.known_protocols());
  const auto dir = paths.codebook();
  ensure_dir(dir);
  write_run_echo(dir, cfg, "dump-codebook", threads);
  save_codebook(dir / "codebook.txt", book);
  write_codebook(sink(opts), book);
  return kExitOk;
}

int cmd_gradcheck(const CommandOptions& opts, const std::optional<std::filesystem::path>& out_dir) {
  apply_threads(opts);
  const auto previous = ad::injected_fault();
  if (opts.inject_fault) ad::inject_fault(ad::Fault::ConvTransposedKernel);
  std::vector<GradcheckResult> results;
  try {
    results = run_gradcheck_suite();
  } catch (...) {
    ad::inject_fault(previous);
    throw;
  }
  ad::inject_fault(previous);

  std::ostringstream os;
  bool all = true;
  for (const auto& r : results) {
    for (const auto& e : r.report.entries) {
      os << fmt::format("{:<7} {:<20} {:<12} max_rel_error {:.3e}\n", e.pass ? "PASS" : "FAIL", r.name, e.name, e.max_rel_error);
    }
    all = all && r.report.pass;
  }
  os << (all ? "gradcheck: all checks passed\n" : "gradcheck: FAILURES detected\n");
  sink(opts) << os.str();
  if (out_dir) {
    ensure_dir(*out_dir);
    write_text(*out_dir / "gradcheck_report.txt", os.str());
  }
  return all ? kExitOk : kExitRuntime;
}

}  // namespace physfed::app
