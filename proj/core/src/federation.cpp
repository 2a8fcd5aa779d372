#include "physfed/federation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>

#include <fmt/format.h>

#include "physfed/error.hpp"
#include "physfed/parallel.hpp"
#include "physfed/random.hpp"

namespace physfed {

using ad::Tensor;
using ad::Var;

namespace {

void require_same_keys(const ParamSet& a, const ParamSet& b, const char* part) {
  if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, fmt::format("aggregate: {} parameter count differs", part));
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape() != ib->second.shape()) {
      throw Error(ErrorCode::ShapeMismatch, fmt::format("aggregate: {} parameter '{}' does not match '{}'", part, ia->first, ib->first));
    }
  }
}

ParamSet combine(std::span<const SharedPartition> snaps, std::span<const double> frac,
                 const ParamSet& (*pick)(const SharedPartition&)) {
  ParamSet out = pick(snaps[0]);
  for (auto& [name, t] : out) {
    auto& dst = t.data();
    const auto& base = pick(snaps[0]).at(name).data();
    for (std::size_t k = 1; k < snaps.size(); ++k) {
      const auto& src = pick(snaps[k]).at(name).data();
      for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += frac[k] * (src[e] - base[e]);
    }
  }
  return out;
}

std::map<std::string, Tensor> collect(const BoundParams& bound, const ad::Gradients& grads) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, var] : bound.vars()) out.emplace(name, grads.of(var));
  return out;
}

std::vector<std::size_t> train_indices(const ClientDataset& ds) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    if (ds.samples[i].split == Split::Train) idx.push_back(i);
  return idx;
}

std::vector<Tensor> codes_for(const ParamSet& hs, std::span<const NormalizedProtocol> all_g) {
  std::vector<Tensor> codes;
  for (const auto& g : all_g) codes.push_back(evaluate_code(hs, g));
  return codes;
}

}  // namespace

void FederationConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, "federation config: " + what); };
  if (rounds < 1) fail("rounds must be >= 1");
  if (local_epochs < 1) fail("local_epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(adam.lr >= 0) || !std::isfinite(adam.lr)) fail("lr must be finite and >= 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) fail("Adam betas must lie in [0, 1)");
  if (!(adam.eps > 0)) fail("Adam eps must be positive");
  if (!(loss.tau >= 0)) fail("tau must be >= 0");
}

void AdamState::clear() {
  m.clear();
  v.clear();
  step = 0;
}

ClientState make_client_state(ClientDataset dataset, const MinMaxStats& stats, const ReportProvider& provider) {
  if (dataset.samples.empty()) throw Error(ErrorCode::EmptySet, fmt::format("client {} has no samples", dataset.client_id));
  ClientState c;
  c.client_id = dataset.client_id;
  c.g_hat = normalize_protocol(dataset.protocol, stats);
  c.features.resize(dataset.samples.size());
  parallel_for(dataset.samples.size(), [&](std::size_t i) {
    const auto& s = dataset.samples[i];
    c.features[i] = provider.feature(s.low_dose_norm, s.metadata).values;
  });
  c.dataset = std::move(dataset);
  return c;
}

SharedPartition aggregate(std::span<const SharedPartition> snapshots, std::span<const double> weights) {
  if (snapshots.empty()) throw Error(ErrorCode::EmptySet, "aggregate: no snapshots");
  if (weights.size() != snapshots.size()) throw Error(ErrorCode::ShapeMismatch, "aggregate: one weight per snapshot required");
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0) || !std::isfinite(w)) throw Error(ErrorCode::InvalidArgument, "aggregate: weights must be positive");
    total += w;
  }
  const auto& first = snapshots[0];
  for (const auto& s : snapshots) {
    require_same_keys(first.encoder, s.encoder, "encoder");
    require_same_keys(first.hs, s.hs, "hs");
    require_same_keys(first.ha, s.ha, "ha");
    if (first.decoder.has_value() != s.decoder.has_value()) throw Error(ErrorCode::ShapeMismatch, "aggregate: decoder presence differs");
    if (first.decoder) require_same_keys(*first.decoder, *s.decoder, "decoder");
  }
  std::vector<double> frac(weights.size());
  for (std::size_t k = 0; k < weights.size(); ++k) frac[k] = weights[k] / total;

  SharedPartition out;
  out.encoder = combine(snapshots, frac, [](const SharedPartition& s) -> const ParamSet& { return s.encoder; });
  out.hs = combine(snapshots, frac, [](const SharedPartition& s) -> const ParamSet& { return s.hs; });
  out.ha = combine(snapshots, frac, [](const SharedPartition& s) -> const ParamSet& { return s.ha; });
  if (first.decoder) {
    out.decoder = combine(snapshots, frac, [](const SharedPartition& s) -> const ParamSet& { return *s.decoder; });
  }
  return out;
}

void adam_step(ParamSet& params, const std::map<std::string, Tensor>& grads, const std::string& prefix, AdamState& state,
               const AdamConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    const std::string key = prefix + name;
    auto [mit, m_new] = state.m.try_emplace(key, Tensor(p.shape()));
    auto [vit, v_new] = state.v.try_emplace(key, Tensor(p.shape()));
    auto& m = mit->second.data();
    auto& v = vit->second.data();
    auto& w = p.data();
    for (std::size_t e = 0; e < w.size(); ++e) {
      m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g[e];
      v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g[e] * g[e];
      const double mhat = m[e] / bc1;
      const double vhat = v[e] / bc2;
      w[e] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

LocalResult local_train(const SharedPartition& shared, ClientState& client, const FederationConfig& cfg,
                        const ModelConfig& model, std::span<const NormalizedProtocol> all_g, std::size_t self,
                        int round) {
  const auto& flags = cfg.ablation;
  const auto indices = train_indices(client.dataset);
  if (indices.empty()) throw Error(ErrorCode::EmptySet, fmt::format("client {} has no training samples", client.client_id));
  if (self >= all_g.size()) throw Error(ErrorCode::IndexOutOfRange, "local_train: client position outside protocol list");
  if (flags.generic_decoder != shared.decoder.has_value()) {
    throw Error(ErrorCode::InvalidArgument, "local_train: shared decoder must be present exactly in generic mode");
  }
  const bool use_orth = !cfg.disable_orth && cfg.loss.tau > 0.0 && all_g.size() > 1;

  LocalResult result;
  result.shared = shared;
  auto& w = result.shared;
  ParamSet& decoder = flags.generic_decoder ? *w.decoder : client.decoder;
  double loss_sum = 0.0;

  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    auto order = indices;
    SplitMixEngine eng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(client.client_id), static_cast<std::uint64_t>(round),
                                              static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), eng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      ad::Tape tape;
      const BoundParams enc(tape, w.encoder);
      const BoundParams hs(tape, w.hs);
      const BoundParams ha(tape, w.ha);
      const BoundParams dec(tape, decoder);
      const Var g = tape.leaf(protocol_tensor(client.g_hat));
      Var mse_total;
      for (std::size_t b = start; b < stop; ++b) {
        const Sample& s = client.dataset.samples[order[b]];
        const auto& ft = client.features[order[b]];
        const Var x = tape.leaf(image_tensor(s.low_dose_norm));
        const Var y = tape.leaf(image_tensor(s.reference_norm));
        const Var f = tape.leaf(Tensor({1, static_cast<int>(ft.size())}, ft));
        const auto graph = forward(enc, hs, ha, dec, model, x, g, f, flags);
        const Var l = mse_loss(graph.prediction, y);
        mse_total = mse_total.tape == nullptr ? l : ad::add(mse_total, l);
      }
      Var loss = ad::scale(mse_total, 1.0 / static_cast<double>(stop - start));
      if (use_orth) {
        std::vector<Var> codes;
        for (const auto& gk : all_g) codes.push_back(scanning_code(hs, tape.leaf(protocol_tensor(gk))));
        loss = ad::add(loss, ad::scale(orth_loss(codes, self), cfg.loss.tau));
      }
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw Error(ErrorCode::NonFiniteLoss,
                    fmt::format("client {} round {} epoch {} step {}: loss is {}", client.client_id, round, epoch, result.steps, value));
      }
      const auto grads = tape.backward(loss);
      ++client.adam.step;
      adam_step(w.encoder, collect(enc, grads), "enc/", client.adam, cfg.adam);
      adam_step(w.hs, collect(hs, grads), "hs/", client.adam, cfg.adam);
      adam_step(w.ha, collect(ha, grads), "ha/", client.adam, cfg.adam);
      adam_step(decoder, collect(dec, grads), "dec/", client.adam, cfg.adam);
      loss_sum += value;
      ++result.steps;
    }
  }
  result.mean_loss = loss_sum / result.steps;
  return result;
}

ModelParameters assemble(const SharedPartition& shared, std::span<const ClientState> clients) {
  ModelParameters p;
  p.encoder = shared.encoder;
  p.hs = shared.hs;
  p.ha = shared.ha;
  if (shared.decoder) {
    p.decoders[kSharedDecoder] = *shared.decoder;
  } else {
    for (const auto& c : clients) p.decoders[c.client_id] = c.decoder;
  }
  return p;
}

MetricRecord evaluate_client(const ModelParameters& params, const ModelConfig& model, const AblationFlags& flags,
                             const ClientState& client, Split split, int round) {
  params.decoder(flags.generic_decoder ? kSharedDecoder : client.client_id);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < client.dataset.samples.size(); ++i)
    if (client.dataset.samples[i].split == split) idx.push_back(i);
  std::vector<double> p(idx.size());
  std::vector<double> q(idx.size());
  parallel_for(idx.size(), [&](std::size_t k) {
    const Sample& s = client.dataset.samples[idx[k]];
    const auto pred = physfed::predict(params, model, s.low_dose_norm, client.g_hat, client.features[idx[k]], client.client_id, flags);
    p[k] = psnr(pred, s.reference_norm);
    q[k] = ssim(pred, s.reference_norm);
  });
  MetricRecord r;
  r.client_id = client.client_id;
  r.round = round;
  r.split = split;
  r.n_samples = idx.size();
  if (!idx.empty()) {
    r.psnr_mean = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(idx.size());
    r.ssim_mean = std::accumulate(q.begin(), q.end(), 0.0) / static_cast<double>(idx.size());
  }
  return r;
}

MetricRecord evaluate_inputs(const ClientState& client, Split split) {
  MetricRecord r;
  r.client_id = client.client_id;
  r.split = split;
  double ps = 0.0;
  double ss = 0.0;
  for (const auto& s : client.dataset.samples) {
    if (s.split != split) continue;
    ps += psnr(s.low_dose_norm, s.reference_norm);
    ss += ssim(s.low_dose_norm, s.reference_norm);
    ++r.n_samples;
  }
  if (r.n_samples > 0) {
    r.psnr_mean = ps / static_cast<double>(r.n_samples);
    r.ssim_mean = ss / static_cast<double>(r.n_samples);
  }
  return r;
}

double max_abs_pairwise_cosine(std::span<const Tensor> codes) {
  double worst = 0.0;
  for (std::size_t i = 0; i < codes.size(); ++i)
    for (std::size_t j = i + 1; j < codes.size(); ++j) {
      double d = 0.0;
      double ni = 0.0;
      double nj = 0.0;
      for (std::size_t e = 0; e < codes[i].size(); ++e) {
        d += codes[i][e] * codes[j][e];
        ni += codes[i][e] * codes[i][e];
        nj += codes[j][e] * codes[j][e];
      }
      const double denom = std::max(std::sqrt(ni) * std::sqrt(nj), 1e-12);
      worst = std::max(worst, std::abs(d) / denom);
    }
  return worst;
}

SharedPartition initial_state(std::vector<ClientState>& clients, const FederationConfig& cfg, const ModelConfig& model) {
  std::vector<int> ids;
  if (cfg.ablation.generic_decoder) {
    ids.push_back(kSharedDecoder);
  } else {
    for (const auto& c : clients) ids.push_back(c.client_id);
  }
  const auto init = init_params(model, derive_seed(cfg.seed, {0x6d6f64656c}), ids);
  SharedPartition shared{init.encoder, init.hs, init.ha, std::nullopt};
  if (cfg.ablation.generic_decoder) {
    shared.decoder = init.decoders.at(kSharedDecoder);
  } else {
    for (auto& c : clients) c.decoder = init.decoders.at(c.client_id);
  }
  for (auto& c : clients) {
    c.adam.clear();
    c.shared = shared;
  }
  return shared;
}

TrainedState run_federation(std::vector<ClientState>& clients, const FederationConfig& cfg, const ModelConfig& model,
                            const RoundHook& on_round) {
  cfg.validate();
  model.validate();
  if (clients.empty()) throw Error(ErrorCode::EmptySet, "run_federation: no clients");
  for (std::size_t i = 0; i < clients.size(); ++i)
    for (std::size_t j = i + 1; j < clients.size(); ++j)
      if (clients[i].client_id == clients[j].client_id) {
        throw Error(ErrorCode::InvalidArgument, fmt::format("duplicate client id {}", clients[i].client_id));
      }

  TrainedState out;
  out.model = model;
  out.flags = cfg.ablation;
  std::vector<double> weights;
  for (const auto& c : clients) {
    out.client_ids.push_back(c.client_id);
    out.g_hats.push_back(c.g_hat);
    weights.push_back(static_cast<double>(c.dataset.count(Split::Train)));
  }

  SharedPartition shared = initial_state(clients, cfg, model);
  out.max_code_cosine.push_back(max_abs_pairwise_cosine(codes_for(shared.hs, out.g_hats)));

  for (int round = 1; round <= cfg.rounds; ++round) {
    std::vector<LocalResult> results(clients.size());
    std::vector<std::exception_ptr> failures(clients.size());
    parallel_for(clients.size(), [&](std::size_t k) {
      try {
        if (cfg.reset_moments) clients[k].adam.clear();
        results[k] = local_train(clients[k].shared, clients[k], cfg, model, out.g_hats, k, round);
      } catch (...) {
        failures[k] = std::current_exception();
      }
    });
    // Lowest failing client decides, independent of scheduling.
    for (const auto& f : failures)
      if (f) std::rethrow_exception(f);

    std::vector<SharedPartition> snaps;
    snaps.reserve(results.size());
    for (auto& r : results) snaps.push_back(std::move(r.shared));
    shared = aggregate(snaps, weights);
    for (auto& c : clients) c.shared = shared;

    const auto params = assemble(shared, clients);
    std::vector<MetricRecord> metrics;
    for (const auto& c : clients) metrics.push_back(evaluate_client(params, model, cfg.ablation, c, Split::Test, round));
    out.history.insert(out.history.end(), metrics.begin(), metrics.end());
    out.max_code_cosine.push_back(max_abs_pairwise_cosine(codes_for(shared.hs, out.g_hats)));
    if (on_round) on_round(RoundView{round, shared, clients, metrics});
  }

  out.params = assemble(shared, clients);
  for (std::size_t k = 0; k < clients.size(); ++k) {
    out.codes[clients[k].client_id] = evaluate_scanning(shared.hs, out.g_hats[k]).code;
  }
  return out;
}

}  // namespace physfed
