#include "physfed/app/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "physfed/error.hpp"
#include "physfed/random.hpp"

namespace physfed::app {

namespace {

constexpr std::uint64_t kPatientTag = 0x70617469656e74;
constexpr std::uint64_t kNoiseTag = 0x6e6f697365;
constexpr std::uint64_t kUnseenTag = 0x756e7365656e;

[[noreturn]] void fail(const std::string& msg) { throw Error(ErrorCode::Config, msg); }

void check_keys(const YAML::Node& node, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!node) return;
  if (!node.IsMap()) fail(where + " must be a mapping");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!ok.contains(key)) fail(fmt::format("unknown key '{}' in {}", key, where));
  }
}

template <typename T>
T get(const YAML::Node& node, const char* key, T fallback, const std::string& where) {
  if (!node || !node[key]) return fallback;
  try {
    return node[key].as<T>();
  } catch (const YAML::Exception&) {
    fail(fmt::format("{}.{} has the wrong type", where, key));
  }
}

template <typename T>
std::optional<T> get_opt(const YAML::Node& node, const char* key, const std::string& where) {
  if (!node || !node[key]) return std::nullopt;
  try {
    return node[key].as<T>();
  } catch (const YAML::Exception&) {
    fail(fmt::format("{}.{} has the wrong type", where, key));
  }
}

Protocol parse_protocol(const YAML::Node& n, const std::string& where) {
  check_keys(n, where, {"nv", "ndb", "pl", "dbl", "dsr", "ddr", "pn"});
  for (const char* k : {"nv", "ndb", "pl", "dbl", "dsr", "ddr", "pn"})
    if (!n[k]) fail(fmt::format("{} is missing '{}'", where, k));
  Protocol p;
  p.nv = get<int>(n, "nv", 0, where);
  p.ndb = get<int>(n, "ndb", 0, where);
  p.pl = get<double>(n, "pl", 0, where);
  p.dbl = get<double>(n, "dbl", 0, where);
  p.dsr = get<double>(n, "dsr", 0, where);
  p.ddr = get<double>(n, "ddr", 0, where);
  p.pn = get<double>(n, "pn", 0, where);
  try {
    p.validate();
  } catch (const Error& e) {
    fail(where + ": " + e.what());
  }
  return p;
}

Protocol protocol_or_builtin(const YAML::Node& n, const std::vector<Protocol>& table, const char* table_name,
                             std::optional<int>& builtin, const std::string& where) {
  builtin = get_opt<int>(n, "builtin", where);
  if (n["protocol"] && builtin) fail(where + " gives both 'protocol' and 'builtin'");
  if (n["protocol"]) return parse_protocol(n["protocol"], where + ".protocol");
  if (!builtin) fail(where + " needs 'protocol' or 'builtin'");
  if (*builtin < 1 || *builtin > static_cast<int>(table.size())) {
    fail(fmt::format("{}.builtin = {} is outside {} (1..{})", where, *builtin, table_name, table.size()));
  }
  return table[static_cast<std::size_t>(*builtin - 1)];
}

std::vector<std::uint64_t> seeds_or_derived(const YAML::Node& n, const char* key, int count, std::uint64_t seed,
                                            std::uint64_t tag, std::uint64_t owner, int first, const std::string& where) {
  if (n[key]) {
    const auto v = get<std::vector<std::uint64_t>>(n, key, {}, where);
    if (v.empty()) fail(fmt::format("{}.{} must not be empty", where, key));
    return v;
  }
  if (count < 1) fail(fmt::format("{} needs at least one patient", where));
  std::vector<std::uint64_t> out;
  for (int k = 0; k < count; ++k) out.push_back(derive_seed(seed, {tag, owner, static_cast<std::uint64_t>(first + k)}));
  return out;
}

void emit_protocol(YAML::Emitter& e, const Protocol& p) {
  e << YAML::Key << "protocol" << YAML::Value << YAML::Flow << YAML::BeginMap;
  e << YAML::Key << "nv" << YAML::Value << p.nv << YAML::Key << "ndb" << YAML::Value << p.ndb;
  e << YAML::Key << "pl" << YAML::Value << p.pl << YAML::Key << "dbl" << YAML::Value << p.dbl;
  e << YAML::Key << "dsr" << YAML::Value << p.dsr << YAML::Key << "ddr" << YAML::Value << p.ddr;
  e << YAML::Key << "pn" << YAML::Value << p.pn << YAML::EndMap;
}

void emit_seeds(YAML::Emitter& e, const char* key, const std::vector<std::uint64_t>& seeds) {
  e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (auto s : seeds) e << s;
  e << YAML::EndSeq;
}

}  // namespace

std::vector<Protocol> ExperimentConfig::known_protocols() const {
  std::vector<Protocol> out;
  for (const auto& c : dataset.clients) out.push_back(c.protocol);
  return out;
}

std::vector<int> ExperimentConfig::client_ids() const {
  std::vector<int> out;
  for (const auto& c : dataset.clients) out.push_back(c.client_id);
  return out;
}

ExperimentConfig parse_config(const YAML::Node& root, const Overrides& overrides) {
  if (!root || !root.IsMap()) fail("config root must be a mapping");
  check_keys(root, "config", {"name", "seed", "output_dir", "dataset", "model", "federation", "provider", "unseen"});
  ExperimentConfig cfg;
  cfg.name = get<std::string>(root, "name", cfg.name, "config");
  cfg.seed = overrides.seed.value_or(get<std::uint64_t>(root, "seed", 0, "config"));
  cfg.output_dir = overrides.output_dir.value_or(get<std::string>(root, "output_dir", "runs/" + cfg.name, "config"));

  const YAML::Node ds = root["dataset"];
  if (!ds) fail("config needs a dataset block");
  check_keys(ds, "dataset",
             {"image_size", "electronic_variance", "train_patients", "test_patients", "train_slices", "test_slices", "clients"});
  cfg.dataset.image_size = get<int>(ds, "image_size", 64, "dataset");
  cfg.dataset.electronic_variance = get<double>(ds, "electronic_variance", 10.0, "dataset");
  const int train_patients = get<int>(ds, "train_patients", 2, "dataset");
  const int test_patients = get<int>(ds, "test_patients", 1, "dataset");
  const int train_slices = get<int>(ds, "train_slices", 8, "dataset");
  const int test_slices = get<int>(ds, "test_slices", 4, "dataset");
  if (cfg.dataset.image_size < 16) fail("dataset.image_size must be >= 16");
  if (!(cfg.dataset.electronic_variance >= 0)) fail("dataset.electronic_variance must be >= 0");
  if (!ds["clients"] || !ds["clients"].IsSequence() || ds["clients"].size() == 0) fail("dataset.clients must be a non-empty list");

  const auto table_a = builtin_known_protocols();
  std::set<int> ids;
  for (std::size_t k = 0; k < ds["clients"].size(); ++k) {
    const YAML::Node n = ds["clients"][k];
    const std::string where = fmt::format("dataset.clients[{}]", k);
    check_keys(n, where,
               {"id", "builtin", "protocol", "train_patients", "test_patients", "train_seeds", "test_seeds", "noise_seed",
                "train_slices", "test_slices"});
    ClientEntry c;
    c.protocol = protocol_or_builtin(n, table_a, "Table A", c.builtin, where);
    if (!n["id"] && !c.builtin) fail(where + " needs an 'id' when the protocol is explicit");
    c.client_id = get<int>(n, "id", c.builtin.value_or(0), where);
    if (!ids.insert(c.client_id).second) fail(fmt::format("client id {} appears twice", c.client_id));
    const auto owner = static_cast<std::uint64_t>(c.client_id);
    const int ntrain = get<int>(n, "train_patients", train_patients, where);
    const int ntest = get<int>(n, "test_patients", test_patients, where);
    c.train_seeds = seeds_or_derived(n, "train_seeds", ntrain, cfg.seed, kPatientTag, owner, 0, where);
    c.test_seeds = seeds_or_derived(n, "test_seeds", ntest, cfg.seed, kPatientTag, owner, ntrain, where);
    c.noise_seed = get<std::uint64_t>(n, "noise_seed", derive_seed(cfg.seed, {kNoiseTag, owner}), where);
    c.train_slices = get<int>(n, "train_slices", train_slices, where);
    c.test_slices = get<int>(n, "test_slices", test_slices, where);
    if (c.train_slices < 1 || c.test_slices < 1) fail(where + ": slice counts must be >= 1");
    cfg.dataset.clients.push_back(std::move(c));
  }

  const YAML::Node m = root["model"];
  check_keys(m, "model", {"channels", "report_dim", "hidden_dim", "code_dim", "n_heads", "token_count", "image_size"});
  cfg.model.channels = get<int>(m, "channels", cfg.model.channels, "model");
  cfg.model.report_dim = get<int>(m, "report_dim", cfg.model.report_dim, "model");
  cfg.model.hidden_dim = get<int>(m, "hidden_dim", cfg.model.hidden_dim, "model");
  cfg.model.code_dim = get<int>(m, "code_dim", cfg.model.code_dim, "model");
  cfg.model.n_heads = get<int>(m, "n_heads", cfg.model.n_heads, "model");
  cfg.model.token_count = get<int>(m, "token_count", cfg.model.token_count, "model");
  cfg.model.image_size = get<int>(m, "image_size", cfg.dataset.image_size, "model");
  if (cfg.model.image_size != cfg.dataset.image_size) fail("model.image_size must equal dataset.image_size");
  try {
    cfg.model.validate();
  } catch (const Error& e) {
    fail(e.what());
  }

  const YAML::Node f = root["federation"];
  check_keys(f, "federation",
             {"rounds", "local_epochs", "batch_size", "lr", "beta1", "beta2", "eps", "tau", "disable_scanning",
              "disable_anatomy", "generic_decoder", "disable_orth", "reset_moments", "seed", "checkpoint_every"});
  auto& fed = cfg.federation;
  fed.rounds = get<int>(f, "rounds", fed.rounds, "federation");
  fed.local_epochs = get<int>(f, "local_epochs", fed.local_epochs, "federation");
  fed.batch_size = get<int>(f, "batch_size", fed.batch_size, "federation");
  fed.adam.lr = get<double>(f, "lr", fed.adam.lr, "federation");
  fed.adam.beta1 = get<double>(f, "beta1", fed.adam.beta1, "federation");
  fed.adam.beta2 = get<double>(f, "beta2", fed.adam.beta2, "federation");
  fed.adam.eps = get<double>(f, "eps", fed.adam.eps, "federation");
  fed.loss.tau = get<double>(f, "tau", fed.loss.tau, "federation");
  fed.ablation.disable_scanning = get<bool>(f, "disable_scanning", false, "federation");
  fed.ablation.disable_anatomy = get<bool>(f, "disable_anatomy", false, "federation");
  fed.ablation.generic_decoder = get<bool>(f, "generic_decoder", false, "federation");
  fed.disable_orth = get<bool>(f, "disable_orth", false, "federation");
  fed.reset_moments = get<bool>(f, "reset_moments", false, "federation");
  fed.seed = get<std::uint64_t>(f, "seed", cfg.seed, "federation");
  if (overrides.seed) fed.seed = *overrides.seed;
  cfg.checkpoint_every = get<int>(f, "checkpoint_every", 0, "federation");
  if (cfg.checkpoint_every < 0) fail("federation.checkpoint_every must be >= 0");
  if (overrides.generic) {
    fed.ablation = AblationFlags{true, true, true};
    fed.disable_orth = true;
  }
  try {
    fed.validate();
  } catch (const Error& e) {
    fail(e.what());
  }

  const YAML::Node p = root["provider"];
  check_keys(p, "provider", {"kind", "dim", "stub_seed", "host", "port", "timeout_ms", "max_in_flight", "prompt"});
  const auto kind = get<std::string>(p, "kind", "stub", "provider");
  if (kind == "stub") {
    cfg.provider.kind = ProviderConfig::Kind::Stub;
  } else if (kind == "remote") {
    cfg.provider.kind = ProviderConfig::Kind::Remote;
  } else {
    fail("provider.kind must be 'stub' or 'remote'");
  }
  cfg.provider.dim = get<int>(p, "dim", cfg.model.report_dim, "provider");
  if (cfg.provider.dim != cfg.model.report_dim) fail("provider.dim must equal model.report_dim");
  cfg.provider.stub_seed = get<std::uint64_t>(p, "stub_seed", cfg.seed, "provider");
  cfg.provider.host = get<std::string>(p, "host", cfg.provider.host, "provider");
  cfg.provider.port = get<int>(p, "port", cfg.provider.port, "provider");
  cfg.provider.timeout_ms = get<int>(p, "timeout_ms", cfg.provider.timeout_ms, "provider");
  cfg.provider.max_in_flight = get<int>(p, "max_in_flight", cfg.provider.max_in_flight, "provider");
  cfg.provider.prompt = get<std::string>(p, "prompt", cfg.provider.prompt, "provider");
  try {
    cfg.provider.validate();
  } catch (const Error& e) {
    fail(e.what());
  }

  const YAML::Node u = root["unseen"];
  check_keys(u, "unseen", {"test_patients", "slices", "protocols"});
  const int unseen_patients = get<int>(u, "test_patients", 1, "unseen");
  const int unseen_slices = get<int>(u, "slices", 4, "unseen");
  const auto table_b = builtin_unseen_protocols();
  if (u && u["protocols"]) {
    if (!u["protocols"].IsSequence()) fail("unseen.protocols must be a list");
    for (std::size_t k = 0; k < u["protocols"].size(); ++k) {
      const YAML::Node n = u["protocols"][k];
      const std::string where = fmt::format("unseen.protocols[{}]", k);
      check_keys(n, where, {"builtin", "protocol", "test_seeds", "noise_seed", "slices"});
      UnseenEntry e;
      e.protocol = protocol_or_builtin(n, table_b, "Table B", e.builtin, where);
      const auto owner = static_cast<std::uint64_t>(k);
      e.test_seeds = seeds_or_derived(n, "test_seeds", unseen_patients, cfg.seed, kUnseenTag, owner, 0, where);
      e.noise_seed = get<std::uint64_t>(n, "noise_seed", derive_seed(cfg.seed, {kUnseenTag, kNoiseTag, owner}), where);
      e.slices = get<int>(n, "slices", unseen_slices, where);
      cfg.unseen.push_back(std::move(e));
    }
  }
  return cfg;
}

ExperimentConfig parse_config_text(const std::string& text, const Overrides& overrides) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    fail(std::string("config is not valid YAML: ") + e.what());
  }
  return parse_config(root, overrides);
}

ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& overrides) {
  std::ifstream in(path);
  if (!in) fail("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), overrides);
}

std::vector<std::string> preset_names() { return {"desk4", "paper8"}; }

std::string preset_text(const std::string& name) {
  if (name == "desk4") {
    // Two sparse-view clients (#2, #6) and two low-dose clients (#3, #7).
    return R"(name: desk4
seed: 7
output_dir: runs/desk4
dataset:
  image_size: 64
  train_patients: 2
  test_patients: 1
  train_slices: 8
  test_slices: 4
  clients:
    - builtin: 2
    - builtin: 3
    - builtin: 6
    - builtin: 7
model:
  channels: 32
  report_dim: 64
  hidden_dim: 32
  code_dim: 16
  n_heads: 4
  token_count: 8
federation:
  rounds: 30
  local_epochs: 3
  batch_size: 4
  lr: 0.001
  tau: 0.01
provider:
  kind: stub
unseen:
  protocols:
    - builtin: 1
    - builtin: 2
    - builtin: 3
    - builtin: 4
)";
  }
  if (name == "paper8") {
    return R"(name: paper8
seed: 7
output_dir: runs/paper8
dataset:
  image_size: 64
  train_patients: 5
  test_patients: 1
  train_slices: 8
  test_slices: 4
  clients:
    - builtin: 1
    - builtin: 2
    - builtin: 3
    - builtin: 4
    - builtin: 5
    - builtin: 6
    - builtin: 7
    - builtin: 8
model:
  channels: 32
  report_dim: 64
  hidden_dim: 32
  code_dim: 16
  n_heads: 4
  token_count: 8
federation:
  rounds: 200
  local_epochs: 1
  batch_size: 20
  lr: 0.001
  tau: 0.01
  checkpoint_every: 50
provider:
  kind: stub
unseen:
  protocols:
    - builtin: 1
    - builtin: 2
    - builtin: 3
    - builtin: 4
)";
  }
  fail("unknown preset '" + name + "' (known: desk4, paper8)");
}

ExperimentConfig preset_config(const std::string& name, const Overrides& overrides) {
  return parse_config_text(preset_text(name), overrides);
}

std::string emit_config(const ExperimentConfig& cfg) {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "name" << YAML::Value << cfg.name;
  e << YAML::Key << "seed" << YAML::Value << cfg.seed;
  e << YAML::Key << "output_dir" << YAML::Value << cfg.output_dir.string();

  e << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "image_size" << YAML::Value << cfg.dataset.image_size;
  e << YAML::Key << "electronic_variance" << YAML::Value << cfg.dataset.electronic_variance;
  e << YAML::Key << "clients" << YAML::Value << YAML::BeginSeq;
  for (const auto& c : cfg.dataset.clients) {
    e << YAML::BeginMap;
    e << YAML::Key << "id" << YAML::Value << c.client_id;
    emit_protocol(e, c.protocol);
    emit_seeds(e, "train_seeds", c.train_seeds);
    emit_seeds(e, "test_seeds", c.test_seeds);
    e << YAML::Key << "noise_seed" << YAML::Value << c.noise_seed;
    e << YAML::Key << "train_slices" << YAML::Value << c.train_slices;
    e << YAML::Key << "test_slices" << YAML::Value << c.test_slices;
    e << YAML::EndMap;
  }
  e << YAML::EndSeq << YAML::EndMap;

  const auto& m = cfg.model;
  e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "channels" << YAML::Value << m.channels;
  e << YAML::Key << "report_dim" << YAML::Value << m.report_dim;
  e << YAML::Key << "hidden_dim" << YAML::Value << m.hidden_dim;
  e << YAML::Key << "code_dim" << YAML::Value << m.code_dim;
  e << YAML::Key << "n_heads" << YAML::Value << m.n_heads;
  e << YAML::Key << "token_count" << YAML::Value << m.token_count;
  e << YAML::Key << "image_size" << YAML::Value << m.image_size;
  e << YAML::EndMap;

  const auto& f = cfg.federation;
  e << YAML::Key << "federation" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "rounds" << YAML::Value << f.rounds;
  e << YAML::Key << "local_epochs" << YAML::Value << f.local_epochs;
  e << YAML::Key << "batch_size" << YAML::Value << f.batch_size;
  e << YAML::Key << "lr" << YAML::Value << f.adam.lr;
  e << YAML::Key << "beta1" << YAML::Value << f.adam.beta1;
  e << YAML::Key << "beta2" << YAML::Value << f.adam.beta2;
  e << YAML::Key << "eps" << YAML::Value << f.adam.eps;
  e << YAML::Key << "tau" << YAML::Value << f.loss.tau;
  e << YAML::Key << "disable_scanning" << YAML::Value << f.ablation.disable_scanning;
  e << YAML::Key << "disable_anatomy" << YAML::Value << f.ablation.disable_anatomy;
  e << YAML::Key << "generic_decoder" << YAML::Value << f.ablation.generic_decoder;
  e << YAML::Key << "disable_orth" << YAML::Value << f.disable_orth;
  e << YAML::Key << "reset_moments" << YAML::Value << f.reset_moments;
  e << YAML::Key << "seed" << YAML::Value << f.seed;
  e << YAML::Key << "checkpoint_every" << YAML::Value << cfg.checkpoint_every;
  e << YAML::EndMap;

  const auto& p = cfg.provider;
  e << YAML::Key << "provider" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << (p.kind == ProviderConfig::Kind::Stub ? "stub" : "remote");
  e << YAML::Key << "dim" << YAML::Value << p.dim;
  e << YAML::Key << "stub_seed" << YAML::Value << p.stub_seed;
  e << YAML::Key << "host" << YAML::Value << p.host;
  e << YAML::Key << "port" << YAML::Value << p.port;
  e << YAML::Key << "timeout_ms" << YAML::Value << p.timeout_ms;
  e << YAML::Key << "max_in_flight" << YAML::Value << p.max_in_flight;
  e << YAML::Key << "prompt" << YAML::Value << p.prompt;
  e << YAML::EndMap;

  e << YAML::Key << "unseen" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "protocols" << YAML::Value << YAML::BeginSeq;
  for (const auto& u : cfg.unseen) {
    e << YAML::BeginMap;
    emit_protocol(e, u.protocol);
    emit_seeds(e, "test_seeds", u.test_seeds);
    e << YAML::Key << "noise_seed" << YAML::Value << u.noise_seed;
    e << YAML::Key << "slices" << YAML::Value << u.slices;
    e << YAML::EndMap;
  }
  e << YAML::EndSeq << YAML::EndMap;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

}  // namespace physfed::app
