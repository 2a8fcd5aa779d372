#include "physfed/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <fmt/format.h>

#include "physfed/error.hpp"
#include "physfed/random.hpp"

namespace physfed {

using ad::Tensor;
using ad::Var;

namespace {

thread_local std::uint64_t t_alpha_beta_evals = 0;

constexpr char kCheckpointMagic[4] = {'P', 'F', 'M', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

Tensor he_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& eng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = dist(eng);
  return t;
}

void add_conv(ParamSet& set, const std::string& name, int cin, int cout, std::mt19937_64& eng, bool zero) {
  set[name + ".w"] = zero ? Tensor({cout, cin, 3, 3}) : he_uniform({cout, cin, 3, 3}, cin * 9, eng);
  set[name + ".b"] = Tensor({cout});
}

void add_linear(ParamSet& set, const std::string& name, int n, int m, std::mt19937_64& eng, bool zero,
                bool row_bias = false) {
  set[name + ".w"] = zero ? Tensor({n, m}) : he_uniform({n, m}, n, eng);
  set[name + ".b"] = row_bias ? Tensor({1, m}) : Tensor({m});
}

Var dense(const BoundParams& p, const std::string& name, Var x) { return ad::linear(x, p[name + ".w"], p[name + ".b"]); }

Var conv(const BoundParams& p, const std::string& name, Var x) { return ad::conv2d(x, p[name + ".w"], p[name + ".b"]); }

// Token-wise projection: tokens (T x w) * W (w x w) + b (1 x w).
Var project_tokens(const BoundParams& p, const std::string& name, Var tokens) {
  return ad::add(ad::matmul(tokens, p[name + ".w"]), p[name + ".b"]);
}

Var scanning_trunk(const BoundParams& hs, Var g_hat) {
  return ad::relu(dense(hs, "fc2", ad::relu(dense(hs, "fc1", g_hat))));
}

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    bytes(b, 4);
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(bits >> (8 * i));
    bytes(b, 8);
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw Error(ErrorCode::Io, "truncated checkpoint");
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint8_t b[4];
    bytes(b, 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() {
    std::uint8_t b[8];
    bytes(b, 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(bits);
  }

 private:
  std::istream& in_;
};

void write_set(Writer& w, const std::string& prefix, const ParamSet& set) {
  for (const auto& [name, t] : set) {
    const std::string full = prefix + name;
    w.u32(static_cast<std::uint32_t>(full.size()));
    w.bytes(full.data(), full.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f64(v);
  }
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, "model config: " + what); };
  if (channels < 1 || report_dim < 4 || hidden_dim < 1 || code_dim < 1 || n_heads < 1 || token_count < 1 || image_size < 1) {
    fail("all sizes must be positive");
  }
  if (report_dim % 4 != 0) fail("report_dim must be divisible by 4");
  if (hidden_dim % token_count != 0) fail("hidden_dim must be divisible by token_count");
  if (token_width() % n_heads != 0 || head_dim() < 1) fail("token width must split evenly into n_heads heads");
}

const ParamSet& ModelParameters::decoder(int client_id) const {
  const auto it = decoders.find(client_id);
  if (it == decoders.end()) throw Error(ErrorCode::UnknownClient, "no decoder for client " + std::to_string(client_id));
  return it->second;
}

ParamSet& ModelParameters::decoder(int client_id) {
  const auto it = decoders.find(client_id);
  if (it == decoders.end()) throw Error(ErrorCode::UnknownClient, "no decoder for client " + std::to_string(client_id));
  return it->second;
}

ModelParameters init_params(const ModelConfig& cfg, std::uint64_t seed, const std::vector<int>& decoder_ids,
                            InitOptions opts) {
  cfg.validate();
  const bool z = opts.zero_final_layers;
  std::mt19937_64 eng(derive_seed(seed, {0x696e6974}));
  ModelParameters p;
  add_conv(p.encoder, "conv1", 1, 16, eng, false);
  add_conv(p.encoder, "conv2", 16, 32, eng, false);
  add_conv(p.encoder, "conv3", 32, cfg.channels, eng, false);

  add_linear(p.hs, "fc1", static_cast<int>(kProtocolDims), 32, eng, false);
  add_linear(p.hs, "fc2", 32, 32, eng, false);
  add_linear(p.hs, "alpha", 32, cfg.channels, eng, z);
  add_linear(p.hs, "beta", 32, cfg.channels, eng, z);
  add_linear(p.hs, "code", 32, cfg.code_dim, eng, false);
  for (auto& v : p.hs["code.w"].data()) v *= opts.code_gain;

  const int w = cfg.token_width();
  add_linear(p.ha, "fc_in", cfg.report_dim / 4, cfg.hidden_dim, eng, false);
  for (const char* proj : {"q", "k", "v", "o"}) add_linear(p.ha, proj, w, w, eng, false, true);
  add_linear(p.ha, "out", cfg.hidden_dim, cfg.image_size * cfg.image_size, eng, z);

  ParamSet dec;
  add_conv(dec, "conv1", cfg.channels, 32, eng, false);
  add_conv(dec, "conv2", 32, 16, eng, false);
  add_conv(dec, "conv3", 16, 1, eng, z);
  for (int id : decoder_ids) p.decoders[id] = dec;
  return p;
}

BoundParams::BoundParams(ad::Tape& tape, const ParamSet& params) {
  for (const auto& [name, t] : params) vars_.emplace(name, tape.leaf(t));
}

Var BoundParams::operator[](const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw Error(ErrorCode::InvalidArgument, "missing parameter '" + name + "'");
  return it->second;
}

void BoundParams::rebind(const std::string& name, Var v) {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw Error(ErrorCode::InvalidArgument, "missing parameter '" + name + "'");
  if (it->second.shape() != v.shape()) throw Error(ErrorCode::ShapeMismatch, "rebind of '" + name + "' changes its shape");
  it->second = v;
}

Var encode(const BoundParams& enc, Var x) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[0] != 1) throw Error(ErrorCode::ShapeMismatch, "encoder input must be 1xHxW, got " + ad::shape_string(s));
  Var h = ad::relu(conv(enc, "conv1", x));
  h = ad::relu(conv(enc, "conv2", h));
  return ad::relu(conv(enc, "conv3", h));
}

ScanningOutputs scanning_hypernet(const BoundParams& hs, Var g_hat) {
  if (g_hat.value().size() != kProtocolDims) throw Error(ErrorCode::ShapeMismatch, "g-hat must have 7 entries");
  const Var trunk = scanning_trunk(hs, g_hat);
  ++t_alpha_beta_evals;
  const Var alpha = ad::add_scalar(dense(hs, "alpha", trunk), 1.0);
  const Var beta = dense(hs, "beta", trunk);
  const int c = alpha.shape()[1];
  return {ad::reshape(alpha, {c}), ad::reshape(beta, {c}), dense(hs, "code", trunk)};
}

Var scanning_code(const BoundParams& hs, Var g_hat) {
  if (g_hat.value().size() != kProtocolDims) throw Error(ErrorCode::ShapeMismatch, "g-hat must have 7 entries");
  return dense(hs, "code", scanning_trunk(hs, g_hat));
}

std::uint64_t alpha_beta_head_evaluations() { return t_alpha_beta_evals; }

Var attention_core(const BoundParams& ha, const ModelConfig& cfg, Var tokens) {
  const Var q = project_tokens(ha, "q", tokens);
  const Var k = project_tokens(ha, "k", tokens);
  const Var v = project_tokens(ha, "v", tokens);
  const int hd = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var> heads;
  for (int j = 0; j < cfg.n_heads; ++j) {
    const Var qh = ad::slice_cols(q, j * hd, hd);
    const Var kh = ad::slice_cols(k, j * hd, hd);
    const Var vh = ad::slice_cols(v, j * hd, hd);
    const Var weights = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
    heads.push_back(ad::matmul(weights, vh));
  }
  return project_tokens(ha, "o", ad::concat_cols(heads));
}

Var anatomy_hypernet(const BoundParams& ha, const ModelConfig& cfg, Var f_t) {
  const auto& s = f_t.shape();
  if (s.size() != 2 || s[0] != 1 || s[1] != cfg.report_dim) {
    throw Error(ErrorCode::DimensionMismatch, fmt::format("report feature must be 1x{}, got {}", cfg.report_dim, ad::shape_string(s)));
  }
  const Var f_tl = dense(ha, "fc_in", ad::avgpool1d(f_t, 4));
  const Var tokens = ad::reshape(f_tl, {cfg.token_count, cfg.token_width()});
  const Var attended = ad::reshape(attention_core(ha, cfg, tokens), {1, cfg.hidden_dim});
  const Var flat = ad::add_scalar(dense(ha, "out", attended), 1.0);
  return ad::reshape(flat, {1, cfg.image_size, cfg.image_size});
}

Var modulate(Var f_x, Var f_an, Var alpha, Var beta) {
  return ad::channel_affine(ad::mul(f_x, f_an), alpha, beta);
}

Var decode(const BoundParams& dec, Var f_per, Var x_input) {
  Var h = ad::relu(conv(dec, "conv1", f_per));
  h = ad::relu(conv(dec, "conv2", h));
  return ad::add(conv(dec, "conv3", h), x_input);
}

ForwardGraph forward(const BoundParams& enc, const BoundParams& hs, const BoundParams& ha, const BoundParams& dec,
                     const ModelConfig& cfg, Var x, Var g_hat, Var f_t, const AblationFlags& flags,
                     const std::optional<ScanOverride>& scan_override) {
  const auto& xs = x.shape();
  if (xs.size() != 3 || xs[0] != 1 || xs[1] != cfg.image_size || xs[2] != cfg.image_size) {
    throw Error(ErrorCode::ShapeMismatch, "input image " + ad::shape_string(xs) + " does not match model image size");
  }
  ForwardGraph out;
  const Var f_x = encode(enc, x);
  // Disabled branches skip the op entirely; multiplying by exact ones and
  // adding exact zeros would give the same values.
  Var f_ana = f_x;
  if (!flags.disable_anatomy) f_ana = ad::mul(f_x, anatomy_hypernet(ha, cfg, f_t));

  Var f_per = f_ana;
  if (scan_override) {
    ad::Tape& tape = *x.tape;
    f_per = ad::channel_affine(f_ana, tape.leaf(scan_override->alpha), tape.leaf(scan_override->beta));
  } else if (!flags.disable_scanning) {
    const auto scan = scanning_hypernet(hs, g_hat);
    f_per = ad::channel_affine(f_ana, scan.alpha, scan.beta);
    out.code = scan.code;
  }
  out.prediction = decode(dec, f_per, x);
  return out;
}

Tensor image_tensor(const ImageGrid& img) { return Tensor({1, img.size, img.size}, img.data); }

Tensor protocol_tensor(const NormalizedProtocol& g) {
  return Tensor({1, static_cast<int>(kProtocolDims)}, std::vector<double>(g.values.begin(), g.values.end()));
}

ImageGrid tensor_image(const Tensor& t, double pixel_len) {
  if (t.rank() != 3 || t.dim(0) != 1 || t.dim(1) != t.dim(2)) {
    throw Error(ErrorCode::ShapeMismatch, "expected 1xNxN tensor, got " + ad::shape_string(t.shape()));
  }
  ImageGrid img(t.dim(1), pixel_len);
  img.data = t.data();
  return img;
}

ImageGrid predict(const ModelParameters& params, const ModelConfig& cfg, const ImageGrid& x_norm,
                  const NormalizedProtocol& g_hat, const std::vector<double>& f_t, int client_id,
                  const AblationFlags& flags, const std::optional<ScanOverride>& scan_override) {
  ad::Tape tape;
  const BoundParams enc(tape, params.encoder);
  const BoundParams hs(tape, params.hs);
  const BoundParams ha(tape, params.ha);
  const BoundParams dec(tape, params.decoder(flags.generic_decoder ? kSharedDecoder : client_id));
  const Var x = tape.leaf(image_tensor(x_norm));
  const Var g = tape.leaf(protocol_tensor(g_hat));
  const Var ft = tape.leaf(Tensor({1, static_cast<int>(f_t.size())}, f_t));
  const auto graph = forward(enc, hs, ha, dec, cfg, x, g, ft, flags, scan_override);
  return tensor_image(graph.prediction.value(), x_norm.pixel_len);
}

ScanningValues evaluate_scanning(const ParamSet& hs, const NormalizedProtocol& g_hat) {
  ad::Tape tape;
  const BoundParams b(tape, hs);
  const auto out = scanning_hypernet(b, tape.leaf(protocol_tensor(g_hat)));
  return {out.alpha.value(), out.beta.value(), out.code.value()};
}

Tensor evaluate_code(const ParamSet& hs, const NormalizedProtocol& g_hat) {
  ad::Tape tape;
  const BoundParams b(tape, hs);
  return scanning_code(b, tape.leaf(protocol_tensor(g_hat))).value();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  Writer w(out);
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const auto& c = ckpt.config;
  for (int v : {c.channels, c.report_dim, c.hidden_dim, c.code_dim, c.n_heads, c.token_count, c.image_size}) w.i32(v);
  w.u8(static_cast<std::uint8_t>((ckpt.flags.disable_scanning ? 1 : 0) | (ckpt.flags.disable_anatomy ? 2 : 0) |
                                 (ckpt.flags.generic_decoder ? 4 : 0)));
  std::size_t count = ckpt.params.encoder.size() + ckpt.params.hs.size() + ckpt.params.ha.size();
  for (const auto& [id, set] : ckpt.params.decoders) count += set.size();
  w.u32(static_cast<std::uint32_t>(count));
  write_set(w, "enc/", ckpt.params.encoder);
  write_set(w, "hs/", ckpt.params.hs);
  write_set(w, "ha/", ckpt.params.ha);
  for (const auto& [id, set] : ckpt.params.decoders) write_set(w, fmt::format("dec/{}/", id), set);
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  Reader r(in);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw Error(ErrorCode::VersionMismatch, path.string() + " is not a PFM1 checkpoint");
  }
  if (const auto version = r.u32(); version != kCheckpointVersion) {
    throw Error(ErrorCode::VersionMismatch, fmt::format("checkpoint version {} unsupported", version));
  }
  Checkpoint ckpt;
  auto& c = ckpt.config;
  for (int* v : {&c.channels, &c.report_dim, &c.hidden_dim, &c.code_dim, &c.n_heads, &c.token_count, &c.image_size}) *v = r.i32();
  c.validate();
  const auto flags = r.u8();
  ckpt.flags = {(flags & 1) != 0, (flags & 2) != 0, (flags & 4) != 0};
  const auto count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(r.u32(), '\0');
    r.bytes(name.data(), name.size());
    std::vector<int> shape(r.u32());
    for (auto& d : shape) d = static_cast<int>(r.u32());
    Tensor t(shape);
    for (auto& v : t.data()) v = r.f64();
    const auto slash = name.find('/');
    const std::string group = name.substr(0, slash);
    std::string rest = name.substr(slash + 1);
    if (group == "enc") {
      ckpt.params.encoder[rest] = std::move(t);
    } else if (group == "hs") {
      ckpt.params.hs[rest] = std::move(t);
    } else if (group == "ha") {
      ckpt.params.ha[rest] = std::move(t);
    } else if (group == "dec") {
      const auto slash2 = rest.find('/');
      const int id = std::stoi(rest.substr(0, slash2));
      ckpt.params.decoders[id][rest.substr(slash2 + 1)] = std::move(t);
    } else {
      throw Error(ErrorCode::Io, "unknown blob '" + name + "' in checkpoint");
    }
  }
  return ckpt;
}

}  // namespace physfed
