#include "physfed/pvqs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <fmt/format.h>

#include "physfed/error.hpp"

namespace physfed {

namespace {

constexpr double kNormGuard = 1e-12;

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// sqrt(|a|^2 |b|^2) rather than |a| |b| so that cos(a, a) is exactly 1.
double cosine(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    d += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return d / std::max(std::sqrt(na * nb), kNormGuard * kNormGuard);
}

std::size_t position_of(const TrainedState& trained, int client_id) {
  for (std::size_t k = 0; k < trained.client_ids.size(); ++k)
    if (trained.client_ids[k] == client_id) return k;
  throw Error(ErrorCode::UnknownClient, fmt::format("client {} is not part of the trained state", client_id));
}

}  // namespace

ProtocolCodebook::ProtocolCodebook(std::vector<CodebookEntry> entries, MinMaxStats stats)
    : entries_(std::move(entries)), stats_(std::move(stats)) {
  if (entries_.empty()) throw Error(ErrorCode::EmptySet, "codebook needs at least one entry");
  for (const auto& e : entries_) {
    if (!(norm(e.code) > kNormGuard)) throw Error(ErrorCode::ZeroNormCode, fmt::format("code of client {} has zero norm", e.client_id));
    if (e.code.size() != entries_[0].code.size()) throw Error(ErrorCode::ShapeMismatch, "codebook codes differ in length");
  }
}

const CodebookEntry& ProtocolCodebook::entry(int client_id) const {
  for (const auto& e : entries_)
    if (e.client_id == client_id) return e;
  throw Error(ErrorCode::UnknownClient, fmt::format("client {} has no codebook entry", client_id));
}

ProtocolCodebook build_codebook(const TrainedState& trained, std::span<const Protocol> known) {
  if (known.size() != trained.client_ids.size()) {
    throw Error(ErrorCode::ShapeMismatch, fmt::format("{} known protocols for {} trained clients", known.size(), trained.client_ids.size()));
  }
  MinMaxStats stats = protocol_stats(known);
  std::vector<CodebookEntry> entries;
  for (std::size_t k = 0; k < known.size(); ++k) {
    const auto g = normalize_protocol(known[k], stats);
    const auto scan = evaluate_scanning(trained.params.hs, g);
    CodebookEntry e;
    e.client_id = trained.client_ids[k];
    e.code = scan.code.data();
    e.alpha = scan.alpha;
    e.beta = scan.beta;
    e.decoder_id = trained.flags.generic_decoder ? kSharedDecoder : e.client_id;
    entries.push_back(std::move(e));
  }
  return ProtocolCodebook(std::move(entries), std::move(stats));
}

QuantizeResult quantize(const ProtocolCodebook& book, std::span<const double> c_un) {
  if (c_un.size() != book.entries()[0].code.size()) throw Error(ErrorCode::DimensionMismatch, "query code length differs from codebook");
  if (!(norm(c_un) > kNormGuard)) throw Error(ErrorCode::ZeroNormQuery, "query code has zero norm");
  QuantizeResult best{0, std::numeric_limits<double>::infinity()};
  for (const auto& e : book.entries()) {
    const double d = 1.0 - cosine(c_un, e.code);
    if (d < best.distance || (d == best.distance && e.client_id < best.client_id)) best = {e.client_id, d};
  }
  // Rounding can leave 1 - cos a hair outside [0, 2].
  best.distance = std::clamp(best.distance, 0.0, 2.0);
  return best;
}

QuantizeResult route_protocol(const TrainedState& trained, const ProtocolCodebook& book, const Protocol& g_un) {
  g_un.validate();
  const auto g = normalize_protocol(g_un, book.stats());
  const auto code = evaluate_code(trained.params.hs, g);
  return quantize(book, code.data());
}

UnseenInference infer_unseen(const TrainedState& trained, const ProtocolCodebook& book, const ImageGrid& x_norm,
                             const Protocol& g_un, const std::vector<double>& f_t) {
  UnseenInference out;
  out.match = route_protocol(trained, book, g_un);
  const auto& e = book.entry(out.match.client_id);
  position_of(trained, e.client_id);
  AblationFlags flags = trained.flags;
  const ScanOverride scan{e.alpha, e.beta};
  // g-hat is unused once alpha/beta are overridden; pass the normalized query
  // so that the graph shape stays the same.
  const auto g = normalize_protocol(g_un, book.stats());
  std::optional<ScanOverride> override_scan;
  if (!flags.disable_scanning) override_scan = scan;
  out.prediction = predict(trained.params, trained.model, x_norm, g, f_t, e.client_id, flags, override_scan);
  return out;
}

void write_codebook(std::ostream& out, const ProtocolCodebook& book) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "# client_id code[0] ... code[" << book.entries()[0].code.size() - 1 << "]\n";
  for (const auto& e : book.entries()) {
    os << e.client_id;
    for (double v : e.code) os << ' ' << v;
    os << '\n';
  }
  os << "# pairwise cosine similarity\n";
  os << "#";
  for (const auto& e : book.entries()) os << ' ' << e.client_id;
  os << '\n';
  for (const auto& a : book.entries()) {
    os << "# " << a.client_id << ':';
    for (const auto& b : book.entries()) os << ' ' << cosine(a.code, b.code);
    os << '\n';
  }
  out << os.str();
}

void save_codebook(const std::filesystem::path& path, const ProtocolCodebook& book) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  write_codebook(out, book);
}

std::vector<std::pair<int, std::vector<double>>> read_codebook_codes(std::istream& in) {
  std::vector<std::pair<int, std::vector<double>>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    int id = 0;
    is >> id;
    std::vector<double> code;
    for (double v; is >> v;) code.push_back(v);
    out.emplace_back(id, std::move(code));
  }
  return out;
}

}  // namespace physfed
