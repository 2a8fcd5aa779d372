#include "physfed/protocol.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>

#include "physfed/error.hpp"

namespace physfed {

namespace {

constexpr const char* kCsvHeader = "nv,ndb,pl,dbl,dsr,ddr,pn";

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

void Protocol::validate() const {
  const bool ok = nv >= 1 && ndb >= 1 && pl > 0 && dbl > 0 && dsr > 0 && ddr > 0 && pn > 0 &&
                  std::isfinite(pl) && std::isfinite(dbl) && std::isfinite(dsr) &&
                  std::isfinite(ddr) && std::isfinite(pn);
  if (!ok) {
    std::ostringstream os;
    os << "protocol out of domain: nv=" << nv << " ndb=" << ndb << " pl=" << pl << " dbl=" << dbl
       << " dsr=" << dsr << " ddr=" << ddr << " pn=" << pn;
    throw Error(ErrorCode::InvalidArgument, os.str());
  }
}

std::array<double, kProtocolDims> Protocol::as_vector() const {
  return {static_cast<double>(nv), static_cast<double>(ndb), pl, dbl, dsr, ddr, pn};
}

MinMaxStats::MinMaxStats(const std::array<double, kProtocolDims>& mins,
                         const std::array<double, kProtocolDims>& maxs)
    : mins_(mins), maxs_(maxs) {
  for (std::size_t j = 0; j < kProtocolDims; ++j) {
    if (!(maxs_[j] > mins_[j])) {
      throw Error(ErrorCode::DegenerateColumn, "column " + std::to_string(j) + " has max <= min");
    }
  }
}

std::array<double, kProtocolDims> MinMaxStats::denormalize(const NormalizedProtocol& g) const {
  std::array<double, kProtocolDims> out{};
  for (std::size_t j = 0; j < kProtocolDims; ++j) {
    out[j] = mins_[j] + g.values[j] * (maxs_[j] - mins_[j]);
  }
  return out;
}

MinMaxStats protocol_stats(std::span<const Protocol> protocols) {
  if (protocols.empty()) throw Error(ErrorCode::EmptyList, "protocol_stats needs at least one protocol");
  std::array<double, kProtocolDims> mins;
  std::array<double, kProtocolDims> maxs;
  mins.fill(std::numeric_limits<double>::infinity());
  maxs.fill(-std::numeric_limits<double>::infinity());
  for (const auto& p : protocols) {
    const auto v = p.as_vector();
    for (std::size_t j = 0; j < kProtocolDims; ++j) {
      mins[j] = std::min(mins[j], v[j]);
      maxs[j] = std::max(maxs[j], v[j]);
    }
  }
  return MinMaxStats(mins, maxs);
}

NormalizedProtocol normalize_protocol(const Protocol& g, const MinMaxStats& stats) {
  NormalizedProtocol out;
  const auto v = g.as_vector();
  for (std::size_t j = 0; j < kProtocolDims; ++j) {
    out.values[j] = (v[j] - stats.mins()[j]) / (stats.maxs()[j] - stats.mins()[j]);
  }
  return out;
}

std::vector<Protocol> builtin_known_protocols() {
  return {
      {1024, 512, 0.66, 0.72, 250, 250, 1e5},
      {128, 768, 0.78, 0.58, 350, 300, 1e6},
      {512, 768, 1.00, 1.20, 500, 400, 5e4},
      {384, 600, 1.40, 1.50, 350, 300, 1.25e5},
      {712, 720, 0.60, 0.82, 300, 350, 1.3e5},
      {200, 730, 0.88, 0.78, 350, 280, 0.9e6},
      {560, 755, 1.20, 1.30, 300, 400, 4.5e4},
      {368, 500, 1.00, 1.30, 350, 350, 1.45e5},
  };
}

std::vector<Protocol> builtin_unseen_protocols() {
  return {
      {768, 550, 0.57, 0.83, 200, 300, 1.3e5},
      {428, 590, 1.10, 1.10, 350, 300, 1.4e5},
      {100, 768, 0.50, 0.60, 200, 250, 1.1e6},
      {896, 730, 0.70, 0.93, 250, 400, 9e4},
  };
}

std::vector<Protocol> read_protocols_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != kCsvHeader) {
    throw Error(ErrorCode::Io, std::string("protocol CSV must start with header '") + kCsvHeader + "'");
  }
  std::vector<Protocol> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    std::istringstream row(line);
    std::array<double, kProtocolDims> v{};
    std::string cell;
    std::size_t j = 0;
    while (std::getline(row, cell, ',')) {
      if (j >= kProtocolDims) break;
      try {
        std::size_t used = 0;
        const std::string t = trim(cell);
        v[j] = std::stod(t, &used);
        if (used != t.size()) throw std::invalid_argument(t);
      } catch (const std::exception&) {
        throw Error(ErrorCode::Io, "bad number on line " + std::to_string(line_no) + ": '" + cell + "'");
      }
      ++j;
    }
    if (j != kProtocolDims || row.rdbuf()->in_avail() > 0) {
      throw Error(ErrorCode::Io, "expected 7 columns on line " + std::to_string(line_no));
    }
    Protocol p{static_cast<int>(v[0]), static_cast<int>(v[1]), v[2], v[3], v[4], v[5], v[6]};
    if (static_cast<double>(p.nv) != v[0] || static_cast<double>(p.ndb) != v[1]) {
      throw Error(ErrorCode::Io, "nv and ndb must be integers on line " + std::to_string(line_no));
    }
    p.validate();
    out.push_back(p);
  }
  return out;
}

void write_protocols_csv(std::ostream& out, std::span<const Protocol> protocols) {
  out << kCsvHeader << '\n';
  out << std::setprecision(17);
  for (const auto& p : protocols) {
    out << p.nv << ',' << p.ndb << ',' << p.pl << ',' << p.dbl << ',' << p.dsr << ',' << p.ddr << ','
        << p.pn << '\n';
  }
}

std::vector<Protocol> load_protocols_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return read_protocols_csv(in);
}

void save_protocols_csv(const std::filesystem::path& path, std::span<const Protocol> protocols) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  write_protocols_csv(out, protocols);
}

}  // namespace physfed
