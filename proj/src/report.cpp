#include "dkfac/report.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace dkfac::report {

namespace {
std::string g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw FormatError("bad number '" + s + "' in metrics row");
  return v;
}
}  // namespace

std::string format_row(const train::MetricsRow& r) {
  std::ostringstream out;
  out << r.epoch << ',' << r.iteration << ',' << g9(r.train_loss) << ',' << g9(r.train_acc) << ',' << g9(r.val_acc)
      << ',' << g9(r.lr) << ',' << g9(r.damping) << ',' << r.decomp_interval << ',' << r.allreduce_calls << ','
      << r.allgather_calls << ',' << r.element_volume << ',' << g9(r.wall_ms);
  return out.str();
}

train::MetricsRow parse_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) f.push_back(item);
  if (f.size() != 12) throw FormatError("metrics row has " + std::to_string(f.size()) + " fields, expected 12");
  try {
    train::MetricsRow r;
    r.epoch = std::stoi(f[0]);
    r.iteration = std::stol(f[1]);
    r.train_loss = parse_double(f[2]);
    r.train_acc = parse_double(f[3]);
    r.val_acc = parse_double(f[4]);
    r.lr = parse_double(f[5]);
    r.damping = parse_double(f[6]);
    r.decomp_interval = std::stoi(f[7]);
    r.allreduce_calls = std::stoull(f[8]);
    r.allgather_calls = std::stoull(f[9]);
    r.element_volume = std::stoull(f[10]);
    r.wall_ms = parse_double(f[11]);
    return r;
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed metrics row: ") + e.what());
  }
}

CsvSink::CsvSink(const std::filesystem::path& path) : path_(path), out_(path) {
  if (!out_) throw std::runtime_error("cannot open metrics file " + path.string());
  out_ << kCsvHeader << '\n';
  if (!out_) throw std::runtime_error("cannot write metrics file " + path.string());
}

void CsvSink::write(const train::MetricsRow& row) {
  out_ << format_row(row) << '\n';
  if (!out_) throw std::runtime_error("cannot write metrics file " + path_.string());
}

void emit_report(const std::vector<train::MetricsRow>& rows, const std::filesystem::path& path) {
  CsvSink sink(path);
  for (const auto& r : rows) sink.write(r);
}

std::vector<train::MetricsRow> read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError(path.string() + ": missing metrics header");
  std::vector<train::MetricsRow> rows;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(parse_row(line));
  }
  return rows;
}

}  // namespace dkfac::report
