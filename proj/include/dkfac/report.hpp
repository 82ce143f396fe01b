#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dkfac/trainer.hpp"

namespace dkfac::report {

inline constexpr const char* kCsvHeader =
    "epoch,iteration,train_loss,train_acc,val_acc,lr,damping,decomp_interval,allreduce_calls,allgather_calls,"
    "element_volume,wall_ms";

/// Floats use 9 significant digits.
std::string format_row(const train::MetricsRow& row);
train::MetricsRow parse_row(const std::string& line);

/// Streams rows to a CSV file; the header is written on open.
class CsvSink {
 public:
  explicit CsvSink(const std::filesystem::path& path);
  void write(const train::MetricsRow& row);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

void emit_report(const std::vector<train::MetricsRow>& rows, const std::filesystem::path& path);
std::vector<train::MetricsRow> read_report(const std::filesystem::path& path);

}  // namespace dkfac::report
