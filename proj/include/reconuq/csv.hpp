#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace reconuq {

// RFC-4180 rows: fields holding comma, quote, CR, or LF are quoted, embedded
// quotes doubled, records end in CRLF. Numeric fields are written with enough
// digits to round-trip (%.17g for doubles).
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  void add_row(std::vector<std::string> fields);
  void save(const std::filesystem::path& path) const;
  std::string str() const;

 private:
  std::size_t width_;
  std::vector<std::vector<std::string>> rows_;
};

std::string csv_field(double v);
std::string csv_field(std::int64_t v);

// Parses header + records; accepts CRLF or LF on input.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

CsvTable read_csv(const std::filesystem::path& path);
CsvTable parse_csv(const std::string& text);

}  // namespace reconuq
