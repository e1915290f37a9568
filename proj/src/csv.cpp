#include "reconuq/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "reconuq/errors.hpp"

namespace reconuq {

namespace {

bool needs_quoting(const std::string& f) {
  return f.find_first_of(",\"\r\n") != std::string::npos;
}

void append_field(std::string& out, const std::string& f) {
  if (!needs_quoting(f)) {
    out += f;
    return;
  }
  out += '"';
  for (char c : f) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
}

}  // namespace

CsvWriter::CsvWriter(std::vector<std::string> header) : width_(header.size()) {
  rows_.push_back(std::move(header));
}

void CsvWriter::add_row(std::vector<std::string> fields) {
  if (fields.size() != width_)
    throw LengthMismatch("csv row width " + std::to_string(fields.size()) +
                         " != header width " + std::to_string(width_));
  rows_.push_back(std::move(fields));
}

std::string CsvWriter::str() const {
  std::string out;
  for (const auto& row : rows_) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      append_field(out, row[i]);
    }
    out += "\r\n";
  }
  return out;
}

void CsvWriter::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::string text = str();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("short write: " + path.string());
}

std::string csv_field(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_field(std::int64_t v) { return std::to_string(v); }

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

CsvTable parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false;
  bool any = false;

  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    any = true;
  };
  auto end_record = [&] {
    if (!any && record.empty()) return;  // blank trailing line
    end_field();
    records.push_back(std::move(record));
    record.clear();
    any = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r') {
      if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
      end_record();
    } else if (c == '\n') {
      end_record();
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw IoError("unterminated quoted csv field");
  if (any || !field.empty() || !record.empty()) end_record();

  CsvTable t;
  if (records.empty()) throw IoError("csv has no header row");
  t.header = std::move(records.front());
  t.rows.assign(std::make_move_iterator(records.begin() + 1),
                std::make_move_iterator(records.end()));
  for (const auto& row : t.rows)
    if (row.size() != t.header.size())
      throw IoError("csv row width differs from header");
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

}  // namespace reconuq
