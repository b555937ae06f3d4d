#pragma once

#include <string>
#include <vector>

namespace bupo::cli {

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partial file.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

// Round-trippable rendering: 17 significant digits and a '.'
// decimal separator regardless of locale; "nan" for NaN.
std::string format_real(double v);

// Comma-separated rows with a header; cells are written verbatim.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> columns);
  void add_row(std::vector<std::string> cells);
  std::string str() const;
  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace bupo::cli
