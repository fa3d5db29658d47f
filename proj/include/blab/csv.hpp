#pragma once

#include <fstream>
#include <string>
#include <vector>

namespace blab {

// 9 significant digits, locale-independent.
std::string fmt_g9(double v);

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& cells);
  ~CsvWriter();

 private:
  std::ofstream os_;
  size_t width_;
  std::string path_;
};

// Minimal reader for our own CSVs: header plus string cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int col(const std::string& name) const;  // -1 if absent
};
CsvTable read_csv(const std::string& path);

}  // namespace blab
