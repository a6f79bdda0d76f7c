#include "cods/metrics.hpp"

#include <sstream>

namespace cods::harness {

JsonlWriter::JsonlWriter(const std::string& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc), path_(path) {
  if (!out_) throw IoError("jsonl: cannot open " + path);
}

void JsonlWriter::write(const nlohmann::ordered_json& j) {
  out_ << j.dump() << "\n";
  out_.flush();
  if (!out_) throw IoError("jsonl: write failed on " + path_);
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("csv: cannot open " + path);
  for (size_t i = 0; i < header.size(); ++i)
    out << (i ? "," : "") << header[i];
  out << "\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
  if (!out) throw IoError("csv: write failed on " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

}  // namespace cods::harness
