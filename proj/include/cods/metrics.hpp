#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cods/common.hpp"

namespace cods::harness {

// append-only JSONL stream; one object per line, insertion-ordered keys so
// identical runs produce identical bytes
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path, bool append = false);
  void write(const nlohmann::ordered_json& j);

 private:
  std::ofstream out_;
  std::string path_;
};

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace cods::harness
