#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace hypo {

using json = nlohmann::json;

std::string read_file(const std::string& path);

// Writes to `path.tmp` and renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);

std::vector<std::string> read_lines(const std::string& path);

std::vector<json> read_jsonl(const std::string& path);
void write_jsonl_atomic(const std::string& path, const std::vector<json>& records);

}  // namespace hypo
