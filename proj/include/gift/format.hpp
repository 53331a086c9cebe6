#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace gift {

// Shortest text that parses back to the same double.
std::string format_double(double v);
std::string format_optional(const std::optional<double>& v, std::string_view missing = "");

std::vector<std::string> split_csv_line(const std::string& line);

// FNV-1a 64-bit, hex encoded.
std::string fnv1a_hex(std::string_view bytes);
std::string file_digest(const std::string& path);

}  // namespace gift
