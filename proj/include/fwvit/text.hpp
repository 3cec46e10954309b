#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace fwvit {

// Shortest representation that parses back to the same double.
std::string format_number(double v);
// Strict parse of the whole string; throws std::invalid_argument.
double parse_number(std::string_view s);
long long parse_integer(std::string_view s);

std::vector<std::string> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);

}  // namespace fwvit
