#pragma once

#include <string>
#include <vector>

namespace vifuse {

// Decimal form with enough digits (%.17g) to round-trip the exact double.
std::string format_double(double v);

// Writes via a temp file in the same directory, then renames into place.
void atomic_write(const std::string& path, const std::string& content);

std::vector<std::string> split_csv_line(const std::string& line);

} // namespace vifuse
