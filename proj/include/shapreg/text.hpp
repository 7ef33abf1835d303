#pragma once

#include <string>
#include <vector>

namespace shapreg {

// Fixed "%.12g" rendering so emitted tables are byte-identical across reruns.
std::string format_number(double x);

std::string join(const std::vector<std::string>& parts, const std::string& sep);

} // namespace shapreg
