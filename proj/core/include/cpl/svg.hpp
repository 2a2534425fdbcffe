#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace cpl {

// Minimal standalone SVG line plot; axes span [0,1] x [0,1] unless wider data
// is supplied.
void write_svg_curve(const std::filesystem::path& path, const std::string& title,
                     const std::string& x_label, const std::string& y_label,
                     const std::vector<std::pair<double, double>>& points);

} // namespace cpl
