#include "cpl/svg.hpp"

#include <algorithm>
#include <fstream>

#include "cpl/error.hpp"

namespace cpl {

void write_svg_curve(const std::filesystem::path& path, const std::string& title,
                     const std::string& x_label, const std::string& y_label,
                     const std::vector<std::pair<double, double>>& points) {
    const int w = 480, h = 360, ml = 56, mr = 16, mt = 36, mb = 44;
    double xmax = 1.0, ymax = 1.0;
    for (const auto& [x, y] : points) {
        xmax = std::max(xmax, x);
        ymax = std::max(ymax, y);
    }
    auto px = [&](double x) { return ml + x / xmax * (w - ml - mr); };
    auto py = [&](double y) { return h - mb - y / ymax * (h - mt - mb); };

    std::ofstream os(path);
    require(bool(os), "svg: cannot write " + path.string());
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
       << "</text>\n";
    // axes
    os << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
       << "' stroke='black'/>\n";
    os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
       << "' stroke='black'/>\n";
    for (int i = 0; i <= 4; ++i) {
        double fx = xmax * i / 4.0, fy = ymax * i / 4.0;
        os << "<text x='" << px(fx) << "' y='" << h - mb + 16
           << "' text-anchor='middle' font-size='10'>" << fx << "</text>\n";
        os << "<text x='" << ml - 6 << "' y='" << py(fy) + 3
           << "' text-anchor='end' font-size='10'>" << fy << "</text>\n";
    }
    os << "<text x='" << (ml + w - mr) / 2 << "' y='" << h - 8
       << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
    os << "<text x='14' y='" << (mt + h - mb) / 2
       << "' text-anchor='middle' font-size='12' transform='rotate(-90 14 "
       << (mt + h - mb) / 2 << ")'>" << y_label << "</text>\n";

    if (!points.empty()) {
        os << "<polyline fill='none' stroke='#1f6fb2' stroke-width='1.5' points='";
        for (const auto& [x, y] : points) os << px(x) << "," << py(y) << " ";
        os << "'/>\n";
    }
    os << "</svg>\n";
}

} // namespace cpl
