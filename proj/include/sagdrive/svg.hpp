#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "sagdrive/errors.hpp"
#include "sagdrive/geometry.hpp"

namespace sagdrive {

// Minimal SVG emitter for the report plots.
class SvgCanvas {
 public:
  SvgCanvas(double width, double height) : w_(width), h_(height) {
    body_ << std::setprecision(6);
  }

  void rect(double x, double y, double w, double h, const std::string& fill,
            double opacity = 1.0) {
    body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
          << "\" fill=\"" << fill << "\" fill-opacity=\"" << opacity << "\"/>\n";
  }

  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double width = 1.0) {
    body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
          << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"/>\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke,
                double width = 1.5, const std::string& dash = "") {
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"" << width
          << "\"";
    if (!dash.empty()) body_ << " stroke-dasharray=\"" << dash << "\"";
    body_ << " points=\"";
    for (const auto& [x, y] : pts) body_ << x << ',' << y << ' ';
    body_ << "\"/>\n";
  }

  void polygon(const std::vector<std::pair<double, double>>& pts, const std::string& stroke,
               const std::string& fill, double opacity = 0.4) {
    body_ << "<polygon stroke=\"" << stroke << "\" fill=\"" << fill << "\" fill-opacity=\""
          << opacity << "\" points=\"";
    for (const auto& [x, y] : pts) body_ << x << ',' << y << ' ';
    body_ << "\"/>\n";
  }

  void circle(double x, double y, double r, const std::string& fill) {
    body_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r << "\" fill=\"" << fill
          << "\"/>\n";
  }

  void text(double x, double y, const std::string& s, int size = 12,
            const std::string& fill = "#333333") {
    body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
          << "\" font-family=\"sans-serif\" fill=\"" << fill << "\">" << s << "</text>\n";
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("svg: cannot open for write: " + path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
       << "\" viewBox=\"0 0 " << w_ << ' ' << h_ << "\">\n"
       << "<rect width=\"" << w_ << "\" height=\"" << h_ << "\" fill=\"white\"/>\n"
       << body_.str() << "</svg>\n";
    if (!os) throw DataError("svg: write failed: " + path);
  }

 private:
  double w_, h_;
  std::ostringstream body_;
};

}  // namespace sagdrive
