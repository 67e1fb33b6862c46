#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tlnet/error.hpp"
#include "tlnet/tensor.hpp"

namespace tlnet::ply {

using Color = std::array<std::uint8_t, 3>;

/// Fixed palette, cycled for class ids beyond its length.
inline Color class_color(std::int32_t label) {
  static const Color palette[] = {{245, 150, 100}, {245, 230, 100}, {150, 60, 30},  {180, 30, 80},  {255, 0, 0},
                                  {30, 30, 255},   {200, 40, 255},  {90, 30, 150},  {255, 0, 255},  {255, 150, 255},
                                  {75, 0, 75},     {75, 0, 175},    {0, 200, 255},  {50, 120, 255}, {0, 175, 0},
                                  {0, 60, 135},    {80, 240, 150},  {150, 240, 255}, {0, 0, 255},   {255, 255, 50},
                                  {100, 150, 245}, {100, 230, 245}, {30, 60, 150},  {80, 30, 180},  {255, 40, 200}};
  if (label < 0) return {0, 0, 0};
  return palette[std::size_t(label) % std::size(palette)];
}

/// ASCII PLY with per-vertex colors and optional edges (vertex index pairs).
inline void write(const std::string& path, const Mat<double>& positions, const std::vector<Color>& colors,
                  const std::vector<std::array<std::int32_t, 2>>& edges = {}) {
  if (positions.cols() != 3) throw ShapeError("ply: positions must have 3 columns");
  if (colors.size() != std::size_t(positions.rows())) throw ShapeError("ply: one color per vertex required");
  std::ofstream out(path);
  if (!out) throw UserError("cannot write " + path);
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << positions.rows() << '\n';
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (!edges.empty()) out << "element edge " << edges.size() << "\nproperty int vertex1\nproperty int vertex2\n";
  out << "end_header\n";
  for (Eigen::Index i = 0; i < positions.rows(); ++i) {
    const auto& c = colors[std::size_t(i)];
    out << float(positions(i, 0)) << ' ' << float(positions(i, 1)) << ' ' << float(positions(i, 2)) << ' ' << int(c[0])
        << ' ' << int(c[1]) << ' ' << int(c[2]) << '\n';
  }
  for (const auto& e : edges) out << e[0] << ' ' << e[1] << '\n';
}

inline void write_labeled_points(const std::string& path, const Mat<double>& positions, const std::vector<std::int32_t>& labels) {
  std::vector<Color> colors;
  colors.reserve(labels.size());
  for (auto l : labels) colors.push_back(class_color(l));
  write(path, positions, colors);
}

/// One line segment per arrow: origin (white) to origin + direction (red).
inline void write_arrows(const std::string& path, const Mat<double>& origins, const Mat<double>& directions) {
  if (origins.rows() != directions.rows() || origins.cols() != 3 || directions.cols() != 3) {
    throw ShapeError("ply arrows: origins and directions must be matching n x 3");
  }
  const Eigen::Index n = origins.rows();
  Mat<double> pts(2 * n, 3);
  std::vector<Color> colors;
  std::vector<std::array<std::int32_t, 2>> edges;
  for (Eigen::Index i = 0; i < n; ++i) {
    pts.row(2 * i) = origins.row(i);
    pts.row(2 * i + 1) = origins.row(i) + directions.row(i);
    colors.push_back({255, 255, 255});
    colors.push_back({255, 0, 0});
    edges.push_back({std::int32_t(2 * i), std::int32_t(2 * i + 1)});
  }
  write(path, pts, colors, edges);
}

struct Header {
  std::size_t vertices = 0;
  std::size_t edges = 0;
  std::size_t body_lines = 0;
};

/// Parses the header and counts body lines; used to check self-consistency.
inline Header read_header(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "ply") throw FormatError(path + ": missing ply magic");
  Header h;
  bool ended = false;
  while (std::getline(in, line)) {
    if (!ended) {
      if (line.rfind("element vertex ", 0) == 0) h.vertices = std::stoul(line.substr(15));
      if (line.rfind("element edge ", 0) == 0) h.edges = std::stoul(line.substr(13));
      if (line == "end_header") ended = true;
    } else if (!line.empty()) {
      ++h.body_lines;
    }
  }
  if (!ended) throw FormatError(path + ": missing end_header");
  return h;
}

}  // namespace tlnet::ply
