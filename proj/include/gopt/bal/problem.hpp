#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gopt::bal {

/// Parse failure with the 1-based line of the offending token.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// A Bundle Adjustment in the Large problem: 9-parameter Snavely cameras
/// (angle-axis rotation, translation, focal length, two radial distortion
/// coefficients) observing 3D points in pixel coordinates.
struct BALProblem {
  struct Observation {
    std::uint32_t camera_index;
    std::uint32_t point_index;
    double x;
    double y;
  };

  std::size_t num_cameras() const { return cameras.size(); }
  std::size_t num_points() const { return points.size(); }
  std::size_t num_observations() const { return observations.size(); }

  std::vector<Observation> observations;
  std::vector<std::array<double, 9>> cameras;
  std::vector<std::array<double, 3>> points;
};

/// Reads the BAL text layout (header "num_cameras num_points
/// num_observations", observations, 9 camera scalars each, 3 point scalars
/// each); gzip-compressed files are decompressed transparently. Values are
/// read at binary64, locale-independently.
BALProblem parse_bal_file(const std::string& path);

/// Parses an in-memory buffer in the same layout.
BALProblem parse_bal_text(const std::string& text);

/// Writes the problem back in BAL layout with round-trip-exact (17
/// significant digit) values; a ".gz" suffix selects gzip output.
void serialize_bal_file(const BALProblem& problem, const std::string& path);

std::string serialize_bal_text(const BALProblem& problem);

}  // namespace gopt::bal
