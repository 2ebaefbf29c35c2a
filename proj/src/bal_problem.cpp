#include "gopt/bal/problem.hpp"

#include <zlib.h>

#include <charconv>
#include <cstdio>
#include <stdexcept>
#include <system_error>

namespace gopt::bal {

namespace {

/// Whitespace tokenizer that tracks 1-based line numbers for diagnostics.
class Tokenizer {
 public:
  explicit Tokenizer(const std::string& text) : text_(text) {}

  std::size_t line() const { return line_; }

  bool next_token(std::string_view& out) {
    while (pos_ < text_.size() && is_space(text_[pos_])) {
      if (text_[pos_] == '\n') ++line_;
      ++pos_;
    }
    if (pos_ >= text_.size()) return false;
    const std::size_t start = pos_;
    while (pos_ < text_.size() && !is_space(text_[pos_])) ++pos_;
    out = std::string_view(text_).substr(start, pos_ - start);
    return true;
  }

  double expect_double(const char* what) {
    std::string_view tok;
    if (!next_token(tok)) throw ParseError(line_, std::string("truncated file, expected ") + what);
    double value = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
    if (ec != std::errc{} || ptr != tok.data() + tok.size())
      throw ParseError(line_, std::string("non-numeric token '") + std::string(tok) + "' for " + what);
    return value;
  }

  std::uint64_t expect_count(const char* what) {
    std::string_view tok;
    if (!next_token(tok)) throw ParseError(line_, std::string("truncated file, expected ") + what);
    std::uint64_t value = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
    if (ec != std::errc{} || ptr != tok.data() + tok.size())
      throw ParseError(line_, std::string("invalid integer '") + std::string(tok) + "' for " + what);
    return value;
  }

 private:
  static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

  const std::string& text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

std::string read_possibly_gzipped(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw std::runtime_error("cannot open " + path);
  std::string out;
  char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  if (n < 0) {
    int errnum = 0;
    const char* msg = gzerror(f, &errnum);
    std::string err = msg ? msg : "read error";
    gzclose(f);
    throw std::runtime_error("error reading " + path + ": " + err);
  }
  gzclose(f);
  return out;
}

}  // namespace

BALProblem parse_bal_text(const std::string& text) {
  Tokenizer tok(text);
  BALProblem problem;
  const std::uint64_t num_cameras = tok.expect_count("camera count");
  const std::uint64_t num_points = tok.expect_count("point count");
  const std::uint64_t num_observations = tok.expect_count("observation count");

  problem.observations.reserve(num_observations);
  for (std::uint64_t i = 0; i < num_observations; ++i) {
    BALProblem::Observation obs;
    const std::uint64_t cam = tok.expect_count("camera index");
    const std::uint64_t pt = tok.expect_count("point index");
    if (cam >= num_cameras)
      throw ParseError(tok.line(), "camera index " + std::to_string(cam) + " out of range (" +
                                       std::to_string(num_cameras) + " cameras)");
    if (pt >= num_points)
      throw ParseError(tok.line(), "point index " + std::to_string(pt) + " out of range (" +
                                       std::to_string(num_points) + " points)");
    obs.camera_index = static_cast<std::uint32_t>(cam);
    obs.point_index = static_cast<std::uint32_t>(pt);
    obs.x = tok.expect_double("observation x");
    obs.y = tok.expect_double("observation y");
    problem.observations.push_back(obs);
  }

  problem.cameras.resize(num_cameras);
  for (std::uint64_t c = 0; c < num_cameras; ++c)
    for (int k = 0; k < 9; ++k) problem.cameras[c][k] = tok.expect_double("camera parameter");

  problem.points.resize(num_points);
  for (std::uint64_t p = 0; p < num_points; ++p)
    for (int k = 0; k < 3; ++k) problem.points[p][k] = tok.expect_double("point coordinate");

  return problem;
}

BALProblem parse_bal_file(const std::string& path) {
  return parse_bal_text(read_possibly_gzipped(path));
}

std::string serialize_bal_text(const BALProblem& problem) {
  std::string out;
  char buf[256];
  auto append = [&out, &buf](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof(buf), fmt, args...);
    out += buf;
  };
  append("%zu %zu %zu\n", problem.num_cameras(), problem.num_points(), problem.num_observations());
  for (const auto& obs : problem.observations)
    append("%u %u %.17g %.17g\n", obs.camera_index, obs.point_index, obs.x, obs.y);
  for (const auto& cam : problem.cameras)
    for (double v : cam) append("%.17g\n", v);
  for (const auto& pt : problem.points)
    for (double v : pt) append("%.17g\n", v);
  return out;
}

void serialize_bal_file(const BALProblem& problem, const std::string& path) {
  const std::string text = serialize_bal_text(problem);
  if (path.size() > 3 && path.substr(path.size() - 3) == ".gz") {
    gzFile f = gzopen(path.c_str(), "wb");
    if (f == nullptr) throw std::runtime_error("cannot open " + path + " for writing");
    if (gzwrite(f, text.data(), static_cast<unsigned>(text.size())) !=
        static_cast<int>(text.size())) {
      gzclose(f);
      throw std::runtime_error("error writing " + path);
    }
    gzclose(f);
    return;
  }
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw std::runtime_error("cannot open " + path + " for writing");
  const std::size_t written = std::fwrite(text.data(), 1, text.size(), f);
  std::fclose(f);
  if (written != text.size()) throw std::runtime_error("error writing " + path);
}

}  // namespace gopt::bal
