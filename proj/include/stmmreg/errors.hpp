#pragma once

#include <stdexcept>
#include <string>

namespace stmmreg {

/// Structured failure while decoding an external file. `line` is 1-based and
/// 0 when the location is not line-oriented (binary payloads, JSON).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, int line, const std::string& message)
      : std::runtime_error(line > 0 ? file + ":" + std::to_string(line) + ": " + message
                                    : file + ": " + message),
        line_(line) {}

  int line() const { return line_; }

 private:
  int line_;
};

/// Filesystem-level failure (missing file, unwritable path).
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The weighted alignment problem has no unique rigid solution
/// (too few effective pairs, or collinear weighted spread).
class DegenerateGeometryError : public std::runtime_error {
 public:
  explicit DegenerateGeometryError(const std::string& message, int view = -1)
      : std::runtime_error(message), view_(view) {}

  /// 1-based view the failure belongs to, or -1 when not view-specific.
  int view() const { return view_; }

 private:
  int view_;
};

}  // namespace stmmreg
