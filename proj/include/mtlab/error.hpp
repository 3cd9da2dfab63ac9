#pragma once

#include <stdexcept>
#include <string>

namespace mtlab {

// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Misuse of the computation graph (foreign nodes, unreachable targets, ...).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid configuration or violated operation precondition.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dataset sampling failures (not enough classes or images).
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary container or checkpoint. Carries the byte offset and the
// section being parsed when the failure was detected.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::string section, std::size_t offset)
      : std::runtime_error(what + " [section '" + section + "' at offset " + std::to_string(offset) + "]"),
        section_(std::move(section)),
        offset_(offset) {}

  const std::string& section() const noexcept { return section_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string section_;
  std::size_t offset_;
};

}  // namespace mtlab
