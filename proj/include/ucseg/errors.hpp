#pragma once

#include <stdexcept>
#include <string>

namespace ucseg {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

struct EmptyBankError : std::runtime_error {
  explicit EmptyBankError(const std::string& what) : std::runtime_error(what) {}
};

struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct EmptyReportError : std::runtime_error {
  explicit EmptyReportError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ucseg
