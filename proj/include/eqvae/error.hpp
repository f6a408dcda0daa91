#pragma once

#include <stdexcept>
#include <string>

namespace eqvae {

// Exit-code categories surfaced by the CLI.
enum class ErrorKind { kConfig = 2, kData = 3, kNumerical = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

// Parameter outside its mathematical domain (bad scale, non right angle, ...).
struct DomainError : Error {
  explicit DomainError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

// A transform would produce an output grid with a zero-sized axis.
struct DegenerateOutputError : Error {
  explicit DegenerateOutputError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

struct DegenerateInputError : Error {
  explicit DegenerateInputError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& what) : Error(ErrorKind::kNumerical, what) {}
};

}  // namespace eqvae
