#ifndef ADAPTSENSE_ERRORS_H_
#define ADAPTSENSE_ERRORS_H_

#include <stdexcept>
#include <string>

namespace adaptsense {

// Base for every contract violation raised by the library. The CLI maps
// these to a single "ERROR:" line and a nonzero exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape: " + msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error("data: " + msg) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract: " + msg) {}
};

class EmptySelectionError : public Error {
 public:
  explicit EmptySelectionError(const std::string& msg)
      : Error("empty selection: " + msg) {}
};

class GraphError : public Error {
 public:
  explicit GraphError(const std::string& msg) : Error("graph: " + msg) {}
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& msg)
      : Error("divergence: " + msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

}  // namespace adaptsense

#endif  // ADAPTSENSE_ERRORS_H_
