#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace hsicomp {

// Base for all library errors. `category()` is a short stable token used by
// the CLI for one-line machine-parseable diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& w) : Error("index", w) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& w) : Error("parse", w) {}
};

struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};

struct StructureError : Error {
  explicit StructureError(const std::string& w) : Error("structure", w) {}
};

struct CalibrationError : Error {
  explicit CalibrationError(const std::string& w) : Error("calibration", w) {}
};

struct SchemeError : Error {
  explicit SchemeError(const std::string& w) : Error("scheme", w) {}
};

struct InfeasibleError : Error {
  explicit InfeasibleError(const std::string& w) : Error("infeasible", w) {}
};

struct TrainingError : Error {
  explicit TrainingError(const std::string& w) : Error("training", w) {}
};

struct LabelError : Error {
  explicit LabelError(const std::string& w) : Error("label", w) {}
};

struct PipelineError : Error {
  explicit PipelineError(const std::string& w) : Error("pipeline", w) {}
};

}  // namespace hsicomp
