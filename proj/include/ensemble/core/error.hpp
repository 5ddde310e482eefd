#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ensemble {

enum class ErrorKind {
  kConfig,
  kValidation,
  kDegenerateSignal,
  kInsufficientAudio,
  kInsufficientOverlap,
  kAlignment,
  kCoverage,
  kDomain,
  kNoVerse,
  kProtocol,
  kMissingArtifact,
  kTrainingFailure,
  kSamplingFailure,
  kEvaluation,
  kIo,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` selects the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool ok, ErrorKind kind, const std::string& what) {
  if (!ok) throw Error(kind, what);
}

}  // namespace ensemble
