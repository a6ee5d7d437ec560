#pragma once

// `cdrop` command-line front end. Commands are exposed as a library so the
// acceptance suite can drive them in-process.
//
// Exit codes: 0 success, 1 domain/validation failure, 2 I/O failure.
// Errors are written to the error stream as one JSON object.

#include <iosfwd>
#include <string>
#include <vector>

namespace cdrop::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cdrop::cli
