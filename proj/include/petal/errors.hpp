#pragma once

#include <stdexcept>
#include <string>

namespace petal {

// Error taxonomy shared by every module. The CLI maps categories onto its
// exit-code contract: usage/config problems 2, contract breaches 3, I/O 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
struct DimensionError : Error { using Error::Error; };
// Precondition violated by the caller (non-scalar loss, empty input, ...).
struct ContractError : Error { using Error::Error; };
// Inconsistent or impossible configuration values.
struct ConfigError : Error { using Error::Error; };
// Unknown modality, slot, expert index or similar key.
struct LookupError : Error { using Error::Error; };
// Non-finite values where finite ones are required.
struct NumericError : Error { using Error::Error; };
// A verification oracle could not run (e.g. non-deterministic objective).
struct OracleError : Error { using Error::Error; };
// Malformed file container (bad magic / version).
struct FormatError : Error { using Error::Error; };
// Checksum mismatch on load.
struct CorruptionError : Error { using Error::Error; };
// Stored tensors do not fit the requested configuration.
struct IncompatibilityError : Error { using Error::Error; };
// Filesystem failures.
struct IoError : Error { using Error::Error; };
// Bad command line.
struct UsageError : Error { using Error::Error; };

}  // namespace petal
