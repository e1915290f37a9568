#pragma once

#include <stdexcept>
#include <string>

namespace reconuq {

// Base class for all library errors. Subclasses name the violated contract
// so the CLI can map them onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// grid
struct ShapeMismatch : Error { using Error::Error; };
struct EmptyMask : Error { using Error::Error; };
struct PatchTooLarge : Error { using Error::Error; };
struct BadAxis : Error { using Error::Error; };

// synth
struct SpecInvalid : Error { using Error::Error; };
struct EmptyTarget : Error { using Error::Error; };

// net / train
struct NonFiniteGradient : Error { using Error::Error; };
struct TooFewSamples : Error { using Error::Error; };
struct DuplicateSeed : Error { using Error::Error; };

// uq
struct NoReconBranch : Error { using Error::Error; };
struct BadDropProb : Error { using Error::Error; };
struct EmptyEnsemble : Error { using Error::Error; };

// eval
struct DegenerateVariance : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct DegenerateID : Error { using Error::Error; };
struct EmptyStructure : Error { using Error::Error; };
struct TooFew : Error { using Error::Error; };
struct IdMismatch : Error { using Error::Error; };

// I/O and config
struct IoError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

}  // namespace reconuq
