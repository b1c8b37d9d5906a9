#pragma once

#include <stdexcept>
#include <string>

namespace povert {

/// Base class for all engine errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
  using Error::Error;
};

/// A 6D rotation input whose two vectors cannot span a frame.
struct DegenerateRotation : Error {
  using Error::Error;
};

struct InvalidSampleCount : Error {
  using Error::Error;
};

/// Backward pass reached an op that was recorded without an adjoint.
struct UnregisteredAdjoint : Error {
  using Error::Error;
};

/// A gradient group contains NaN or Inf; carries the group name.
struct NonFiniteGradient : Error {
  explicit NonFiniteGradient(const std::string& group)
      : Error("non-finite gradient in group '" + group + "'"), group_name(group) {}
  std::string group_name;
};

struct DivergedTraining : Error {
  using Error::Error;
};

/// Config file problem; message names the offending key.
struct ConfigError : Error {
  using Error::Error;
};

/// One or more experiment runs failed.
struct RunFailure : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace povert
