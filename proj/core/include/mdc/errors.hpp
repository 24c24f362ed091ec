#pragma once

#include <stdexcept>
#include <string>

namespace mdc {

// Shape/domain violations detected before any work happens.
struct InvalidShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A corpus manifest or one of its referenced files is unreadable or inconsistent.
struct CorruptCorpusError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint file is missing, truncated, or structurally incompatible
// with the model it is being loaded into.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mdc
