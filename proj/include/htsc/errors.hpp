#pragma once

#include <stdexcept>
#include <string>

namespace htsc {

/// Tensor shapes that do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Token, target or table index out of range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Invalid configuration value or combination.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values in a forward buffer or a loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or mismatched file contents (checkpoints, corpora, JSONL).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint missing parameters needed for a stage-1 -> stage-2 transfer.
class TransferError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace htsc
