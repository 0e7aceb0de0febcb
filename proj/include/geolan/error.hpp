// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace geolan {

/// Caller violated a documented precondition (shape, range, symmetry).
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed user-level input: bad token ids, mismatched lengths, bad config.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input is well-formed but the quantity is undefined on it (zero rows,
/// zero variance, all-zero spectrum).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Binary or JSON artifact failed validation while reading.
class CorruptDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by the differentiation tape when a graph mixes tapes or asks for
/// gradients of something that is not a recorded leaf.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Training produced a non-finite loss; the message carries the diagnostic.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw PreconditionError(what);
}

}  // namespace detail
}  // namespace geolan
