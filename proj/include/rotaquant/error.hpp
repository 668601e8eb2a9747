/*
 * Copyright 2026 The rotaquant Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace rotaquant {

// Base of every error the library throws. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: bad dims, unknown names, inconsistent sub-configs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operation is not allowed in the object's current state (double fuse, rotating twice, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

// Iteration cap hit, non-finite values, singular factorizations, invariance failures.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Bad caller input such as tokens out of range.
class InputError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind { kBadMagic, kMalformedHeader, kShapeMismatch, kTruncated };

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::kBadMagic: return "bad magic";
    case FormatErrorKind::kMalformedHeader: return "malformed header";
    case FormatErrorKind::kShapeMismatch: return "shape/offset mismatch";
    case FormatErrorKind::kTruncated: return "truncated payload";
  }
  return "unknown";
}

// Container bytes do not follow the RTA1 layout.
class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

}  // namespace rotaquant
