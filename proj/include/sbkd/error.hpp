// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sbkd {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument or command-line usage.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Shapes or dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Unreadable, malformed or inconsistent input data (audio, corpus, checkpoint).
class DataError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss or gradient.
class DivergedError : public Error {
 public:
  using Error::Error;
};

}  // namespace sbkd
