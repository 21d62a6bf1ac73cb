/**
 * Copyright      2026  The llmfuse Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace llmfuse {

// Bad argument to an operation (shape mismatch, invalid axis, empty input).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented invariant or caller contract was violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Missing or unreadable input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed text or binary input. Carries the 1-based line number when the
// input is line oriented (0 otherwise).
class ParseError : public DataError {
 public:
  ParseError(const std::string& where, std::size_t line, const std::string& what)
      : DataError(where + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
        line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace llmfuse
