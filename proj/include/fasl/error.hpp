/*
 * Copyright 2026 The FASL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
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
#include <string_view>
#include <vector>

namespace fasl {

enum class ErrorCode {
  invalid_argument,
  parse,
  conflict,
  validation,
  not_found,
  io,
  busy,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::parse: return "parse_error";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::validation: return "validation_error";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::io: return "io_error";
    case ErrorCode::busy: return "busy";
  }
  return "unknown";
}

// Base exception for every failure raised by the library. `details` carries
// machine-readable context such as offending ids.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::vector<std::string> details = {})
      : std::runtime_error(message), code_(code), details_(std::move(details)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::vector<std::string>& details() const noexcept { return details_; }

 private:
  ErrorCode code_;
  std::vector<std::string> details_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::size_t line)
      : Error(ErrorCode::parse,
              "line " + std::to_string(line) + ": " + message),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConflictError : public Error {
 public:
  ConflictError(const std::string& message, std::vector<std::string> ids)
      : Error(ErrorCode::conflict, message, std::move(ids)) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& message,
                           std::vector<std::string> details = {})
      : Error(ErrorCode::validation, message, std::move(details)) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error(ErrorCode::io, message) {}
};

[[noreturn]] inline void fail(const std::string& message) {
  throw Error(ErrorCode::invalid_argument, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(message);
}

}  // namespace fasl
