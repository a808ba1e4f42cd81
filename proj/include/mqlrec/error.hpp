// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mqlrec {

/// Base of every error raised by the library. `kind()` is a stable,
/// machine-readable name used by the CLI's JSON error output.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// A file did not conform to its format. `line` is 1-based, 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& path, std::size_t line, const std::string& what)
      : Error("ParseError", path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  ParseError(std::string kind, const std::string& path, std::size_t line, const std::string& what)
      : Error(std::move(kind), path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DuplicateItemError : public ParseError {
 public:
  DuplicateItemError(const std::string& path, std::size_t line, std::string item)
      : ParseError("DuplicateItem", path, line, "duplicate item id '" + item + "'"),
        item_(std::move(item)) {}
  const std::string& item() const noexcept { return item_; }

 private:
  std::string item_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& message) : Error("InvalidArgument", message) {}
};

class MissingEmbeddingError : public Error {
 public:
  explicit MissingEmbeddingError(const std::string& item)
      : Error("MissingEmbedding", "item '" + item + "' has no embedding in one or both modalities") {}
};

class DimensionMismatch : public Error {
 public:
  explicit DimensionMismatch(const std::string& message) : Error("DimensionMismatch", message) {}
};

class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& term)
      : Error("NonFinite", "non-finite value in " + term), term_(term) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

class TokenError : public Error {
 public:
  TokenError(std::string kind, const std::string& message) : Error(std::move(kind), message) {}
};

class CapacityExhausted : public Error {
 public:
  explicit CapacityExhausted(const std::string& message) : Error("CapacityExhausted", message) {}
};

class CorruptCheckpoint : public Error {
 public:
  explicit CorruptCheckpoint(const std::string& message) : Error("CorruptCheckpoint", message) {}
};

class VersionMismatch : public Error {
 public:
  explicit VersionMismatch(const std::string& message) : Error("VersionMismatch", message) {}
};

class PipelineError : public Error {
 public:
  explicit PipelineError(const std::string& message) : Error("PipelineError", message) {}
  PipelineError(std::string kind, const std::string& message) : Error(std::move(kind), message) {}
};

}  // namespace mqlrec
