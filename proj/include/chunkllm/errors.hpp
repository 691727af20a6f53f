// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace chunkllm {

// Base of every error thrown by this library. Subclasses name the contract
// that was violated so callers (and the CLI exit-code mapping) can tell them
// apart.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct InputError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

}  // namespace chunkllm
