// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary container used by every checkpoint in the project.
//
//   offset  size  field
//   0       8     magic "MQLRCKPT"
//   8       4     format version, little-endian uint32 (currently 1)
//   12      8     header length H in bytes, little-endian uint64
//   20      H     UTF-8 JSON header (kind, config echo, tensor directory, logs)
//   20+H    8     payload length N in doubles, little-endian uint64
//   28+H    8N    payload, IEEE-754 binary64 little-endian
//   ...     32    SHA-256 over every preceding byte
//
// Weights round-trip bit-exactly because the payload stores raw binary64.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mqlrec/common.hpp"
#include "mqlrec/nn.hpp"

namespace mqlrec {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Container {
  nlohmann::json header;
  std::vector<double> payload;
};

void write_container(const std::filesystem::path& path, const Container& container);
/// Throws CorruptCheckpoint (bad magic, truncation, checksum) or
/// VersionMismatch. When `expected_kind` is non-empty the header's "kind"
/// must equal it.
Container read_container(const std::filesystem::path& path, const std::string& expected_kind = "");

/// Tensor directory (names and shapes) for the JSON header.
nlohmann::json describe_slots(const ParameterSet& params);
/// Copies `payload[offset, offset + params.size())` into `params` after
/// checking that `directory` matches the layout of `params`.
void restore_parameters(ParameterSet& params, const nlohmann::json& directory,
                        const std::vector<double>& payload, std::size_t offset = 0);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace mqlrec
