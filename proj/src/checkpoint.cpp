// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

#include <openssl/evp.h>

#include "mqlrec/error.hpp"

namespace mqlrec {
namespace {

constexpr char kMagic[8] = {'M', 'Q', 'L', 'R', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > in.size()) throw CorruptCheckpoint(path + ": truncated file");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

using DigestBytes = std::array<unsigned char, 32>;

DigestBytes sha256_raw(const void* data, std::size_t size) {
  DigestBytes digest{};
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), data, size) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest.data(), &len) != 1) {
    throw Error("HashError", "SHA-256 computation failed");
  }
  return digest;
}

std::string to_hex(const unsigned char* bytes, std::size_t n) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    s += kHex[bytes[i] >> 4];
    s += kHex[bytes[i] & 0xF];
  }
  return s;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("IoError", "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

void write_container(const std::filesystem::path& path, const Container& container) {
  std::string bytes(kMagic, sizeof(kMagic));
  put<std::uint32_t>(bytes, kCheckpointVersion);
  const std::string header = container.header.dump();
  put<std::uint64_t>(bytes, header.size());
  bytes += header;
  put<std::uint64_t>(bytes, container.payload.size());
  bytes.append(reinterpret_cast<const char*>(container.payload.data()),
               container.payload.size() * sizeof(double));
  const auto digest = sha256_raw(bytes.data(), bytes.size());
  bytes.append(reinterpret_cast<const char*>(digest.data()), digest.size());

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Container read_container(const std::filesystem::path& path, const std::string& expected_kind) {
  const std::string file = path.string();
  const std::string bytes = read_all(path);
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptCheckpoint(file + ": bad magic");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(bytes, pos, file);
  if (version != kCheckpointVersion) {
    throw VersionMismatch(file + ": format version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const auto header_len = get<std::uint64_t>(bytes, pos, file);
  if (header_len > bytes.size() - pos) throw CorruptCheckpoint(file + ": truncated header");
  const std::string header = bytes.substr(pos, header_len);
  pos += header_len;
  const auto count = get<std::uint64_t>(bytes, pos, file);
  if (count > (bytes.size() - pos) / sizeof(double) ||
      pos + count * sizeof(double) + 32 != bytes.size()) {
    throw CorruptCheckpoint(file + ": truncated payload");
  }
  const auto digest = sha256_raw(bytes.data(), pos + count * sizeof(double));
  if (std::memcmp(digest.data(), bytes.data() + pos + count * sizeof(double), 32) != 0) {
    throw CorruptCheckpoint(file + ": checksum mismatch");
  }
  Container c;
  try {
    c.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(file + ": header is not valid JSON: " + e.what());
  }
  c.payload.resize(count);
  std::memcpy(c.payload.data(), bytes.data() + pos, count * sizeof(double));
  if (!expected_kind.empty() && c.header.value("kind", std::string()) != expected_kind) {
    throw CorruptCheckpoint(file + ": expected a '" + expected_kind + "' checkpoint, found '" +
                            c.header.value("kind", std::string("?")) + "'");
  }
  return c;
}

nlohmann::json describe_slots(const ParameterSet& params) {
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& s : params.slots()) {
    dir.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}, {"offset", s.offset}});
  }
  return dir;
}

void restore_parameters(ParameterSet& params, const nlohmann::json& directory,
                        const std::vector<double>& payload, std::size_t offset) {
  const auto& slots = params.slots();
  if (!directory.is_array() || directory.size() != slots.size()) {
    throw CorruptCheckpoint("tensor directory does not match the model layout");
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& d = directory[i];
    if (d.at("name") != slots[i].name || d.at("rows") != slots[i].rows ||
        d.at("cols") != slots[i].cols) {
      throw CorruptCheckpoint("tensor '" + slots[i].name + "' has a different shape in the checkpoint");
    }
  }
  if (offset + static_cast<std::size_t>(params.size()) > payload.size()) {
    throw CorruptCheckpoint("payload shorter than the parameter set");
  }
  std::memcpy(params.values().data(), payload.data() + offset, params.size() * sizeof(double));
}

std::string sha256_hex(const void* data, std::size_t size) {
  const auto d = sha256_raw(data, size);
  return to_hex(d.data(), d.size());
}

std::string sha256_file(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace mqlrec
