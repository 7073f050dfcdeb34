#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "dsm/tensor.hpp"

// Shared framing for the binary artifact formats. Every file is
//   magic[4] | u32 version (LE) | u64 header length (LE) | UTF-8 JSON header
//   | little-endian payload blob
// Readers throw DataError on any malformed input (bad magic, unsupported
// version, truncation, invalid JSON) so the CLI can map them to one exit code.
namespace dsm::io {

void append_u32(std::string& buf, uint32_t v);
void append_u64(std::string& buf, uint64_t v);
uint32_t read_u32(const std::string& buf, size_t& off, const std::string& what);
uint64_t read_u64(const std::string& buf, size_t& off, const std::string& what);

// Row-major little-endian float32 image of a tensor (values converted from
// the tensor's dtype), and its inverse.
std::string f32_blob(const Tensor& t);
Tensor f32_unblob(const std::string& payload, size_t& off, Shape shape, Dtype dt,
                  const std::string& what);

// Exact little-endian float64 image (used for optimizer state, where resume
// must reproduce the uninterrupted run bit-for-bit).
std::string f64_blob(const Tensor& t);
Tensor f64_unblob(const std::string& payload, size_t& off, Shape shape,
                  const std::string& what);

struct Record {
    uint32_t version = 0;
    nlohmann::json header;
    std::string payload;
};

void write_record(const std::string& path, const std::string& magic, uint32_t version,
                  const nlohmann::json& header, const std::string& payload);
Record read_record(const std::string& path, const std::string& magic, uint32_t max_version);

} // namespace dsm::io
