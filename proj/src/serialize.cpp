#include "dsm/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace dsm::io {

namespace {

void append_bytes_le(std::string& buf, uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t read_bytes_le(const std::string& buf, size_t& off, int n, const std::string& what) {
    if (off + static_cast<size_t>(n) > buf.size()) {
        throw DataError(what + ": truncated file");
    }
    uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
        v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    }
    off += static_cast<size_t>(n);
    return v;
}

} // namespace

void append_u32(std::string& buf, uint32_t v) { append_bytes_le(buf, v, 4); }
void append_u64(std::string& buf, uint64_t v) { append_bytes_le(buf, v, 8); }

uint32_t read_u32(const std::string& buf, size_t& off, const std::string& what) {
    return static_cast<uint32_t>(read_bytes_le(buf, off, 4, what));
}

uint64_t read_u64(const std::string& buf, size_t& off, const std::string& what) {
    return read_bytes_le(buf, off, 8, what);
}

std::string f32_blob(const Tensor& t) {
    std::string buf;
    buf.reserve(static_cast<size_t>(t.numel()) * 4);
    for (int64_t i = 0; i < t.numel(); ++i) {
        uint32_t bits = std::bit_cast<uint32_t>(static_cast<float>(t.at(i)));
        append_u32(buf, bits);
    }
    return buf;
}

Tensor f32_unblob(const std::string& payload, size_t& off, Shape shape, Dtype dt,
                  const std::string& what) {
    Tensor t = Tensor::zeros(std::move(shape), dt);
    for (int64_t i = 0; i < t.numel(); ++i) {
        uint32_t bits = read_u32(payload, off, what);
        t.set(i, static_cast<double>(std::bit_cast<float>(bits)));
    }
    return t;
}

std::string f64_blob(const Tensor& t) {
    std::string buf;
    buf.reserve(static_cast<size_t>(t.numel()) * 8);
    for (int64_t i = 0; i < t.numel(); ++i) {
        append_u64(buf, std::bit_cast<uint64_t>(t.at(i)));
    }
    return buf;
}

Tensor f64_unblob(const std::string& payload, size_t& off, Shape shape,
                  const std::string& what) {
    Tensor t = Tensor::zeros(std::move(shape), Dtype::F64);
    for (int64_t i = 0; i < t.numel(); ++i) {
        t.set(i, std::bit_cast<double>(read_u64(payload, off, what)));
    }
    return t;
}

void write_record(const std::string& path, const std::string& magic, uint32_t version,
                  const nlohmann::json& header, const std::string& payload) {
    if (magic.size() != 4) throw ContractError("write_record: magic must be 4 bytes");
    std::string hdr = header.dump();
    std::string buf;
    buf.reserve(16 + hdr.size() + payload.size());
    buf += magic;
    append_u32(buf, version);
    append_u64(buf, hdr.size());
    buf += hdr;
    buf += payload;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("write_record: cannot open " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw DataError("write_record: short write to " + path);
}

Record read_record(const std::string& path, const std::string& magic, uint32_t max_version) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("read_record: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t off = 0;
    if (buf.size() < 16) throw DataError(path + ": truncated header");
    if (buf.substr(0, 4) != magic) {
        throw DataError(path + ": bad magic, expected " + magic);
    }
    off = 4;
    Record rec;
    rec.version = read_u32(buf, off, path);
    if (rec.version == 0 || rec.version > max_version) {
        throw DataError(path + ": unsupported version " + std::to_string(rec.version));
    }
    uint64_t hlen = read_u64(buf, off, path);
    if (off + hlen > buf.size()) throw DataError(path + ": header overruns file");
    try {
        rec.header = nlohmann::json::parse(buf.substr(off, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": invalid JSON header: " + e.what());
    }
    rec.payload = buf.substr(off + hlen);
    return rec;
}

} // namespace dsm::io
