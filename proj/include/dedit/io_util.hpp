#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace dedit {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

enum class FormatErrorKind {
    kBadMagic,
    kBadVersion,
    kTruncated,
    kChecksum,
    kHeader,
    kSize,
};

// Loader failure with a machine-readable kind, so callers (and tests) can
// distinguish a wrong file type from a damaged file of the right type.
class FormatError : public std::runtime_error {
public:
    FormatError(FormatErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    FormatErrorKind kind() const { return kind_; }

private:
    FormatErrorKind kind_;
};

// CRC-32 (IEEE 802.3, reflected 0xEDB88320), the common zip/png polynomial.
inline std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = seed ^ 0xFFFFFFFFu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

// FNV-1a over raw bytes; used for config digests and bitwise snapshots.
inline std::uint64_t fnv1a64_bytes(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull) {
    std::uint64_t h = seed;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

// Append/read little-endian plain values against a byte buffer.
template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t len) : p_(data), len_(len) {}

    template <class T>
    T get(const char* what) {
        if (pos_ + sizeof(T) > len_)
            throw FormatError(FormatErrorKind::kTruncated,
                              std::string("truncated while reading ") + what);
        T v;
        std::memcpy(&v, p_ + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    void get_bytes(void* dst, std::size_t n, const char* what) {
        if (pos_ + n > len_)
            throw FormatError(FormatErrorKind::kTruncated,
                              std::string("truncated while reading ") + what);
        std::memcpy(dst, p_ + pos_, n);
        pos_ += n;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return len_ - pos_; }
    const std::uint8_t* cursor() const { return p_ + pos_; }
    void skip(std::size_t n, const char* what) {
        if (pos_ + n > len_)
            throw FormatError(FormatErrorKind::kTruncated, std::string("truncated while skipping ") + what);
        pos_ += n;
    }

private:
    const std::uint8_t* p_;
    std::size_t len_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace dedit
