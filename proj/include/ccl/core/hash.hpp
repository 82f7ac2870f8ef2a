#ifndef CCL_CORE_HASH_HPP
#define CCL_CORE_HASH_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>

namespace ccl {

/// FNV-1a over arbitrary bytes. Used for config hashes and artifact
/// traceability stamps, not for security.
inline std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string hash_hex(std::string_view s) { return hex64(fnv1a64(s)); }

inline std::string hash_file_hex(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("hash_file_hex: cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return hex64(h);
}

}  // namespace ccl

#endif  // CCL_CORE_HASH_HPP
