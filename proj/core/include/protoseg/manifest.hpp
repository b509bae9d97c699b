#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace protoseg {

/// FNV-1a over a file's bytes; used to fingerprint run inputs.
inline std::uint64_t content_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char c;
    while (in.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Serialized next to every output directory; re-running with the same
/// manifest reproduces the outputs.
struct RunManifest {
    std::string subcommand;
    std::vector<std::pair<std::string, std::string>> entries;

    void set(const std::string& key, const std::string& value) { entries.emplace_back(key, value); }
    template <typename T>
    void set_num(const std::string& key, T value) {
        entries.emplace_back(key, std::to_string(value));
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream out(path);
        out << "subcommand = " << subcommand << "\n";
        for (const auto& [k, v] : entries) out << k << " = " << v << "\n";
    }
};

}  // namespace protoseg
