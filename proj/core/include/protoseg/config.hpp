#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace protoseg {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Flat "key = value" config file. '#' starts a comment. Every key must be
/// consumed by a typed getter; finish() rejects unknown keys.
class ConfigFile {
public:
    ConfigFile() = default;
    static ConfigFile parse_file(const std::filesystem::path& path);
    static ConfigFile parse_string(const std::string& text, const std::string& origin = "<string>");

    std::string get_string(const std::string& key, const std::string& fallback);
    double get_double(const std::string& key, double fallback);
    long get_long(const std::string& key, long fallback);
    bool get_bool(const std::string& key, bool fallback);
    bool has(const std::string& key) const { return values_.count(key) > 0; }

    /// Throws ConfigError naming any key no getter asked for.
    void finish() const;

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
    std::string origin_;
};

}  // namespace protoseg
