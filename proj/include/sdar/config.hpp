#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sdar {

// Process-level error taxonomy for the command-line tool; each maps to a
// distinct exit code (config 2, missing artifact 3, invariant violation 4).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvariantViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key=value configuration with dotted namespaced keys. Entry order is
/// preserved, so a map serializes and parses back identically.
class ConfigMap {
public:
    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const;
    /// Inserts or replaces; replacement keeps the original position.
    void set(const std::string& key, std::string value);

    const std::vector<std::pair<std::string, std::string>>& entries() const {
        return entries_;
    }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

/// One `key=value` per line; blank lines and `#` comments are skipped,
/// whitespace around key and value is trimmed, duplicate or malformed keys
/// are rejected. Keys use [A-Za-z0-9_.-].
ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config(const std::string& path);
std::string serialize_config(const ConfigMap& cfg);
void save_config(const std::string& path, const ConfigMap& cfg);

/// Typed access that records every key a command asked about, so keys the
/// command never recognizes can be rejected in one pass at the end. Getter
/// failures carry the offending key in the message.
class ConfigReader {
public:
    explicit ConfigReader(const ConfigMap& map) : map_(&map) {}

    std::string get_string(const std::string& key, const std::string& def);
    int get_int(const std::string& key, int def);
    double get_double(const std::string& key, double def);
    bool get_bool(const std::string& key, bool def);
    uint64_t get_u64(const std::string& key, uint64_t def);
    std::string require_string(const std::string& key);

    /// Throws ConfigError naming every key no getter asked for.
    void finish() const;

private:
    const std::string* raw(const std::string& key);

    const ConfigMap* map_;
    std::set<std::string> seen_;
};

}  // namespace sdar
