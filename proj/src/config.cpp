#include "sdar/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace sdar {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k) {
        const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' ||
                        c == '-';
        if (!ok) return false;
    }
    return true;
}

}  // namespace

bool ConfigMap::has(const std::string& key) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return true;
    return false;
}

const std::string& ConfigMap::get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return v;
    throw ConfigError("missing config key: " + key);
}

void ConfigMap::set(const std::string& key, std::string value) {
    if (!valid_key(key)) throw ConfigError("invalid config key: '" + key + "'");
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    entries_.emplace_back(key, std::move(value));
}

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped.front() == '#') continue;
        const size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        if (!valid_key(key))
            throw ConfigError("config line " + std::to_string(lineno) + ": invalid key '" +
                              key + "'");
        if (out.has(key))
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" +
                              key + "'");
        out.set(key, value);
    }
    return out;
}

ConfigMap load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is.is_open()) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
}

std::string serialize_config(const ConfigMap& cfg) {
    std::string out;
    for (const auto& [k, v] : cfg.entries()) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

void save_config(const std::string& path, const ConfigMap& cfg) {
    std::ofstream os(path);
    if (!os.is_open()) throw ConfigError("cannot write config file: " + path);
    os << serialize_config(cfg);
    if (!os.good()) throw ConfigError("failed writing config file: " + path);
}

const std::string* ConfigReader::raw(const std::string& key) {
    seen_.insert(key);
    for (const auto& [k, v] : map_->entries())
        if (k == key) return &v;
    return nullptr;
}

std::string ConfigReader::get_string(const std::string& key, const std::string& def) {
    const std::string* v = raw(key);
    return v ? *v : def;
}

std::string ConfigReader::require_string(const std::string& key) {
    const std::string* v = raw(key);
    if (!v || v->empty()) throw ConfigError("missing required config key: " + key);
    return *v;
}

int ConfigReader::get_int(const std::string& key, int def) {
    const std::string* v = raw(key);
    if (!v) return def;
    try {
        size_t used = 0;
        const long long parsed = std::stoll(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing characters");
        if (parsed < INT32_MIN || parsed > INT32_MAX) throw std::out_of_range("int range");
        return static_cast<int>(parsed);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an integer: '" + *v + "'");
    }
}

uint64_t ConfigReader::get_u64(const std::string& key, uint64_t def) {
    const std::string* v = raw(key);
    if (!v) return def;
    try {
        size_t used = 0;
        const unsigned long long parsed = std::stoull(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing characters");
        return static_cast<uint64_t>(parsed);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an unsigned integer: '" + *v + "'");
    }
}

double ConfigReader::get_double(const std::string& key, double def) {
    const std::string* v = raw(key);
    if (!v) return def;
    try {
        size_t used = 0;
        const double parsed = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing characters");
        return parsed;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not a number: '" + *v + "'");
    }
}

bool ConfigReader::get_bool(const std::string& key, bool def) {
    const std::string* v = raw(key);
    if (!v) return def;
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    throw ConfigError("config key " + key + ": not a boolean: '" + *v + "'");
}

void ConfigReader::finish() const {
    std::string unknown;
    for (const auto& [k, v] : map_->entries()) {
        if (!seen_.count(k)) {
            if (!unknown.empty()) unknown += ", ";
            unknown += k;
        }
    }
    if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
}

}  // namespace sdar
