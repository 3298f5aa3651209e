#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

namespace duplexforge {

struct MissingInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Plain-text config: one "key = value" per line, '#' starts a comment.
class KeyValueConfig {
  public:
    static KeyValueConfig load(const std::string& path);
    static KeyValueConfig parse(std::istream& in);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& def) const;
    int64_t get_int(const std::string& key, int64_t def) const;
    double get_double(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;
    void set(const std::string& key, const std::string& value);

    // Canonical snapshot, keys sorted.
    std::string dump() const;

  private:
    std::map<std::string, std::string> values_;
};

// CLI seed if given, else DUPLEX_FORGE_SEED from the environment, else 0.
uint64_t resolve_seed(std::optional<uint64_t> cli_seed);

void require_readable(const std::string& path, const std::string& what);
void ensure_directory(const std::string& path);

}  // namespace duplexforge
