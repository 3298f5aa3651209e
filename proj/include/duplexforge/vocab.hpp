#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace duplexforge {

inline constexpr int32_t kPadToken = 0;
inline constexpr int32_t kBcToken = 1;
inline constexpr int32_t kIntToken = 2;
inline constexpr int32_t kEosToken = 3;
inline constexpr int32_t kNumReservedTokens = 4;

// Whitespace tokenizer over a persistent vocabulary. Ids 0..3 are fixed
// as PAD, BC, INT, EOS; word ids are assigned in first-seen order.
class Vocabulary {
  public:
    explicit Vocabulary(size_t max_size = 32768);

    // Splits on whitespace. With grow=true unknown words are added,
    // throwing once the configured size would be exceeded.
    std::vector<int32_t> tokenize(const std::string& text, bool grow = true);
    std::string detokenize(const std::vector<int32_t>& ids) const;

    int32_t id_of(const std::string& token) const;  // -1 if unknown
    const std::string& token_of(int32_t id) const;
    size_t size() const { return tokens_.size(); }
    size_t max_size() const { return max_size_; }

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path, size_t max_size = 32768);

    const std::vector<std::string>& tokens() const { return tokens_; }
    static Vocabulary from_tokens(const std::vector<std::string>& tokens, size_t max_size = 32768);

  private:
    int32_t intern(const std::string& token);

    size_t max_size_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int32_t> index_;
};

std::vector<std::string> split_whitespace(const std::string& text);

// Stable 64-bit FNV-1a; used wherever a deterministic string hash is needed.
uint64_t fnv1a64(const std::string& s);

}  // namespace duplexforge
