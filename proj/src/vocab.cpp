#include "duplexforge/vocab.hpp"

#include <cctype>
#include <fstream>
#include <stdexcept>

namespace duplexforge {

std::vector<std::string> split_whitespace(const std::string& text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) out.push_back(text.substr(start, i - start));
    }
    return out;
}

uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

Vocabulary::Vocabulary(size_t max_size) : max_size_(max_size) {
    tokens_ = {"<pad>", "<bc>", "<int>", "<eos>"};
    for (size_t i = 0; i < tokens_.size(); ++i) {
        index_[tokens_[i]] = static_cast<int32_t>(i);
    }
}

int32_t Vocabulary::intern(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    if (tokens_.size() >= max_size_) {
        throw std::length_error("vocabulary overflow: limit " + std::to_string(max_size_) +
                                " reached while adding \"" + token + "\"");
    }
    int32_t id = static_cast<int32_t>(tokens_.size());
    tokens_.push_back(token);
    index_[token] = id;
    return id;
}

std::vector<int32_t> Vocabulary::tokenize(const std::string& text, bool grow) {
    std::vector<int32_t> ids;
    for (const std::string& tok : split_whitespace(text)) {
        if (grow) {
            ids.push_back(intern(tok));
        } else {
            int32_t id = id_of(tok);
            if (id < 0) {
                throw std::out_of_range("unknown token \"" + tok + "\"");
            }
            ids.push_back(id);
        }
    }
    return ids;
}

std::string Vocabulary::detokenize(const std::vector<int32_t>& ids) const {
    std::string out;
    for (int32_t id : ids) {
        if (!out.empty()) out += ' ';
        out += token_of(id);
    }
    return out;
}

int32_t Vocabulary::id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? -1 : it->second;
}

const std::string& Vocabulary::token_of(int32_t id) const {
    if (id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
        throw std::out_of_range("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write vocabulary file: " + path);
    }
    for (const std::string& tok : tokens_) {
        out << tok << '\n';
    }
}

Vocabulary Vocabulary::load(const std::string& path, size_t max_size) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open vocabulary file: " + path);
    }
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        tokens.push_back(line);
    }
    return from_tokens(tokens, max_size);
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens, size_t max_size) {
    Vocabulary v(max_size);
    if (tokens.size() < kNumReservedTokens ||
        std::vector<std::string>(tokens.begin(), tokens.begin() + kNumReservedTokens) !=
            v.tokens_) {
        throw std::runtime_error("vocabulary file must start with the four reserved tokens");
    }
    for (size_t i = kNumReservedTokens; i < tokens.size(); ++i) {
        v.intern(tokens[i]);
    }
    return v;
}

}  // namespace duplexforge
