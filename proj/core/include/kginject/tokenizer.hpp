#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kginject/hashing.hpp"

namespace kginject::lm {

using TokenId = std::int32_t;

struct TokenSpan {
    TokenId id;
    std::size_t begin;  // byte offsets into the tokenized string
    std::size_t end;
};

// Greedy longest-match tokenizer over a fixed vocabulary. Id 0 is the unknown
// token; any code point without a vocabulary entry becomes one unknown token.
class Tokenizer {
public:
    static constexpr TokenId kUnknown = 0;
    static constexpr std::string_view kUnknownText = "<unk>";

    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> vocabulary);

    std::vector<TokenId> encode(std::string_view text) const;
    std::vector<TokenSpan> encode_with_offsets(std::string_view text) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    std::size_t size() const noexcept { return vocab_.size(); }
    const std::string& token(TokenId id) const { return vocab_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& vocabulary() const noexcept { return vocab_; }

    // One token per line, index = line number.
    std::string serialize() const;
    static Tokenizer deserialize(std::string_view text);
    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);
    Digest fingerprint() const;

private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, TokenId> index_;
    std::size_t max_len_ = 1;
};

// Splits text into syllable pieces: an optional leading space, a consonant
// run and a vowel run, with word-final consonants attached to the last piece.
// Non-letters are single-character pieces.
std::vector<std::string> syllable_pieces(std::string_view text);

// Vocabulary: the unknown token, every distinct character of the corpus, then
// the most frequent multi-character syllable pieces and in-word syllable pairs
// (count desc, text asc) up to target_size. Throws ValidationError if
// target_size cannot hold the characters.
Tokenizer build_tokenizer(const std::vector<std::string>& corpus, std::size_t target_size);

}  // namespace kginject::lm
