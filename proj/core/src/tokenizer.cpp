#include "kginject/tokenizer.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/utf8.hpp"

namespace kginject::lm {

namespace {

constexpr std::string_view kReplacement = "\xEF\xBF\xBD";

bool is_letter(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80; }

bool is_vowel(unsigned char c) {
    switch (c) {
        case 'a': case 'e': case 'i': case 'o': case 'u':
        case 'A': case 'E': case 'I': case 'O': case 'U':
            return true;
        default:
            return false;
    }
}

void split_word(std::string_view word, bool leading_space, std::vector<std::string>& out) {
    std::size_t i = 0;
    std::string piece = leading_space ? " " : "";
    while (i < word.size()) {
        while (i < word.size() && !is_vowel(static_cast<unsigned char>(word[i]))) piece += word[i++];
        while (i < word.size() && is_vowel(static_cast<unsigned char>(word[i]))) piece += word[i++];
        const bool more_vowels = std::any_of(word.begin() + static_cast<std::ptrdiff_t>(i), word.end(),
                                             [](char c) { return is_vowel(static_cast<unsigned char>(c)); });
        if (!more_vowels) {
            piece.append(word.substr(i));
            i = word.size();
        }
        out.push_back(std::move(piece));
        piece.clear();
    }
}

// Calls on_word(pieces of one word) and on_other(character) in text order.
template <class W, class O>
void scan_pieces(std::string_view text, W&& on_word, O&& on_other) {
    std::size_t i = 0;
    std::vector<std::string> pieces;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        const bool space_then_letter =
            c == ' ' && i + 1 < text.size() && is_letter(static_cast<unsigned char>(text[i + 1]));
        if (is_letter(c) || space_then_letter) {
            std::size_t j = space_then_letter ? i + 1 : i;
            const std::size_t start = j;
            while (j < text.size() && is_letter(static_cast<unsigned char>(text[j]))) ++j;
            pieces.clear();
            split_word(text.substr(start, j - start), space_then_letter, pieces);
            on_word(text.substr(start, j - start), pieces);
            i = j;
        } else {
            const std::size_t n = utf8::sequence_length(c);
            on_other(text.substr(i, n));
            i += n;
        }
    }
}

}  // namespace

std::vector<std::string> syllable_pieces(std::string_view text) {
    std::vector<std::string> out;
    scan_pieces(
        text, [&](std::string_view, const std::vector<std::string>& p) { out.insert(out.end(), p.begin(), p.end()); },
        [&](std::string_view ch) { out.emplace_back(ch); });
    return out;
}

Tokenizer::Tokenizer(std::vector<std::string> vocabulary) : vocab_(std::move(vocabulary)) {
    if (vocab_.empty() || vocab_[0] != kUnknownText) throw ValidationError("vocabulary must start with <unk>");
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
        const auto& t = vocab_[i];
        if (t.empty() || t.find('\n') != std::string::npos) throw ValidationError("invalid vocabulary entry " + std::to_string(i));
        if (i > 0 && !index_.emplace(t, static_cast<TokenId>(i)).second)
            throw ValidationError("duplicate vocabulary entry '" + t + "'");
        if (i > 0) max_len_ = std::max(max_len_, t.size());
    }
}

std::vector<TokenSpan> Tokenizer::encode_with_offsets(std::string_view text) const {
    std::vector<TokenSpan> out;
    std::size_t i = 0;
    std::string key;
    while (i < text.size()) {
        bool matched = false;
        for (std::size_t len = std::min(max_len_, text.size() - i); len > 0; --len) {
            key.assign(text.substr(i, len));
            auto it = index_.find(key);
            if (it != index_.end()) {
                out.push_back({it->second, i, i + len});
                i += len;
                matched = true;
                break;
            }
        }
        if (!matched) {
            const std::size_t n = std::min(utf8::sequence_length(static_cast<unsigned char>(text[i])), text.size() - i);
            out.push_back({kUnknown, i, i + n});
            i += n;
        }
    }
    return out;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& t : encode_with_offsets(text)) ids.push_back(t.id);
    return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (id == kUnknown)
            out += kReplacement;
        else
            out += vocab_.at(static_cast<std::size_t>(id));
    }
    return out;
}

std::string Tokenizer::serialize() const {
    std::string out;
    for (const auto& t : vocab_) {
        out += t;
        out += '\n';
    }
    return out;
}

Tokenizer Tokenizer::deserialize(std::string_view text) {
    std::vector<std::string> vocab;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        vocab.emplace_back(text.substr(pos, end - pos));
        pos = end + 1;
    }
    return Tokenizer(std::move(vocab));
}

void Tokenizer::save(const std::filesystem::path& path) const { write_text_file(path, serialize()); }

Tokenizer Tokenizer::load(const std::filesystem::path& path) { return deserialize(read_text_file(path)); }

Digest Tokenizer::fingerprint() const { return sha256(serialize()); }

Tokenizer build_tokenizer(const std::vector<std::string>& corpus, std::size_t target_size) {
    if (corpus.empty()) throw ValidationError("tokenizer corpus is empty");
    std::set<std::string> chars;
    std::map<std::string, std::size_t> counts;
    std::set<std::string> whole_words;
    for (const auto& text : corpus) {
        for (std::size_t i = 0; i < text.size();) {
            const std::size_t n = utf8::sequence_length(static_cast<unsigned char>(text[i]));
            if (text[i] != '\n') chars.emplace(text.substr(i, n));
            i += n;
        }
        scan_pieces(
            text,
            [&](std::string_view word, const std::vector<std::string>& pieces) {
                whole_words.emplace(word);
                whole_words.emplace(" " + std::string(word));
                for (const auto& p : pieces)
                    if (utf8::length(p) >= 2) ++counts[p];
                if (pieces.size() >= 3)
                    for (std::size_t k = 0; k + 1 < pieces.size(); ++k) ++counts[pieces[k] + pieces[k + 1]];
            },
            [](std::string_view) {});
    }
    // A pair unit must not swallow a whole multi-syllable word.
    for (auto it = counts.begin(); it != counts.end();) {
        const auto pieces = syllable_pieces(it->first);
        if (pieces.size() >= 2 && whole_words.contains(it->first))
            it = counts.erase(it);
        else
            ++it;
    }
    if (target_size < chars.size() + 1)
        throw ValidationError("target vocabulary size " + std::to_string(target_size) + " is smaller than the " +
                              std::to_string(chars.size()) + " distinct characters plus <unk>");

    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

    std::vector<std::string> vocab{std::string(Tokenizer::kUnknownText)};
    vocab.insert(vocab.end(), chars.begin(), chars.end());
    for (const auto& [piece, n] : ranked) {
        if (vocab.size() >= target_size) break;
        vocab.push_back(piece);
    }
    return Tokenizer(std::move(vocab));
}

}  // namespace kginject::lm
