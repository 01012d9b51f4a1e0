#pragma once

// Byte-level BPE tokenizer compatible with the CLIP "simple tokenizer":
// lowercased text, pre-split into words/digits/punctuation runs, bytes
// mapped to printable code points, merges applied by rank, and a "</w>"
// suffix marking word ends.

#include <cctype>
#include <climits>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "offcurate/error.hpp"

namespace offcurate {

namespace detail {

inline std::string utf8_encode(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return out;
}

/// GPT-2/CLIP reversible byte -> printable code point table.
inline std::vector<std::string> byte_symbols() {
    std::vector<int> printable;
    for (int b = '!'; b <= '~'; ++b) printable.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) printable.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) printable.push_back(b);
    std::vector<std::string> table(256);
    std::vector<bool> direct(256, false);
    for (int b : printable) {
        direct[static_cast<std::size_t>(b)] = true;
        table[static_cast<std::size_t>(b)] = utf8_encode(static_cast<char32_t>(b));
    }
    int extra = 0;
    for (int b = 0; b < 256; ++b) {
        if (!direct[static_cast<std::size_t>(b)]) {
            table[static_cast<std::size_t>(b)] = utf8_encode(static_cast<char32_t>(256 + extra++));
        }
    }
    return table;
}

inline bool is_word_byte(unsigned char c) { return std::isalpha(c) || c >= 0x80; }

/// Splits cleaned, lowercased text into pre-tokens (contractions, letter
/// runs, single digits, runs of other symbols). Non-ASCII bytes count as
/// letters.
inline std::vector<std::string> pre_tokenize(std::string_view text) {
    static constexpr std::string_view contractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        bool matched = false;
        for (auto special : {std::string_view("<|startoftext|>"), std::string_view("<|endoftext|>")}) {
            if (text.substr(i, special.size()) == special) {
                out.emplace_back(special);
                i += special.size();
                matched = true;
                break;
            }
        }
        if (matched) continue;
        if (c == '\'') {
            for (auto contraction : contractions) {
                if (text.substr(i, contraction.size()) == contraction) {
                    out.emplace_back(contraction);
                    i += contraction.size();
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }
        std::size_t j = i + 1;
        if (is_word_byte(c)) {
            while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
        } else if (std::isdigit(c)) {
            // digits are emitted one at a time
        } else {
            while (j < text.size()) {
                const auto d = static_cast<unsigned char>(text[j]);
                if (std::isspace(d) || is_word_byte(d) || std::isdigit(d)) break;
                ++j;
            }
        }
        out.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace detail

class BpeTokenizer {
public:
    static constexpr std::string_view kStartOfText = "<|startoftext|>";
    static constexpr std::string_view kEndOfText = "<|endoftext|>";

    /// `merges` are ordered pairs of symbols, highest priority first.
    explicit BpeTokenizer(std::vector<std::pair<std::string, std::string>> merges,
                          std::size_t context_length = 77)
        : context_length_(context_length), byte_symbols_(detail::byte_symbols()) {
        std::vector<std::string> vocab;
        for (const auto& s : byte_symbols_) vocab.push_back(s);
        for (const auto& s : byte_symbols_) vocab.push_back(s + "</w>");
        for (std::size_t r = 0; r < merges.size(); ++r) {
            vocab.push_back(merges[r].first + merges[r].second);
            ranks_.emplace(merges[r].first + '\x01' + merges[r].second, static_cast<int>(r));
        }
        vocab.emplace_back(kStartOfText);
        vocab.emplace_back(kEndOfText);
        for (std::size_t i = 0; i < vocab.size(); ++i) {
            encoder_.emplace(vocab[i], static_cast<std::int64_t>(i));
        }
    }

    /// Reads a merges file: optional "#version" header, then one "a b" pair
    /// per line.
    static BpeTokenizer from_file(const std::filesystem::path& path, std::size_t context_length = 77) {
        std::ifstream in(path);
        if (!in) fail(ErrorCode::BackendFailure, "cannot open BPE vocabulary " + path.string());
        std::vector<std::pair<std::string, std::string>> merges;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line.rfind("#version", 0) == 0) continue;
            const auto space = line.find(' ');
            if (space == std::string::npos) {
                fail(ErrorCode::BackendFailure, "malformed merge line in " + path.string());
            }
            merges.emplace_back(line.substr(0, space), line.substr(space + 1));
        }
        return BpeTokenizer(std::move(merges), context_length);
    }

    std::size_t context_length() const noexcept { return context_length_; }
    std::size_t vocab_size() const noexcept { return encoder_.size(); }

    std::int64_t token_id(std::string_view symbol) const {
        const auto it = encoder_.find(std::string(symbol));
        if (it == encoder_.end()) fail(ErrorCode::TokenizeFailure, "unknown symbol");
        return it->second;
    }

    /// Token ids without start/end markers.
    std::vector<std::int64_t> encode(std::string_view text) const {
        std::vector<std::int64_t> ids;
        for (const auto& word : detail::pre_tokenize(clean(text))) {
            if (word == kStartOfText || word == kEndOfText) {
                ids.push_back(token_id(word));
                continue;
            }
            for (const auto& symbol : bpe(word)) ids.push_back(token_id(symbol));
        }
        return ids;
    }

    /// [SOT] tokens [EOT], zero-padded to the context length. Throws
    /// TokenizeFailure on empty input or overflow.
    std::vector<std::int64_t> encode_padded(std::string_view text) const {
        auto body = encode(text);
        if (body.empty()) fail(ErrorCode::TokenizeFailure, "prompt is empty");
        if (body.size() + 2 > context_length_) {
            fail(ErrorCode::TokenizeFailure, "prompt needs " + std::to_string(body.size() + 2) +
                                                 " tokens, context length is " +
                                                 std::to_string(context_length_));
        }
        std::vector<std::int64_t> out(context_length_, 0);
        out[0] = token_id(kStartOfText);
        std::copy(body.begin(), body.end(), out.begin() + 1);
        out[body.size() + 1] = token_id(kEndOfText);
        return out;
    }

private:
    static std::string clean(std::string_view text) {
        std::string out;
        bool pending_space = false;
        for (char ch : text) {
            const auto c = static_cast<unsigned char>(ch);
            if (std::isspace(c)) {
                pending_space = !out.empty();
                continue;
            }
            if (pending_space) out.push_back(' ');
            pending_space = false;
            out.push_back(static_cast<char>(std::tolower(c)));
        }
        return out;
    }

    std::vector<std::string> bpe(const std::string& word) const {
        std::vector<std::string> parts;
        for (unsigned char b : word) parts.push_back(byte_symbols_[b]);
        parts.back() += "</w>";
        while (parts.size() > 1) {
            int best_rank = INT_MAX;
            std::size_t best = 0;
            for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
                const auto it = ranks_.find(parts[i] + '\x01' + parts[i + 1]);
                if (it != ranks_.end() && it->second < best_rank) {
                    best_rank = it->second;
                    best = i;
                }
            }
            if (best_rank == INT_MAX) break;
            // merge every occurrence of the winning pair, left to right
            const std::string first = parts[best];
            const std::string second = parts[best + 1];
            std::vector<std::string> merged;
            for (std::size_t i = 0; i < parts.size();) {
                if (i + 1 < parts.size() && parts[i] == first && parts[i + 1] == second) {
                    merged.push_back(first + second);
                    i += 2;
                } else {
                    merged.push_back(parts[i]);
                    ++i;
                }
            }
            parts = std::move(merged);
        }
        return parts;
    }

    std::size_t context_length_;
    std::vector<std::string> byte_symbols_;
    std::unordered_map<std::string, int> ranks_;
    std::unordered_map<std::string, std::int64_t> encoder_;
};

}  // namespace offcurate
