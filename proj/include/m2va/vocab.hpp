#pragma once

#include <map>
#include <string>
#include <vector>

#include "m2va/tensor.hpp"

namespace m2va {

// Corpus-derived word vocabulary. Ids are line indices in the on-disk format
// (one token per line, UTF-8).
struct Vocab {
    std::vector<std::string> tokens;
    std::map<std::string, idx> lookup;

    static constexpr idx kPad = 0, kSos = 1, kEos = 2, kMask = 3, kUnk = 4;

    static Vocab build(const std::vector<std::string>& corpus);
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    idx size() const { return static_cast<idx>(tokens.size()); }
    idx id(const std::string& word) const;
};

struct TokenSequence {
    std::vector<idx> ids;            // padded to max length
    idx eos_pos = -1;
    std::vector<idx> mask_positions; // positions replaced by <mask> (CMLM path)
};

std::vector<std::string> split_words(const std::string& text);
TokenSequence tokenize(const std::string& text, const Vocab& vocab, idx max_len);
std::string detokenize(const TokenSequence& seq, const Vocab& vocab);

}  // namespace m2va
