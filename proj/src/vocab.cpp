#include "m2va/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace m2va {

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

Vocab Vocab::build(const std::vector<std::string>& corpus) {
    Vocab v;
    v.tokens = {"<pad>", "<sos>", "<eos>", "<mask>", "<unk>"};
    std::set<std::string> seen;
    for (const std::string& text : corpus)
        for (const std::string& w : split_words(text))
            if (seen.insert(w).second) v.tokens.push_back(w);
    for (size_t i = 0; i < v.tokens.size(); ++i) v.lookup[v.tokens[i]] = static_cast<idx>(i);
    return v;
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open vocabulary file: " + path);
    Vocab v;
    std::string line;
    while (std::getline(in, line)) v.tokens.push_back(line);
    for (size_t i = 0; i < v.tokens.size(); ++i) v.lookup[v.tokens[i]] = static_cast<idx>(i);
    if (v.size() <= kUnk || v.tokens[kPad] != "<pad>")
        throw FormatError("vocabulary file missing special tokens: " + path);
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write vocabulary file: " + path);
    for (const std::string& t : tokens) out << t << "\n";
}

idx Vocab::id(const std::string& word) const {
    auto it = lookup.find(word);
    return it == lookup.end() ? kUnk : it->second;
}

TokenSequence tokenize(const std::string& text, const Vocab& vocab, idx max_len) {
    std::vector<std::string> words = split_words(text);
    if (static_cast<idx>(words.size()) + 2 > max_len)
        throw ContractError("text too long for max length " + std::to_string(max_len) +
                            ": \"" + text + "\"");
    TokenSequence seq;
    seq.ids.push_back(Vocab::kSos);
    for (const std::string& w : words) seq.ids.push_back(vocab.id(w));
    seq.eos_pos = static_cast<idx>(seq.ids.size());
    seq.ids.push_back(Vocab::kEos);
    while (static_cast<idx>(seq.ids.size()) < max_len) seq.ids.push_back(Vocab::kPad);
    return seq;
}

std::string detokenize(const TokenSequence& seq, const Vocab& vocab) {
    std::ostringstream os;
    bool first = true;
    for (idx i = 1; i < seq.eos_pos; ++i) {
        if (!first) os << " ";
        os << vocab.tokens[static_cast<size_t>(seq.ids[static_cast<size_t>(i)])];
        first = false;
    }
    return os.str();
}

}  // namespace m2va
