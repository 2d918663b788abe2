#pragma once

// Synthetic paired image/report corpus plus the on-disk dataset format.
//
// Six findings, each tied to a fixed 8x8 region of the 32x32 canvas and a
// distinct glyph. A record's report holds one templated sentence per positive
// finding (ascending id order) and always ends with a fixed closing sentence.
// Writer styles select among paraphrase families, so the image->report map is
// genuinely one-to-many. All randomness comes from per-record streams derived
// from (seed, index), making every record bit-reproducible in isolation.
//
// On disk: binary PGM images (P5, maxval 255, rec_%06d.pgm), a JSON-Lines
// manifest (image, sentences, labels, style, split), and a vocabulary file
// with one token per line (line number = id). The loader accepts any dataset
// in this format, not just synthetic ones.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vti/tensor.hpp"

namespace vti {

inline constexpr int kImageSize = 32;
inline constexpr int kNumConditions = 6;
inline constexpr int kNMax = 7;  // 6 findings + closing sentence

// Special token ids, fixed by the vocabulary format.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kSentId = 4;

const std::array<std::string, kNumConditions>& condition_names();
int condition_from_name(const std::string& name);  // ContractError when unknown

// Paraphrase family for one (condition, style); styles beyond the authored
// families cycle. Every sentence is lowercase and free of negation words.
const std::vector<std::string>& condition_templates(int condition, int style);
const std::string& closing_sentence();

struct DatasetRecord {
    std::vector<real> image;                 // kImageSize^2, row-major, values in [0,1]
    std::vector<std::string> sentence_text;  // report sentences in order
    std::vector<std::vector<int>> sentences; // token ids; filled by encode_records
    std::vector<int> labels;                 // ascending condition ids
    int style = 0;
    std::string split;                       // "train" | "val" | "test"
};

// Lowercase, split on whitespace, strip leading/trailing punctuation, drop
// tokens without an alphabetic character.
std::vector<std::string> tokenize(const std::string& text);

struct Vocabulary {
    std::vector<std::string> tokens;  // id -> token, ids 0..4 are the specials

    int size() const { return static_cast<int>(tokens.size()); }
    int encode(const std::string& token) const;  // [UNK] when absent
    std::vector<int> encode_tokens(const std::vector<std::string>& toks) const;
    const std::string& decode(int id) const;  // ContractError when out of range

    void rebuild_index() const;  // refreshes the lookup cache from tokens

  private:
    mutable std::vector<std::pair<std::string, int>> index_;  // sorted token->id
};

// Tokens with count >= min_freq, ordered by descending frequency then
// alphabetically, after the five specials.
Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus, int min_freq);
void save_vocab(const Vocabulary& v, const std::string& path);
Vocabulary load_vocab(const std::string& path);

// Deterministic corpus; conditions present independently with p = 0.35.
std::vector<DatasetRecord> synth_generate(int n, std::uint64_t seed, int style_count);

// Quota-exact 7:1:2 assignment by hashing record indices with the seed.
void assign_splits(std::vector<DatasetRecord>& records, std::uint64_t seed);

void write_pgm(const std::string& path, const std::vector<real>& image, int w, int h);
std::vector<real> read_pgm(const std::string& path, int expect_w, int expect_h);

// Writes rec_%06d.pgm files plus manifest.jsonl into dir (created if absent).
void write_dataset(const std::vector<DatasetRecord>& records, const std::string& dir);
std::vector<DatasetRecord> load_dataset(const std::string& manifest_path);

// Tokenizes sentence_text and fills DatasetRecord::sentences.
void encode_records(std::vector<DatasetRecord>& records, const Vocabulary& vocab);

// Space-joined token string; special ids (pad/bos/eos/unk/sent) are skipped.
std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids);

}  // namespace vti
