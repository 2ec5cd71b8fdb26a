// Byte-pair tokenizer with a byte-level base alphabet.
//
// Pretokenization splits on whitespace and folds a single leading space into
// the following word, so whole words map to contiguous subword spans and the
// entity linker can share candidates across one word's pieces. Merges never
// cross pretoken boundaries, which keeps per-word encodings prefix-stable.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace knowla {

// Token index span [begin, end) of one whitespace-delimited word.
struct WordSpan {
  std::string word;  // raw bytes, leading-space marker stripped
  int begin = 0;
  int end = 0;
};

struct EncodedText {
  std::vector<int> ids;
  std::vector<WordSpan> words;
};

class Vocabulary {
 public:
  static constexpr int kAlphabetSize = 256;
  static constexpr int kPadId = 256;
  static constexpr int kBosId = 257;  // "[s]"
  static constexpr int kEosId = 258;  // "[/s]"
  static constexpr int kSpecialCount = 3;
  static constexpr int kFirstMergeId = kAlphabetSize + kSpecialCount;

  // Deterministic training: merges picked by descending pair frequency,
  // ties broken lexicographically by the pair's byte strings.
  static Vocabulary train(std::string_view corpus, int vocab_size);

  int size() const { return kFirstMergeId + static_cast<int>(merges_.size()); }
  int pad_id() const { return kPadId; }
  int bos_id() const { return kBosId; }
  int eos_id() const { return kEosId; }

  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  const std::string& token_bytes(int id) const;

  std::vector<int> encode(std::string_view text) const;
  EncodedText encode_words(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return merges_ == other.merges_; }

 private:
  void rebuild_tables();

  std::vector<std::pair<int, int>> merges_;   // (left id, right id), training order
  std::vector<std::string> token_strings_;    // id -> bytes (specials -> display form)
};

}  // namespace knowla
