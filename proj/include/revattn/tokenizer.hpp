#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace revattn {

// Maps between token ids and strings. Vocabulary entries use the GPT-2
// byte-to-unicode alphabet, so a leading space is stored as "Ġ" and a
// newline as "Ċ". Encoding is greedy longest match over that alphabet,
// which agrees with byte-pair merges on small hand-built vocabularies but is
// not a BPE implementation.
class Tokenizer {
 public:
  explicit Tokenizer(std::vector<std::string> id_to_token);

  // Accepts either a JSON object {token: id} (GPT-2 encoder.json) or a JSON
  // array of tokens indexed by id. Throws IoError / TokenizeError.
  static Tokenizer load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::vector<int> encode(std::string_view text) const;  // TokenizeError on failure
  std::string decode(int id) const;                      // raw bytes
  std::string decode(const std::vector<int>& ids) const;
  const std::string& token(int id) const;  // vocabulary spelling
  int size() const { return static_cast<int>(id_to_token_.size()); }
  int id_of(std::string_view raw) const;  // exact single token, -1 if absent

  // First id of encode(" " + answer) after trimming the answer.
  int answer_token(std::string_view answer) const;

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
  std::size_t max_token_bytes_ = 0;
};

// GPT-2 byte-level alphabet: raw bytes to their printable stand-ins and back.
std::string bytes_to_unicode(std::string_view raw);
std::string unicode_to_bytes(std::string_view mapped);

}  // namespace revattn
