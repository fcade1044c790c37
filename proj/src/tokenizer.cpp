#include "revattn/tokenizer.hpp"

#include <array>
#include <fstream>

#include <json.hpp>

#include "revattn/error.hpp"

namespace revattn {

namespace {

void append_utf8(std::string& out, unsigned cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Code point standing in for each byte value.
const std::array<unsigned, 256>& byte_code_points() {
  static const std::array<unsigned, 256> table = [] {
    std::array<unsigned, 256> t{};
    unsigned next = 256;
    for (unsigned b = 0; b < 256; ++b) {
      const bool printable = (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE);
      t[b] = printable ? b : next++;
    }
    return t;
  }();
  return table;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace

std::string bytes_to_unicode(std::string_view raw) {
  const auto& table = byte_code_points();
  std::string out;
  out.reserve(raw.size() * 2);
  for (unsigned char c : raw) append_utf8(out, table[c]);
  return out;
}

std::string unicode_to_bytes(std::string_view mapped) {
  static const auto inverse = [] {
    std::array<int, 512> inv;
    inv.fill(-1);
    const auto& table = byte_code_points();
    for (unsigned b = 0; b < 256; ++b) inv[table[b]] = static_cast<int>(b);
    return inv;
  }();
  std::string out;
  for (std::size_t i = 0; i < mapped.size();) {
    const auto c = static_cast<unsigned char>(mapped[i]);
    unsigned cp;
    if (c < 0x80) {
      cp = c;
      i += 1;
    } else if ((c & 0xE0) == 0xC0 && i + 1 < mapped.size()) {
      cp = ((c & 0x1Fu) << 6) | (static_cast<unsigned char>(mapped[i + 1]) & 0x3Fu);
      i += 2;
    } else {
      throw Error(ErrorKind::kTokenizeError, "unexpected code point in token '" + std::string(mapped) + "'");
    }
    if (cp >= inverse.size() || inverse[cp] < 0) {
      throw Error(ErrorKind::kTokenizeError, "code point outside the byte alphabet in '" +
                                                 std::string(mapped) + "'");
    }
    out.push_back(static_cast<char>(inverse[cp]));
  }
  return out;
}

Tokenizer::Tokenizer(std::vector<std::string> id_to_token) : id_to_token_(std::move(id_to_token)) {
  if (id_to_token_.empty()) throw Error(ErrorKind::kTokenizeError, "empty vocabulary");
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    const auto& tok = id_to_token_[i];
    if (tok.empty()) continue;
    token_to_id_.emplace(tok, static_cast<int>(i));
    max_token_bytes_ = std::max(max_token_bytes_, tok.size());
  }
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open vocabulary " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kTokenizeError, "vocabulary " + path.string() + ": " + e.what());
  }
  std::vector<std::string> tokens;
  if (j.is_array()) {
    for (const auto& t : j) tokens.push_back(t.get<std::string>());
  } else if (j.is_object()) {
    tokens.resize(j.size());
    for (const auto& [tok, id] : j.items()) {
      const auto k = id.get<long>();
      if (k < 0 || k >= static_cast<long>(tokens.size())) {
        throw Error(ErrorKind::kTokenizeError, "vocabulary id " + std::to_string(k) + " out of range");
      }
      tokens[static_cast<std::size_t>(k)] = tok;
    }
  } else {
    throw Error(ErrorKind::kTokenizeError, "vocabulary must be a JSON array or object");
  }
  return Tokenizer(std::move(tokens));
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIoError, "cannot write vocabulary " + path.string());
  out << nlohmann::json(id_to_token_).dump(1) << '\n';
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  const std::string mapped = bytes_to_unicode(text);
  std::vector<int> ids;
  std::size_t pos = 0;
  while (pos < mapped.size()) {
    int found = -1;
    std::size_t len = std::min(max_token_bytes_, mapped.size() - pos);
    for (; len > 0; --len) {
      const auto it = token_to_id_.find(mapped.substr(pos, len));
      if (it != token_to_id_.end()) {
        found = it->second;
        break;
      }
    }
    if (found < 0) {
      throw Error(ErrorKind::kTokenizeError,
                  "no vocabulary entry matches '" + std::string(text) + "' at byte offset " +
                      std::to_string(unicode_to_bytes(mapped.substr(0, pos)).size()));
    }
    ids.push_back(found);
    pos += len;
  }
  return ids;
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || id >= size()) {
    throw Error(ErrorKind::kInvalidToken, "token id " + std::to_string(id) + " outside vocabulary");
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::string Tokenizer::decode(int id) const { return unicode_to_bytes(token(id)); }

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) out += decode(id);
  return out;
}

int Tokenizer::id_of(std::string_view raw) const {
  const auto it = token_to_id_.find(bytes_to_unicode(raw));
  return it == token_to_id_.end() ? -1 : it->second;
}

int Tokenizer::answer_token(std::string_view answer) const {
  const std::string t = trim(answer);
  if (t.empty()) throw Error(ErrorKind::kTokenizeError, "empty answer");
  return encode(" " + t).front();
}

}  // namespace revattn
