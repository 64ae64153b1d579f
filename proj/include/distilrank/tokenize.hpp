#pragma once

#include <cstdint>
#include <locale>
#include <string>
#include <string_view>
#include <vector>

namespace distilrank {

struct TokenizerConfig {
  bool lowercase = true;
  std::size_t min_token_length = 1;
};

namespace detail {

// Decodes one UTF-8 code point starting at s[i], advancing i. Malformed
// sequences yield U+FFFD and consume one byte.
inline char32_t decode_utf8(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) {
    ++i;
    return b0;
  }
  int len = 0;
  char32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    ++i;
    return 0xFFFD;
  }
  for (int k = 1; k < len; ++k) {
    const int c = cont(k);
    if (c < 0) {
      ++i;
      return 0xFFFD;
    }
    cp = (cp << 6) | static_cast<char32_t>(c);
  }
  i += len;
  return cp;
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Character classes for non-ASCII code points come from the C.UTF-8 locale
// when the platform provides it; otherwise every decodable non-ASCII code
// point is treated as a letter with no case mapping.
class UnicodeClassifier {
 public:
  static const UnicodeClassifier& instance() {
    static const UnicodeClassifier classifier;
    return classifier;
  }

  bool is_alnum(char32_t cp) const {
    if (cp < 0x80) {
      return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
    }
    if (cp == 0xFFFD) return false;
    if (ctype_ == nullptr) return true;
    return ctype_->is(std::ctype_base::alnum, static_cast<wchar_t>(cp));
  }

  char32_t to_lower(char32_t cp) const {
    if (cp < 0x80) return (cp >= 'A' && cp <= 'Z') ? cp + 32 : cp;
    if (ctype_ == nullptr) return cp;
    return static_cast<char32_t>(ctype_->tolower(static_cast<wchar_t>(cp)));
  }

 private:
  UnicodeClassifier() {
    for (const char* name : {"C.UTF-8", "C.utf8", "en_US.UTF-8"}) {
      try {
        locale_ = std::locale(name);
        ctype_ = &std::use_facet<std::ctype<wchar_t>>(locale_);
        return;
      } catch (const std::runtime_error&) {
      }
    }
  }

  std::locale locale_;
  const std::ctype<wchar_t>* ctype_ = nullptr;
};

}  // namespace detail

// Splits text into maximal runs of alphanumeric code points.
inline std::vector<std::string> tokenize(std::string_view text, const TokenizerConfig& config = {}) {
  const auto& cls = detail::UnicodeClassifier::instance();
  std::vector<std::string> tokens;
  std::string current;
  std::size_t current_len = 0;
  auto flush = [&] {
    if (current_len >= config.min_token_length && current_len > 0) tokens.push_back(current);
    current.clear();
    current_len = 0;
  };
  std::size_t i = 0;
  while (i < text.size()) {
    char32_t cp = detail::decode_utf8(text, i);
    if (cls.is_alnum(cp)) {
      if (config.lowercase) cp = cls.to_lower(cp);
      detail::append_utf8(current, cp);
      ++current_len;
    } else {
      flush();
    }
  }
  flush();
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

}  // namespace distilrank
