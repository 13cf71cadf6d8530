// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Fixed token layout shared by every model in the project:
//   0            padding
//   1            end of sequence
//   2 .. 257     raw bytes 0x00 .. 0xFF
//   258 ..       synthetic-language symbols (when the vocabulary is that large)

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtpdraft/tensor.hpp"

namespace mtpdraft {

inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kEosToken = 1;
inline constexpr TokenId kByteOffset = 2;
inline constexpr TokenId kFirstSyntheticToken = 258;

inline bool is_byte_token(TokenId t) { return t >= kByteOffset && t < kByteOffset + 256; }
inline TokenId byte_token(unsigned char b) { return static_cast<TokenId>(kByteOffset + b); }
inline unsigned char token_byte(TokenId t) { return static_cast<unsigned char>(t - kByteOffset); }

inline std::vector<TokenId> special_tokens() { return {kPadToken, kEosToken}; }

inline TokenSequence encode_bytes(std::string_view text) {
  TokenSequence out;
  out.reserve(text.size());
  for (char c : text) out.push_back(byte_token(static_cast<unsigned char>(c)));
  return out;
}

// Non-byte tokens are dropped.
inline std::string decode_bytes(std::span<const TokenId> tokens) {
  std::string out;
  for (TokenId t : tokens) {
    if (is_byte_token(t)) out.push_back(static_cast<char>(token_byte(t)));
  }
  return out;
}

inline bool is_cjk_codepoint(std::uint32_t cp) {
  return (cp >= 0x4E00 && cp <= 0x9FFF) ||    // unified ideographs
         (cp >= 0x3400 && cp <= 0x4DBF) ||    // extension A
         (cp >= 0x20000 && cp <= 0x2A6DF) ||  // extension B
         (cp >= 0xF900 && cp <= 0xFAFF) ||    // compatibility ideographs
         (cp >= 0x3000 && cp <= 0x303F) ||    // CJK punctuation
         (cp >= 0xFF00 && cp <= 0xFFEF);      // fullwidth forms
}

// Marks every token that is one byte of a well-formed UTF-8 sequence encoding
// a CJK codepoint. Malformed or truncated sequences are not CJK.
inline std::vector<bool> cjk_token_mask(std::span<const TokenId> tokens) {
  std::vector<bool> mask(tokens.size(), false);
  std::size_t i = 0;
  while (i < tokens.size()) {
    if (!is_byte_token(tokens[i])) {
      ++i;
      continue;
    }
    const unsigned char b0 = token_byte(tokens[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (b0 >= 0xF0 && b0 <= 0xF4) {
      len = 4;
      cp = b0 & 0x07u;
    } else if (b0 >= 0xE0) {
      len = b0 <= 0xEF ? 3 : 0;
      cp = b0 & 0x0Fu;
    } else if (b0 >= 0xC2 && b0 <= 0xDF) {
      len = 2;
      cp = b0 & 0x1Fu;
    }
    if (len == 0 || i + len > tokens.size()) {
      ++i;
      continue;
    }
    bool ok = true;
    for (std::size_t j = 1; j < len; ++j) {
      if (!is_byte_token(tokens[i + j]) || (token_byte(tokens[i + j]) & 0xC0u) != 0x80u) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (token_byte(tokens[i + j]) & 0x3Fu);
    }
    if (!ok) {
      ++i;
      continue;
    }
    if (is_cjk_codepoint(cp)) {
      for (std::size_t j = 0; j < len; ++j) mask[i + j] = true;
    }
    i += len;
  }
  return mask;
}

}  // namespace mtpdraft
