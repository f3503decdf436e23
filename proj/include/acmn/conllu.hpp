#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "acmn/common.hpp"

namespace acmn {

struct Token {
  int index = 0;        // 1-based position in the sentence
  std::string form;
  std::string upos;
  int head = 0;         // 0 means the (virtual) root
  std::string deprel;   // uppercased, subtype after ':' stripped
};

struct Sentence {
  std::string text;  // from "# text = ..." when present
  std::vector<Token> tokens;
};

// Uppercases and drops any subtype after ':' ("nmod:poss" -> "NMOD").
inline std::string normalize_deprel(std::string_view raw) {
  std::string out;
  for (char c : raw) {
    if (c == ':') break;
    out.push_back(char(std::toupper(static_cast<unsigned char>(c))));
  }
  return out;
}

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == '\t') {
      cols.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return cols;
}

inline bool parse_int(std::string_view s, int& out) {
  if (s.empty()) return false;
  long v = 0;
  std::size_t i = 0;
  for (; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') return false;
    v = v * 10 + (s[i] - '0');
    if (v > 1000000) return false;
  }
  out = int(v);
  return true;
}

}  // namespace detail

// Parses a CoNLL-U document: 10 tab-separated columns per token line,
// '#' comments, blank lines between sentences.  Multiword-token ranges
// (ID with '-') and empty nodes (ID with '.') are skipped.
inline std::vector<Sentence> parse_conllu(std::string_view text) {
  std::vector<Sentence> out;
  Sentence cur;
  auto flush = [&] {
    if (!cur.tokens.empty() || !cur.text.empty()) out.push_back(std::move(cur));
    cur = {};
  };
  std::size_t pos = 0;
  long line_no = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    std::string_view line = text.substr(pos, (eol == std::string_view::npos ? text.size() : eol) - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    if (line.empty()) {
      flush();
    } else if (line[0] == '#') {
      constexpr std::string_view kText = "# text =";
      if (line.substr(0, kText.size()) == kText) {
        std::string_view rest = line.substr(kText.size());
        while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
        cur.text = std::string(rest);
      }
    } else {
      auto cols = detail::split_tabs(line);
      if (cols.size() != 10)
        throw FormatError("conllu line " + std::to_string(line_no) + ": expected 10 tab-separated columns, got " +
                          std::to_string(cols.size()));
      std::string_view id = cols[0];
      if (id.find('-') != std::string_view::npos || id.find('.') != std::string_view::npos) {
        // multiword token range or empty node: not part of the basic tree
      } else {
        Token tok;
        if (!detail::parse_int(id, tok.index) || tok.index < 1)
          throw FormatError("conllu line " + std::to_string(line_no) + ": ID is not a positive integer");
        if (!detail::parse_int(cols[6], tok.head))
          throw FormatError("conllu line " + std::to_string(line_no) + ": HEAD is not an integer");
        if (tok.head == tok.index)
          throw FormatError("conllu line " + std::to_string(line_no) + ": token is its own head");
        tok.form = std::string(cols[1]);
        tok.upos = std::string(cols[3]);
        tok.deprel = normalize_deprel(cols[7]);
        if (tok.deprel.empty())
          throw FormatError("conllu line " + std::to_string(line_no) + ": empty DEPREL");
        cur.tokens.push_back(std::move(tok));
      }
    }
    if (eol == std::string_view::npos) break;
    pos = eol + 1;
  }
  flush();
  return out;
}

}  // namespace acmn
