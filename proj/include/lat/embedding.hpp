#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lat/ops.hpp"

namespace lat {

inline std::string case_fold(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

inline std::vector<std::string> split_spaces(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// Token -> d_w vector map read from a whitespace-separated word-vector file.
/// Tokens are case-folded; unknown tokens map to the zero vector.
class EmbeddingTable {
 public:
  struct Lookup {
    std::span<const double> vector;
    bool oov;
  };

  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim), zero_(dim, 0.0) {}

  /// Parses "token v1 ... vd" lines. A first line of exactly two integers is a
  /// "count dim" header and is skipped. Duplicate tokens keep the first row.
  static EmbeddingTable load(std::istream& in, std::optional<std::size_t> expected_dim = std::nullopt,
                             std::vector<std::string>* warnings = nullptr) {
    EmbeddingTable table;
    bool have_dim = false;
    if (expected_dim) {
      table = EmbeddingTable(*expected_dim);
      have_dim = true;
    }
    std::string line;
    std::size_t line_no = 0;
    bool first = true;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      auto fields = split_spaces(line);
      if (fields.empty()) continue;
      if (first) {
        first = false;
        if (fields.size() == 2 && is_integer(fields[0]) && is_integer(fields[1])) {
          continue;
        }
      }
      if (fields.size() < 2) throw ParseError("embedding line " + std::to_string(line_no) + ": no vector values");
      std::size_t width = fields.size() - 1;
      if (!have_dim) {
        table = EmbeddingTable(width);
        have_dim = true;
      }
      if (width != table.dim_) {
        throw ParseError("embedding line " + std::to_string(line_no) + ": expected " + std::to_string(table.dim_) +
                         " values, got " + std::to_string(width));
      }
      std::vector<double> vec(width);
      for (std::size_t k = 0; k < width; ++k) {
        auto v = parse_double(fields[k + 1]);
        if (!v || !std::isfinite(*v)) {
          throw ParseError("embedding line " + std::to_string(line_no) + ": non-numeric field '" + fields[k + 1] + "'");
        }
        vec[k] = *v;
      }
      if (!table.insert(fields[0], std::move(vec)) && warnings) {
        warnings->push_back("embedding line " + std::to_string(line_no) + ": duplicate token '" + fields[0] +
                            "' ignored");
      }
    }
    if (!have_dim) throw ParseError("embedding file contains no vectors");
    return table;
  }

  static EmbeddingTable load_file(const std::string& path, std::optional<std::size_t> expected_dim = std::nullopt,
                                  std::vector<std::string>* warnings = nullptr) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open embedding file " + path);
    return load(in, expected_dim, warnings);
  }

  void save(std::ostream& out) const {
    for (std::size_t t = 0; t < tokens_.size(); ++t) {
      out << tokens_[t];
      for (std::size_t k = 0; k < dim_; ++k) out << ' ' << format_double(data_[t * dim_ + k]);
      out << '\n';
    }
  }

  /// Returns false (and keeps the existing row) when the token is already present.
  bool insert(std::string_view token, std::vector<double> vec) {
    if (token.empty()) throw ContractError("embedding token must be non-empty");
    if (vec.size() != dim_) throw DimensionError("embedding vector has length " + std::to_string(vec.size()) +
                                                 ", table dimension is " + std::to_string(dim_));
    std::string key = case_fold(token);
    if (index_.count(key)) return false;
    index_.emplace(key, tokens_.size());
    tokens_.push_back(std::move(key));
    data_.insert(data_.end(), vec.begin(), vec.end());
    return true;
  }

  Lookup lookup(std::string_view token) const {
    if (token.empty()) throw ContractError("lookup of empty token");
    auto it = index_.find(case_fold(token));
    if (it == index_.end()) return {std::span<const double>(zero_), true};
    return {std::span<const double>(data_.data() + it->second * dim_, dim_), false};
  }

  bool contains(std::string_view token) const { return index_.count(case_fold(token)) > 0; }

  /// Single word: its row. Several words: mean over the known words; unknown
  /// words are left out of the divisor and an all-unknown label is zero.
  std::vector<double> embed_label(std::string_view label) const {
    auto words = split_spaces(label);
    if (words.empty()) throw ContractError("embed_label: empty label");
    std::vector<double> acc(dim_, 0.0);
    std::size_t known = 0;
    for (const auto& w : words) {
      auto r = lookup(w);
      if (r.oov) continue;
      for (std::size_t k = 0; k < dim_; ++k) acc[k] += r.vector[k];
      ++known;
    }
    if (known > 1) {
      for (auto& v : acc) v /= static_cast<double>(known);
    }
    return acc;
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  static bool is_integer(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
  }

  std::size_t dim_ = 0;
  std::vector<std::string> tokens_;
  std::vector<double> data_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> zero_;
};

/// Word-level question features: max_len x d_w matrix with zero padding rows.
struct QuestionFeatures {
  Tensor Q;
  Mask mask;                         // 1 for real tokens
  std::vector<std::string> tokens;   // after truncation
  std::vector<std::uint8_t> oov;     // per real token

  std::size_t length() const { return tokens.size(); }
  std::size_t capacity() const { return mask.size(); }
};

inline QuestionFeatures embed_question(const EmbeddingTable& table, std::span<const std::string> tokens,
                                       std::size_t max_len) {
  if (tokens.empty()) throw ContractError("embed_question: empty question");
  if (max_len == 0) throw ContractError("embed_question: max_len must be positive");
  std::size_t n = std::min(tokens.size(), max_len);
  std::size_t d = table.dim();
  std::vector<double> q(max_len * d, 0.0);
  QuestionFeatures out;
  out.mask.assign(max_len, 0);
  for (std::size_t j = 0; j < n; ++j) {
    auto r = table.lookup(tokens[j]);
    std::copy(r.vector.begin(), r.vector.end(), q.begin() + j * d);
    out.mask[j] = 1;
    out.tokens.push_back(case_fold(tokens[j]));
    out.oov.push_back(r.oov ? 1 : 0);
  }
  out.Q = Tensor::matrix(max_len, d, std::move(q));
  return out;
}

}  // namespace lat
