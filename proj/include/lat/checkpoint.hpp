#pragma once

#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "lat/embedding.hpp"
#include "lat/nn.hpp"

// Text checkpoint container, version 1:
//
//   LATCKPT 1
//   kind <model kind>
//   meta <key> <value>              (zero or more; value runs to end of line)
//   param <name> <trainable> <rank> <d0> ... <d{rank-1}>
//   <numel values, space separated, shortest round-trip decimal>
//   ...
//   end
//
// Values are written with std::to_chars shortest form, so a reload is
// bit-identical.
namespace lat::checkpoint {

struct Block {
  std::string name;
  bool trainable = true;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Block> blocks;

  const std::string* find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return &v;
    return nullptr;
  }
};

inline Checkpoint capture(const std::string& kind, const ParameterSet& params,
                          std::vector<std::pair<std::string, std::string>> meta = {}) {
  Checkpoint c;
  c.kind = kind;
  c.meta = std::move(meta);
  for (const auto& e : params.entries()) {
    c.blocks.push_back({e.name, e.trainable, e.tensor.shape(), {e.tensor.values().begin(), e.tensor.values().end()}});
  }
  return c;
}

inline void write(std::ostream& out, const Checkpoint& c) {
  out << "LATCKPT 1\n";
  out << "kind " << c.kind << '\n';
  for (const auto& [k, v] : c.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint: meta key/value contains a separator");
    }
    out << "meta " << k << ' ' << v << '\n';
  }
  for (const auto& b : c.blocks) {
    out << "param " << b.name << ' ' << (b.trainable ? 1 : 0) << ' ' << b.shape.size();
    for (auto d : b.shape) out << ' ' << d;
    out << '\n';
    for (std::size_t i = 0; i < b.values.size(); ++i) out << (i ? " " : "") << format_double(b.values[i]);
    out << '\n';
  }
  out << "end\n";
}

inline Checkpoint read(std::istream& in) {
  Checkpoint c;
  std::string line;
  std::size_t n = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++n;
    return true;
  };
  auto fail = [&](const std::string& why) -> ParseError {
    return ParseError("checkpoint line " + std::to_string(n) + ": " + why);
  };
  if (!next() || line != "LATCKPT 1") throw fail("missing 'LATCKPT 1' header");
  bool ended = false;
  while (next()) {
    if (line == "end") {
      ended = true;
      break;
    }
    auto f = split_spaces(line);
    if (f.empty()) throw fail("empty line");
    if (f[0] == "kind" && f.size() == 2) {
      c.kind = f[1];
    } else if (f[0] == "meta" && f.size() >= 2) {
      std::size_t pos = line.find(' ', 5);
      c.meta.push_back({f[1], pos == std::string::npos ? "" : line.substr(pos + 1)});
    } else if (f[0] == "param" && f.size() >= 4) {
      Block b;
      b.name = f[1];
      b.trainable = f[2] == "1";
      std::size_t rank = std::stoul(f[3]);
      if (f.size() != 4 + rank) throw fail("shape does not match rank");
      for (std::size_t k = 0; k < rank; ++k) b.shape.push_back(std::stoul(f[4 + k]));
      if (!next()) throw fail("missing values for " + b.name);
      auto vals = split_spaces(line);
      if (vals.size() != shape_numel(b.shape)) throw fail("value count does not match shape of " + b.name);
      for (const auto& s : vals) {
        auto v = parse_double(s);
        if (!v) throw fail("bad number '" + s + "'");
        b.values.push_back(*v);
      }
      c.blocks.push_back(std::move(b));
    } else {
      throw fail("unrecognized record '" + f[0] + "'");
    }
  }
  if (!ended) throw ParseError("checkpoint: truncated (no 'end' line)");
  if (c.kind.empty()) throw ParseError("checkpoint: missing kind");
  return c;
}

/// Copies every block into the same-named entry; names, count and shapes
/// must agree exactly.
inline void restore(const Checkpoint& c, ParameterSet& params) {
  if (c.blocks.size() != params.entries().size()) {
    throw ContractError("checkpoint: " + std::to_string(c.blocks.size()) + " blocks for a model with " +
                        std::to_string(params.entries().size()) + " parameters");
  }
  for (const auto& b : c.blocks) {
    if (!params.contains(b.name)) throw ContractError("checkpoint: model has no parameter '" + b.name + "'");
    auto& t = params.get(b.name);
    if (t.shape() != b.shape) {
      throw DimensionError("checkpoint: '" + b.name + "' is " + shape_str(b.shape) + ", model expects " +
                           shape_str(t.shape()));
    }
    auto v = t.mutable_values();
    std::copy(b.values.begin(), b.values.end(), v.begin());
  }
}

}  // namespace lat::checkpoint
