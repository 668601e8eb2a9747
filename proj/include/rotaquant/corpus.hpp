/*
 * Copyright 2026 The rotaquant Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rotaquant/container.hpp"
#include "rotaquant/error.hpp"
#include "rotaquant/model.hpp"

namespace rotaquant {

/// Token stream plus the vocabulary it was drawn from.
struct Corpus {
  std::vector<int> tokens;
  std::size_t vocab = 0;
};

struct MarkovSpec {
  std::size_t vocab = 128;
  std::size_t length = 65536;
  std::size_t branching = 4;  // successors per (prev2, prev1) context
  std::uint64_t seed = 0;
  std::uint64_t variant = 0;  // nonzero redraws the context weights, keeping the successor sets
};

/// Seeded order-2 Markov chain. Token b has `branching` candidate successors;
/// the weights over them depend on the full context (a, b). Variants of one
/// seed share successor sets and differ in weights, a controlled domain shift.
inline Corpus markov_corpus(const MarkovSpec& spec) {
  if (spec.vocab < 2) throw ConfigError("corpus.vocab must be at least 2");
  if (spec.length < 3) throw ConfigError("corpus.length must be at least 3");
  if (spec.branching < 1 || spec.branching > spec.vocab) throw ConfigError("corpus.branching must lie in [1, vocab]");
  const std::size_t V = spec.vocab, K = spec.branching;
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(V) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<int> successors(V * K);
  for (auto& t : successors) t = tok(rng);
  std::mt19937_64 weight_rng(spec.seed ^ (spec.variant * 0x9e3779b97f4a7c15ULL));
  std::mt19937_64& wrng = spec.variant == 0 ? rng : weight_rng;
  std::vector<double> cumulative(V * V * K);
  for (std::size_t c = 0; c < V * V; ++c) {
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double u = unit(wrng);
      total += u * u * u + 1e-3;
      cumulative[c * K + k] = total;
    }
    for (std::size_t k = 0; k < K; ++k) cumulative[c * K + k] /= total;
  }
  Corpus out;
  out.vocab = V;
  out.tokens.reserve(spec.length);
  out.tokens.push_back(tok(rng));
  out.tokens.push_back(tok(rng));
  while (out.tokens.size() < spec.length) {
    const std::size_t n = out.tokens.size();
    const auto prev = static_cast<std::size_t>(out.tokens[n - 1]);
    const std::size_t c = static_cast<std::size_t>(out.tokens[n - 2]) * V + prev;
    const double u = unit(rng);
    std::size_t k = 0;
    while (k + 1 < K && u >= cumulative[c * K + k]) ++k;
    out.tokens.push_back(successors[prev * K + k]);
  }
  return out;
}

/// Byte-level corpus from a file; every byte must be below `vocab`.
inline Corpus text_corpus(const std::filesystem::path& path, std::size_t vocab) {
  const std::vector<std::byte> bytes = read_file_bytes(path);
  if (bytes.size() < 3) throw InputError("corpus file '" + path.string() + "' holds fewer than 3 bytes");
  Corpus out;
  out.vocab = vocab;
  out.tokens.reserve(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto b = static_cast<std::size_t>(bytes[i]);
    if (b >= vocab)
      throw InputError("corpus byte " + std::to_string(b) + " at offset " + std::to_string(i) + " exceeds vocab " +
                       std::to_string(vocab));
    out.tokens.push_back(static_cast<int>(b));
  }
  return out;
}

struct CorpusSplit {
  std::vector<int> held_in;
  std::vector<int> held_out;
};

/// Contiguous split; the last `held_out_fraction` of the stream is held out.
inline CorpusSplit split_corpus(const Corpus& c, double held_out_fraction = 0.1) {
  if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0)) throw ConfigError("held_out_fraction must lie in (0, 1)");
  const auto cut = static_cast<std::size_t>(static_cast<double>(c.tokens.size()) * (1.0 - held_out_fraction));
  CorpusSplit s;
  s.held_in.assign(c.tokens.begin(), c.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
  s.held_out.assign(c.tokens.begin() + static_cast<std::ptrdiff_t>(cut), c.tokens.end());
  return s;
}

/// `count` windows of `len` tokens at uniformly drawn offsets.
inline std::vector<Tokens> sample_windows(std::span<const int> stream, std::size_t len, std::size_t count,
                                          std::mt19937_64& rng) {
  if (len < 2 || stream.size() < len)
    throw InputError("token stream of " + std::to_string(stream.size()) + " too short for windows of " + std::to_string(len));
  std::uniform_int_distribution<std::size_t> start(0, stream.size() - len);
  std::vector<Tokens> out(count);
  for (auto& w : out) {
    const std::size_t s = start(rng);
    w.assign(stream.begin() + static_cast<std::ptrdiff_t>(s), stream.begin() + static_cast<std::ptrdiff_t>(s + len));
  }
  return out;
}

/// Consecutive non-overlapping windows from the start of the stream, at most `max_count`.
inline std::vector<Tokens> consecutive_windows(std::span<const int> stream, std::size_t len, std::size_t max_count) {
  if (len < 2 || stream.size() < len)
    throw InputError("token stream of " + std::to_string(stream.size()) + " too short for windows of " + std::to_string(len));
  std::vector<Tokens> out;
  for (std::size_t s = 0; s + len <= stream.size() && out.size() < max_count; s += len)
    out.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(s), stream.begin() + static_cast<std::ptrdiff_t>(s + len));
  return out;
}

}  // namespace rotaquant
