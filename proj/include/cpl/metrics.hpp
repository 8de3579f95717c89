#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace cpl {

using TokenId = std::int32_t;

// Blank-free token sequence; the unit pseudo-labels and references are
// expressed in. Empty is valid.
using Transcript = std::vector<TokenId>;

struct EditStats {
  long substitutions = 0;
  long insertions = 0;
  long deletions = 0;
  long ref_len = 0;

  long total() const { return substitutions + insertions + deletions; }
};

// Minimal-edit alignment between ref and hyp with uniform costs,
// decomposed into substitution/insertion/deletion counts via backtrace.
inline EditStats levenshtein(const Transcript& ref, const Transcript& hyp) {
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  std::vector<long> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> long& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<long>(i);
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = static_cast<long>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const long sub = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      const long del = at(i - 1, j) + 1;
      const long ins = at(i, j - 1) + 1;
      at(i, j) = std::min({sub, del, ins});
    }

  EditStats s;
  s.ref_len = static_cast<long>(n);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++s.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++s.deletions;
      --i;
    } else {
      ++s.insertions;
      --j;
    }
  }
  return s;
}

// edits / ref_len. Empty-reference convention: 0 if hyp is empty too,
// otherwise 1. TER is not clipped here; TER > 1 is possible.
inline double ter(const Transcript& ref, const Transcript& hyp) {
  if (ref.empty()) return hyp.empty() ? 0.0 : 1.0;
  const EditStats s = levenshtein(ref, hyp);
  return static_cast<double>(s.total()) / static_cast<double>(s.ref_len);
}

// Pooled (not averaged) rate over a batch of pairs.
inline double batch_ter(const std::vector<Transcript>& refs, const std::vector<Transcript>& hyps) {
  if (refs.size() != hyps.size() || refs.empty())
    throw std::invalid_argument("batch_ter: refs and hyps must be non-empty and equal-sized");
  long edits = 0;
  long ref_len = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const EditStats s = levenshtein(refs[i], hyps[i]);
    edits += s.total();
    ref_len += s.ref_len;
  }
  if (ref_len == 0) return edits == 0 ? 0.0 : 1.0;
  return static_cast<double>(edits) / static_cast<double>(ref_len);
}

// Same algorithm at word granularity; sequences of word ids.
inline double wer(const Transcript& ref_words, const Transcript& hyp_words) {
  return ter(ref_words, hyp_words);
}

inline double batch_wer(const std::vector<Transcript>& refs, const std::vector<Transcript>& hyps) {
  return batch_ter(refs, hyps);
}

// Splits a token sequence on a separator token and hashes each run into a
// word id. The synthetic task has no word structure by itself; this gives
// WER a word granularity to operate on.
inline Transcript word_ids(const Transcript& tokens, TokenId separator) {
  Transcript words;
  std::size_t h = 1469598103934665603ULL % 2147483647;
  bool in_word = false;
  auto flush = [&] {
    if (in_word) {
      words.push_back(static_cast<TokenId>(h & 0x7fffffff));
      h = 1469598103934665603ULL % 2147483647;
      in_word = false;
    }
  };
  for (TokenId t : tokens) {
    if (t == separator) {
      flush();
    } else {
      h = (h * 1099511628211ULL + static_cast<std::size_t>(t) + 1) & 0xffffffffULL;
      in_word = true;
    }
  }
  flush();
  return words;
}

}  // namespace cpl
