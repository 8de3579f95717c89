#pragma once

// Independent oracles used only by tests. Deliberately naive: exhaustive
// recursion and enumeration, no sharing with the implementation path.

#include <cmath>
#include <functional>
#include <vector>

#include "cpl/ctc.hpp"
#include "cpl/matrix.hpp"
#include "cpl/metrics.hpp"

namespace oracles {

// Exponential-time recursive edit distance.
inline long edit_distance_recursive(const cpl::Transcript& ref, const cpl::Transcript& hyp,
                                    std::size_t i = 0, std::size_t j = 0) {
  if (i == ref.size()) return static_cast<long>(hyp.size() - j);
  if (j == hyp.size()) return static_cast<long>(ref.size() - i);
  const long sub = edit_distance_recursive(ref, hyp, i + 1, j + 1) +
                   (ref[i] == hyp[j] ? 0 : 1);
  const long del = edit_distance_recursive(ref, hyp, i + 1, j) + 1;
  const long ins = edit_distance_recursive(ref, hyp, i, j + 1) + 1;
  return std::min({sub, del, ins});
}

// Brute-force CTC: enumerate all V^T alignments, collapse each, and sum
// the path probabilities of those that collapse to the target.
inline double ctc_loss_enumerated(const cpl::Matrix& logits, const cpl::Transcript& target,
                                  cpl::TokenId blank) {
  const std::size_t T = logits.rows;
  const std::size_t V = logits.cols;
  // per-frame softmax probabilities
  cpl::Matrix p(T, V);
  for (std::size_t t = 0; t < T; ++t) {
    double mx = logits(t, 0);
    for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, logits(t, v));
    double z = 0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(logits(t, v) - mx);
    for (std::size_t v = 0; v < V; ++v) p(t, v) = std::exp(logits(t, v) - mx) / z;
  }
  double total = 0.0;
  cpl::Alignment a(T, 0);
  std::function<void(std::size_t, double)> rec = [&](std::size_t t, double prob) {
    if (t == T) {
      if (cpl::collapse(a, blank) == target) total += prob;
      return;
    }
    for (std::size_t v = 0; v < V; ++v) {
      a[t] = static_cast<cpl::TokenId>(v);
      rec(t + 1, prob * p(t, v));
    }
  };
  rec(0, 1.0);
  return -std::log(total);
}

// Sum of path probabilities over every reachable transcript; should be 1.
inline double ctc_total_probability(const cpl::Matrix& logits, cpl::TokenId blank,
                                    std::size_t max_len) {
  double total = 0.0;
  std::function<void(cpl::Transcript&, std::size_t)> rec = [&](cpl::Transcript& prefix,
                                                               std::size_t vocab) {
    total += std::exp(-ctc_loss_enumerated(logits, prefix, blank));
    if (prefix.size() == max_len) return;
    for (std::size_t v = 0; v < vocab; ++v) {
      if (static_cast<cpl::TokenId>(v) == blank) continue;
      prefix.push_back(static_cast<cpl::TokenId>(v));
      rec(prefix, vocab);
      prefix.pop_back();
    }
  };
  cpl::Transcript prefix;
  rec(prefix, logits.cols);
  return total;
}

// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> x, double h = 1e-4) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

}  // namespace oracles
