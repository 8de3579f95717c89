#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "cpl/matrix.hpp"
#include "cpl/metrics.hpp"
#include "cpl/rng.hpp"

namespace cpl {

// Per-frame distribution produced from logits at a given temperature.
struct FramePosterior {
  Matrix values;       // T x V, rows sum to 1
  double temperature;  // tau used to produce it
};

// Length-T frame labeling; blank allowed.
using Alignment = std::vector<TokenId>;

namespace detail {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

// Row-wise log-softmax at tau = 1.
inline Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows, logits.cols);
  for (std::size_t t = 0; t < logits.rows; ++t) {
    double mx = kNegInf;
    for (std::size_t v = 0; v < logits.cols; ++v) mx = std::max(mx, logits(t, v));
    double z = 0.0;
    for (std::size_t v = 0; v < logits.cols; ++v) z += std::exp(logits(t, v) - mx);
    const double logz = mx + std::log(z);
    for (std::size_t v = 0; v < logits.cols; ++v) out(t, v) = logits(t, v) - logz;
  }
  return out;
}

inline std::size_t argmax_row(const Matrix& m, std::size_t t) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < m.cols; ++v)
    if (m(t, v) > m(t, best)) best = v;  // ties break toward the lowest index
  return best;
}

}  // namespace detail

// Deduplicate consecutive repeats, then remove blanks.
inline Transcript collapse(const Alignment& a, TokenId blank) {
  Transcript out;
  TokenId prev = -1;
  bool first = true;
  for (TokenId t : a) {
    if (!first && t == prev) continue;
    first = false;
    prev = t;
    if (t != blank) out.push_back(t);
  }
  return out;
}

struct CtcResult {
  double loss = 0.0;
  Matrix grad;  // d loss / d logits, T x V
  bool feasible = true;
};

// CTC loss and gradient w.r.t. per-frame logits. Softmax at tau = 1 is
// applied internally; all recursions are in log space.
//
// Infeasible targets (T too short for the blank-extended target) return
// +inf loss and a zero gradient instead of erroring: sampled PLs can
// exceed the frame budget and the trainer skips such samples.
inline CtcResult ctc_loss_grad(const Matrix& logits, const Transcript& target, TokenId blank) {
  const std::size_t T = logits.rows;
  const std::size_t V = logits.cols;
  const std::size_t L = target.size();
  for (TokenId t : target)
    if (t == blank || t < 0 || static_cast<std::size_t>(t) >= V)
      throw std::invalid_argument("ctc_loss_grad: target token out of range or blank");

  std::size_t repeats = 0;
  for (std::size_t i = 1; i < L; ++i)
    if (target[i] == target[i - 1]) ++repeats;

  CtcResult res;
  res.grad = Matrix(T, V);
  if (T < L + repeats) {
    res.loss = std::numeric_limits<double>::infinity();
    res.feasible = false;
    return res;
  }

  const Matrix logp = detail::log_softmax(logits);

  // Blank-extended target: blank, y1, blank, y2, ..., blank.
  const std::size_t S = 2 * L + 1;
  std::vector<TokenId> z(S, blank);
  for (std::size_t i = 0; i < L; ++i) z[2 * i + 1] = target[i];

  auto allows_skip = [&](std::size_t s) {
    return s >= 2 && z[s] != blank && z[s] != z[s - 2];
  };

  Matrix alpha(T, S, detail::kNegInf);
  alpha(0, 0) = logp(0, static_cast<std::size_t>(z[0]));
  if (S > 1) alpha(0, 1) = logp(0, static_cast<std::size_t>(z[1]));
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = detail::log_add(a, alpha(t - 1, s - 1));
      if (allows_skip(s)) a = detail::log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a + logp(t, static_cast<std::size_t>(z[s]));
    }

  double log_p_total = alpha(T - 1, S - 1);
  if (S > 1) log_p_total = detail::log_add(log_p_total, alpha(T - 1, S - 2));
  res.loss = -log_p_total;

  // beta includes the emission at t, like alpha.
  Matrix beta(T, S, detail::kNegInf);
  beta(T - 1, S - 1) = logp(T - 1, static_cast<std::size_t>(z[S - 1]));
  if (S > 1) beta(T - 1, S - 2) = logp(T - 1, static_cast<std::size_t>(z[S - 2]));
  for (std::size_t ti = T - 1; ti-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta(ti + 1, s);
      if (s + 1 < S) b = detail::log_add(b, beta(ti + 1, s + 1));
      if (s + 2 < S && allows_skip(s + 2)) b = detail::log_add(b, beta(ti + 1, s + 2));
      beta(ti, s) = b + logp(ti, static_cast<std::size_t>(z[s]));
    }
  }

  // grad = softmax - state posterior pooled per output class.
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t v = 0; v < V; ++v) res.grad(t, v) = std::exp(logp(t, v));
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t v = static_cast<std::size_t>(z[s]);
      const double occ = alpha(t, s) + beta(t, s) - logp(t, v) - log_p_total;
      if (occ != detail::kNegInf) res.grad(t, v) -= std::exp(occ);
    }
  }
  return res;
}

// tau > 0: row-wise softmax of logits / tau. tau = 0: one-hot at the
// row argmax (ties toward the lowest index).
inline FramePosterior apply_temperature(const Matrix& logits, double tau) {
  if (tau < 0) throw std::invalid_argument("apply_temperature: tau must be >= 0");
  FramePosterior out{Matrix(logits.rows, logits.cols), tau};
  for (std::size_t t = 0; t < logits.rows; ++t) {
    if (tau == 0.0) {
      out.values(t, detail::argmax_row(logits, t)) = 1.0;
      continue;
    }
    double mx = detail::kNegInf;
    for (std::size_t v = 0; v < logits.cols; ++v) mx = std::max(mx, logits(t, v) / tau);
    double z = 0.0;
    for (std::size_t v = 0; v < logits.cols; ++v) z += std::exp(logits(t, v) / tau - mx);
    for (std::size_t v = 0; v < logits.cols; ++v)
      out.values(t, v) = std::exp(logits(t, v) / tau - mx) / z;
  }
  return out;
}

// Per-frame argmax followed by collapse; the hard pseudo-label.
inline Transcript greedy_decode(const Matrix& logits, TokenId blank) {
  Alignment a(logits.rows);
  for (std::size_t t = 0; t < logits.rows; ++t)
    a[t] = static_cast<TokenId>(detail::argmax_row(logits, t));
  return collapse(a, blank);
}

// Frame labels drawn independently from the temperature-scaled posterior.
inline Alignment sample_alignment(const Matrix& logits, double tau, Rng& rng) {
  const FramePosterior post = apply_temperature(logits, tau);
  Alignment a(logits.rows);
  for (std::size_t t = 0; t < logits.rows; ++t) {
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t pick = logits.cols - 1;
    for (std::size_t v = 0; v < logits.cols; ++v) {
      acc += post.values(t, v);
      if (u < acc) {
        pick = v;
        break;
      }
    }
    a[t] = static_cast<TokenId>(pick);
  }
  return a;
}

inline Transcript sample_decode(const Matrix& logits, double tau, TokenId blank, Rng& rng) {
  return collapse(sample_alignment(logits, tau, rng), blank);
}

}  // namespace cpl
