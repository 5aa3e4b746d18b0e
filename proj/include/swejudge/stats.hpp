/// @file stats.hpp
/// Rank correlation and agreement statistics used to validate judge scores
/// against human annotations.
///
/// Every correlation returns std::optional<double>: nullopt is the "undefined"
/// marker for degenerate inputs (zero variance, all-tied vectors). Callers that
/// need a number for averaging use avg_correlation, which maps undefined to 0.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "swejudge/core.hpp"

namespace swejudge::stats {

/// Prediction/truth vector pair. Both sides must have the same length >= 2 and
/// be free of NaN/inf before any statistic is computed.
struct PairedScores {
  std::vector<double> predicted;
  std::vector<double> truth;

  void validate() const {
    if (predicted.size() != truth.size())
      throw ValidationError("paired scores: size mismatch (" +
                            std::to_string(predicted.size()) + " vs " +
                            std::to_string(truth.size()) + ")");
    if (predicted.size() < 2)
      throw ValidationError("paired scores: need at least 2 pairs, got " +
                            std::to_string(predicted.size()));
    for (double v : predicted)
      if (!std::isfinite(v))
        throw ValidationError("paired scores: non-finite predicted value");
    for (double v : truth)
      if (!std::isfinite(v))
        throw ValidationError("paired scores: non-finite truth value");
  }
};

namespace detail {

inline bool all_equal(const std::vector<double>& v) {
  for (double x : v)
    if (x != v.front()) return false;
  return true;
}

/// Fractional (average) ranks, 1-based: ties share the mean of the positions
/// they occupy, e.g. [10, 20, 20, 30] -> [1, 2.5, 2.5, 4].
inline std::vector<double> fractional_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });

  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    // Positions i..j (0-based) hold a tie run; average 1-based rank.
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

/// Pairs lost to ties: sum over tie groups of t*(t-1)/2.
inline std::uint64_t tie_pair_count(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::uint64_t pairs = 0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j + 1 < v.size() && v[j + 1] == v[i]) ++j;
    const std::uint64_t t = j - i + 1;
    pairs += t * (t - 1) / 2;
    i = j + 1;
  }
  return pairs;
}

/// Counts strict inversions (i < j with v[i] > v[j]) by merge sort.
inline std::uint64_t merge_count(std::vector<double>& v, std::vector<double>& tmp,
                                 std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t inv = merge_count(v, tmp, lo, mid) + merge_count(v, tmp, mid, hi);
  std::size_t a = lo, b = mid, out = lo;
  while (a < mid && b < hi) {
    if (v[b] < v[a]) {
      inv += mid - a;  // v[a..mid) are all greater than v[b]
      tmp[out++] = v[b++];
    } else {
      tmp[out++] = v[a++];
    }
  }
  while (a < mid) tmp[out++] = v[a++];
  while (b < hi) tmp[out++] = v[b++];
  std::copy(tmp.begin() + lo, tmp.begin() + hi, v.begin() + lo);
  return inv;
}

inline std::uint64_t inversion_count(std::vector<double> v) {
  std::vector<double> tmp(v.size());
  return merge_count(v, tmp, 0, v.size());
}

}  // namespace detail

/// Kendall's tau-b with tie correction:
///
///   tau = (C - D) / sqrt((n0 - n1) * (n0 - n2))
///
/// where n0 = n(n-1)/2, n1/n2 = tie pairs within predicted/truth, C/D the
/// concordant/discordant pair counts. Computed in O(n log n): sort by
/// (predicted, truth), count discordant pairs as inversions of the truth
/// sequence, and recover C from C + D = n0 - n1 - n2 + n3 with n3 the pairs
/// tied in both. Undefined when either side is all ties.
inline std::optional<double> kendall_tau(const PairedScores& ps) {
  ps.validate();
  const std::size_t n = ps.predicted.size();
  const std::uint64_t n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (ps.predicted[a] != ps.predicted[b])
      return ps.predicted[a] < ps.predicted[b];
    return ps.truth[a] < ps.truth[b];
  });

  const std::uint64_t n1 = detail::tie_pair_count(ps.predicted);
  const std::uint64_t n2 = detail::tie_pair_count(ps.truth);
  if (n0 == n1 || n0 == n2) return std::nullopt;

  // Pairs tied in both coordinates: group the (predicted, truth) pairs.
  std::uint64_t n3 = 0;
  {
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n &&
             ps.predicted[order[j + 1]] == ps.predicted[order[i]] &&
             ps.truth[order[j + 1]] == ps.truth[order[i]])
        ++j;
      const std::uint64_t t = j - i + 1;
      n3 += t * (t - 1) / 2;
      i = j + 1;
    }
  }

  std::vector<double> truth_in_order(n);
  for (std::size_t i = 0; i < n; ++i) truth_in_order[i] = ps.truth[order[i]];
  const std::uint64_t d = detail::inversion_count(std::move(truth_in_order));
  const std::uint64_t cd = n0 - n1 - n2 + n3;  // C + D
  const double num =
      static_cast<double>(static_cast<std::int64_t>(cd) - 2 * static_cast<std::int64_t>(d));
  const double den = std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
  return std::clamp(num / den, -1.0, 1.0);
}

/// Pearson's r. Undefined when either vector is constant.
inline std::optional<double> pearson(const PairedScores& ps) {
  ps.validate();
  if (detail::all_equal(ps.predicted) || detail::all_equal(ps.truth))
    return std::nullopt;

  const std::size_t n = ps.predicted.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += ps.predicted[i];
    my += ps.truth[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);

  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = ps.predicted[i] - mx;
    const double dy = ps.truth[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Spearman's rho: Pearson's r over fractional ranks. Ties are handled by the
/// rank averaging, so no separate tie-correction term is needed. Undefined
/// when either vector is constant.
inline std::optional<double> spearman(const PairedScores& ps) {
  ps.validate();
  if (detail::all_equal(ps.predicted) || detail::all_equal(ps.truth))
    return std::nullopt;
  PairedScores ranked{detail::fractional_ranks(ps.predicted),
                      detail::fractional_ranks(ps.truth)};
  return pearson(ranked);
}

/// Average of the three correlations with undefined mapped to 0. This keeps
/// team comparison total: a degenerate judge (constant output) scores 0 on the
/// undefined statistics instead of poisoning the average.
inline double avg_correlation(std::optional<double> tau,
                              std::optional<double> rho,
                              std::optional<double> r) {
  return (tau.value_or(0.0) + rho.value_or(0.0) + r.value_or(0.0)) / 3.0;
}

/// tau, rho, r and their average for one prediction/truth pairing.
struct CorrelationSummary {
  std::optional<double> tau;
  std::optional<double> spearman;
  std::optional<double> pearson;
  double avg_cor = 0.0;
};

inline CorrelationSummary compute_correlations(const PairedScores& ps) {
  CorrelationSummary s;
  s.tau = kendall_tau(ps);
  s.spearman = stats::spearman(ps);
  s.pearson = stats::pearson(ps);
  s.avg_cor = avg_correlation(s.tau, s.spearman, s.pearson);
  return s;
}

/// Snaps a value on [scale.min, scale.max] to the nearest grid point; an exact
/// half-step gap rounds up. Values outside the scale clamp to the endpoints.
inline double discretize(double value, const ScoreScale& scale) {
  if (!std::isfinite(value))
    throw ValidationError("discretize: non-finite value");
  const double idx = (value - scale.min) / scale.step;
  double snapped = std::floor(idx + 0.5);  // half rounds up
  const double max_idx = static_cast<double>(scale.grid_size() - 1);
  snapped = std::clamp(snapped, 0.0, max_idx);
  return scale.min + snapped * scale.step;
}

namespace detail {

inline std::size_t grid_index(double label, const ScoreScale& scale,
                              const char* side) {
  const double idx = (label - scale.min) / scale.step;
  const double nearest = std::round(idx);
  if (std::abs(label - (scale.min + nearest * scale.step)) > 1e-9 ||
      nearest < 0.0 || nearest > static_cast<double>(scale.grid_size() - 1))
    throw ValidationError(std::string("cohen_kappa: ") + side + " label " +
                          std::to_string(label) + " is not on the scale grid");
  return static_cast<std::size_t>(nearest);
}

}  // namespace detail

/// Unweighted Cohen's kappa over labels drawn from the scale grid:
///
///   kappa = (p_o - p_e) / (1 - p_e)
///
/// with observed agreement p_o and chance agreement p_e from the marginals.
/// When both raters are constant on the same label (p_e = 1, p_o = 1) the
/// agreement is perfect and 1.0 is returned; p_e = 1 with p_o < 1 cannot arise
/// from exact counts but is guarded as undefined against floating-point dust.
inline std::optional<double> cohen_kappa(const std::vector<double>& a,
                                         const std::vector<double>& b,
                                         const ScoreScale& scale) {
  scale.validate();
  if (a.size() != b.size())
    throw ValidationError("cohen_kappa: size mismatch");
  if (a.empty()) throw ValidationError("cohen_kappa: empty label vectors");

  const std::size_t grid = scale.grid_size();
  std::vector<std::uint64_t> ca(grid, 0), cb(grid, 0);
  std::uint64_t matches = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const std::size_t ia = detail::grid_index(a[i], scale, "first");
    const std::size_t ib = detail::grid_index(b[i], scale, "second");
    ++ca[ia];
    ++cb[ib];
    if (ia == ib) ++matches;
  }

  const double n = static_cast<double>(a.size());
  const double po = static_cast<double>(matches) / n;
  double pe = 0.0;
  for (std::size_t c = 0; c < grid; ++c)
    pe += (static_cast<double>(ca[c]) / n) * (static_cast<double>(cb[c]) / n);

  if (pe >= 1.0 - 1e-12) {
    if (po >= 1.0 - 1e-12) return 1.0;
    return std::nullopt;
  }
  return (po - pe) / (1.0 - pe);
}

}  // namespace swejudge::stats
