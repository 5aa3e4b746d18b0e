/// @file baselines.hpp
/// Match-based baseline metrics: BLEU, ROUGE-L and chrF++. These need no
/// model calls and give the evaluation pipeline something cheap to compare
/// judge scores against.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "swejudge/core.hpp"

namespace swejudge::baselines {

enum class TokenizerId { whitespace, code_punct };

inline const char* to_string(TokenizerId id) {
  return id == TokenizerId::whitespace ? "whitespace" : "code_punct";
}

/// whitespace: split on runs of whitespace, good for prose summaries.
/// code_punct: identifier/number runs ([A-Za-z0-9_]+) are one token each and
/// every other printable character is its own token, so `f(x+1)` becomes
/// ["f", "(", "x", "+", "1", ")"]. Good for code.
inline std::vector<std::string> tokenize(const std::string& text,
                                         TokenizerId id) {
  std::vector<std::string> out;
  const auto is_word = [](unsigned char c) {
    return std::isalnum(c) != 0 || c == '_';
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (id == TokenizerId::whitespace) {
      std::size_t j = i;
      while (j < text.size() &&
             !std::isspace(static_cast<unsigned char>(text[j])))
        ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    } else if (is_word(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word(static_cast<unsigned char>(text[j])))
        ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    } else {
      out.emplace_back(1, text[i]);
      ++i;
    }
  }
  return out;
}

struct TokenizedPair {
  std::vector<std::string> hypothesis;
  std::vector<std::string> reference;
  TokenizerId tokenizer_id = TokenizerId::whitespace;

  static TokenizedPair make(const std::string& hypothesis_text,
                            const std::string& reference_text,
                            TokenizerId id) {
    return TokenizedPair{tokenize(hypothesis_text, id),
                         tokenize(reference_text, id), id};
  }
};

namespace detail {

/// n-gram multiset as joined strings; '\x1f' cannot appear in tokens split
/// from text, so joins are unambiguous.
inline std::unordered_map<std::string, std::uint64_t> ngram_counts(
    const std::vector<std::string>& tokens, std::size_t n) {
  std::unordered_map<std::string, std::uint64_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (std::size_t j = 1; j < n; ++j) {
      key.push_back('\x1f');
      key += tokens[i + j];
    }
    ++counts[key];
  }
  return counts;
}

struct OverlapCounts {
  std::uint64_t matched = 0;    // clipped matches
  std::uint64_t hyp_total = 0;  // n-grams in hypothesis
  std::uint64_t ref_total = 0;  // n-grams in reference
};

template <typename Sequence>
OverlapCounts ngram_overlap(const Sequence& hyp, const Sequence& ref,
                            std::size_t n) {
  OverlapCounts oc;
  const auto hc = ngram_counts(hyp, n);
  const auto rc = ngram_counts(ref, n);
  for (const auto& [key, cnt] : hc) {
    oc.hyp_total += cnt;
    const auto it = rc.find(key);
    if (it != rc.end()) oc.matched += std::min(cnt, it->second);
  }
  for (const auto& [key, cnt] : rc) oc.ref_total += cnt;
  return oc;
}

inline std::uint64_t lcs_length(const std::vector<std::string>& a,
                                const std::vector<std::string>& b) {
  // Two-row DP; rows are |b|+1 wide.
  std::vector<std::uint64_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

/// Sentence BLEU, geometric mean of modified n-gram precisions for n=1..max_n
/// times the brevity penalty exp(1 - |ref|/|hyp|) when the hypothesis is
/// shorter than the reference.
///
/// Smoothing: zero counts at n >= 2 use add-one on both numerator and
/// denominator, so short-but-correct hypotheses are not zeroed out by missing
/// high-order n-grams. A zero 1-gram precision stays unsmoothed and yields 0.
inline double bleu(const TokenizedPair& pair, int max_n = 4) {
  if (pair.reference.empty())
    throw ValidationError("bleu: empty reference");
  if (max_n < 1) throw ValidationError("bleu: max_n must be >= 1");
  if (pair.hypothesis.empty()) return 0.0;

  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto oc = detail::ngram_overlap(pair.hypothesis, pair.reference,
                                          static_cast<std::size_t>(n));
    double p;
    if (n == 1) {
      if (oc.matched == 0) return 0.0;
      p = static_cast<double>(oc.matched) / static_cast<double>(oc.hyp_total);
    } else if (oc.matched == 0) {
      p = static_cast<double>(oc.matched + 1) /
          static_cast<double>(oc.hyp_total + 1);
    } else {
      p = static_cast<double>(oc.matched) / static_cast<double>(oc.hyp_total);
    }
    log_sum += std::log(p);
  }

  const double hyp_len = static_cast<double>(pair.hypothesis.size());
  const double ref_len = static_cast<double>(pair.reference.size());
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

/// ROUGE-L: F-measure (beta = 1) over LCS-based precision and recall,
/// P = LCS/|hyp|, R = LCS/|ref|, F = 2PR/(P+R); 0 when the LCS is empty.
inline double rouge_l(const TokenizedPair& pair) {
  if (pair.reference.empty())
    throw ValidationError("rouge_l: empty reference");
  if (pair.hypothesis.empty()) return 0.0;
  const std::uint64_t lcs = detail::lcs_length(pair.hypothesis, pair.reference);
  if (lcs == 0) return 0.0;
  const double p =
      static_cast<double>(lcs) / static_cast<double>(pair.hypothesis.size());
  const double r =
      static_cast<double>(lcs) / static_cast<double>(pair.reference.size());
  return 2.0 * p * r / (p + r);
}

/// chrF++ on raw text, scaled to 0..100. Character n-grams (n = 1..6) are
/// taken over the text with all whitespace removed; word n-grams (n = 1..2)
/// over whitespace tokens. Precision and recall are averaged across orders
/// and combined with beta = 2 (recall-weighted):
///
///   F = (1 + b^2) * P * R / (b^2 * P + R)
///
/// Orders where neither side has any n-gram (inputs shorter than n) are
/// skipped; an order where exactly one side is empty contributes zero. That
/// keeps identical short strings at 100 without rewarding length mismatch.
inline double chrf_pp(const std::string& hypothesis,
                      const std::string& reference) {
  const auto strip_ws = [](const std::string& s) {
    std::vector<std::string> chars;
    for (char c : s)
      if (!std::isspace(static_cast<unsigned char>(c)))
        chars.emplace_back(1, c);
    return chars;
  };
  const std::vector<std::string> hyp_chars = strip_ws(hypothesis);
  const std::vector<std::string> ref_chars = strip_ws(reference);
  if (ref_chars.empty())
    throw ValidationError("chrf_pp: empty reference");

  const std::vector<std::string> hyp_words =
      tokenize(hypothesis, TokenizerId::whitespace);
  const std::vector<std::string> ref_words =
      tokenize(reference, TokenizerId::whitespace);

  double prec_sum = 0.0, rec_sum = 0.0;
  std::size_t orders = 0;
  const auto accumulate = [&](const std::vector<std::string>& hyp,
                              const std::vector<std::string>& ref,
                              std::size_t n) {
    const auto oc = detail::ngram_overlap(hyp, ref, n);
    if (oc.hyp_total == 0 && oc.ref_total == 0) return;  // order not present
    ++orders;
    if (oc.hyp_total > 0)
      prec_sum += static_cast<double>(oc.matched) /
                  static_cast<double>(oc.hyp_total);
    if (oc.ref_total > 0)
      rec_sum += static_cast<double>(oc.matched) /
                 static_cast<double>(oc.ref_total);
  };
  for (std::size_t n = 1; n <= 6; ++n) accumulate(hyp_chars, ref_chars, n);
  for (std::size_t n = 1; n <= 2; ++n) accumulate(hyp_words, ref_words, n);

  if (orders == 0) return 0.0;
  const double p = prec_sum / static_cast<double>(orders);
  const double r = rec_sum / static_cast<double>(orders);
  const double beta2 = 4.0;
  if (p == 0.0 && r == 0.0) return 0.0;
  const double f = (1.0 + beta2) * p * r / (beta2 * p + r);
  return 100.0 * f;
}

}  // namespace swejudge::baselines
