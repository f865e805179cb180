#pragma once

// Corpus BLEU-1..4 (single reference, no smoothing) and sentence-averaged
// ROUGE-L.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histocap/error.hpp"

namespace histocap {

using Tokens = std::vector<std::string>;

struct NgramCounts {
  std::array<std::size_t, 4> matches{};  // clipped
  std::array<std::size_t, 4> totals{};   // candidate n-grams
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;

  NgramCounts& operator+=(const NgramCounts& o) {
    for (std::size_t n = 0; n < 4; ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    candidate_length += o.candidate_length;
    reference_length += o.reference_length;
    return *this;
  }
};

inline std::map<Tokens, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<Tokens, std::size_t> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

inline NgramCounts count_ngrams(const Tokens& candidate, const Tokens& reference) {
  NgramCounts c;
  c.candidate_length = candidate.size();
  c.reference_length = reference.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cand = ngram_counts(candidate, n);
    const auto ref = ngram_counts(reference, n);
    for (const auto& [gram, count] : cand) {
      const auto it = ref.find(gram);
      c.matches[n - 1] += std::min(count, it == ref.end() ? 0 : it->second);
      c.totals[n - 1] += count;
    }
  }
  return c;
}

inline double brevity_penalty(std::size_t candidate_length, std::size_t reference_length) {
  if (candidate_length == 0) return 0.0;
  const double ratio = static_cast<double>(reference_length) / static_cast<double>(candidate_length);
  return std::min(1.0, std::exp(1.0 - ratio));
}

// BLEU-1..4 from aggregated counts; a zero precision zeroes the score.
inline std::array<double, 4> bleu_from_counts(const NgramCounts& c) {
  std::array<double, 4> out{};
  const double bp = brevity_penalty(c.candidate_length, c.reference_length);
  double log_sum = 0.0;
  bool zero = bp == 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (c.totals[n] == 0 || c.matches[n] == 0) zero = true;
    if (!zero) log_sum += std::log(static_cast<double>(c.matches[n]) / static_cast<double>(c.totals[n]));
    out[n] = zero ? 0.0 : bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return out;
}

inline std::array<double, 4> corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  if (candidates.size() != references.size()) {
    throw ValueError("bleu: " + std::to_string(candidates.size()) + " candidates vs " +
                     std::to_string(references.size()) + " references");
  }
  if (candidates.empty()) throw ValueError("bleu: empty corpus");
  NgramCounts total;
  for (std::size_t i = 0; i < candidates.size(); ++i) total += count_ngrams(candidates[i], references[i]);
  return bleu_from_counts(total);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.2) {
  const std::size_t lcs = lcs_length(candidate, reference);
  if (lcs == 0) return 0.0;
  const double r = static_cast<double>(lcs) / static_cast<double>(reference.size());
  const double p = static_cast<double>(lcs) / static_cast<double>(candidate.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * r * p / (r + b2 * p);
}

struct SentenceScore {
  std::string id;
  std::string candidate;
  std::string reference;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
};

struct MetricsReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  NgramCounts counts;
  std::vector<SentenceScore> sentences;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& s : sentences) {
      per.push_back({{"slide_id", s.id}, {"candidate", s.candidate}, {"reference", s.reference},
                     {"bleu4", s.bleu4}, {"rouge_l", s.rouge_l}});
    }
    return {{"bleu1", bleu[0]},
            {"bleu2", bleu[1]},
            {"bleu3", bleu[2]},
            {"bleu4", bleu[3]},
            {"rouge_l", rouge_l},
            {"counts",
             {{"matches", counts.matches},
              {"totals", counts.totals},
              {"candidate_length", counts.candidate_length},
              {"reference_length", counts.reference_length}}},
            {"sentences", per}};
  }
};

// Scores tokenized candidates against references; `ids` and the raw strings
// only label the per-sentence rows.
inline MetricsReport score_corpus(const std::vector<std::string>& ids, const std::vector<Tokens>& candidates,
                                  const std::vector<Tokens>& references) {
  if (ids.size() != candidates.size() || candidates.size() != references.size()) {
    throw ValueError("score_corpus: mismatched list lengths");
  }
  if (candidates.empty()) throw ValueError("score_corpus: empty corpus");
  MetricsReport rep;
  double rouge_total = 0.0;
  const auto join = [](const Tokens& t) {
    std::string s;
    for (const auto& w : t) s += (s.empty() ? "" : " ") + w;
    return s;
  };
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = count_ngrams(candidates[i], references[i]);
    rep.counts += c;
    SentenceScore s{ids[i], join(candidates[i]), join(references[i]), bleu_from_counts(c)[3],
                    rouge_l(candidates[i], references[i])};
    rouge_total += s.rouge_l;
    rep.sentences.push_back(std::move(s));
  }
  rep.bleu = bleu_from_counts(rep.counts);
  rep.rouge_l = rouge_total / static_cast<double>(candidates.size());
  return rep;
}

}  // namespace histocap
