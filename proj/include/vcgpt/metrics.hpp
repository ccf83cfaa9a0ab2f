#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vcgpt/error.hpp"
#include "vcgpt/tokenizer.hpp"

namespace vcgpt {

struct MetricReport {
  double cider_d = 0.0;
  double bleu4 = 0.0;
  std::vector<double> per_sample_cider;
};

using NGram = std::vector<std::string>;
using NGramCounts = std::map<NGram, double>;

/// Counts of all n-grams of order 1..max_n.
inline std::array<NGramCounts, 4> ngram_counts(const std::vector<std::string>& words) {
  std::array<NGramCounts, 4> out;
  for (std::size_t n = 1; n <= 4; ++n) {
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      out[n - 1][NGram(words.begin() + static_cast<std::ptrdiff_t>(i),
                       words.begin() + static_cast<std::ptrdiff_t>(i + n))] += 1.0;
    }
  }
  return out;
}

namespace detail {
inline void check_references(const std::vector<std::vector<std::string>>& references) {
  for (std::size_t i = 0; i < references.size(); ++i) {
    if (references[i].empty()) {
      throw DataError("image " + std::to_string(i) + " has no reference captions");
    }
  }
}
}  // namespace detail

// CIDEr-D: TF-IDF weighted n-gram cosine (n = 1..4) with count clipping and a
// Gaussian length penalty (sigma 6), averaged over orders and references and
// scaled by 10. Document frequencies come from the reference corpus the
// scorer is built on (one document = one image's reference set), so a scorer
// built once over training references gives a fixed reward function.
class CiderD {
 public:
  static constexpr double kSigma = 6.0;

  explicit CiderD(const std::vector<std::vector<std::string>>& references) {
    detail::check_references(references);
    if (references.empty()) throw DataError("CIDEr-D needs a non-empty reference corpus");
    for (const auto& refs : references) {
      std::array<std::map<NGram, int>, 4> seen;
      for (const auto& r : refs) {
        auto counts = ngram_counts(split_words(r));
        for (std::size_t n = 0; n < 4; ++n)
          for (const auto& [g, c] : counts[n]) seen[n][g] = 1;
      }
      for (std::size_t n = 0; n < 4; ++n)
        for (const auto& [g, c] : seen[n]) doc_freq_[g] += 1.0;
    }
    log_docs_ = std::log(static_cast<double>(references.size()));
  }

  /// Score of one candidate against one image's references.
  double score(const std::string& candidate, const std::vector<std::string>& refs) const {
    if (refs.empty()) throw DataError("CIDEr-D: image has no reference captions");
    const Vec hyp = vectorize(candidate);
    std::array<double, 4> total{};
    for (const auto& r : refs) {
      const Vec ref = vectorize(r);
      const double delta = static_cast<double>(hyp.length) - static_cast<double>(ref.length);
      const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
      for (std::size_t n = 0; n < 4; ++n) {
        double val = 0.0;
        for (const auto& [g, hv] : hyp.weights[n]) {
          auto it = ref.weights[n].find(g);
          if (it != ref.weights[n].end()) val += std::min(hv, it->second) * it->second;
        }
        if (hyp.sq_norm[n] != 0.0 && ref.sq_norm[n] != 0.0) val /= std::sqrt(hyp.sq_norm[n] * ref.sq_norm[n]);
        total[n] += val * penalty;
      }
    }
    double mean = (total[0] + total[1] + total[2] + total[3]) / 4.0;
    mean /= static_cast<double>(refs.size());
    return mean * 10.0;
  }

  double document_frequency(const NGram& g) const {
    auto it = doc_freq_.find(g);
    return it == doc_freq_.end() ? 0.0 : it->second;
  }

 private:
  struct Vec {
    std::array<std::map<NGram, double>, 4> weights;
    std::array<double, 4> sq_norm{};
    std::size_t length = 0;
  };

  Vec vectorize(const std::string& text) const {
    const auto words = split_words(text);
    Vec v;
    v.length = words.size();
    auto counts = ngram_counts(words);
    for (std::size_t n = 0; n < 4; ++n) {
      for (const auto& [g, tf] : counts[n]) {
        const double df = std::log(std::max(1.0, document_frequency(g)));
        const double w = tf * (log_docs_ - df);
        v.weights[n][g] = w;
        v.sq_norm[n] += w * w;
      }
    }
    return v;
  }

  std::map<NGram, double> doc_freq_;
  double log_docs_ = 0.0;
};

/// Corpus CIDEr-D with IDF taken from `references` themselves.
inline MetricReport cider_d(const std::vector<std::string>& candidates,
                            const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) {
    throw DataError("CIDEr-D: " + std::to_string(candidates.size()) + " candidates for " +
                    std::to_string(references.size()) + " images");
  }
  detail::check_references(references);
  MetricReport report;
  if (candidates.empty()) return report;
  const CiderD scorer(references);
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double s = scorer.score(candidates[i], references[i]);
    report.per_sample_cider.push_back(s);
    total += s;
  }
  report.cider_d = total / static_cast<double>(candidates.size());
  return report;
}

/// Corpus BLEU@4: clipped n-gram precisions pooled over the corpus, geometric
/// mean, brevity penalty against the closest reference length. No smoothing.
inline double bleu4(const std::vector<std::string>& candidates,
                    const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) {
    throw DataError("BLEU: " + std::to_string(candidates.size()) + " candidates for " +
                    std::to_string(references.size()) + " images");
  }
  detail::check_references(references);
  std::array<double, 4> matched{}, total{};
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto words = split_words(candidates[i]);
    const auto counts = ngram_counts(words);
    std::array<NGramCounts, 4> max_ref;
    std::size_t closest = 0;
    bool first = true;
    for (const auto& r : references[i]) {
      const auto rw = split_words(r);
      const auto diff = [&](std::size_t len) {
        return len > words.size() ? len - words.size() : words.size() - len;
      };
      if (first || diff(rw.size()) < diff(closest) || (diff(rw.size()) == diff(closest) && rw.size() < closest)) {
        closest = rw.size();
        first = false;
      }
      const auto rc = ngram_counts(rw);
      for (std::size_t n = 0; n < 4; ++n)
        for (const auto& [g, c] : rc[n]) max_ref[n][g] = std::max(max_ref[n][g], c);
    }
    for (std::size_t n = 0; n < 4; ++n) {
      for (const auto& [g, c] : counts[n]) {
        total[n] += c;
        auto it = max_ref[n].find(g);
        if (it != max_ref[n].end()) matched[n] += std::min(c, it->second);
      }
    }
    cand_len += static_cast<double>(words.size());
    ref_len += static_cast<double>(closest);
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (matched[n] == 0.0 || total[n] == 0.0) return 0.0;
    log_sum += std::log(matched[n] / total[n]);
  }
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  return bp * std::exp(log_sum / 4.0);
}

inline MetricReport evaluate_captions(const std::vector<std::string>& candidates,
                                      const std::vector<std::vector<std::string>>& references) {
  MetricReport report = cider_d(candidates, references);
  report.bleu4 = bleu4(candidates, references);
  return report;
}

}  // namespace vcgpt
