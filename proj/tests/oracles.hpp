#pragma once

// Reference implementations written straight from the metric and search
// definitions, kept independent of the library code they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vcgpt/rng.hpp"
#include "vcgpt/tokenizer.hpp"

namespace vcgpt::oracle {

using Corpus = std::vector<std::vector<std::string>>;

inline std::vector<std::string> words_of(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> w;
  for (std::string t; is >> t;) w.push_back(t);
  return w;
}

inline std::map<std::string, double> grams(const std::vector<std::string>& w, std::size_t n) {
  std::map<std::string, double> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) {
    std::string key;
    for (std::size_t k = 0; k < n; ++k) key += (k ? "\x1f" : "") + w[i + k];
    out[key] += 1.0;
  }
  return out;
}

/// CIDEr-D score of every candidate; the IDF table is built from `idf_refs`.
inline std::vector<double> cider_d(const std::vector<std::string>& cands, const Corpus& refs, const Corpus& idf_refs) {
  const double n_docs = static_cast<double>(idf_refs.size());
  std::vector<double> scores;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto cw = words_of(cands[i]);
    double per_ref_total = 0.0;
    for (const auto& r : refs[i]) {
      const auto rw = words_of(r);
      double sum_n = 0.0;
      for (std::size_t n = 1; n <= 4; ++n) {
        auto idf = [&](const std::string& g) {
          double df = 0.0;
          for (const auto& doc : idf_refs) {
            bool hit = false;
            for (const auto& d : doc) hit = hit || grams(words_of(d), n).count(g) > 0;
            df += hit ? 1.0 : 0.0;
          }
          return std::log(n_docs) - std::log(std::max(1.0, df));
        };
        std::map<std::string, double> vc, vr;
        for (const auto& [g, tf] : grams(cw, n)) vc[g] = tf * idf(g);
        for (const auto& [g, tf] : grams(rw, n)) vr[g] = tf * idf(g);
        double dot = 0.0, nc = 0.0, nr = 0.0;
        for (const auto& [g, x] : vc) {
          nc += x * x;
          if (vr.count(g)) dot += std::min(x, vr[g]) * vr[g];
        }
        for (const auto& [g, x] : vr) nr += x * x;
        const double cos = (nc > 0 && nr > 0) ? dot / (std::sqrt(nc) * std::sqrt(nr)) : 0.0;
        const double delta = static_cast<double>(cw.size()) - static_cast<double>(rw.size());
        sum_n += cos * std::exp(-delta * delta / 72.0);
      }
      per_ref_total += sum_n / 4.0;
    }
    scores.push_back(10.0 * per_ref_total / static_cast<double>(refs[i].size()));
  }
  return scores;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double bleu4(const std::vector<std::string>& cands, const Corpus& refs) {
  double match[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  double c = 0.0, r = 0.0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto cw = words_of(cands[i]);
    c += static_cast<double>(cw.size());
    double best_len = -1.0, best_gap = 1e300;
    for (const auto& ref : refs[i]) {
      const double len = static_cast<double>(words_of(ref).size());
      const double gap = std::abs(len - static_cast<double>(cw.size()));
      if (gap < best_gap || (gap == best_gap && len < best_len)) {
        best_gap = gap;
        best_len = len;
      }
    }
    r += best_len;
    for (std::size_t n = 1; n <= 4; ++n) {
      for (const auto& [g, cnt] : grams(cw, n)) {
        double max_ref = 0.0;
        for (const auto& ref : refs[i]) {
          const auto rg = grams(words_of(ref), n);
          if (rg.count(g)) max_ref = std::max(max_ref, rg.at(g));
        }
        match[n - 1] += std::min(cnt, max_ref);
        total[n - 1] += cnt;
      }
    }
  }
  double logp = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (match[n] == 0.0) return 0.0;
    logp += 0.25 * std::log(match[n] / total[n]);
  }
  return (c < r ? std::exp(1.0 - r / c) : 1.0) * std::exp(logp);
}

struct MetricCase {
  std::vector<std::string> candidates;
  Corpus references;
};

/// Small corpus over a five-word vocabulary so n-gram overlaps are common.
inline MetricCase random_corpus(std::uint64_t seed, std::size_t images = 3, std::size_t refs_per_image = 2) {
  static const char* const kWords[] = {"red", "small", "circle", "on", "left"};
  Rng rng(seed);
  auto sentence = [&] {
    const std::size_t len = 2 + rng.below(6);
    std::string s;
    for (std::size_t k = 0; k < len; ++k) s += (k ? " " : "") + std::string(kWords[rng.below(5)]);
    return s;
  };
  MetricCase mc;
  for (std::size_t i = 0; i < images; ++i) {
    std::vector<std::string> refs;
    for (std::size_t k = 0; k < refs_per_image; ++k) refs.push_back(sentence());
    mc.references.push_back(refs);
    mc.candidates.push_back(rng.below(4) == 0 ? refs[0] : sentence());
  }
  return mc;
}

/// A next-token distribution given as an explicit table from prefix to
/// log-probabilities. Token 0 plays the role of BOS and never appears in the
/// table rows; `eos` ends a sequence.
struct ToyDistribution {
  std::size_t vocab = 0;
  TokenId eos = 0;
  std::map<std::vector<TokenId>, std::vector<double>> table;

  std::vector<double> operator()(std::span<const TokenId> prefix) const {
    return table.at(std::vector<TokenId>(prefix.begin() + 1, prefix.end()));
  }
};

inline std::vector<double> normalized_log(std::vector<double> w) {
  double s = 0.0;
  for (double x : w) s += x;
  for (double& x : w) x = std::log(x / s);
  return w;
}

inline void fill_table(ToyDistribution& d, std::size_t max_len,
                       const std::function<std::vector<double>(const std::vector<TokenId>&)>& weights) {
  std::vector<std::vector<TokenId>> frontier{{}};
  for (std::size_t depth = 0; depth < max_len; ++depth) {
    std::vector<std::vector<TokenId>> next;
    for (const auto& p : frontier) {
      d.table[p] = normalized_log(weights(p));
      for (std::size_t t = 0; t < d.vocab; ++t) {
        if (static_cast<TokenId>(t) == d.eos) continue;
        auto q = p;
        q.push_back(static_cast<TokenId>(t));
        next.push_back(q);
      }
    }
    frontier = std::move(next);
  }
}

/// Unstructured random distribution over vocab tokens.
inline ToyDistribution random_toy(std::uint64_t seed, std::size_t vocab, std::size_t max_len) {
  Rng rng(seed);
  ToyDistribution d;
  d.vocab = vocab;
  d.eos = static_cast<TokenId>(rng.below(vocab));
  fill_table(d, max_len, [&](const std::vector<TokenId>&) {
    std::vector<double> w(vocab);
    for (double& x : w) x = 0.05 + rng.uniform();
    return w;
  });
  return d;
}

/// Greedy trap: the most likely first token leads to flat continuations while
/// the runner-up leads to a sharply peaked path, so the best full sequence
/// starts with the runner-up.
inline ToyDistribution trap_toy(std::uint64_t seed, std::size_t vocab, std::size_t max_len) {
  Rng rng(seed);
  ToyDistribution d;
  d.vocab = vocab;
  d.eos = static_cast<TokenId>(vocab - 1);
  std::vector<TokenId> ids;
  for (std::size_t t = 0; t + 1 < vocab; ++t) ids.push_back(static_cast<TokenId>(t));
  rng.shuffle(std::span<TokenId>(ids));
  const TokenId lure = ids[0], good = ids[1];
  const double p_lure = 0.40 + 0.08 * rng.uniform();
  const double p_good = 0.30 + 0.05 * rng.uniform();
  std::vector<TokenId> peak_path;
  for (std::size_t k = 1; k < max_len; ++k) peak_path.push_back(static_cast<TokenId>(rng.below(vocab)));
  fill_table(d, max_len, [&](const std::vector<TokenId>& p) {
    std::vector<double> w(vocab, 0.0);
    if (p.empty()) {
      const double rest = (1.0 - p_lure - p_good) / static_cast<double>(vocab - 2);
      for (std::size_t t = 0; t < vocab; ++t) w[t] = rest * (0.9 + 0.2 * rng.uniform());
      w[lure] = p_lure;
      w[good] = p_good;
      return w;
    }
    const bool on_peak = p.front() == good &&
                         std::equal(p.begin() + 1, p.end(), peak_path.begin());
    for (std::size_t t = 0; t < vocab; ++t) w[t] = 0.9 + 0.2 * rng.uniform();
    if (on_peak) w[peak_path[p.size() - 1]] = 40.0 * static_cast<double>(vocab);
    return w;
  });
  return d;
}

struct Best {
  std::vector<TokenId> tokens;
  double log_prob = -1e300;
};

/// Exhaustive enumeration of every complete sequence (ends in EOS or reaches
/// max_len), keeping the highest log-probability and the smallest token
/// sequence among exact ties.
inline Best exhaustive_best(const ToyDistribution& d, std::size_t max_len) {
  Best best;
  std::function<void(std::vector<TokenId>&, double)> walk = [&](std::vector<TokenId>& seq, double lp) {
    const bool done = (!seq.empty() && seq.back() == d.eos) || seq.size() == max_len;
    if (done) {
      if (lp > best.log_prob || (lp == best.log_prob && seq < best.tokens)) best = {seq, lp};
      return;
    }
    std::vector<TokenId> prefix{0};
    prefix.insert(prefix.end(), seq.begin(), seq.end());
    const auto row = d(prefix);
    for (std::size_t t = 0; t < d.vocab; ++t) {
      seq.push_back(static_cast<TokenId>(t));
      walk(seq, lp + row[t]);
      seq.pop_back();
    }
  };
  std::vector<TokenId> seq;
  walk(seq, 0.0);
  return best;
}

/// Summed log-probability of a sequence under the table.
inline double sequence_log_prob(const ToyDistribution& d, const std::vector<TokenId>& seq) {
  double lp = 0.0;
  std::vector<TokenId> prefix{0};
  for (TokenId t : seq) {
    lp += d(prefix)[static_cast<std::size_t>(t)];
    prefix.push_back(t);
  }
  return lp;
}

}  // namespace vcgpt::oracle
