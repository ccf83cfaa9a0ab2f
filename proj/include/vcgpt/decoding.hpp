#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "vcgpt/error.hpp"
#include "vcgpt/model.hpp"
#include "vcgpt/ops.hpp"
#include "vcgpt/rng.hpp"

namespace vcgpt {

/// Generated tokens (BOS excluded, EOS included when emitted) and the summed
/// log-probability of those tokens.
struct Hypothesis {
  std::vector<TokenId> tokens;
  double log_prob = 0.0;
  bool finished = false;
};

struct BeamResult {
  std::vector<TokenId> tokens;
  double log_prob = 0.0;  // raw sum
  double score = 0.0;     // log_prob / length^alpha
};

inline std::vector<double> log_softmax(std::span<const double> logits) {
  return detail::log_softmax_rows(logits, 1, logits.size());
}

inline double length_normalized(double log_prob, std::size_t length, double alpha) {
  if (alpha == 0.0 || length == 0) return log_prob;
  return log_prob / std::pow(static_cast<double>(length), alpha);
}

/// Greedy decoding over any next-token log-probability source.
/// `next(prefix)` receives BOS + generated tokens and returns log-probs over
/// the vocabulary. Ties go to the lowest id.
template <typename NextLogProbs>
Hypothesis greedy_search(NextLogProbs&& next, TokenId bos, TokenId eos, std::size_t max_len) {
  Hypothesis h;
  std::vector<TokenId> prefix{bos};
  while (h.tokens.size() < max_len) {
    const std::vector<double> lp = next(std::span<const TokenId>(prefix));
    std::size_t best = 0;
    for (std::size_t j = 1; j < lp.size(); ++j)
      if (lp[j] > lp[best]) best = j;
    const auto tok = static_cast<TokenId>(best);
    h.tokens.push_back(tok);
    h.log_prob += lp[best];
    prefix.push_back(tok);
    if (tok == eos) {
      h.finished = true;
      break;
    }
  }
  return h;
}

/// Beam search. Alive hypotheses are ranked by accumulated log-prob; finished
/// ones compete under log_prob / length^alpha. Ties resolve by token sequence,
/// lexicographically smallest first.
template <typename NextLogProbs>
BeamResult beam_search(NextLogProbs&& next, TokenId bos, TokenId eos, std::size_t beam_size,
                       std::size_t max_len, double alpha = 0.0) {
  if (beam_size == 0) throw ContractError("beam_size must be at least 1");
  auto better = [](const Hypothesis& a, const Hypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.tokens < b.tokens;
  };
  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < max_len && !alive.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    for (const auto& h : alive) {
      std::vector<TokenId> prefix{bos};
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      const std::vector<double> lp = next(std::span<const TokenId>(prefix));
      for (std::size_t j = 0; j < lp.size(); ++j) {
        if (lp[j] == -std::numeric_limits<double>::infinity()) continue;
        Hypothesis c = h;
        c.tokens.push_back(static_cast<TokenId>(j));
        c.log_prob += lp[j];
        c.finished = static_cast<TokenId>(j) == eos;
        candidates.push_back(std::move(c));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    // The top beam_size candidates take the slots; finished ones leave the beam.
    alive.clear();
    std::size_t taken = 0;
    for (auto& c : candidates) {
      if (taken++ == beam_size) break;
      (c.finished ? finished : alive).push_back(std::move(c));
    }
  }
  for (auto& h : alive) finished.push_back(std::move(h));
  if (finished.empty()) throw ContractError("beam search produced no hypothesis");
  auto final_better = [alpha](const Hypothesis& a, const Hypothesis& b) {
    const double sa = length_normalized(a.log_prob, a.tokens.size(), alpha);
    const double sb = length_normalized(b.log_prob, b.tokens.size(), alpha);
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;
  };
  const auto best = std::min_element(finished.begin(), finished.end(), final_better);
  return {best->tokens, best->log_prob, length_normalized(best->log_prob, best->tokens.size(), alpha)};
}

/// Next-token log-probs from a caption model over a fixed visual context.
class ModelScorer {
 public:
  ModelScorer(const CaptionModel& model, const Tensor& v_info)
      : model_(model), ctx_(prepare_visual_context(model, v_info)) {}

  std::vector<double> operator()(std::span<const TokenId> prefix) const {
    NoGradScope no_grad;
    TextForward f = forward_text(model_, ctx_.v_info, prefix, {}, &ctx_, false);
    return log_softmax(last_row(f.logits).data());
  }

 private:
  const CaptionModel& model_;
  VisualContext ctx_;
};

/// Longest generation that still fits the decoder's position table.
inline std::size_t generation_limit(const CaptionModel& model, std::size_t max_len) {
  return std::min(max_len, model.config().max_text_len - 1);
}

inline std::vector<TokenId> greedy_decode(const CaptionModel& model, const Tensor& v_info, std::size_t max_len) {
  if (max_len > model.config().max_text_len) {
    throw ContractError("max_len " + std::to_string(max_len) + " exceeds max_text_len " +
                        std::to_string(model.config().max_text_len));
  }
  ModelScorer scorer(model, v_info);
  return greedy_search(scorer, Vocabulary::kBos, Vocabulary::kEos, generation_limit(model, max_len)).tokens;
}

inline BeamResult beam_decode(const CaptionModel& model, const Tensor& v_info, std::size_t beam_size,
                              std::size_t max_len, double length_norm_alpha = 0.0) {
  if (beam_size == 0) throw ContractError("beam_size must be at least 1");
  ModelScorer scorer(model, v_info);
  return beam_search(scorer, Vocabulary::kBos, Vocabulary::kEos, beam_size, generation_limit(model, max_len),
                     length_norm_alpha);
}

struct SampledSequence {
  std::vector<TokenId> tokens;
  std::vector<double> log_probs;  // one per generated token
};

/// Multinomial sampling from softmax(logits) at every step.
template <typename NextLogProbs>
SampledSequence sample_search(NextLogProbs&& next, TokenId bos, TokenId eos, std::size_t max_len, Rng& rng) {
  SampledSequence s;
  std::vector<TokenId> prefix{bos};
  while (s.tokens.size() < max_len) {
    const std::vector<double> lp = next(std::span<const TokenId>(prefix));
    std::vector<double> probs(lp.size());
    for (std::size_t j = 0; j < lp.size(); ++j) probs[j] = std::exp(lp[j]);
    const auto tok = static_cast<TokenId>(rng.categorical(probs));
    s.tokens.push_back(tok);
    s.log_probs.push_back(lp[static_cast<std::size_t>(tok)]);
    prefix.push_back(tok);
    if (tok == eos) break;
  }
  return s;
}

inline SampledSequence sample_decode(const CaptionModel& model, const Tensor& v_info, std::size_t max_len,
                                     Rng& rng) {
  ModelScorer scorer(model, v_info);
  return sample_search(scorer, Vocabulary::kBos, Vocabulary::kEos, generation_limit(model, max_len), rng);
}

}  // namespace vcgpt
