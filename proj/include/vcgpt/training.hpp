#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vcgpt/decoding.hpp"
#include "vcgpt/error.hpp"
#include "vcgpt/metrics.hpp"
#include "vcgpt/model.hpp"
#include "vcgpt/synth_data.hpp"
#include "vcgpt/tokenizer.hpp"

namespace vcgpt {

enum class Phase { pretrain, finetune, scst };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::finetune: return "finetune";
    case Phase::scst: return "scst";
  }
  return "?";
}

inline Phase parse_phase(const std::string& name) {
  if (name == "pretrain") return Phase::pretrain;
  if (name == "finetune") return Phase::finetune;
  if (name == "scst") return Phase::scst;
  throw ConfigError("unknown phase '" + name + "' (expected pretrain, finetune or scst)");
}

struct TrainConfig {
  Phase phase = Phase::pretrain;
  std::size_t epochs = 5;
  std::size_t batch_size = 8;  // images per optimizer step
  double lr_encoder = 1e-3;
  double lr_decoder = 1e-3;
  double lr_fusion = 1e-3;
  std::array<bool, 3> frozen{true, false, false};  // indexed by ParamGroup
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  std::uint64_t seed = 0;
  std::size_t max_decode_len = 20;
  std::size_t scst_samples = 1;  // sampled rollouts per image
  bool record_time = false;       // fill TrainReport seconds with wall time

  bool is_frozen(ParamGroup g) const { return frozen[static_cast<std::size_t>(g)]; }
  double lr_for(ParamGroup g) const {
    switch (g) {
      case ParamGroup::encoder: return lr_encoder;
      case ParamGroup::decoder: return lr_decoder;
      case ParamGroup::fusion: return lr_fusion;
    }
    return 0.0;
  }

  void validate() const {
    if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
      throw ConfigError("warmup fraction must lie in [0, 1]");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (scst_samples == 0) throw ConfigError("scst_samples must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("adam betas must lie in [0, 1)");
  }
};

/// Defaults per phase: pretraining freezes the visual encoder, fine-tuning and
/// SCST update everything.
inline TrainConfig phase_defaults(Phase phase) {
  TrainConfig c;
  c.phase = phase;
  switch (phase) {
    case Phase::pretrain:
      c.epochs = 5;
      c.frozen = {true, false, false};
      break;
    case Phase::finetune:
      c.epochs = 20;
      c.frozen = {false, false, false};
      break;
    case Phase::scst:
      c.epochs = 30;
      c.frozen = {false, false, false};
      c.lr_encoder = c.lr_decoder = c.lr_fusion = 5e-5;
      c.warmup_fraction = 0.0;
      break;
  }
  return c;
}

/// Linear warmup from 0 to base_lr over the first warmup_fraction of steps,
/// then linear decay to 0 at total_steps.
inline double lr_at(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction) {
  if (step > total_steps) throw ContractError("lr_at: step beyond total_steps");
  const double s = static_cast<double>(step), total = static_cast<double>(total_steps);
  const double warm = warmup_fraction * total;
  if (s < warm) return base_lr * s / warm;
  if (total <= warm) return base_lr;
  return base_lr * (total - s) / (total - warm);
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_cider = std::numeric_limits<double>::quiet_NaN();
  double val_bleu4 = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
  std::optional<double> mean_reward;  // SCST only
};

struct TrainReport {
  std::vector<EpochStats> epochs;

  std::string to_csv() const {
    const bool rewards = !epochs.empty() && epochs.front().mean_reward.has_value();
    std::ostringstream os;
    os << "epoch,train_loss,val_loss,val_cider,val_bleu4,seconds" << (rewards ? ",mean_reward" : "") << '\n';
    os << std::setprecision(17);
    for (const auto& e : epochs) {
      os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_cider << ',' << e.val_bleu4
         << ',' << e.seconds;
      if (rewards) os << ',' << e.mean_reward.value_or(0.0);
      os << '\n';
    }
    return os.str();
  }
};

// Decoupled weight decay Adam. Decay applies to matrices only.
class AdamW {
 public:
  AdamW(const CaptionModel& model, const TrainConfig& config) : config_(config) {
    for (const auto& p : model.parameters()) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  std::size_t steps() const { return t_; }

  /// One update with per-group base learning rates scaled by `lr_scale`.
  /// Frozen groups are skipped entirely.
  void step(CaptionModel& model, double lr_scale) {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (config_.is_frozen(p.group) || !p.tensor.has_grad()) continue;
      const double lr = config_.lr_for(p.group) * lr_scale;
      const double wd = p.tensor.rank() == 2 ? config_.weight_decay : 0.0;
      auto w = p.tensor.data();
      auto g = p.tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
        v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        w[k] -= lr * (mhat / (std::sqrt(vhat) + config_.adam_eps) + wd * w[k]);
      }
    }
  }

 private:
  TrainConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Scales trainable gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(CaptionModel& model, const TrainConfig& config) {
  double sq = 0.0;
  for (auto& p : model.parameters()) {
    if (config.is_frozen(p.group) || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (config.grad_clip > 0.0 && norm > config.grad_clip) {
    const double f = config.grad_clip / norm;
    for (auto& p : model.parameters()) {
      if (config.is_frozen(p.group) || !p.tensor.has_grad()) continue;
      for (double& g : p.tensor.grad()) g *= f;
    }
  }
  return norm;
}

/// Marks trainable groups as requiring gradients for the lifetime of the
/// guard; everything goes back to untracked afterwards.
class TrainableScope {
 public:
  TrainableScope(CaptionModel& model, const TrainConfig& config) : model_(model) {
    for (auto& p : model_.parameters()) p.tensor.set_requires_grad(!config.is_frozen(p.group));
  }
  ~TrainableScope() {
    for (auto& p : model_.parameters()) p.tensor.set_requires_grad(false);
  }
  TrainableScope(const TrainableScope&) = delete;
  TrainableScope& operator=(const TrainableScope&) = delete;

 private:
  CaptionModel& model_;
};

/// Teacher-forcing inputs/targets for one caption.
struct CaptionPair {
  std::vector<TokenId> inputs;   // BOS w1 .. wn
  std::vector<TokenId> targets;  // w1 .. wn EOS
};

inline CaptionPair make_pair(const Vocabulary& vocab, const std::string& caption, std::size_t max_text_len) {
  const auto ids = vocab.encode(caption);
  if (ids.size() - 1 > max_text_len) {
    throw DataError("caption '" + caption + "' needs " + std::to_string(ids.size() - 1) +
                    " positions, model holds " + std::to_string(max_text_len));
  }
  return {std::vector<TokenId>(ids.begin(), ids.end() - 1), std::vector<TokenId>(ids.begin() + 1, ids.end())};
}

/// Encoder outputs that never change during a run (frozen encoder, no
/// dropout) are computed once per image.
class VisualCache {
 public:
  VisualCache(const CaptionModel& model, const Dataset& data, bool enabled) {
    if (!enabled) return;
    NoGradScope no_grad;
    for (const auto& s : data.samples) base_.push_back(encode_base(model, s.image));
  }

  Tensor v_info(const CaptionModel& model, std::size_t index, const Tensor& image, const ForwardOptions& opt) const {
    if (base_.empty()) return encode_image(model, image, opt);
    return encode_fusion(model, base_[index], opt);
  }

 private:
  std::vector<Tensor> base_;
};

inline ForwardOptions training_options(const TrainConfig& config, Rng* rng) {
  ForwardOptions o;
  o.rng = rng;
  o.dropout_encoder = !config.is_frozen(ParamGroup::encoder);
  o.dropout_decoder = !config.is_frozen(ParamGroup::decoder);
  o.dropout_fusion = !config.is_frozen(ParamGroup::fusion);
  return o;
}

/// Mean teacher-forced CE over every (image, reference) pair, evaluation mode.
inline double dataset_loss(const CaptionModel& model, const Dataset& data, const Vocabulary& vocab) {
  NoGradScope no_grad;
  double total = 0.0;
  std::size_t pairs = 0;
  for (const auto& s : data.samples) {
    const Tensor v = encode_image(model, s.image);
    const VisualContext ctx = prepare_visual_context(model, v);
    for (const auto& cap : s.captions) {
      const CaptionPair p = make_pair(vocab, cap, model.config().max_text_len);
      total += cross_entropy(forward_text(model, v, p.inputs, {}, &ctx).logits, p.targets, Vocabulary::kPad).item();
      ++pairs;
    }
  }
  return pairs ? total / static_cast<double>(pairs) : std::numeric_limits<double>::quiet_NaN();
}

inline std::vector<std::string> greedy_captions(const CaptionModel& model, const Dataset& data,
                                                const Vocabulary& vocab, std::size_t max_len) {
  std::vector<std::string> out;
  for (const auto& s : data.samples) {
    NoGradScope no_grad;
    const Tensor v = encode_image(model, s.image);
    out.push_back(vocab.decode(greedy_decode(model, v, generation_limit(model, max_len))));
  }
  return out;
}

inline std::vector<std::vector<std::string>> references_of(const Dataset& data) {
  std::vector<std::vector<std::string>> refs;
  for (const auto& s : data.samples) refs.push_back(s.captions);
  return refs;
}

namespace detail {

inline void fill_validation(EpochStats& e, const CaptionModel& model, const Dataset* val, const Vocabulary& vocab,
                            const TrainConfig& config) {
  if (val == nullptr || val->samples.empty()) return;
  e.val_loss = dataset_loss(model, *val, vocab);
  const auto caps = greedy_captions(model, *val, vocab, config.max_decode_len);
  const MetricReport m = evaluate_captions(caps, references_of(*val));
  e.val_cider = m.cider_d;
  e.val_bleu4 = m.bleu4;
}

inline std::size_t steps_per_epoch(std::size_t images, std::size_t batch) { return (images + batch - 1) / batch; }

inline void check_inputs(const CaptionModel& model, const Dataset& data, const Vocabulary& vocab) {
  if (data.samples.empty()) throw DataError("training dataset is empty");
  if (vocab.size() != model.config().vocab_size) {
    throw DataError("vocabulary has " + std::to_string(vocab.size()) + " entries, model expects " +
                    std::to_string(model.config().vocab_size));
  }
  if (data.resolution != model.config().image_size) {
    throw DataError("dataset resolution " + std::to_string(data.resolution) + " differs from model resolution " +
                    std::to_string(model.config().image_size));
  }
}

}  // namespace detail

/// Cross-entropy training (teacher forcing, every reference of every image),
/// AdamW with warmup + linear decay, frozen groups untouched. Updates `model`
/// in place.
inline TrainReport ce_train(CaptionModel& model, const Dataset& train, const Dataset* val, const Vocabulary& vocab,
                            const TrainConfig& config) {
  config.validate();
  detail::check_inputs(model, train, vocab);
  std::vector<std::vector<CaptionPair>> pairs;
  for (const auto& s : train.samples) {
    if (s.captions.empty()) throw DataError("training image " + std::to_string(s.id) + " has no captions");
    auto& row = pairs.emplace_back();
    for (const auto& c : s.captions) row.push_back(make_pair(vocab, c, model.config().max_text_len));
  }

  const std::size_t n = train.samples.size();
  const std::size_t per_epoch = detail::steps_per_epoch(n, config.batch_size);
  const std::size_t total_steps = per_epoch * config.epochs;
  const bool cache_encoder = config.is_frozen(ParamGroup::encoder);
  const VisualCache cache(model, train, cache_encoder);
  AdamW opt(model, config);
  TrainReport report;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng(mix_seed(config.seed, epoch, 1));
    Rng drop_rng(mix_seed(config.seed, epoch, 2));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    order_rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(n, begin + config.batch_size);
      std::size_t batch_pairs = 0;
      for (std::size_t i = begin; i < end; ++i) batch_pairs += pairs[order[i]].size();
      model.zero_grad();
      try {
        TrainableScope trainable(model, config);
        const ForwardOptions fo = training_options(config, &drop_rng);
        for (std::size_t i = begin; i < end; ++i) {
          const std::size_t idx = order[i];
          Tape tape;
          TapeScope scope(tape);
          const Tensor v = cache.v_info(model, idx, train.samples[idx].image, fo);
          Tensor image_loss;
          for (const auto& p : pairs[idx]) {
            Tensor ce = cross_entropy(forward_text(model, v, p.inputs, fo).logits, p.targets, Vocabulary::kPad);
            loss_sum += ce.item();
            ++loss_count;
            image_loss = image_loss.defined() ? add(image_loss, ce) : ce;
          }
          if (image_loss.requires_grad()) tape.backward(scale(image_loss, 1.0 / static_cast<double>(batch_pairs)));
        }
        clip_grad_norm(model, config);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(step) + ": " + e.what());
      }
      opt.step(model, lr_at(step, total_steps, 1.0, config.warmup_fraction));
      ++step;
    }
    model.zero_grad();

    EpochStats e;
    e.epoch = epoch + 1;
    e.train_loss = loss_sum / static_cast<double>(loss_count);
    detail::fill_validation(e, model, val, vocab, config);
    if (config.record_time) {
      e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    report.epochs.push_back(e);
  }
  return report;
}

/// -advantage * sum of log p(sampled tokens), teacher-forced on the sampled
/// sequence. Recorded on the active tape.
inline Tensor scst_sequence_loss(const CaptionModel& model, const Tensor& v_info, std::span<const TokenId> sampled,
                                 double advantage, const ForwardOptions& opt = {}) {
  if (sampled.empty()) throw ContractError("scst: empty sampled sequence");
  std::vector<TokenId> inputs{Vocabulary::kBos};
  inputs.insert(inputs.end(), sampled.begin(), sampled.end() - 1);
  const Tensor lp = token_log_probs(forward_text(model, v_info, inputs, opt).logits, sampled);
  return scale(sum(lp), -advantage);
}

/// Self-critical sequence training: reward = CIDEr-D of a sampled rollout,
/// baseline = CIDEr-D of the greedy decode, IDF fixed over the training
/// references.
inline TrainReport scst_train(CaptionModel& model, const Dataset& train, const Dataset* val, const Vocabulary& vocab,
                              const TrainConfig& config) {
  config.validate();
  detail::check_inputs(model, train, vocab);
  for (const auto& s : train.samples) {
    if (s.captions.empty()) throw DataError("training image " + std::to_string(s.id) + " has no references");
  }
  const CiderD reward(references_of(train));
  const std::size_t n = train.samples.size();
  const std::size_t per_epoch = detail::steps_per_epoch(n, config.batch_size);
  const std::size_t total_steps = per_epoch * config.epochs;
  const std::size_t max_len = generation_limit(model, config.max_decode_len);
  const VisualCache cache(model, train, config.is_frozen(ParamGroup::encoder));
  AdamW opt(model, config);
  TrainReport report;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng order_rng(mix_seed(config.seed, epoch, 11));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    order_rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0, reward_sum = 0.0;
    std::size_t rollouts = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(n, begin + config.batch_size);
      const double norm = 1.0 / static_cast<double>((end - begin) * config.scst_samples);
      model.zero_grad();
      try {
        TrainableScope trainable(model, config);
        for (std::size_t i = begin; i < end; ++i) {
          const std::size_t idx = order[i];
          const auto& sample = train.samples[idx];
          Tape tape;
          TapeScope scope(tape);
          const Tensor v = cache.v_info(model, idx, sample.image, {});
          std::vector<SampledSequence> rollouts_i;
          double baseline = 0.0;
          {
            NoGradScope no_grad;
            const Tensor v_eval = v.clone();
            ModelScorer scorer(model, v_eval);
            baseline = reward.score(
                vocab.decode(greedy_search(scorer, Vocabulary::kBos, Vocabulary::kEos, max_len).tokens),
                sample.captions);
            for (std::size_t k = 0; k < config.scst_samples; ++k) {
              Rng rng(mix_seed(config.seed, mix_seed(epoch, idx), k + 101));
              rollouts_i.push_back(sample_search(scorer, Vocabulary::kBos, Vocabulary::kEos, max_len, rng));
            }
          }
          Tensor image_loss;
          for (const auto& r : rollouts_i) {
            const double rs = reward.score(vocab.decode(r.tokens), sample.captions);
            reward_sum += rs;
            ++rollouts;
            const double adv = rs - baseline;
            if (adv == 0.0) continue;
            Tensor l = scst_sequence_loss(model, v, r.tokens, adv * norm);
            loss_sum += l.item();
            image_loss = image_loss.defined() ? add(image_loss, l) : l;
          }
          if (image_loss.defined() && image_loss.requires_grad()) tape.backward(image_loss);
        }
        clip_grad_norm(model, config);
      } catch (const NumericError& e) {
        throw NumericError("scst epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(step) + ": " +
                           e.what());
      }
      opt.step(model, lr_at(step, total_steps, 1.0, config.warmup_fraction));
      ++step;
    }
    model.zero_grad();

    EpochStats e;
    e.epoch = epoch + 1;
    e.train_loss = loss_sum / static_cast<double>(per_epoch);
    e.mean_reward = reward_sum / static_cast<double>(rollouts);
    detail::fill_validation(e, model, val, vocab, config);
    if (config.record_time) {
      e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    report.epochs.push_back(e);
  }
  return report;
}

}  // namespace vcgpt
