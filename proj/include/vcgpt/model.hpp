#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcgpt/error.hpp"
#include "vcgpt/ops.hpp"
#include "vcgpt/rng.hpp"
#include "vcgpt/tensor.hpp"
#include "vcgpt/tokenizer.hpp"

namespace vcgpt {

// vanilla:      cross-attention inserted into every decoder block, logits = W^G h
// fusion_no_se: extra encoder + cross-attention decoder layers, logits = W^Fuse h^Fuse
// full_se:      as fusion_no_se, logits = W^G h^G + W^Fuse h^Fuse
enum class Variant { vanilla, fusion_no_se, full_se };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::vanilla: return "vanilla";
    case Variant::fusion_no_se: return "fusion_no_se";
    case Variant::full_se: return "full_se";
  }
  return "?";
}

inline Variant parse_variant(const std::string& name) {
  if (name == "vanilla") return Variant::vanilla;
  if (name == "fusion_no_se") return Variant::fusion_no_se;
  if (name == "full_se") return Variant::full_se;
  throw ConfigError("unknown variant '" + name + "' (expected vanilla, fusion_no_se or full_se)");
}

struct ModelConfig {
  Variant variant = Variant::full_se;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t fusion_layers = 2;  // forced to 0 for vanilla
  std::size_t patch_size = 4;
  std::size_t image_size = 32;  // resolution the encoder position table is laid out for
  std::size_t vocab_size = 0;
  std::size_t max_text_len = 24;
  std::size_t max_patches = 144;
  double dropout = 0.1;
  bool tie_output_embedding = true;
  bool fuse_output_bias = false;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t n_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    if (variant == Variant::vanilla && fusion_layers != 0) fail("vanilla variant takes fusion_layers = 0");
    if (variant != Variant::vanilla && fusion_layers == 0) fail("fusion variants need fusion_layers >= 1");
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      fail("image size " + std::to_string(image_size) + " not divisible by patch size " +
           std::to_string(patch_size));
    if (n_patches() > max_patches)
      fail(std::to_string(n_patches()) + " patches exceed max_patches " + std::to_string(max_patches));
    if (vocab_size <= static_cast<std::size_t>(Vocabulary::kFirstWord)) fail("vocab_size too small");
    if (max_text_len < 2) fail("max_text_len must be at least 2");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"variant", variant_name(c.variant)},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"encoder_layers", c.encoder_layers},
                     {"decoder_layers", c.decoder_layers},
                     {"fusion_layers", c.fusion_layers},
                     {"patch_size", c.patch_size},
                     {"image_size", c.image_size},
                     {"vocab_size", c.vocab_size},
                     {"max_text_len", c.max_text_len},
                     {"max_patches", c.max_patches},
                     {"dropout", c.dropout},
                     {"tie_output_embedding", c.tie_output_embedding},
                     {"fuse_output_bias", c.fuse_output_bias}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.variant = parse_variant(j.at("variant").get<std::string>());
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("encoder_layers").get_to(c.encoder_layers);
  j.at("decoder_layers").get_to(c.decoder_layers);
  j.at("fusion_layers").get_to(c.fusion_layers);
  j.at("patch_size").get_to(c.patch_size);
  j.at("image_size").get_to(c.image_size);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_text_len").get_to(c.max_text_len);
  j.at("max_patches").get_to(c.max_patches);
  j.at("dropout").get_to(c.dropout);
  j.at("tie_output_embedding").get_to(c.tie_output_embedding);
  j.at("fuse_output_bias").get_to(c.fuse_output_bias);
}

enum class ParamGroup { encoder, decoder, fusion };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::decoder: return "decoder";
    case ParamGroup::fusion: return "fusion";
  }
  return "?";
}

inline ParamGroup parse_group(const std::string& name) {
  if (name == "encoder") return ParamGroup::encoder;
  if (name == "decoder") return ParamGroup::decoder;
  if (name == "fusion") return ParamGroup::fusion;
  throw ConfigError("unknown parameter group '" + name + "' (expected encoder, decoder or fusion)");
}

inline constexpr std::array<ParamGroup, 3> kAllGroups{ParamGroup::encoder, ParamGroup::decoder,
                                                       ParamGroup::fusion};

struct NamedParameter {
  std::string name;
  ParamGroup group;
  Tensor tensor;
};

struct LayerNormWeights {
  Tensor gain, bias;
};

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct MlpWeights {
  Tensor w_in, b_in, w_out, b_out;
};

struct BlockWeights {
  LayerNormWeights ln_self;
  AttentionWeights self_attn;
  bool has_cross = false;
  LayerNormWeights ln_cross;
  AttentionWeights cross_attn;
  LayerNormWeights ln_mlp;
  MlpWeights mlp;
};

/// Cross-attention weights of one layer: [heads, text_len, n_patches].
struct AttentionRecord {
  std::vector<Tensor> layers;
};

/// Per-run switches for the forward pass. A null rng means evaluation mode
/// (no dropout). Groups marked inactive also run without dropout.
struct ForwardOptions {
  Rng* rng = nullptr;
  bool dropout_encoder = true;
  bool dropout_decoder = true;
  bool dropout_fusion = true;
};

class CaptionModel;
inline void interpolate_pos_embeddings(CaptionModel& model, std::size_t new_resolution);

class CaptionModel {
 public:
  static constexpr double kInitStd = 0.02;

  explicit CaptionModel(ModelConfig config, std::uint64_t seed = 0) : config_(config) {
    config_.validate();
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    build(&rng);
  }

  CaptionModel(const CaptionModel& other) : config_(other.config_) {
    build(nullptr);
    copy_values_from(other);
  }

  CaptionModel& operator=(const CaptionModel& other) {
    if (this != &other) {
      CaptionModel copy(other);
      *this = std::move(copy);
    }
    return *this;
  }

  CaptionModel(CaptionModel&&) noexcept = default;
  CaptionModel& operator=(CaptionModel&&) noexcept = default;

  /// Allocates the structure for `config` with zero-filled weights (used by
  /// checkpoint loading).
  static CaptionModel uninitialized(ModelConfig config) {
    config.validate();
    return CaptionModel(config, NoInit{});
  }

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }

  const NamedParameter& parameter(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    throw IndexError("no parameter named '" + name + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void copy_values_from(const CaptionModel& other) {
    if (other.params_.size() != params_.size()) throw DimensionError("copy_values_from: structure differs");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].tensor.shape() != other.params_[i].tensor.shape()) {
        params_[i].tensor.reset(other.params_[i].tensor.shape(), other.params_[i].tensor.values());
      } else {
        params_[i].tensor.values() = other.params_[i].tensor.values();
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Visual encoder.
  Tensor patch_w, patch_b, enc_pos;
  std::vector<BlockWeights> encoder;
  LayerNormWeights enc_ln;
  // Language decoder. w_g aliases tok_emb when tied.
  Tensor tok_emb, dec_pos, w_g;
  std::vector<BlockWeights> decoder;
  LayerNormWeights dec_ln;
  // Fusion module.
  std::vector<BlockWeights> fusion_encoder;
  LayerNormWeights fusion_enc_ln;
  std::vector<BlockWeights> fusion_decoder;
  LayerNormWeights fusion_dec_ln;
  Tensor w_fuse, b_fuse;

 private:
  friend void interpolate_pos_embeddings(CaptionModel& model, std::size_t new_resolution);

  struct NoInit {};
  CaptionModel(ModelConfig config, NoInit) : config_(config) { build(nullptr); }

  Tensor add(const std::string& name, ParamGroup group, Shape shape, Rng* rng, double fill = 0.0,
             bool random = false) {
    Tensor t(std::move(shape), fill);
    if (random && rng) {
      for (double& v : t.values()) v = rng->normal(0.0, kInitStd);
    }
    params_.push_back({name, group, t});
    return t;
  }

  LayerNormWeights add_ln(const std::string& name, ParamGroup group, Rng* rng) {
    const std::size_t d = config_.d_model;
    return {add(name + ".gain", group, {d}, rng, rng ? 1.0 : 0.0), add(name + ".bias", group, {d}, rng)};
  }

  AttentionWeights add_attn(const std::string& name, ParamGroup group, Rng* rng) {
    const std::size_t d = config_.d_model;
    AttentionWeights a;
    a.wq = add(name + ".wq", group, {d, d}, rng, 0.0, true);
    a.bq = add(name + ".bq", group, {d}, rng);
    a.wk = add(name + ".wk", group, {d, d}, rng, 0.0, true);
    a.bk = add(name + ".bk", group, {d}, rng);
    a.wv = add(name + ".wv", group, {d, d}, rng, 0.0, true);
    a.bv = add(name + ".bv", group, {d}, rng);
    a.wo = add(name + ".wo", group, {d, d}, rng, 0.0, true);
    a.bo = add(name + ".bo", group, {d}, rng);
    return a;
  }

  BlockWeights add_block(const std::string& name, ParamGroup group, bool cross, ParamGroup cross_group,
                         Rng* rng) {
    const std::size_t d = config_.d_model;
    BlockWeights b;
    b.ln_self = add_ln(name + ".ln_self", group, rng);
    b.self_attn = add_attn(name + ".self_attn", group, rng);
    b.has_cross = cross;
    if (cross) {
      b.ln_cross = add_ln(name + ".ln_cross", cross_group, rng);
      b.cross_attn = add_attn(name + ".cross_attn", cross_group, rng);
    }
    b.ln_mlp = add_ln(name + ".ln_mlp", group, rng);
    b.mlp.w_in = add(name + ".mlp.w_in", group, {d, 4 * d}, rng, 0.0, true);
    b.mlp.b_in = add(name + ".mlp.b_in", group, {4 * d}, rng);
    b.mlp.w_out = add(name + ".mlp.w_out", group, {4 * d, d}, rng, 0.0, true);
    b.mlp.b_out = add(name + ".mlp.b_out", group, {d}, rng);
    return b;
  }

  void build(Rng* rng) {
    const auto& c = config_;
    const std::size_t d = c.d_model;
    const bool vanilla = c.variant == Variant::vanilla;
    params_.clear();
    encoder.clear();
    decoder.clear();
    fusion_encoder.clear();
    fusion_decoder.clear();

    patch_w = add("encoder.patch_w", ParamGroup::encoder, {c.patch_dim(), d}, rng, 0.0, true);
    patch_b = add("encoder.patch_b", ParamGroup::encoder, {d}, rng);
    enc_pos = add("encoder.pos", ParamGroup::encoder, {c.n_patches(), d}, rng, 0.0, true);
    for (std::size_t i = 0; i < c.encoder_layers; ++i)
      encoder.push_back(add_block("encoder.block" + std::to_string(i), ParamGroup::encoder, false,
                                  ParamGroup::encoder, rng));
    enc_ln = add_ln("encoder.ln_final", ParamGroup::encoder, rng);

    tok_emb = add("decoder.tok_emb", ParamGroup::decoder, {c.vocab_size, d}, rng, 0.0, true);
    dec_pos = add("decoder.pos", ParamGroup::decoder, {c.max_text_len, d}, rng, 0.0, true);
    for (std::size_t i = 0; i < c.decoder_layers; ++i)
      decoder.push_back(add_block("decoder.block" + std::to_string(i), ParamGroup::decoder, vanilla,
                                  ParamGroup::fusion, rng));
    dec_ln = add_ln("decoder.ln_final", ParamGroup::decoder, rng);
    if (c.tie_output_embedding) {
      w_g = tok_emb;
    } else {
      w_g = add("decoder.w_g", ParamGroup::decoder, {c.vocab_size, d}, rng);
      w_g.values() = tok_emb.values();
    }

    if (!vanilla) {
      for (std::size_t i = 0; i < c.fusion_layers; ++i)
        fusion_encoder.push_back(add_block("fusion.encoder" + std::to_string(i), ParamGroup::fusion,
                                           false, ParamGroup::fusion, rng));
      fusion_enc_ln = add_ln("fusion.encoder_ln", ParamGroup::fusion, rng);
      for (std::size_t i = 0; i < c.fusion_layers; ++i)
        fusion_decoder.push_back(add_block("fusion.decoder" + std::to_string(i), ParamGroup::fusion,
                                           true, ParamGroup::fusion, rng));
      fusion_dec_ln = add_ln("fusion.decoder_ln", ParamGroup::fusion, rng);
      w_fuse = add("fusion.w_fuse", ParamGroup::fusion, {c.vocab_size, d}, rng, 0.0, true);
      if (c.fuse_output_bias) b_fuse = add("fusion.b_fuse", ParamGroup::fusion, {c.vocab_size}, rng);
    } else {
      fusion_enc_ln = {};
      fusion_dec_ln = {};
      w_fuse = Tensor();
      b_fuse = Tensor();
    }
  }

  ModelConfig config_;
  std::vector<NamedParameter> params_;
};

/// Names of the parameters in each group. Disjoint and exhaustive.
inline std::map<ParamGroup, std::vector<std::string>> parameter_groups(const CaptionModel& model) {
  std::map<ParamGroup, std::vector<std::string>> groups;
  for (ParamGroup g : kAllGroups) groups[g];
  for (const auto& p : model.parameters()) groups[p.group].push_back(p.name);
  return groups;
}

// ---------------------------------------------------------------------------
// Forward pass

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

inline Tensor apply_ln(const Tensor& x, const LayerNormWeights& ln) {
  return layer_norm(x, ln.gain, ln.bias, 1e-5);
}

/// Precomputed keys/values of one cross-attention layer over a fixed memory.
struct CrossKV {
  Tensor k, v;
};

namespace detail {

inline Tensor mlp_forward(const MlpWeights& m, const Tensor& x) {
  return linear(gelu(linear(x, m.w_in, m.b_in)), m.w_out, m.b_out);
}

inline Tensor attn_forward(const AttentionWeights& a, const Tensor& x, const Tensor& kv_source,
                           std::size_t heads, bool causal, std::vector<double>* probs,
                           const CrossKV* cached) {
  Tensor q = linear(x, a.wq, a.bq);
  Tensor k = cached ? cached->k : linear(kv_source, a.wk, a.bk);
  Tensor v = cached ? cached->v : linear(kv_source, a.wv, a.bv);
  return linear(attention(q, k, v, heads, causal, probs), a.wo, a.bo);
}

struct BlockRun {
  std::size_t heads;
  bool causal;
  Rng* rng;
  double p_main;   // dropout of self-attention/MLP branches
  double p_cross;  // dropout of the cross-attention branch
};

// Pre-norm residual block.
inline Tensor block_forward(const BlockWeights& b, Tensor x, const Tensor* memory, const CrossKV* cached,
                            const BlockRun& run, std::vector<double>* cross_probs) {
  Tensor h = apply_ln(x, b.ln_self);
  x = add(x, dropout(attn_forward(b.self_attn, h, h, run.heads, run.causal, nullptr, nullptr),
                     run.p_main, run.rng));
  if (b.has_cross) {
    Tensor hc = apply_ln(x, b.ln_cross);
    x = add(x, dropout(attn_forward(b.cross_attn, hc, memory ? *memory : hc, run.heads, false,
                                    cross_probs, cached),
                       run.p_cross, run.rng));
  }
  Tensor hm = apply_ln(x, b.ln_mlp);
  return add(x, dropout(mlp_forward(b.mlp, hm), run.p_main, run.rng));
}

inline double rate(const CaptionModel& m, const ForwardOptions& o, bool active) {
  return (o.rng && active) ? m.config().dropout : 0.0;
}

}  // namespace detail

/// Non-overlapping patch_size^2 patches, each flattened (y, x, channel).
inline Tensor patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw DimensionError("image must be [H,W,3], got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (h != w) throw ConfigError("image must be square, got " + shape_str(image.shape()));
  if (patch_size == 0 || h % patch_size != 0) {
    throw ConfigError("resolution " + std::to_string(h) + " is not divisible by patch size " +
                      std::to_string(patch_size));
  }
  const std::size_t g = h / patch_size, pd = patch_size * patch_size * 3;
  Tensor out(Shape{g * g, pd});
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px) {
      double* dst = out.data().data() + (py * g + px) * pd;
      for (std::size_t y = 0; y < patch_size; ++y)
        for (std::size_t x = 0; x < patch_size; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            *dst++ = image[((py * patch_size + y) * w + px * patch_size + x) * 3 + c];
    }
  return out;
}

/// The single-modal visual encoder (patch embedding, positions, blocks).
inline Tensor encode_base(const CaptionModel& model, const Tensor& image, const ForwardOptions& opt = {}) {
  const auto& c = model.config();
  Tensor patches = patchify(image, c.patch_size);
  if (patches.dim(0) != model.enc_pos.dim(0)) {
    throw ConfigError("image of " + shape_str(image.shape()) + " gives " + std::to_string(patches.dim(0)) +
                      " patches but the encoder position table holds " +
                      std::to_string(model.enc_pos.dim(0)) + "; interpolate position embeddings first");
  }
  const double p = detail::rate(model, opt, opt.dropout_encoder);
  Tensor x = add(linear(patches, model.patch_w, model.patch_b), model.enc_pos);
  x = dropout(x, p, opt.rng);
  const detail::BlockRun run{c.n_heads, false, opt.rng, p, p};
  for (const auto& b : model.encoder) x = detail::block_forward(b, x, nullptr, nullptr, run, nullptr);
  return apply_ln(x, model.enc_ln);
}

/// Extra fusion encoder layers on top of the base encoder output. Identity
/// for the vanilla variant.
inline Tensor encode_fusion(const CaptionModel& model, const Tensor& base, const ForwardOptions& opt = {}) {
  if (model.variant() == Variant::vanilla) return base;
  const double p = detail::rate(model, opt, opt.dropout_fusion);
  const detail::BlockRun run{model.config().n_heads, false, opt.rng, p, p};
  Tensor x = base;
  for (const auto& b : model.fusion_encoder) x = detail::block_forward(b, x, nullptr, nullptr, run, nullptr);
  return apply_ln(x, model.fusion_enc_ln);
}

/// V_info: the visual sequence the text side attends to, [n_patches, d_model].
inline Tensor encode_image(const CaptionModel& model, const Tensor& image, const ForwardOptions& opt = {}) {
  return encode_fusion(model, encode_base(model, image, opt), opt);
}

/// Cross-attention keys/values for every cross-attending layer, computed once
/// per image for inference.
struct VisualContext {
  Tensor v_info;
  std::vector<CrossKV> cross;
};

inline VisualContext prepare_visual_context(const CaptionModel& model, const Tensor& v_info) {
  VisualContext ctx{v_info, {}};
  const auto& blocks = model.variant() == Variant::vanilla ? model.decoder : model.fusion_decoder;
  for (const auto& b : blocks) {
    ctx.cross.push_back({linear(v_info, b.cross_attn.wk, b.cross_attn.bk),
                         linear(v_info, b.cross_attn.wv, b.cross_attn.bv)});
  }
  return ctx;
}

/// Everything one teacher-forced pass produces, all rows [T, ...].
struct TextForward {
  Tensor logits;       // [T, V]
  Tensor g_logits;     // W^G h^G, undefined for fusion_no_se
  Tensor fuse_logits;  // W^Fuse h^Fuse, undefined for vanilla
  Tensor h_g;          // [T, d] decoder output (cross-attention-augmented for vanilla)
  Tensor h_fuse;       // [T, d], undefined for vanilla
  AttentionRecord attention;
};

inline TextForward forward_text(const CaptionModel& model, const Tensor& v_info, std::span<const TokenId> tokens,
                                const ForwardOptions& opt = {}, const VisualContext* ctx = nullptr,
                                bool record_attention = false) {
  const auto& c = model.config();
  if (tokens.empty() || tokens.front() != Vocabulary::kBos) {
    throw ContractError("token prefix must start with BOS");
  }
  if (tokens.size() > c.max_text_len) {
    throw ContractError("token prefix of length " + std::to_string(tokens.size()) + " exceeds max_text_len " +
                        std::to_string(c.max_text_len));
  }
  if (v_info.rank() != 2 || v_info.dim(1) != c.d_model) {
    throw DimensionError("visual memory must be [n, " + std::to_string(c.d_model) + "], got " +
                         shape_str(v_info.shape()));
  }
  const std::size_t t = tokens.size();
  const bool vanilla = c.variant == Variant::vanilla;
  const double p_dec = detail::rate(model, opt, opt.dropout_decoder);
  const double p_fuse = detail::rate(model, opt, opt.dropout_fusion);

  TextForward out;
  std::vector<double> probs;
  std::vector<double>* keep_probs = record_attention ? &probs : nullptr;
  auto push_record = [&]() {
    if (record_attention) {
      out.attention.layers.emplace_back(Shape{c.n_heads, t, v_info.dim(0)}, std::move(probs));
      probs = {};
    }
  };

  Tensor x = add(embedding(model.tok_emb, tokens), slice_rows(model.dec_pos, 0, t));
  x = dropout(x, p_dec, opt.rng);
  const detail::BlockRun dec_run{c.n_heads, true, opt.rng, p_dec, p_fuse};
  for (std::size_t i = 0; i < model.decoder.size(); ++i) {
    const CrossKV* cached = (vanilla && ctx) ? &ctx->cross[i] : nullptr;
    x = detail::block_forward(model.decoder[i], x, &v_info, cached, dec_run,
                              vanilla ? keep_probs : nullptr);
    if (vanilla) push_record();
  }
  out.h_g = apply_ln(x, model.dec_ln);
  if (c.variant != Variant::fusion_no_se) out.g_logits = matmul_nt(out.h_g, model.w_g);
  if (vanilla) {
    out.logits = out.g_logits;
    return out;
  }

  const detail::BlockRun fuse_run{c.n_heads, true, opt.rng, p_fuse, p_fuse};
  Tensor f = out.h_g;
  for (std::size_t i = 0; i < model.fusion_decoder.size(); ++i) {
    const CrossKV* cached = ctx ? &ctx->cross[i] : nullptr;
    f = detail::block_forward(model.fusion_decoder[i], f, &v_info, cached, fuse_run,
                              keep_probs);
    push_record();
  }
  out.h_fuse = apply_ln(f, model.fusion_dec_ln);
  out.fuse_logits = matmul_nt(out.h_fuse, model.w_fuse);
  if (c.fuse_output_bias) out.fuse_logits = add_bias(out.fuse_logits, model.b_fuse);
  out.logits = c.variant == Variant::full_se ? add(out.g_logits, out.fuse_logits) : out.fuse_logits;
  return out;
}

/// Result of one incremental decoding step (last position of the prefix).
struct StepOutput {
  Tensor logits;  // [V]
  Tensor h_g;     // [d]
  Tensor h_fuse;  // [d], undefined for vanilla
  AttentionRecord attention;
};

inline Tensor last_row(const Tensor& x) {
  const std::size_t n = x.dim(1);
  return Tensor(Shape{n}, std::vector<double>(x.data().end() - static_cast<std::ptrdiff_t>(n), x.data().end()));
}

inline StepOutput decode_step(const CaptionModel& model, const Tensor& v_info, std::span<const TokenId> prefix,
                              const VisualContext* ctx = nullptr) {
  NoGradScope no_grad;
  TextForward f = forward_text(model, v_info, prefix, {}, ctx, true);
  StepOutput s;
  s.logits = last_row(f.logits);
  s.h_g = last_row(f.h_g);
  if (f.h_fuse.defined()) s.h_fuse = last_row(f.h_fuse);
  s.attention = std::move(f.attention);
  return s;
}

/// Bilinearly resamples the encoder position grid for a new input
/// resolution (corner-aligned, so the four corners are kept exactly).
inline void interpolate_pos_embeddings(CaptionModel& model, std::size_t new_resolution) {
  ModelConfig cfg = model.config_;
  if (new_resolution == 0 || new_resolution % cfg.patch_size != 0) {
    throw ConfigError("resolution " + std::to_string(new_resolution) + " is not divisible by patch size " +
                      std::to_string(cfg.patch_size));
  }
  const std::size_t rows = model.enc_pos.dim(0), d = model.enc_pos.dim(1);
  const auto old_g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(rows))));
  if (old_g * old_g != rows) throw DimensionError("encoder position table is not a square grid");
  const std::size_t new_g = new_resolution / cfg.patch_size;
  cfg.image_size = new_resolution;
  cfg.validate();
  if (new_g == old_g) {
    model.config_ = cfg;
    return;
  }
  const auto& src = model.enc_pos.values();
  std::vector<double> dst(new_g * new_g * d);
  auto coord = [&](std::size_t i, std::size_t& lo, std::size_t& hi, double& frac) {
    if (new_g == 1 || old_g == 1) {
      lo = hi = 0;
      frac = 0.0;
      if (new_g == 1 && old_g > 1) {
        // single output cell samples the grid centre
        const double s = 0.5 * static_cast<double>(old_g - 1);
        lo = static_cast<std::size_t>(std::floor(s));
        hi = std::min(lo + 1, old_g - 1);
        frac = s - static_cast<double>(lo);
      }
      return;
    }
    const double s = static_cast<double>(i * (old_g - 1)) / static_cast<double>(new_g - 1);
    lo = std::min(static_cast<std::size_t>(std::floor(s)), old_g - 1);
    hi = std::min(lo + 1, old_g - 1);
    frac = s - static_cast<double>(lo);
  };
  auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + t * (b - a); };
  for (std::size_t y = 0; y < new_g; ++y) {
    std::size_t y0, y1;
    double ty;
    coord(y, y0, y1, ty);
    for (std::size_t x = 0; x < new_g; ++x) {
      std::size_t x0, x1;
      double tx;
      coord(x, x0, x1, tx);
      for (std::size_t j = 0; j < d; ++j) {
        const double top = lerp(src[(y0 * old_g + x0) * d + j], src[(y0 * old_g + x1) * d + j], tx);
        const double bot = lerp(src[(y1 * old_g + x0) * d + j], src[(y1 * old_g + x1) * d + j], tx);
        dst[(y * new_g + x) * d + j] = lerp(top, bot, ty);
      }
    }
  }
  model.enc_pos.reset({new_g * new_g, d}, std::move(dst));
  model.config_ = cfg;
}

}  // namespace vcgpt
