#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcgpt/attention_export.hpp"
#include "vcgpt/checkpoint.hpp"
#include "vcgpt/decoding.hpp"
#include "vcgpt/error.hpp"
#include "vcgpt/metrics.hpp"
#include "vcgpt/model.hpp"
#include "vcgpt/synth_data.hpp"
#include "vcgpt/tokenizer.hpp"
#include "vcgpt/training.hpp"

namespace vcgpt::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

inline constexpr const char* kVocabFile = "vocab.txt";

namespace detail {

using Settings = std::vector<std::pair<std::string, std::string>>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// key=value lines; blank lines and lines starting with '#' are skipped.
inline Settings read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  Settings out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::string flag_name(const std::string& arg) {
  if (arg.rfind("--", 0) != 0) return {};
  const auto eq = arg.find('=');
  return arg.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
}

/// Expands --config FILE into --key=value arguments placed ahead of the
/// command-line ones; keys given explicitly on the command line win.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::optional<std::string> file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ConfigError("--config needs a file argument");
      file = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!file) return rest;
  std::vector<std::string> given;
  for (const auto& a : rest) given.push_back(flag_name(a));
  const auto command_end = rest.empty() ? rest.begin() : rest.begin() + 1;
  std::vector<std::string> merged(rest.begin(), command_end);
  auto on_command_line = [&](const std::string& key) {
    return std::find(given.begin(), given.end(), key) != given.end();
  };
  for (const auto& [key, value] : read_config_file(*file)) {
    if (value.empty() || on_command_line(key)) continue;
    if ((key == "validate" || key == "no-validate") && (on_command_line("validate") || on_command_line("no-validate")))
      continue;
    merged.push_back("--" + key + "=" + value);
  }
  merged.insert(merged.end(), command_end, rest.end());
  return merged;
}

inline void write_settings(const std::filesystem::path& file, const Settings& settings) {
  std::ostringstream os;
  for (const auto& [k, v] : settings) os << k << '=' << v << '\n';
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out << os.str();
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

inline void write_file(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
  if (!out) throw IoError("write failed for " + file.string());
}

inline std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? std::string(1, sep) : "") + items[i];
  return out;
}

struct ModelFlags {
  std::string variant = "full_se";
  std::size_t d_model = 64, n_heads = 4, encoder_layers = 2, decoder_layers = 2, patch_size = 4;
  std::optional<std::size_t> fusion_layers;
  std::size_t max_text_len = 24, max_patches = 144;
  double dropout = 0.1;
  bool untie_output = false, fuse_output_bias = false;
};

inline void add_model_flags(CLI::App& cmd, ModelFlags& m) {
  cmd.add_option("--variant", m.variant, "vanilla, fusion_no_se or full_se")
      ->check(CLI::IsMember({"vanilla", "fusion_no_se", "full_se"}));
  cmd.add_option("--d-model", m.d_model);
  cmd.add_option("--heads", m.n_heads);
  cmd.add_option("--encoder-layers", m.encoder_layers);
  cmd.add_option("--decoder-layers", m.decoder_layers);
  cmd.add_option("--fusion-layers", m.fusion_layers, "defaults to 2, or 0 for vanilla");
  cmd.add_option("--patch-size", m.patch_size);
  cmd.add_option("--max-text-len", m.max_text_len);
  cmd.add_option("--max-patches", m.max_patches);
  cmd.add_option("--dropout", m.dropout);
  cmd.add_flag("--untie-output", m.untie_output, "independent W_g instead of tied token embeddings");
  cmd.add_flag("--fuse-output-bias", m.fuse_output_bias);
}

inline ModelConfig model_config(const ModelFlags& m, std::size_t vocab_size, std::size_t resolution) {
  ModelConfig c;
  c.variant = parse_variant(m.variant);
  c.d_model = m.d_model;
  c.n_heads = m.n_heads;
  c.encoder_layers = m.encoder_layers;
  c.decoder_layers = m.decoder_layers;
  c.fusion_layers = m.fusion_layers.value_or(c.variant == Variant::vanilla ? 0 : 2);
  c.patch_size = m.patch_size;
  c.image_size = resolution;
  c.vocab_size = vocab_size;
  c.max_text_len = m.max_text_len;
  c.max_patches = m.max_patches;
  c.dropout = m.dropout;
  c.tie_output_embedding = !m.untie_output;
  c.fuse_output_bias = m.fuse_output_bias;
  c.validate();
  return c;
}

/// Explicit model flags must agree with a loaded checkpoint.
inline void check_against_checkpoint(const CLI::App& cmd, const ModelFlags& m, const ModelConfig& c) {
  std::vector<std::string> diffs;
  auto cmp = [&](const char* flag, const std::string& requested, const std::string& stored) {
    if (cmd.count(flag) > 0 && requested != stored) {
      diffs.push_back(std::string(flag + 2) + ": checkpoint has " + stored + ", requested " + requested);
    }
  };
  cmp("--variant", m.variant, variant_name(c.variant));
  cmp("--d-model", std::to_string(m.d_model), std::to_string(c.d_model));
  cmp("--heads", std::to_string(m.n_heads), std::to_string(c.n_heads));
  cmp("--encoder-layers", std::to_string(m.encoder_layers), std::to_string(c.encoder_layers));
  cmp("--decoder-layers", std::to_string(m.decoder_layers), std::to_string(c.decoder_layers));
  cmp("--fusion-layers", std::to_string(m.fusion_layers.value_or(0)), std::to_string(c.fusion_layers));
  cmp("--patch-size", std::to_string(m.patch_size), std::to_string(c.patch_size));
  cmp("--max-text-len", std::to_string(m.max_text_len), std::to_string(c.max_text_len));
  cmp("--max-patches", std::to_string(m.max_patches), std::to_string(c.max_patches));
  if (!diffs.empty()) throw DataError("model flags disagree with the input checkpoint: " + join(diffs, ';'));
}

inline void match_resolution(CaptionModel& model, std::size_t resolution) {
  if (model.config().image_size != resolution) interpolate_pos_embeddings(model, resolution);
}

inline Settings model_settings(const ModelConfig& c) {
  return {{"variant", variant_name(c.variant)},
          {"d-model", std::to_string(c.d_model)},
          {"heads", std::to_string(c.n_heads)},
          {"encoder-layers", std::to_string(c.encoder_layers)},
          {"decoder-layers", std::to_string(c.decoder_layers)},
          {"fusion-layers", std::to_string(c.fusion_layers)},
          {"patch-size", std::to_string(c.patch_size)},
          {"max-text-len", std::to_string(c.max_text_len)},
          {"max-patches", std::to_string(c.max_patches)},
          {"dropout", fmt(c.dropout)},
          {"untie-output", c.tie_output_embedding ? "false" : "true"},
          {"fuse-output-bias", c.fuse_output_bias ? "true" : "false"}};
}

inline std::vector<std::string> decode_split(const CaptionModel& model, const Dataset& data, const Vocabulary& vocab,
                                             std::size_t beam, double alpha, std::size_t max_len) {
  std::vector<std::string> out;
  for (const auto& s : data.samples) {
    NoGradScope no_grad;
    const Tensor v = encode_image(model, s.image);
    out.push_back(vocab.decode(beam_decode(model, v, beam, max_len, alpha).tokens));
  }
  return out;
}

}  // namespace detail

struct DatagenArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t train = 500, val = 100, test = 100, resolution = 32;
};

inline void cmd_datagen(const DatagenArgs& a, std::ostream& out) {
  make_dataset(a.out, a.seed, {a.train, a.val, a.test}, a.resolution);
  detail::write_settings(std::filesystem::path(a.out) / "datagen.cfg",
                         {{"out", a.out},
                          {"seed", std::to_string(a.seed)},
                          {"train", std::to_string(a.train)},
                          {"val", std::to_string(a.val)},
                          {"test", std::to_string(a.test)},
                          {"resolution", std::to_string(a.resolution)}});
  out << "wrote " << a.train + a.val + a.test << " records (train " << a.train << ", val " << a.val << ", test "
      << a.test << ") seed " << a.seed << " resolution " << a.resolution << " to " << a.out << '\n';
}

struct TrainArgs {
  std::string data, checkpoint_in, checkpoint_out, report, phase = "pretrain";
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs, resolution, batch_size, max_decode_len, scst_samples;
  std::optional<double> lr, lr_encoder, lr_decoder, lr_fusion, warmup, weight_decay, grad_clip;
  std::optional<std::vector<std::string>> freeze;
  bool validate = true, record_time = false;
  detail::ModelFlags model;
};

inline void cmd_train(const TrainArgs& a, const CLI::App& cmd, std::ostream& out) {
  const Phase phase = parse_phase(a.phase);
  TrainConfig tc = phase_defaults(phase);
  tc.seed = a.seed;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.lr) tc.lr_encoder = tc.lr_decoder = tc.lr_fusion = *a.lr;
  if (a.lr_encoder) tc.lr_encoder = *a.lr_encoder;
  if (a.lr_decoder) tc.lr_decoder = *a.lr_decoder;
  if (a.lr_fusion) tc.lr_fusion = *a.lr_fusion;
  if (a.warmup) tc.warmup_fraction = *a.warmup;
  if (a.weight_decay) tc.weight_decay = *a.weight_decay;
  if (a.grad_clip) tc.grad_clip = *a.grad_clip;
  if (a.max_decode_len) tc.max_decode_len = *a.max_decode_len;
  if (a.scst_samples) tc.scst_samples = *a.scst_samples;
  tc.record_time = a.record_time;
  if (a.freeze) {
    tc.frozen = {false, false, false};
    for (const auto& g : *a.freeze) {
      if (g == "none") continue;
      tc.frozen[static_cast<std::size_t>(parse_group(g))] = true;
    }
  }
  tc.validate();
  if (phase != Phase::pretrain && a.checkpoint_in.empty()) {
    throw ConfigError(std::string(phase_name(phase)) + " needs --checkpoint-in");
  }

  std::optional<CaptionModel> model;
  Vocabulary vocab;
  std::size_t resolution = 0;
  if (!a.checkpoint_in.empty()) {
    model.emplace(load_checkpoint(a.checkpoint_in));
    detail::check_against_checkpoint(cmd, a.model, model->config());
    vocab = Vocabulary::load(std::filesystem::path(a.checkpoint_in) / kVocabFile);
    if (vocab.size() != model->config().vocab_size) {
      throw DataError("vocabulary in " + a.checkpoint_in + " has " + std::to_string(vocab.size()) +
                      " entries, checkpoint expects " + std::to_string(model->config().vocab_size));
    }
    resolution = a.resolution.value_or(phase == Phase::finetune ? 48 : model->config().image_size);
    detail::match_resolution(*model, resolution);
  } else {
    resolution = a.resolution.value_or(phase == Phase::finetune ? 48 : 32);
  }
  const Dataset train = load_split(a.data, "train", resolution);
  std::optional<Dataset> val;
  if (a.validate) val = load_split(a.data, "val", resolution);
  if (!model) {
    vocab = Vocabulary::build(train.all_captions());
    model.emplace(detail::model_config(a.model, vocab.size(), resolution), a.seed);
  }

  const TrainReport report = phase == Phase::scst ? scst_train(*model, train, val ? &*val : nullptr, vocab, tc)
                                                  : ce_train(*model, train, val ? &*val : nullptr, vocab, tc);

  const std::filesystem::path dir = a.checkpoint_out;
  save_checkpoint(*model, dir);
  vocab.save(dir / kVocabFile);
  const std::filesystem::path report_path = a.report.empty() ? dir / "report.csv" : std::filesystem::path(a.report);
  detail::write_file(report_path, report.to_csv());

  std::vector<std::string> frozen;
  for (ParamGroup g : kAllGroups)
    if (tc.is_frozen(g)) frozen.push_back(group_name(g));
  detail::Settings s{{"data", a.data},
                     {"phase", phase_name(phase)},
                     {"seed", std::to_string(tc.seed)},
                     {"checkpoint-in", a.checkpoint_in},
                     {"checkpoint-out", a.checkpoint_out},
                     {"report", report_path.string()},
                     {"resolution", std::to_string(resolution)},
                     {"epochs", std::to_string(tc.epochs)},
                     {"batch-size", std::to_string(tc.batch_size)},
                     {"lr-encoder", detail::fmt(tc.lr_encoder)},
                     {"lr-decoder", detail::fmt(tc.lr_decoder)},
                     {"lr-fusion", detail::fmt(tc.lr_fusion)},
                     {"freeze", frozen.empty() ? "none" : detail::join(frozen, ',')},
                     {"warmup", detail::fmt(tc.warmup_fraction)},
                     {"weight-decay", detail::fmt(tc.weight_decay)},
                     {"grad-clip", detail::fmt(tc.grad_clip)},
                     {"max-decode-len", std::to_string(tc.max_decode_len)},
                     {"scst-samples", std::to_string(tc.scst_samples)},
                     {"validate", a.validate ? "true" : "false"},
                     {"time", a.record_time ? "true" : "false"}};
  if (a.checkpoint_in.empty()) {
    const auto ms = detail::model_settings(model->config());
    s.insert(s.end(), ms.begin(), ms.end());
  }
  detail::write_settings(dir / "train.cfg", s);

  const EpochStats& last = report.epochs.empty() ? EpochStats{} : report.epochs.back();
  out << phase_name(phase) << ' ' << variant_name(model->variant()) << ": " << report.epochs.size()
      << " epochs, final train loss " << detail::fmt(last.train_loss);
  if (val) out << ", val CIDEr-D " << detail::fmt(last.val_cider);
  out << "; checkpoint " << a.checkpoint_out << '\n';
}

struct EvalArgs {
  std::string checkpoint_in, data, split = "test", out;
  std::size_t beam = 5, max_len = 20;
  double alpha = 0.0;
  std::optional<std::size_t> resolution;
  bool self_reference = false;
};

inline void cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (a.out.empty()) throw ConfigError("eval needs --out");
  detail::ensure_dir(a.out);
  const std::filesystem::path dir = a.out;
  std::vector<std::string> candidates;
  std::vector<std::vector<std::string>> references;
  std::vector<std::size_t> ids;
  std::size_t resolution = 0;
  if (a.self_reference) {
    const Dataset data = load_split(a.data, a.split);
    resolution = data.resolution;
    for (const auto& s : data.samples) {
      for (const auto& c : s.captions) {
        ids.push_back(s.id);
        candidates.push_back(c);
        references.push_back({c});
      }
    }
  } else {
    if (a.checkpoint_in.empty()) throw ConfigError("eval needs --checkpoint-in (or --self-reference)");
    CaptionModel model = load_checkpoint(a.checkpoint_in);
    const Vocabulary vocab = Vocabulary::load(std::filesystem::path(a.checkpoint_in) / kVocabFile);
    resolution = a.resolution.value_or(model.config().image_size);
    detail::match_resolution(model, resolution);
    const Dataset data = load_split(a.data, a.split, resolution);
    candidates = detail::decode_split(model, data, vocab, a.beam, a.alpha, a.max_len);
    references = references_of(data);
    for (const auto& s : data.samples) ids.push_back(s.id);
  }
  const MetricReport m = evaluate_captions(candidates, references);

  std::string lines;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    lines += nlohmann::ordered_json{{"id", ids[i]}, {"caption", candidates[i]}}.dump() + "\n";
  }
  detail::write_file(dir / "predictions.jsonl", lines);
  detail::write_file(dir / "metrics.csv", "split,count,cider_d,bleu4\n" + a.split + "," +
                                              std::to_string(candidates.size()) + "," + detail::fmt(m.cider_d) +
                                              "," + detail::fmt(m.bleu4) + "\n");
  detail::write_settings(dir / "eval.cfg", {{"checkpoint-in", a.checkpoint_in},
                                            {"data", a.data},
                                            {"split", a.split},
                                            {"out", a.out},
                                            {"beam", std::to_string(a.beam)},
                                            {"alpha", detail::fmt(a.alpha)},
                                            {"max-len", std::to_string(a.max_len)},
                                            {"resolution", std::to_string(resolution)},
                                            {"self-reference", a.self_reference ? "true" : "false"}});
  out << a.split << ": " << candidates.size() << " captions, CIDEr-D " << detail::fmt(m.cider_d) << ", BLEU@4 "
      << detail::fmt(m.bleu4) << '\n';
}

struct CaptionArgs {
  std::string checkpoint_in, image, export_attention;
  std::size_t beam = 5, max_len = 20;
  double alpha = 0.0;
  std::optional<std::size_t> resolution;
};

inline void cmd_caption(const CaptionArgs& a, std::ostream& out) {
  CaptionModel model = load_checkpoint(a.checkpoint_in);
  const Vocabulary vocab = Vocabulary::load(std::filesystem::path(a.checkpoint_in) / kVocabFile);
  const std::size_t resolution = a.resolution.value_or(model.config().image_size);
  detail::match_resolution(model, resolution);
  const Tensor image = load_image(a.image, resolution);
  BeamResult best;
  {
    NoGradScope no_grad;
    best = beam_decode(model, encode_image(model, image), a.beam, a.max_len, a.alpha);
  }
  out << vocab.decode(best.tokens) << '\n';
  if (!a.export_attention.empty()) {
    write_heatmaps(extract_heatmaps(model, image, best.tokens, vocab), a.export_attention);
    detail::write_settings(std::filesystem::path(a.export_attention) / "caption.cfg",
                           {{"checkpoint-in", a.checkpoint_in},
                            {"image", a.image},
                            {"export-attention", a.export_attention},
                            {"beam", std::to_string(a.beam)},
                            {"alpha", detail::fmt(a.alpha)},
                            {"max-len", std::to_string(a.max_len)},
                            {"resolution", std::to_string(resolution)}});
  }
}

/// Entry point shared by the vcgpt tool and the tests. Returns the exit code.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Image captioning with a self-ensembled vision-language transformer", "vcgpt"};
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "generate the synthetic shapes corpus");
  datagen->add_option("--out", dg.out, "output directory")->required();
  datagen->add_option("--seed", dg.seed);
  datagen->add_option("--train", dg.train);
  datagen->add_option("--val", dg.val);
  datagen->add_option("--test", dg.test);
  datagen->add_option("--resolution", dg.resolution);

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "pretrain, finetune or SCST a captioning model");
  train->add_option("--data", tr.data, "dataset directory")->required();
  train->add_option("--phase", tr.phase)->check(CLI::IsMember({"pretrain", "finetune", "scst"}));
  train->add_option("--seed", tr.seed);
  train->add_option("--epochs", tr.epochs);
  train->add_option("--resolution", tr.resolution, "defaults: 32 pretrain, 48 finetune, checkpoint for scst");
  train->add_option("--batch-size", tr.batch_size);
  train->add_option("--lr", tr.lr, "learning rate for every group");
  train->add_option("--lr-encoder", tr.lr_encoder);
  train->add_option("--lr-decoder", tr.lr_decoder);
  train->add_option("--lr-fusion", tr.lr_fusion);
  train->add_option("--freeze", tr.freeze, "comma list of encoder, decoder, fusion, or none")->delimiter(',');
  train->add_option("--warmup", tr.warmup);
  train->add_option("--weight-decay", tr.weight_decay);
  train->add_option("--grad-clip", tr.grad_clip);
  train->add_option("--max-decode-len", tr.max_decode_len);
  train->add_option("--scst-samples", tr.scst_samples);
  train->add_option("--checkpoint-in", tr.checkpoint_in);
  train->add_option("--checkpoint-out", tr.checkpoint_out)->required();
  train->add_option("--report", tr.report, "CSV report path (default: inside the checkpoint)");
  train->add_flag("--validate,!--no-validate", tr.validate, "score the val split after every epoch");
  train->add_flag("--time", tr.record_time, "record wall time per epoch in the report");
  detail::add_model_flags(*train, tr.model);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "decode a split and score it");
  eval->add_option("--checkpoint-in", ev.checkpoint_in);
  eval->add_option("--data", ev.data)->required();
  eval->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", ev.out)->required();
  eval->add_option("--beam", ev.beam);
  eval->add_option("--alpha", ev.alpha, "length normalization exponent");
  eval->add_option("--max-len", ev.max_len);
  eval->add_option("--resolution", ev.resolution);
  eval->add_flag("--self-reference", ev.self_reference, "score every reference against itself");

  CaptionArgs ca;
  auto* caption = app.add_subcommand("caption", "caption one raw float32 image");
  caption->add_option("--checkpoint-in", ca.checkpoint_in)->required();
  caption->add_option("--image", ca.image)->required();
  caption->add_option("--beam", ca.beam);
  caption->add_option("--alpha", ca.alpha);
  caption->add_option("--max-len", ca.max_len);
  caption->add_option("--resolution", ca.resolution);
  caption->add_option("--export-attention", ca.export_attention, "directory for heatmaps");

  try {
    std::vector<std::string> argv = detail::expand_config(args);
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*datagen) cmd_datagen(dg, out);
    if (*train) cmd_train(tr, *train, out);
    if (*eval) cmd_eval(ev, out);
    if (*caption) cmd_caption(ca, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}

inline int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

}  // namespace vcgpt::cli
