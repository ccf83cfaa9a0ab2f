#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcgpt/error.hpp"
#include "vcgpt/model.hpp"

namespace vcgpt {

// A checkpoint is a directory holding manifest.json (config, variant and the
// tensor directory: name, shape, byte offset) and weights.bin, every tensor's
// values as little-endian float64 in manifest order.

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kWeightsFile = "weights.bin";

inline void save_checkpoint(const CaptionModel& model, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<char> blob;
  for (const auto& p : model.parameters()) {
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", blob.size()}});
    for (double v : p.tensor.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  nlohmann::json manifest = {{"format", "vcgpt-checkpoint-1"},
                             {"dtype", "float64-le"},
                             {"variant", variant_name(model.variant())},
                             {"config", model.config()},
                             {"tensors", tensors}};
  {
    std::ofstream out(dir / kManifestFile, std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / kManifestFile).string());
    out << manifest.dump(2) << '\n';
  }
  std::ofstream out(dir / kWeightsFile, std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / kWeightsFile).string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("failed writing " + (dir / kWeightsFile).string());
}

/// Loads and validates every tensor against the structure implied by the
/// stored config. Mismatches list expected vs found shapes.
inline CaptionModel load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  {
    std::ifstream in(dir / kManifestFile);
    if (!in) throw IoError("cannot read " + (dir / kManifestFile).string());
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError((dir / kManifestFile).string() + ": " + e.what());
    }
  }
  ModelConfig config;
  try {
    config = manifest.at("config").get<ModelConfig>();
    if (manifest.at("variant").get<std::string>() != variant_name(config.variant)) {
      throw DataError("checkpoint variant disagrees with its config");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / kManifestFile).string() + ": " + e.what());
  }
  CaptionModel model = CaptionModel::uninitialized(config);

  std::ifstream in(dir / kWeightsFile, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot read " + (dir / kWeightsFile).string());
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<unsigned char> blob(size);
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(size));

  const auto& entries = manifest.at("tensors");
  auto& params = model.parameters();
  std::string mismatches;
  if (entries.size() != params.size()) {
    mismatches += "expected " + std::to_string(params.size()) + " tensors, found " +
                  std::to_string(entries.size()) + "\n";
  }
  for (std::size_t i = 0; i < std::min(entries.size(), params.size()); ++i) {
    const auto name = entries[i].at("name").get<std::string>();
    const auto shape = entries[i].at("shape").get<Shape>();
    if (name != params[i].name || shape != params[i].tensor.shape()) {
      mismatches += "  " + params[i].name + " " + shape_str(params[i].tensor.shape()) + " expected, found " +
                    name + " " + shape_str(shape) + "\n";
    }
  }
  if (!mismatches.empty()) throw DataError("checkpoint " + dir.string() + " does not match its config:\n" + mismatches);

  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto offset = entries[i].at("offset").get<std::size_t>();
    auto values = params[i].tensor.data();
    if (offset + values.size() * 8 > blob.size()) {
      throw DataError("checkpoint blob too short for tensor " + params[i].name);
    }
    for (std::size_t k = 0; k < values.size(); ++k) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(blob[offset + k * 8 + b]) << (8 * b);
      values[k] = std::bit_cast<double>(bits);
    }
  }
  return model;
}

}  // namespace vcgpt
