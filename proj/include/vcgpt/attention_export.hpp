#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vcgpt/error.hpp"
#include "vcgpt/model.hpp"
#include "vcgpt/tokenizer.hpp"

namespace vcgpt {

struct Heatmap {
  TokenId token = 0;
  std::string word;
  std::vector<double> grid;  // side x side, row-major
};

/// Cross-attention of the final fusion layer, one map per generated token,
/// averaged over heads.
struct HeatmapSet {
  std::size_t side = 0;
  std::vector<Heatmap> maps;
};

/// Map k belongs to tokens[k] and is the attention row of the input position
/// that predicted it (BOS for k = 0).
inline HeatmapSet extract_heatmaps(const CaptionModel& model, const Tensor& image, std::span<const TokenId> tokens,
                                   const Vocabulary& vocab) {
  if (tokens.empty()) throw ContractError("extract_heatmaps: no decoded tokens");
  NoGradScope no_grad;
  const Tensor v = encode_image(model, image);
  std::vector<TokenId> inputs{Vocabulary::kBos};
  inputs.insert(inputs.end(), tokens.begin(), tokens.end() - 1);
  const TextForward fw = forward_text(model, v, inputs, {}, nullptr, true);
  if (fw.attention.layers.empty()) throw ContractError("extract_heatmaps: model recorded no cross-attention");
  const Tensor& last = fw.attention.layers.back();
  const std::size_t heads = last.dim(0), t = last.dim(1), s = last.dim(2);

  HeatmapSet set;
  set.side = model.config().grid();
  if (set.side * set.side != s) {
    throw DimensionError("attention covers " + std::to_string(s) + " patches, grid is " + std::to_string(set.side) +
                         "x" + std::to_string(set.side));
  }
  const auto& p = last.data();
  for (std::size_t k = 0; k < t; ++k) {
    Heatmap h;
    h.token = tokens[k];
    h.word = vocab.token(tokens[k]);
    h.grid.assign(s, 0.0);
    for (std::size_t head = 0; head < heads; ++head) {
      const double* row = p.data() + (head * t + k) * s;
      for (std::size_t j = 0; j < s; ++j) h.grid[j] += row[j];
    }
    for (double& x : h.grid) x /= static_cast<double>(heads);
    set.maps.push_back(std::move(h));
  }
  return set;
}

/// Plain PGM, min-max scaled to 0..255; a constant map renders as all zeros.
inline std::string heatmap_pgm(const std::vector<double>& grid, std::size_t side) {
  double lo = grid.front(), hi = grid.front();
  for (double x : grid) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::ostringstream os;
  os << "P2\n" << side << ' ' << side << "\n255\n";
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const double x = grid[r * side + c];
      const long v = hi > lo ? std::lround(255.0 * (x - lo) / (hi - lo)) : 0;
      os << (c ? " " : "") << v;
    }
    os << '\n';
  }
  return os.str();
}

inline std::string heatmap_csv(const std::vector<double>& grid, std::size_t side) {
  std::string out;
  char buf[32];
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", grid[r * side + c]);
      if (c) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline std::vector<double> read_heatmap_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<double> grid;
  std::string line, cell;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    while (std::getline(row, cell, ',')) grid.push_back(std::stod(cell));
  }
  return grid;
}

/// Writes token_NN.pgm / token_NN.csv per map plus index.json.
inline void write_heatmaps(const HeatmapSet& set, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto put = [](const std::filesystem::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write " + file.string());
    out << text;
    if (!out) throw IoError("write failed for " + file.string());
  };
  nlohmann::ordered_json index;
  index["grid"] = set.side;
  index["tokens"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < set.maps.size(); ++k) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "token_%02zu", k);
    const std::string pgm = std::string(stem) + ".pgm", csv = std::string(stem) + ".csv";
    put(dir / pgm, heatmap_pgm(set.maps[k].grid, set.side));
    put(dir / csv, heatmap_csv(set.maps[k].grid, set.side));
    index["tokens"].push_back({{"position", k}, {"token", set.maps[k].word}, {"pgm", pgm}, {"csv", csv}});
  }
  put(dir / "index.json", index.dump(2) + "\n");
}

}  // namespace vcgpt
