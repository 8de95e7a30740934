// On-disk corpus layout:
//   DIR/noisy/NNNNNN.pgm  DIR/clean/NNNNNN.pgm  DIR/manifest
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "selfdenoise/dataset.hpp"
#include "selfdenoise/io.hpp"
#include "selfdenoise/synth.hpp"

namespace selfdenoise {

inline std::string corpus_file_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu.pgm", i);
  return buf;
}

/// Image files directly inside `dir`, sorted by name.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir.string() + ": not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// Writes `corpus` under `dir`. `manifest` gets kind/size/count/snr_db added.
/// Refuses a non-empty `dir` unless `force`.
template <typename T>
void write_corpus(const fs::path& dir, const Corpus<T>& corpus, KeyValues manifest, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw DataError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw DataError(dir.string() + " already exists; pass --force to overwrite");
    fs::remove_all(dir / "noisy");
    fs::remove_all(dir / "clean");
  }
  fs::create_directories(dir / "noisy");
  fs::create_directories(dir / "clean");
  for (std::size_t i = 0; i < corpus.noisy.size(); ++i) {
    write_pgm16(dir / "noisy" / corpus_file_name(i), corpus.noisy.patches[i]);
    write_pgm16(dir / "clean" / corpus_file_name(i), corpus.clean.patches[i]);
  }
  std::ostringstream snr;
  snr.precision(6);
  snr << corpus_snr(corpus);
  manifest["kind"] = corpus.noisy.kind;
  manifest["count"] = std::to_string(corpus.noisy.size());
  manifest["size"] = std::to_string(corpus.noisy.patches.at(0).dim(1));
  manifest["snr_db"] = snr.str();
  manifest["degenerate"] = std::to_string(std::count(corpus.degenerate.begin(), corpus.degenerate.end(), true));
  write_key_values(dir / "manifest", manifest);
}

struct CorpusOnDisk {
  PatchDataset<float> noisy;
  PatchDataset<float> clean;  // empty when the corpus has no clean images
  std::vector<std::string> names;
  KeyValues manifest;
};

inline CorpusOnDisk read_corpus(const fs::path& dir) {
  CorpusOnDisk c;
  if (fs::exists(dir / "manifest")) c.manifest = read_key_values(dir / "manifest");
  c.noisy.kind = c.manifest.contains("kind") ? c.manifest.at("kind") : "user";
  c.clean.kind = c.noisy.kind;
  for (const auto& p : list_images(dir / "noisy")) {
    c.names.push_back(p.filename().string());
    c.noisy.patches.push_back(read_image(p));
  }
  if (c.noisy.empty()) throw DataError((dir / "noisy").string() + ": no images");
  if (fs::is_directory(dir / "clean"))
    for (const auto& n : c.names) {
      if (!fs::exists(dir / "clean" / n)) throw DataError((dir / "clean" / n).string() + ": missing clean image");
      c.clean.patches.push_back(read_image(dir / "clean" / n));
    }
  try {
    c.noisy.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(dir.string() + ": " + e.what());
  }
  return c;
}

}  // namespace selfdenoise
