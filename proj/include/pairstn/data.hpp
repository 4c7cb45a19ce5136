#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pairstn/rng.hpp"
#include "pairstn/tensor.hpp"

namespace pairstn {

struct ManifestEntry {
  std::string path;
  double score = 0.0;
  int category = -1;  // -1 when the manifest carries no categories
};

struct Manifest {
  std::string root;  // directory image paths resolve against
  std::vector<ManifestEntry> entries;

  bool has_categories() const { return !entries.empty() && entries.front().category >= 0; }
  std::string image_path(std::size_t i) const;
};

// JSON-lines manifest: one {"path": ..., "score": ..., "category": ...} per line.
Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& m, const std::string& path);

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

// Deterministic partition; |train| = round(train_fraction * n).
std::pair<Manifest, Manifest> split(const Manifest& m, const SplitSpec& spec);

// A labeled pair of manifest indices. y = 1 iff left's score is higher,
// 0 iff lower, 0.5 on ties.
struct PairDesc {
  int left = 0;
  int right = 0;
  double y = 0.5;
};

double label_for(double left_score, double right_score);

// Uniformly sampled unordered pairs without replacement (all of them when
// n(n-1)/2 <= max_pairs); order within each pair is randomized with y adjusted.
std::vector<PairDesc> make_pairs(const Manifest& m, long max_pairs, Rng& rng);

// Pair-list file: JSON-lines of {"left", "right", "y"} with image paths.
struct PairFileEntry {
  std::string left, right;
  double y = 0.5;
};
void save_pair_list(const std::string& path, const Manifest& m, const std::vector<PairDesc>& pairs);
std::vector<PairFileEntry> load_pair_list(const std::string& path);

// Random crop keeping `area_fraction` of the area: side factor sqrt(f) per
// dimension, rounded down to even extents, uniform integer offset.
Tensor crop_augment(const Tensor& image, double area_fraction, Rng& rng);

// Uniform bilinear resample to (out_h, out_w).
Tensor resize_bilinear(const Tensor& image, int out_h, int out_w);

enum class Placement { fine, coarse, mix, full };
Placement placement_from_string(const std::string& s);
std::string placement_name(Placement p);

struct SynthConfig {
  int n = 1000;
  int size = 64;
  Placement placement = Placement::fine;
  int distractors = 5;
  int categories = 0;                 // 0 disables category labels
  double category_correlation = 0.0;  // P(category == score quantile bin)
  std::uint64_t seed = 1;
};

struct Rect {
  int x = 0, y = 0, w = 0, h = 0;
};

// What the generator planted in one image; the ground truth the patch-mean
// oracle replays against the saved PNGs.
struct PlacementRecord {
  std::string path;
  double score = 0.0;
  int category = -1;
  Rect signal;  // full marker patch
  Rect inner;   // solid interior whose mean is the score
  std::vector<Rect> distractors;
};

// Writes img_*.png, manifest.jsonl and placements.jsonl into out_dir.
// Scores are quantized to the 8-bit grid so the stored score equals the
// painted interior intensity exactly after the PNG round trip.
Manifest synth_generate(const SynthConfig& config, const std::string& out_dir,
                        std::vector<PlacementRecord>* records = nullptr);

std::vector<PlacementRecord> load_placements(const std::string& path);

}  // namespace pairstn
