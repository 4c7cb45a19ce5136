#include "pairstn/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_set>

#include "json.hpp"
#include "pairstn/error.hpp"
#include "pairstn/image_io.hpp"
#include "pairstn/stn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pairstn {

std::string Manifest::image_path(std::size_t i) const {
  const std::string& p = entries[i].path;
  if (root.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(root) / p).string();
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  Manifest m;
  m.root = fs::path(path).parent_path().string();

  std::unordered_set<std::string> seen;
  std::string line;
  int lineno = 0;
  int with_category = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError("manifest '" + path + "' line " + std::to_string(lineno) +
                            ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("path") || !j.contains("score") ||
        !j["path"].is_string() || !j["score"].is_number())
      throw ValidationError("manifest '" + path + "' line " + std::to_string(lineno) +
                            ": expected {\"path\": string, \"score\": number}");
    ManifestEntry e;
    e.path = j["path"].get<std::string>();
    e.score = j["score"].get<double>();
    if (!std::isfinite(e.score))
      throw ValidationError("manifest '" + path + "' line " + std::to_string(lineno) +
                            ": score is not finite");
    if (j.contains("category")) {
      if (!j["category"].is_number_integer() || j["category"].get<int>() < 0)
        throw ValidationError("manifest '" + path + "' line " + std::to_string(lineno) +
                              ": category must be a non-negative integer");
      e.category = j["category"].get<int>();
      ++with_category;
    }
    if (!seen.insert(e.path).second)
      throw ValidationError("manifest '" + path + "': duplicate path '" + e.path + "'");
    m.entries.push_back(std::move(e));
  }
  if (with_category != 0 && with_category != static_cast<int>(m.entries.size()))
    throw ValidationError("manifest '" + path +
                          "': categories must be present on all entries or none");
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const std::string p = m.image_path(i);
    if (!fs::exists(p)) throw IoError("manifest '" + path + "': missing image file '" + p + "'");
  }
  return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest '" + path + "'");
  for (const auto& e : m.entries) {
    json j;
    j["path"] = e.path;
    j["score"] = e.score;
    if (e.category >= 0) j["category"] = e.category;
    out << j.dump() << "\n";
  }
}

std::pair<Manifest, Manifest> split(const Manifest& m, const SplitSpec& spec) {
  const std::size_t n = m.entries.size();
  if (n < 2) throw ValidationError("split needs at least 2 manifest entries");
  std::vector<int> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
  Rng rng(spec.seed);
  rng.shuffle(idx);
  const auto k = static_cast<std::size_t>(
      std::llround(spec.train_fraction * static_cast<double>(n)));
  std::vector<bool> in_train(n, false);
  for (std::size_t i = 0; i < k; ++i) in_train[static_cast<std::size_t>(idx[i])] = true;

  Manifest train, test;
  train.root = test.root = m.root;
  for (std::size_t i = 0; i < n; ++i)
    (in_train[i] ? train : test).entries.push_back(m.entries[i]);
  return {std::move(train), std::move(test)};
}

double label_for(double left_score, double right_score) {
  if (left_score > right_score) return 1.0;
  if (left_score < right_score) return 0.0;
  return 0.5;
}

std::vector<PairDesc> make_pairs(const Manifest& m, long max_pairs, Rng& rng) {
  const long n = static_cast<long>(m.entries.size());
  if (n < 2) throw ValidationError("make_pairs needs at least 2 manifest entries");
  const long total = n * (n - 1) / 2;

  std::vector<std::pair<int, int>> chosen;
  if (total <= max_pairs) {
    chosen.reserve(static_cast<std::size_t>(total));
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) chosen.emplace_back(i, j);
  } else {
    std::unordered_set<long> used;
    chosen.reserve(static_cast<std::size_t>(max_pairs));
    while (static_cast<long>(chosen.size()) < max_pairs) {
      int a = rng.uniform_int(static_cast<int>(n));
      int b = rng.uniform_int(static_cast<int>(n) - 1);
      if (b >= a) ++b;
      const int i = std::min(a, b), j = std::max(a, b);
      if (used.insert(static_cast<long>(i) * n + j).second) chosen.emplace_back(i, j);
    }
  }

  std::vector<PairDesc> out;
  out.reserve(chosen.size());
  for (auto [i, j] : chosen) {
    PairDesc p;
    const bool swap = rng.uniform() < 0.5;
    p.left = swap ? j : i;
    p.right = swap ? i : j;
    p.y = label_for(m.entries[static_cast<std::size_t>(p.left)].score,
                    m.entries[static_cast<std::size_t>(p.right)].score);
    out.push_back(p);
  }
  return out;
}

void save_pair_list(const std::string& path, const Manifest& m,
                    const std::vector<PairDesc>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write pair list '" + path + "'");
  for (const auto& p : pairs) {
    json j;
    j["left"] = m.entries[static_cast<std::size_t>(p.left)].path;
    j["right"] = m.entries[static_cast<std::size_t>(p.right)].path;
    j["y"] = p.y;
    out << j.dump() << "\n";
  }
}

std::vector<PairFileEntry> load_pair_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pair list '" + path + "'");
  std::vector<PairFileEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError("pair list '" + path + "' line " + std::to_string(lineno) +
                            ": malformed JSON (" + e.what() + ")");
    }
    PairFileEntry e;
    if (!j.contains("left") || !j.contains("right") || !j.contains("y"))
      throw ValidationError("pair list '" + path + "' line " + std::to_string(lineno) +
                            ": expected {\"left\", \"right\", \"y\"}");
    e.left = j["left"].get<std::string>();
    e.right = j["right"].get<std::string>();
    e.y = j["y"].get<double>();
    if (e.y != 0.0 && e.y != 0.5 && e.y != 1.0)
      throw ValidationError("pair list '" + path + "' line " + std::to_string(lineno) +
                            ": y must be 0, 0.5 or 1");
    out.push_back(std::move(e));
  }
  return out;
}

Tensor crop_augment(const Tensor& image, double area_fraction, Rng& rng) {
  if (!(area_fraction > 0.0) || area_fraction > 1.0)
    throw ValidationError("crop_augment: area fraction must be in (0, 1]");
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double side = std::sqrt(area_fraction);
  auto crop_extent = [side](int e) {
    int out = static_cast<int>(std::floor(e * side));
    if (out < e && out % 2 != 0) --out;  // even extents keep pooling stacks happy
    return std::max(out, 2);
  };
  const int ch = crop_extent(h), cw = crop_extent(w);
  const int oy = ch < h ? rng.uniform_int(h - ch + 1) : 0;
  const int ox = cw < w ? rng.uniform_int(w - cw + 1) : 0;

  Tensor out = Tensor::zeros({c, ch, cw});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) out.at(ci, y, x) = image.at(ci, oy + y, ox + x);
  return out;
}

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
  if (image.dim(1) == out_h && image.dim(2) == out_w) return image;
  return bilinear_sample(image, affine_grid(AffineParams{1.0, 0.0, 0.0}, out_h, out_w));
}

Placement placement_from_string(const std::string& s) {
  if (s == "fine") return Placement::fine;
  if (s == "coarse") return Placement::coarse;
  if (s == "mix") return Placement::mix;
  if (s == "full") return Placement::full;
  throw ConfigError("unknown placement '" + s + "' (expected fine|coarse|mix|full)");
}

std::string placement_name(Placement p) {
  switch (p) {
    case Placement::fine: return "fine";
    case Placement::coarse: return "coarse";
    case Placement::mix: return "mix";
    case Placement::full: return "full";
  }
  return "?";
}

namespace {

void paint_rect(Tensor& img, const Rect& r, double v) {
  for (int y = r.y; y < r.y + r.h; ++y)
    for (int x = r.x; x < r.x + r.w; ++x) img.at(0, y, x) = v;
}

bool overlaps(const Rect& a, const Rect& b, int margin) {
  return a.x < b.x + b.w + margin && b.x < a.x + a.w + margin && a.y < b.y + b.h + margin &&
         b.y < a.y + a.h + margin;
}

json rect_json(const Rect& r) { return json{{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}}; }

Rect rect_from_json(const json& j) {
  return Rect{j.at("x").get<int>(), j.at("y").get<int>(), j.at("w").get<int>(),
              j.at("h").get<int>()};
}

}  // namespace

Manifest synth_generate(const SynthConfig& cfg, const std::string& out_dir,
                        std::vector<PlacementRecord>* records) {
  if (cfg.n < 1) throw ValidationError("synth: n must be positive");
  if (cfg.size < 32 || cfg.size % 4 != 0)
    throw ValidationError("synth: image size must be >= 32 and divisible by 4");
  if (cfg.distractors < 0) throw ValidationError("synth: distractor count must be >= 0");
  if (cfg.categories < 0 || cfg.categories == 1)
    throw ValidationError("synth: categories must be 0 or >= 2");
  if (cfg.categories > (cfg.size - 8) / 6)
    throw ValidationError("synth: too many categories for the badge strip");
  if (cfg.category_correlation < 0.0 || cfg.category_correlation > 1.0)
    throw ValidationError("synth: category correlation must be in [0, 1]");

  fs::create_directories(out_dir);
  Rng rng(cfg.seed);
  Manifest m;
  m.root = out_dir;
  std::vector<PlacementRecord> recs;

  const int size = cfg.size;
  const bool badged = cfg.categories > 0;
  const int top_reserve = badged ? 12 : 2;
  const double score_lo = 0.1, score_hi = 0.9;

  for (int i = 0; i < cfg.n; ++i) {
    // Quantize to the 8-bit grid so the painted interior equals the manifest
    // score exactly after the PNG round trip.
    const double raw = rng.uniform(score_lo, score_hi);
    const double score = std::floor(raw * 255.0 + 0.5) / 255.0;

    Placement pl = cfg.placement;
    if (pl == Placement::mix) pl = (i % 2 == 0) ? Placement::fine : Placement::coarse;

    int side;
    if (pl == Placement::full) {
      side = size;
    } else if (pl == Placement::fine) {
      side = 16 + 2 * rng.uniform_int(3);  // 16, 18, 20 at size 64
      side = side * size / 64;
    } else {
      side = 36 + 2 * rng.uniform_int(5);  // 36 .. 44 at size 64
      side = side * size / 64;
    }

    PlacementRecord rec;
    if (pl == Placement::full) {
      rec.signal = {0, 0, size, size};
    } else {
      const int x_lo = 2, x_hi = size - side - 2;
      const int y_lo = top_reserve, y_hi = size - side - 2;
      if (x_hi < x_lo || y_hi < y_lo)
        throw ValidationError("synth: patch side " + std::to_string(side) +
                              " does not fit image of size " + std::to_string(size));
      rec.signal = {x_lo + rng.uniform_int(x_hi - x_lo + 1), y_lo + rng.uniform_int(y_hi - y_lo + 1),
                    side, side};
    }
    rec.inner = {rec.signal.x + 3, rec.signal.y + 3, rec.signal.w - 6, rec.signal.h - 6};
    rec.score = score;

    if (badged) {
      const int quantile = std::min(
          cfg.categories - 1,
          static_cast<int>(std::floor((score - score_lo) / (score_hi - score_lo) *
                                      cfg.categories)));
      rec.category = rng.uniform() < cfg.category_correlation ? quantile
                                                              : rng.uniform_int(cfg.categories);
    }

    if (pl != Placement::full) {
      for (int d = 0; d < cfg.distractors; ++d) {
        const int dside = (8 + 2 * rng.uniform_int(9)) * size / 64;  // 8 .. 24 at size 64
        for (int attempt = 0; attempt < 200; ++attempt) {
          Rect r{2 + rng.uniform_int(std::max(1, size - dside - 4)),
                 top_reserve + rng.uniform_int(std::max(1, size - dside - top_reserve - 2)), dside,
                 dside};
          if (!overlaps(r, rec.signal, 1)) {
            rec.distractors.push_back(r);
            break;
          }
        }
      }
    }

    Tensor img = Tensor::zeros({1, size, size});
    if (badged) {
      for (int c = 0; c < cfg.categories; ++c)
        paint_rect(img, Rect{4 + 6 * c, 4, 6, 6}, c == rec.category ? 1.0 : 0.05);
    }
    for (const auto& r : rec.distractors) paint_rect(img, r, rng.uniform(score_lo, score_hi));
    // Signal marker: bright outer ring, dark inner ring, interior = score.
    paint_rect(img, rec.signal, 1.0);
    paint_rect(img, Rect{rec.signal.x + 2, rec.signal.y + 2, rec.signal.w - 4, rec.signal.h - 4},
               0.0);
    paint_rect(img, rec.inner, score);

    char name[32];
    std::snprintf(name, sizeof(name), "img_%05d.png", i);
    rec.path = name;
    save_image(img, (fs::path(out_dir) / name).string());

    ManifestEntry e;
    e.path = name;
    e.score = score;
    e.category = rec.category;
    m.entries.push_back(e);
    recs.push_back(std::move(rec));
  }

  save_manifest(m, (fs::path(out_dir) / "manifest.jsonl").string());
  {
    std::ofstream out((fs::path(out_dir) / "placements.jsonl").string(), std::ios::binary);
    for (const auto& r : recs) {
      json j;
      j["path"] = r.path;
      j["score"] = r.score;
      if (r.category >= 0) j["category"] = r.category;
      j["signal"] = rect_json(r.signal);
      j["inner"] = rect_json(r.inner);
      json ds = json::array();
      for (const auto& d : r.distractors) ds.push_back(rect_json(d));
      j["distractors"] = ds;
      out << j.dump() << "\n";
    }
  }
  if (records) *records = std::move(recs);
  return m;
}

std::vector<PlacementRecord> load_placements(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open placements '" + path + "'");
  std::vector<PlacementRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    PlacementRecord r;
    r.path = j.at("path").get<std::string>();
    r.score = j.at("score").get<double>();
    r.category = j.contains("category") ? j["category"].get<int>() : -1;
    r.signal = rect_from_json(j.at("signal"));
    r.inner = rect_from_json(j.at("inner"));
    for (const auto& d : j.at("distractors")) r.distractors.push_back(rect_from_json(d));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pairstn
