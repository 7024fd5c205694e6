#pragma once

// CSV / JSON report writers. Every row carries the hash of the resolved
// configuration that produced it.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "pball/ablation.hpp"
#include "pball/container.hpp"
#include "pball/eval.hpp"

namespace pball {

/// FNV-1a 64 over the given text.
inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of the canonical (sorted-key, compact) dump of `config`, ignoring
/// fields that do not change results.
inline std::string config_hash(const json& config) {
  json c = config;
  if (c.is_object()) {
    c.erase("out");
    c.erase("workers");
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a64(c.dump()));
  return buf;
}

/// Shortest round-trippable decimal form.
inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : cols_(header.size()) { row(header); }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != cols_) throw ValidationError("csv: row has the wrong number of cells");
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (k) os_ << ',';
      os_ << escape(cells[k]);
    }
    os_ << '\n';
  }

  std::string str() const { return os_.str(); }
  void save(const std::filesystem::path& path) const { write_file(path, str()); }

 private:
  static std::string escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
      if (c == '"') out += '"';
      out += c;
    }
    return out + '"';
  }

  std::size_t cols_;
  std::ostringstream os_;
};

// ---------------------------------------------------------------------------

inline CsvWriter localization_csv(const LocalizationResult& r, const std::string& hash) {
  CsvWriter w({"image_id", "config_hash", "strategy", "alpha", "iou", "hit"});
  for (const auto& rec : r.records) {
    for (std::size_t s = 0; s < r.alphas.size(); ++s) {
      for (std::size_t a = 0; a < r.alphas[s].size(); ++a) {
        w.row({std::to_string(rec.image_id), hash, threshold_kind_name(r.options.strategies[s]), fmt_num(r.alphas[s][a]),
               fmt_num(rec.iou[s][a]), r.hit(rec, s, a) ? "1" : "0"});
      }
    }
  }
  return w;
}

inline json localization_summary(const LocalizationResult& r) {
  json strategies = json::array();
  double mean_of_minima = 0.0;
  for (std::size_t s = 0; s < r.alphas.size(); ++s) {
    const auto b = r.best_for(s);
    json errors = json::array();
    for (std::size_t a = 0; a < r.alphas[s].size(); ++a) errors.push_back(r.error(s, a));
    strategies.push_back({{"strategy", threshold_kind_name(r.options.strategies[s])},
                          {"alphas", r.alphas[s]},
                          {"error", errors},
                          {"min_error", b.error},
                          {"best_alpha", b.alpha}});
    mean_of_minima += b.error;
  }
  if (!r.alphas.empty()) mean_of_minima /= static_cast<double>(r.alphas.size());
  const auto best = r.best();
  return {{"images", r.records.size()},
          {"iou_threshold", r.options.iou_threshold},
          {"strategies", strategies},
          {"best",
           {{"strategy", r.alphas.empty() ? "" : threshold_kind_name(r.options.strategies[best.strategy])},
            {"alpha", best.alpha},
            {"error", best.error}}},
          {"mean", {{"value", mean_of_minima}, {"formula", "arithmetic mean over strategies of the per-strategy minimum error"}}}};
}

inline CsvWriter insdel_csv(const InsDelResult& r, const std::string& hash) {
  CsvWriter w({"image_id", "config_hash", "deletion_auc", "insertion_auc"});
  for (const auto& rec : r.records) {
    w.row({std::to_string(rec.image_id), hash, r.options.deletion ? fmt_num(rec.deletion_auc) : "",
           r.options.insertion ? fmt_num(rec.insertion_auc) : ""});
  }
  return w;
}

inline json insdel_summary(const InsDelResult& r) {
  json j = {{"images", r.records.size()}, {"steps", r.options.steps}, {"sigma_base", r.options.sigma_base}};
  if (r.options.deletion) j["mean_deletion_auc"] = r.mean_deletion();
  if (r.options.insertion) j["mean_insertion_auc"] = r.mean_insertion();
  return j;
}

inline CsvWriter pointing_csv(const PointingResult& r, const std::string& hash) {
  CsvWriter w({"image_id", "config_hash", "class", "y", "x", "hit", "difficult"});
  for (const auto& t : r.trials) {
    w.row({std::to_string(t.image_id), hash, std::to_string(t.cls), std::to_string(t.y), std::to_string(t.x),
           t.hit ? "1" : "0", t.difficult ? "1" : "0"});
  }
  return w;
}

inline json pointing_summary(const PointingResult& r) {
  return {{"trials", r.count()},
          {"difficult_trials", r.count(true)},
          {"skipped", r.skipped},
          {"tolerance_px", r.options.tolerance_px},
          {"resize", r.options.resize == ResizeMode::none ? "none" : "bilinear_1_5x"},
          {"accuracy", r.accuracy()},
          {"difficult_accuracy", r.accuracy(true)}};
}

/// Matrix of one scalar per cell: rows i, columns j, blank below the diagonal.
template <typename F>
inline CsvWriter ablation_matrix_csv(const AblationResult& r, const std::string& hash, F value) {
  std::vector<std::size_t> grid;
  for (const auto& c : r.cells) {
    if (std::find(grid.begin(), grid.end(), c.i) == grid.end()) grid.push_back(c.i);
  }
  std::vector<std::string> header{"i\\j"};
  for (std::size_t j : grid) header.push_back(std::to_string(j));
  header.push_back("config_hash");
  CsvWriter w(header);
  for (std::size_t i : grid) {
    std::vector<std::string> row{std::to_string(i)};
    for (std::size_t j : grid) row.push_back(j < i ? "" : value(r.cell(i, j)));
    row.push_back(hash);
    w.row(row);
  }
  return w;
}

inline CsvWriter ablation_cells_csv(const AblationResult& r, const std::string& hash) {
  CsvWriter w({"i", "j", "config_hash", "sigma", "metric"});
  for (const auto& c : r.cells) {
    for (std::size_t k = 0; k < c.metric.size(); ++k) {
      w.row({std::to_string(c.i), std::to_string(c.j), hash, fmt_num(r.options.sigmas[k]), fmt_num(c.metric[k])});
    }
  }
  return w;
}

inline json ablation_summary(const AblationResult& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"i", c.i},
                     {"j", c.j},
                     {"best", c.best},
                     {"best_sigma", c.best_sigma},
                     {"robust_count", c.robust_count}});
  }
  return {{"game", game_name(r.options.game)},
          {"lower_is_better", lower_is_better(r.options.game)},
          {"sigmas", r.options.sigmas},
          {"robust_bar", r.options.robust_bar},
          {"cells", cells}};
}

inline void write_summary(const std::filesystem::path& path, const json& config, const std::string& hash,
                          const json& aggregates) {
  write_file(path, json{{"config", config}, {"config_hash", hash}, {"aggregates", aggregates}}.dump(2) + "\n");
}

}  // namespace pball
