#pragma once

// Synthetic shapes dataset with exact ground truth, PPM image I/O, and the
// on-disk dataset layout (manifest.json + samples/NNNN.tns).

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "pball/container.hpp"
#include "pball/error.hpp"
#include "pball/geometry.hpp"
#include "pball/rng.hpp"
#include "pball/tensor.hpp"

namespace pball {

struct Region {
  int class_id = 0;
  BoundingBox box;
  Mask mask;
  friend bool operator==(const Region&, const Region&) = default;
};

struct Sample {
  int id = 0;
  Tensor image;             // [3,H,W] in [0,1]
  int label = 0;            // primary class
  std::vector<int> labels;  // every class present, primary first
  std::vector<Region> regions;
  bool difficult = false;

  int height() const { return static_cast<int>(image.dim(1)); }
  int width() const { return static_cast<int>(image.dim(2)); }

  bool has_class(int c) const { return std::find(labels.begin(), labels.end(), c) != labels.end(); }

  // Union of every region mask of class c.
  Mask class_mask(int c) const {
    Mask m(height(), width());
    for (const auto& r : regions) {
      if (r.class_id != c) continue;
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (r.mask[i]) m.set_flat(i);
      }
    }
    return m;
  }

  friend bool operator==(const Sample&, const Sample&) = default;
};

using Dataset = std::vector<Sample>;

inline constexpr int kMaxShapeClasses = 8;

namespace detail {

// Shape membership in a unit frame: u, v in [-1, 1].
inline bool shape_contains(int cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (cls) {
    case 0: return u * u + v * v <= 1.0;                                    // disk
    case 1: return au <= 0.85 && av <= 0.85;                                // square
    case 2: return v >= -0.9 && v <= 0.9 && au <= (v + 0.9) / 1.8 * 0.95;   // triangle
    case 3: return (au <= 0.33 && av <= 1.0) || (av <= 0.33 && au <= 1.0);  // cross
    case 4: { const double r = u * u + v * v; return r <= 1.0 && r >= 0.3; }  // ring
    case 5: return au + av <= 1.0;                                          // diamond
    case 6: return au <= 1.0 && av <= 0.45;                                 // bar
    default: return au <= 1.0 && av <= 1.0 && (std::abs(u - v) <= 0.45 || std::abs(u + v) <= 0.45);  // x
  }
}

inline constexpr std::array<std::array<double, 3>, kMaxShapeClasses> kPrimary = {{
    {0.95, 0.15, 0.10}, {0.10, 0.35, 0.95}, {0.10, 0.85, 0.20}, {0.95, 0.85, 0.10},
    {0.80, 0.15, 0.85}, {0.05, 0.85, 0.85}, {0.95, 0.55, 0.05}, {0.95, 0.95, 0.95}}};
inline constexpr std::array<std::array<double, 3>, kMaxShapeClasses> kSecondary = {{
    {0.45, 0.05, 0.05}, {0.70, 0.80, 1.00}, {0.00, 0.35, 0.05}, {0.55, 0.40, 0.00},
    {0.35, 0.00, 0.40}, {0.00, 0.40, 0.45}, {0.40, 0.15, 0.00}, {0.05, 0.05, 0.05}}};

// Class-specific texture selector in [0,1]: 1 picks the primary colour.
inline double texture(int cls, int x, int y) {
  switch (cls) {
    case 0: return (y / 2) % 2 == 0 ? 1.0 : 0.0;         // horizontal stripes
    case 1: return (x / 2) % 2 == 0 ? 1.0 : 0.0;         // vertical stripes
    case 2: return ((x / 2) + (y / 2)) % 2 == 0 ? 1.0 : 0.0;  // checker
    case 3: return ((x + y) / 2) % 2 == 0 ? 1.0 : 0.0;   // diagonal
    case 4: return (x % 3 == 0 && y % 3 == 0) ? 0.0 : 1.0;  // dots
    case 5: return ((x - y + 64) / 2) % 2 == 0 ? 1.0 : 0.0;
    case 6: return 1.0;                                  // solid
    default: return (x % 2 == 0) ? 1.0 : 0.4;
  }
}

// Smooth value noise: two octaves of bilinearly interpolated random lattices.
inline std::vector<double> value_noise(int size, Rng& rng) {
  std::vector<double> out(static_cast<std::size_t>(size) * size, 0.0);
  double amp = 1.0, total = 0.0;
  for (int cells : {4, 8}) {
    std::vector<double> lattice(static_cast<std::size_t>(cells + 1) * (cells + 1));
    for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double fx = static_cast<double>(x) / size * cells;
        const double fy = static_cast<double>(y) / size * cells;
        const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
        double tx = fx - ix, ty = fy - iy;
        tx = tx * tx * (3 - 2 * tx);
        ty = ty * ty * (3 - 2 * ty);
        auto at = [&](int a, int b) { return lattice[static_cast<std::size_t>(b) * (cells + 1) + a]; };
        const double top = at(ix, iy) * (1 - tx) + at(ix + 1, iy) * tx;
        const double bot = at(ix, iy + 1) * (1 - tx) + at(ix + 1, iy + 1) * tx;
        out[static_cast<std::size_t>(y) * size + x] += amp * (top * (1 - ty) + bot * ty);
      }
    }
    total += amp;
    amp *= 0.5;
  }
  for (double& v : out) v /= total;
  return out;
}

// Rasterizes class `cls` with extent `extent` at top-left (x, y). The mask is
// the set of painted pixels.
inline Region rasterize(int cls, int extent, int x0, int y0, int size, Tensor& image) {
  Region r;
  r.class_id = cls;
  r.mask = Mask(size, size);
  const double half = extent / 2.0;
  for (int y = y0; y < y0 + extent; ++y) {
    for (int x = x0; x < x0 + extent; ++x) {
      const double u = (x + 0.5 - x0 - half) / half;
      const double v = (y + 0.5 - y0 - half) / half;
      if (!shape_contains(cls, u, v)) continue;
      r.mask.set(y, x);
      const double t = texture(cls, x - x0, y - y0);
      for (int c = 0; c < 3; ++c) {
        image.at(static_cast<std::size_t>(c), static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
            t * kPrimary[static_cast<std::size_t>(cls)][static_cast<std::size_t>(c)] +
            (1 - t) * kSecondary[static_cast<std::size_t>(cls)][static_cast<std::size_t>(c)];
      }
    }
  }
  r.box = *r.mask.bounding_box();
  return r;
}

inline bool boxes_apart(int ax, int ay, int aext, int bx, int by, int bext, int gap) {
  return ax + aext + gap <= bx || bx + bext + gap <= ax || ay + aext + gap <= by || by + bext + gap <= ay;
}

}  // namespace detail

/// Generates `count` samples of `size` x `size` RGB images. Each holds one
/// primary object; with probability `difficult_fraction` the primary is small
/// (< 25% of the image) and a smaller distractor of another class is added.
inline Dataset gen_shapes(int count, int size, int num_classes, double difficult_fraction,
                          std::uint64_t seed) {
  if (size < 32) throw ValidationError("gen_shapes: size must be >= 32");
  if (num_classes < 2 || num_classes > kMaxShapeClasses) {
    throw ValidationError("gen_shapes: num_classes must be in 2..8");
  }
  if (count < 0) throw ValidationError("gen_shapes: count must be non-negative");
  if (!(difficult_fraction >= 0.0 && difficult_fraction <= 1.0)) {
    throw ValidationError("gen_shapes: difficult_fraction must be in [0,1]");
  }
  const double scale = size / 32.0;
  auto px = [&](int v) { return std::max(1, static_cast<int>(std::lround(v * scale))); };
  const double image_area = static_cast<double>(size) * size;

  Dataset out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    Sample s;
    s.id = i;
    s.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
    s.difficult = rng.uniform() < difficult_fraction;

    // Background: a base grey per channel plus low-amplitude smooth noise.
    s.image = Tensor(Shape{3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
    const auto noise = detail::value_noise(size, rng);
    for (std::size_t c = 0; c < 3; ++c) {
      const double base = rng.uniform(0.35, 0.55);
      for (std::size_t k = 0; k < noise.size(); ++k) {
        s.image[c * noise.size() + k] = std::clamp(base + 0.12 * noise[k], 0.0, 1.0);
      }
    }

    const int primary_extent = s.difficult ? rng.range(px(10), px(14)) : rng.range(px(13), px(22));
    int distractor_extent = 0, distractor_class = -1;
    if (s.difficult) {
      distractor_extent = rng.range(px(6), px(8));
      distractor_class = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
      if (distractor_class >= s.label) ++distractor_class;
    }

    int px0 = 0, py0 = 0, dx0 = 0, dy0 = 0;
    for (int attempt = 0;; ++attempt) {
      px0 = rng.range(0, size - primary_extent);
      py0 = rng.range(0, size - primary_extent);
      if (!s.difficult) break;
      dx0 = rng.range(0, size - distractor_extent);
      dy0 = rng.range(0, size - distractor_extent);
      if (detail::boxes_apart(px0, py0, primary_extent, dx0, dy0, distractor_extent, 1)) break;
      if (attempt > 1000) throw ValidationError("gen_shapes: cannot place distractor");
    }

    s.regions.push_back(detail::rasterize(s.label, primary_extent, px0, py0, size, s.image));
    s.labels.push_back(s.label);
    if (s.difficult) {
      s.regions.push_back(detail::rasterize(distractor_class, distractor_extent, dx0, dy0, size, s.image));
      s.labels.push_back(distractor_class);
      // Primary always under a quarter of the image for difficult items.
      if (static_cast<double>(s.regions[0].mask.count()) >= 0.25 * image_area) {
        throw ValidationError("gen_shapes: difficult primary too large");
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)

namespace detail {

inline std::size_t ppm_token(const std::string& bytes, std::size_t& pos, const std::string& what) {
  // Skips whitespace and comments, then parses a decimal integer.
  for (;;) {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
    throw IoError(what + ": malformed PPM header");
  }
  std::size_t v = 0;
  while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
    v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
    if (v > (1u << 24)) throw IoError(what + ": PPM header value too large");
    ++pos;
  }
  return v;
}

}  // namespace detail

inline Tensor decode_ppm(const std::string& bytes, const std::string& what = "ppm") {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw IoError(what + ": not a P6 PPM");
  std::size_t pos = 2;
  const std::size_t w = detail::ppm_token(bytes, pos, what);
  const std::size_t h = detail::ppm_token(bytes, pos, what);
  const std::size_t maxval = detail::ppm_token(bytes, pos, what);
  if (maxval != 255) throw IoError(what + ": only maxval 255 is supported");
  if (w == 0 || h == 0) throw IoError(what + ": empty image");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw IoError(what + ": malformed PPM header");
  }
  ++pos;
  if (bytes.size() - pos < w * h * 3) throw IoError(what + ": truncated PPM payload");
  Tensor t(Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        t.at(c, y, x) = static_cast<unsigned char>(bytes[pos + (y * w + x) * 3 + c]) / 255.0;
      }
    }
  }
  return t;
}

inline std::string encode_ppm(const Tensor& image) {
  require_rank(image, 3, "write_ppm");
  if (image.dim(0) != 3) throw ShapeError("write_ppm: expected 3 channels");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

inline Tensor read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }
inline void write_ppm(const Tensor& image, const std::filesystem::path& path) { write_file(path, encode_ppm(image)); }

// ---------------------------------------------------------------------------
// Dataset directory

inline std::string sample_file_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "samples/%04d.tns", id);
  return buf;
}

inline void save_dataset(const Dataset& data, const std::filesystem::path& dir, const json& extra = json::object()) {
  json manifest = extra;
  json samples = json::array();
  for (const auto& s : data) {
    json regions = json::array();
    for (const auto& r : s.regions) {
      regions.push_back({{"class", r.class_id},
                         {"box", {r.box.x0, r.box.y0, r.box.x1, r.box.y1}},
                         {"mask_rle", r.mask.to_rle()}});
    }
    const std::string file = sample_file_name(s.id);
    samples.push_back({{"id", s.id},
                       {"file", file},
                       {"label", s.label},
                       {"labels", s.labels},
                       {"difficult", s.difficult},
                       {"height", s.height()},
                       {"width", s.width()},
                       {"regions", regions}});
    Container c;
    c.header = {{"sample_id", s.id}};
    c.tensors.push_back({"image", s.image});
    save_container(dir / file, c);
  }
  manifest["samples"] = samples;
  write_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IoError("dataset manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!manifest.contains("samples")) throw IoError("dataset manifest lacks 'samples'");
  Dataset out;
  for (const auto& js : manifest["samples"]) {
    Sample s;
    s.id = js.at("id").get<int>();
    const std::string tag = "sample " + std::to_string(s.id);
    s.label = js.at("label").get<int>();
    s.labels = js.at("labels").get<std::vector<int>>();
    s.difficult = js.at("difficult").get<bool>();
    const int h = js.at("height").get<int>(), w = js.at("width").get<int>();
    const auto path = dir / js.at("file").get<std::string>();
    if (!std::filesystem::exists(path)) throw IoError(tag + ": missing tensor file " + path.string());
    s.image = load_container(path).get("image");
    if (s.image.shape() != Shape{3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}) {
      throw IoError(tag + ": tensor shape " + shape_str(s.image.shape()) + " does not match manifest");
    }
    for (const auto& jr : js.at("regions")) {
      Region r;
      r.class_id = jr.at("class").get<int>();
      const auto b = jr.at("box").get<std::vector<int>>();
      if (b.size() != 4) throw ValidationError(tag + ": box must have 4 coordinates");
      r.box = BoundingBox{b[0], b[1], b[2], b[3]};
      if (!r.box.valid_in(w, h)) throw ValidationError(tag + ": box out of image bounds");
      r.mask = Mask::from_rle(h, w, jr.at("mask_rle").get<std::vector<long>>());
      s.regions.push_back(std::move(r));
    }
    for (int c : s.labels) {
      const bool found = std::any_of(s.regions.begin(), s.regions.end(),
                                     [c](const Region& r) { return r.class_id == c; });
      if (!found) throw ValidationError(tag + ": label " + std::to_string(c) + " has no region");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pball
