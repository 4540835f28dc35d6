#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "hsia/common.hpp"
#include "hsia/rng.hpp"

namespace hsia {

// A hyperspectral cube with per-pixel labels. Data is band-major [N,H,W];
// labels are row-major H*W with 255 meaning ignore.
struct HyperCube {
  int bands = 0, height = 0, width = 0;
  std::vector<float> data;
  std::vector<std::uint8_t> labels;
  std::vector<float> wavelengths;  // empty or one entry per band

  std::int64_t pixels() const { return static_cast<std::int64_t>(height) * width; }

  void validate() const {
    if (bands < 1) throw DataError("cube must have at least one band");
    if (data.size() != static_cast<std::size_t>(bands) * pixels())
      throw DataError("cube data size does not match header");
    if (labels.size() != static_cast<std::size_t>(pixels()))
      throw DataError("cube label size does not match header");
    if (!wavelengths.empty()) {
      if (static_cast<int>(wavelengths.size()) != bands)
        throw DataError("wavelength count does not match band count");
      for (std::size_t i = 1; i < wavelengths.size(); ++i)
        if (!(wavelengths[i] > wavelengths[i - 1]))
          throw DataError("wavelengths must be strictly increasing");
    }
    for (float v : data)
      if (!std::isfinite(v)) throw DataError("cube contains non-finite values");
  }
};

struct SynthConfig {
  int bands = 25;
  int classes = 6;
  int height = 64;
  int width = 128;
  std::vector<std::vector<float>> signatures;  // [classes][bands]
  float noise_std = 0.02f;
  float gain_lo = 0.7f;
  float gain_hi = 1.3f;
  int shapes_min = 3;
  int shapes_max = 6;
  float ignore_fraction = 0.0f;
  int dead_from = -1;  // bands >= dead_from are exactly zero (no signal, no noise)
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("synth: need at least 2 classes");
    if (bands < 1 || height < 8 || width < 8) throw ConfigError("synth: bad extents");
    if (static_cast<int>(signatures.size()) != classes)
      throw ConfigError("synth: one signature per class required");
    for (auto& s : signatures)
      if (static_cast<int>(s.size()) != bands)
        throw ConfigError("synth: signature length must equal band count");
    if (!(gain_lo > 0) || gain_hi < gain_lo) throw ConfigError("synth: bad gain range");
  }
};

// Smooth, mutually distinct spectra: one Gaussian bump per class at a
// class-specific band position over a small flat floor. Bumps have nearly
// disjoint support, so signatures stay well separated in angle even under
// per-shape illumination gain (which rescales a spectrum but cannot move
// energy between bands).
inline std::vector<std::vector<float>> default_signatures(int bands, int classes) {
  std::vector<std::vector<float>> sig(classes, std::vector<float>(bands));
  for (int c = 0; c < classes; ++c) {
    double center = (c + 0.5) * bands / static_cast<double>(classes);
    double width = std::max(1.0, bands / (2.5 * classes));
    for (int b = 0; b < bands; ++b) {
      double t = (b - center) / width;
      sig[c][static_cast<std::size_t>(b)] = static_cast<float>(0.05 + 0.9 * std::exp(-0.5 * t * t));
    }
  }
  return sig;
}

inline SynthConfig default_synth(int bands, int classes, int h, int w, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.bands = bands;
  cfg.classes = classes;
  cfg.height = h;
  cfg.width = w;
  cfg.seed = seed;
  cfg.signatures = default_signatures(bands, classes);
  return cfg;
}

// Variant for sensitivity studies: class `coded_class` shares the flat
// baseline of class 0 everywhere except band `coded_band`, and the top
// quarter of the spectrum carries no signal for any class.
inline SynthConfig band_coded_synth(int bands, int classes, int h, int w, std::uint64_t seed,
                                    int coded_class, int coded_band) {
  if (coded_class <= 0 || coded_class >= classes || coded_band < 0 || coded_band >= bands)
    throw ConfigError("band_coded_synth: bad coded class/band");
  SynthConfig cfg = default_synth(bands, classes, h, w, seed);
  int dead_from = bands - std::max(1, bands / 4);
  cfg.dead_from = dead_from;
  if (coded_band >= dead_from) throw ConfigError("band_coded_synth: coded band in dead range");
  // Class 0 gets a flat baseline over the live bands so no single baseline
  // band is decisive; the coded class copies it exactly except at the coded
  // band. The remaining classes keep narrow bumps confined to live bands.
  for (int c = 0; c < classes; ++c) {
    auto& s = cfg.signatures[static_cast<std::size_t>(c)];
    std::fill(s.begin(), s.end(), 0.0f);
    if (c == 0 || c == coded_class) {
      for (int b = 0; b < dead_from; ++b) s[static_cast<std::size_t>(b)] = 0.4f;
    } else {
      double center = (c + 0.5) * dead_from / static_cast<double>(classes);
      double width = std::max(1.0, dead_from / (2.5 * classes));
      for (int b = 0; b < dead_from; ++b) {
        double t = (b - center) / width;
        s[static_cast<std::size_t>(b)] = static_cast<float>(0.05 + 0.9 * std::exp(-0.5 * t * t));
      }
    }
  }
  cfg.signatures[coded_class][static_cast<std::size_t>(coded_band)] += 0.8f;
  return cfg;
}

namespace detail {

// Shapes are kept coarse (minimum extent ~8px) so that ground truth remains
// representable by a decoder predicting at quarter resolution.
inline void paint_rect(std::vector<std::uint8_t>& lab, int h, int w, Rng& rng, std::uint8_t cls) {
  int rw = 12 + static_cast<int>(rng.below(static_cast<std::uint32_t>(w / 2)));
  int rh = 12 + static_cast<int>(rng.below(static_cast<std::uint32_t>(h / 2)));
  int x0 = static_cast<int>(rng.below(static_cast<std::uint32_t>(std::max(1, w - rw))));
  int y0 = static_cast<int>(rng.below(static_cast<std::uint32_t>(std::max(1, h - rh))));
  for (int y = y0; y < std::min(h, y0 + rh); ++y)
    for (int x = x0; x < std::min(w, x0 + rw); ++x)
      lab[static_cast<std::size_t>(y) * w + x] = cls;
}

inline void paint_blob(std::vector<std::uint8_t>& lab, int h, int w, Rng& rng, std::uint8_t cls) {
  double cy = rng.uniform(0.0, h - 1.0), cx = rng.uniform(0.0, w - 1.0);
  double ry = rng.uniform(6.0, h / 3.0), rx = rng.uniform(6.0, w / 3.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double dy = (y - cy) / ry, dx = (x - cx) / rx;
      if (dy * dy + dx * dx <= 1.0) lab[static_cast<std::size_t>(y) * w + x] = cls;
    }
}

inline void paint_stripe(std::vector<std::uint8_t>& lab, int h, int w, Rng& rng, std::uint8_t cls) {
  bool horizontal = rng.below(2) == 0;
  int extent = horizontal ? h : w;
  int thick = 10 + static_cast<int>(rng.below(static_cast<std::uint32_t>(std::max(2, extent / 6))));
  int pos = static_cast<int>(rng.below(static_cast<std::uint32_t>(std::max(1, extent - thick))));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int v = horizontal ? y : x;
      if (v >= pos && v < pos + thick) lab[static_cast<std::size_t>(y) * w + x] = cls;
    }
}

}  // namespace detail

// One deterministic scene: layered shapes over a class-0 background, each
// shape instance carrying its own multiplicative illumination gain.
inline HyperCube synth_scene(const SynthConfig& cfg, int index) {
  cfg.validate();
  Rng rng(Rng::splitmix(cfg.seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(index + 1)));
  int h = cfg.height, w = cfg.width;
  std::int64_t hw = static_cast<std::int64_t>(h) * w;
  // the backdrop class varies per scene so no class dominates the corpus
  std::uint8_t bg = static_cast<std::uint8_t>(rng.below(static_cast<std::uint32_t>(cfg.classes)));
  std::vector<std::uint8_t> lab(static_cast<std::size_t>(hw), bg);
  std::vector<float> gain(static_cast<std::size_t>(hw),
                          static_cast<float>(rng.uniform(cfg.gain_lo, cfg.gain_hi)));
  int n_shapes = cfg.shapes_min +
                 static_cast<int>(rng.below(static_cast<std::uint32_t>(cfg.shapes_max - cfg.shapes_min + 1)));
  for (int s = 0; s < n_shapes; ++s) {
    std::uint8_t cls = static_cast<std::uint8_t>(
        (bg + 1 + rng.below(static_cast<std::uint32_t>(cfg.classes - 1))) % cfg.classes);
    std::vector<std::uint8_t> mask(lab);
    switch (rng.below(3)) {
      case 0: detail::paint_rect(mask, h, w, rng, 254); break;
      case 1: detail::paint_blob(mask, h, w, rng, 254); break;
      default: detail::paint_stripe(mask, h, w, rng, 254); break;
    }
    float g = static_cast<float>(rng.uniform(cfg.gain_lo, cfg.gain_hi));
    for (std::int64_t p = 0; p < hw; ++p)
      if (mask[static_cast<std::size_t>(p)] == 254) {
        lab[static_cast<std::size_t>(p)] = cls;
        gain[static_cast<std::size_t>(p)] = g;
      }
  }
  HyperCube cube;
  cube.bands = cfg.bands;
  cube.height = h;
  cube.width = w;
  cube.data.resize(static_cast<std::size_t>(cfg.bands) * hw);
  for (int b = 0; b < cfg.bands; ++b) {
    bool dead = cfg.dead_from >= 0 && b >= cfg.dead_from;
    for (std::int64_t p = 0; p < hw; ++p) {
      float s = cfg.signatures[lab[static_cast<std::size_t>(p)]][static_cast<std::size_t>(b)];
      cube.data[static_cast<std::size_t>(b) * hw + p] =
          dead ? 0.0f
               : s * gain[static_cast<std::size_t>(p)] +
                     cfg.noise_std * static_cast<float>(rng.normal());
    }
  }
  cube.labels = std::move(lab);
  if (cfg.ignore_fraction > 0) {
    std::int64_t n_ign = static_cast<std::int64_t>(cfg.ignore_fraction * hw);
    for (std::int64_t i = 0; i < n_ign; ++i)
      cube.labels[rng.below(static_cast<std::uint32_t>(hw))] = 255;
  }
  return cube;
}

// --- HSC1 cube files ----------------------------------------------------------
// Layout: magic "HSC1", u32 N,H,W, u8 flags (bit 0: wavelengths present),
// f32 little-endian band-major data, u8 labels H*W, then N f32 wavelengths
// when flagged.

namespace detail {

inline void put_u32le(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32le(std::string& s, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32le(s, bits);
}

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      throw DataError("HSC1 truncated at byte offset " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
};

}  // namespace detail

inline std::string cube_serialize(const HyperCube& cube) {
  cube.validate();
  std::string out = "HSC1";
  detail::put_u32le(out, static_cast<std::uint32_t>(cube.bands));
  detail::put_u32le(out, static_cast<std::uint32_t>(cube.height));
  detail::put_u32le(out, static_cast<std::uint32_t>(cube.width));
  out.push_back(cube.wavelengths.empty() ? 0 : 1);
  for (float v : cube.data) detail::put_f32le(out, v);
  for (std::uint8_t v : cube.labels) out.push_back(static_cast<char>(v));
  for (float v : cube.wavelengths) detail::put_f32le(out, v);
  return out;
}

inline HyperCube cube_parse(const std::string& bytes) {
  detail::ByteReader r{bytes};
  r.need(4);
  if (bytes.compare(0, 4, "HSC1") != 0) throw DataError("bad HSC1 magic at byte offset 0");
  r.pos = 4;
  HyperCube cube;
  cube.bands = static_cast<int>(r.u32());
  cube.height = static_cast<int>(r.u32());
  cube.width = static_cast<int>(r.u32());
  std::uint8_t flags = r.u8();
  if (cube.bands < 1 || cube.height < 1 || cube.width < 1)
    throw DataError("HSC1 header has non-positive extents");
  std::int64_t hw = cube.pixels();
  cube.data.resize(static_cast<std::size_t>(cube.bands) * hw);
  for (auto& v : cube.data) v = r.f32();
  cube.labels.resize(static_cast<std::size_t>(hw));
  for (auto& v : cube.labels) v = r.u8();
  if (flags & 1) {
    cube.wavelengths.resize(static_cast<std::size_t>(cube.bands));
    for (auto& v : cube.wavelengths) v = r.f32();
  }
  if (r.pos != bytes.size())
    throw DataError("HSC1 has " + std::to_string(bytes.size() - r.pos) + " trailing bytes");
  return cube;
}

inline void save_cube(const std::string& path, const HyperCube& cube) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot write " + path);
  auto bytes = cube_serialize(cube);
  std::size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw IoError("short write to " + path);
}

inline HyperCube load_cube(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  std::string bytes;
  char buf[65536];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) bytes.append(buf, n);
  std::fclose(f);
  return cube_parse(bytes);
}

// Same window applied to data and labels; reflect-pads when the crop is
// larger than the image.
inline HyperCube random_crop(const HyperCube& cube, int ch, int cw, Rng& rng) {
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
  };
  int h = cube.height, w = cube.width;
  int y0 = ch >= h ? -(ch - h) / 2 : static_cast<int>(rng.below(static_cast<std::uint32_t>(h - ch + 1)));
  int x0 = cw >= w ? -(cw - w) / 2 : static_cast<int>(rng.below(static_cast<std::uint32_t>(w - cw + 1)));
  HyperCube out;
  out.bands = cube.bands;
  out.height = ch;
  out.width = cw;
  out.wavelengths = cube.wavelengths;
  std::int64_t hw_in = cube.pixels();
  out.data.resize(static_cast<std::size_t>(cube.bands) * ch * cw);
  out.labels.resize(static_cast<std::size_t>(ch) * cw);
  for (int y = 0; y < ch; ++y) {
    int sy = reflect(y0 + y, h);
    for (int x = 0; x < cw; ++x) {
      int sx = reflect(x0 + x, w);
      std::int64_t sp = static_cast<std::int64_t>(sy) * w + sx;
      std::int64_t dp = static_cast<std::int64_t>(y) * cw + x;
      out.labels[static_cast<std::size_t>(dp)] = cube.labels[static_cast<std::size_t>(sp)];
      for (int b = 0; b < cube.bands; ++b)
        out.data[static_cast<std::size_t>(b) * ch * cw + dp] =
            cube.data[static_cast<std::size_t>(b) * hw_in + sp];
    }
  }
  return out;
}

// FNV-1a, used for manifest checksums.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace hsia
