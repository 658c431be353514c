#pragma once

// MNIST IDX ingestion and a synthetic-glyph fallback digit source.
//
// IDX is big-endian: u32 magic (0x0000'08'NN: ubyte type, NN dims), one u32
// per dim, then raw unsigned bytes. Image files carry magic 2051 (3 dims),
// label files 2049 (1 dim).
//
// When no IDX files are available, digits 1..8 are rendered from fixed 5x7
// bitmap masks scaled to 28x28 with per-exemplar jitter, so the pipeline
// stays runnable offline.

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dwmr/common.hpp"
#include "dwmr/envs.hpp"
#include "dwmr/rng.hpp"

namespace dwmr {

struct IdxData {
  std::vector<int> dims;
  std::vector<uint8_t> bytes;
};

inline constexpr uint32_t kIdxImageMagic = 2051;  // 0x00000803
inline constexpr uint32_t kIdxLabelMagic = 2049;  // 0x00000801

inline IdxData parse_idx(const std::vector<uint8_t>& raw) {
  check(raw.size() >= 4, "idx: stream shorter than the magic header");
  const uint32_t magic =
      (uint32_t(raw[0]) << 24) | (uint32_t(raw[1]) << 16) | (uint32_t(raw[2]) << 8) | raw[3];
  check(magic == kIdxImageMagic || magic == kIdxLabelMagic,
        cat("idx: unsupported magic ", magic, " (expected 2051 images or 2049 labels)"));
  const int ndims = int(raw[3]);
  check(raw.size() >= 4 + size_t(ndims) * 4, "idx: truncated dimension header");
  IdxData out;
  size_t total = 1;
  for (int d = 0; d < ndims; ++d) {
    const size_t o = 4 + size_t(d) * 4;
    const uint32_t v = (uint32_t(raw[o]) << 24) | (uint32_t(raw[o + 1]) << 16) |
                       (uint32_t(raw[o + 2]) << 8) | raw[o + 3];
    check(v <= size_t(1) << 30, cat("idx: dimension ", d, " overflows: ", v));
    out.dims.push_back(int(v));
    total *= v;
    check(total <= size_t(1) << 32, "idx: element count overflows");
  }
  const size_t payload = 4 + size_t(ndims) * 4;
  check(raw.size() == payload + total,
        cat("idx: payload holds ", raw.size() - payload, " bytes, header declares ", total));
  out.bytes.assign(raw.begin() + std::ptrdiff_t(payload), raw.end());
  return out;
}

inline std::vector<uint8_t> serialize_idx(uint32_t magic, const std::vector<int>& dims,
                                          const std::vector<uint8_t>& bytes) {
  std::vector<uint8_t> raw;
  auto put_be = [&raw](uint32_t v) {
    raw.push_back(uint8_t(v >> 24));
    raw.push_back(uint8_t(v >> 16));
    raw.push_back(uint8_t(v >> 8));
    raw.push_back(uint8_t(v));
  };
  put_be(magic);
  check(int(magic & 0xff) == int(dims.size()),
        cat("idx: magic declares ", magic & 0xff, " dims, got ", dims.size()));
  size_t total = 1;
  for (int d : dims) {
    put_be(uint32_t(d));
    total *= size_t(d);
  }
  check(total == bytes.size(), cat("idx: ", bytes.size(), " bytes for ", total, " elements"));
  raw.insert(raw.end(), bytes.begin(), bytes.end());
  return raw;
}

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), cat("cannot open ", path));
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(is), {});
}

// per-class (1..8) pools of 28x28 exemplars in [0,1]
class DigitSource : public DigitProvider {
 public:
  std::string provenance;  // "idx" or "synthetic"

  const float* sample(int digit_class, Rng& rng) const override {
    check(digit_class >= 1 && digit_class <= 8, cat("digit class ", digit_class, " out of range"));
    const auto& pool = pools_[digit_class];
    check(!pool.empty(), cat("digit source has no exemplars for class ", digit_class));
    return pool[rng.uniform_int(pool.size())].data();
  }

  size_t pool_size(int digit_class) const { return pools_[digit_class].size(); }

  void add(int digit_class, std::vector<float> exemplar) {
    check(exemplar.size() == 28 * 28, "digit exemplar must be 28x28");
    pools_[digit_class].push_back(std::move(exemplar));
  }

  // contiguous per-class index range [lo_frac, hi_frac) — split pools built
  // this way are pairwise disjoint by construction
  DigitSource slice(double lo_frac, double hi_frac) const {
    DigitSource out;
    out.provenance = provenance;
    for (int c = 1; c <= 8; ++c) {
      const size_t n = pools_[c].size();
      const size_t lo = size_t(lo_frac * double(n)), hi = size_t(hi_frac * double(n));
      check(hi > lo, cat("digit source: slice [", lo_frac, ",", hi_frac, ") of class ", c,
                         " pool (", n, " exemplars) is empty"));
      for (size_t i = lo; i < hi; ++i) out.pools_[c].push_back(pools_[c][i]);
    }
    return out;
  }

 private:
  std::array<std::vector<std::vector<float>>, 9> pools_;  // index 0 unused
};

inline DigitSource mnist_digit_source(const std::string& images_path,
                                      const std::string& labels_path) {
  const IdxData images = parse_idx(read_file_bytes(images_path));
  const IdxData labels = parse_idx(read_file_bytes(labels_path));
  check(images.dims.size() == 3 && images.dims[1] == 28 && images.dims[2] == 28,
        cat("idx: ", images_path, " is not a 28x28 image set"));
  check(labels.dims.size() == 1 && labels.dims[0] == images.dims[0],
        cat("idx: ", labels_path, " label count does not match image count"));
  DigitSource src;
  src.provenance = "idx";
  for (int i = 0; i < images.dims[0]; ++i) {
    const int cls = labels.bytes[i];
    if (cls < 1 || cls > 8) continue;  // 0 and 9 never appear on tiles
    std::vector<float> img(28 * 28);
    for (int k = 0; k < 28 * 28; ++k)
      img[k] = float(images.bytes[size_t(i) * 28 * 28 + k]) / 255.f;
    src.add(cls, std::move(img));
  }
  return src;
}

namespace detail {

// 5x7 font masks for digits 1..8, one row per byte (low 5 bits, msb-left)
inline constexpr uint8_t kGlyph5x7[8][7] = {
    {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110},  // 1
    {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111},  // 2
    {0b11110, 0b00001, 0b00001, 0b01110, 0b00001, 0b00001, 0b11110},  // 3
    {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010},  // 4
    {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110},  // 5
    {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110},  // 6
    {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000},  // 7
    {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110},  // 8
};

}  // namespace detail

// digits 1..8 from the 5x7 masks scaled 4x (20x28 glyph centred on a 28x28
// canvas), with ±2 px translation jitter and intensity in [0.7, 1.0]
inline DigitSource synth_glyph_source(Rng& rng, int pool_per_class = 200) {
  DigitSource src;
  src.provenance = "synthetic";
  for (int cls = 1; cls <= 8; ++cls) {
    for (int e = 0; e < pool_per_class; ++e) {
      const int dx = int(rng.uniform_int(5)) - 2;
      const int dy = int(rng.uniform_int(5)) - 2;
      const float intensity = float(rng.uniform(0.7, 1.0));
      std::vector<float> img(28 * 28, 0.f);
      for (int gy = 0; gy < 7; ++gy)
        for (int gx = 0; gx < 5; ++gx) {
          if (!((detail::kGlyph5x7[cls - 1][gy] >> (4 - gx)) & 1)) continue;
          for (int sy = 0; sy < 4; ++sy)
            for (int sx = 0; sx < 4; ++sx) {
              const int y = gy * 4 + sy + dy, x = 4 + gx * 4 + sx + dx;
              if (y >= 0 && y < 28 && x >= 0 && x < 28) img[size_t(y) * 28 + x] = intensity;
            }
        }
      src.add(cls, std::move(img));
    }
  }
  return src;
}

}  // namespace dwmr
