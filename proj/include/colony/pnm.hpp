#pragma once

// Binary PPM (P6) / PGM (P5) reading and writing, maxval 255 only.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <istream>
#include <string>

#include "colony/errors.hpp"
#include "colony/mask.hpp"

namespace colony {

namespace detail {

inline void skip_pnm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c != EOF && std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_pnm_int(std::istream& in, const std::string& path) {
  skip_pnm_space(in);
  int v = -1;
  if (!(in >> v) || v < 0) throw IoError(path, "malformed PNM header");
  return v;
}

struct PnmHeader {
  char kind = 0;  // '5' or '6'
  int w = 0, h = 0;
};

inline PnmHeader read_pnm_header(std::istream& in, const std::string& path) {
  char p = 0, k = 0;
  in.get(p).get(k);
  if (!in || p != 'P' || (k != '5' && k != '6')) {
    throw IoError(path, "not a binary PGM/PPM file");
  }
  PnmHeader h;
  h.kind = k;
  h.w = read_pnm_int(in, path);
  h.h = read_pnm_int(in, path);
  const int maxval = read_pnm_int(in, path);
  if (maxval != 255) throw IoError(path, "only maxval 255 is supported");
  if (h.w == 0 || h.h == 0) throw IoError(path, "empty image");
  // Exactly one whitespace byte separates the header from the raster.
  if (!std::isspace(in.get())) throw IoError(path, "malformed PNM header");
  return h;
}

inline void write_bytes(const std::filesystem::path& path, const std::string& header,
                        const std::uint8_t* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << header;
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError(path.string(), "write failed");
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  const std::string header = "P6\n" + std::to_string(img.width()) + " " +
                             std::to_string(img.height()) + "\n255\n";
  detail::write_bytes(path, header, img.data(), img.storage().size());
}

inline void write_pgm(const std::filesystem::path& path, const LabelMask& mask) {
  const std::string header = "P5\n" + std::to_string(mask.width()) + " " +
                             std::to_string(mask.height()) + "\n255\n";
  detail::write_bytes(path, header, mask.data(), mask.size());
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open");
  const auto h = detail::read_pnm_header(in, path.string());
  if (h.kind != '6') throw IoError(path.string(), "expected P6 (PPM)");
  RgbImage img(h.h, h.w);
  in.read(reinterpret_cast<char*>(img.data()),
          static_cast<std::streamsize>(img.storage().size()));
  if (!in) throw IoError(path.string(), "truncated raster");
  return img;
}

/// Reads a P5 file as a label mask; values outside 0..3 are rejected.
inline LabelMask read_pgm_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open");
  const auto h = detail::read_pnm_header(in, path.string());
  if (h.kind != '5') throw IoError(path.string(), "expected P5 (PGM)");
  LabelMask mask(h.h, h.w);
  in.read(reinterpret_cast<char*>(mask.data()),
          static_cast<std::streamsize>(mask.size()));
  if (!in) throw IoError(path.string(), "truncated raster");
  try {
    mask.validate();
  } catch (const LabelError& e) {
    throw IoError(path.string(), e.what());
  }
  return mask;
}

}  // namespace colony
