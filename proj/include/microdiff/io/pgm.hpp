#pragma once

// Binary PGM (P5, maxval 255) output and P2/P5 input for 8-bit bitmaps.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include "microdiff/errors.hpp"
#include "microdiff/mnist_data.hpp"

namespace microdiff::io {

inline void write_pgm(const std::filesystem::path& path, const Bitmap& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << b.width << ' ' << b.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(b.values.data()), static_cast<std::streamsize>(b.values.size()));
}

// Tiles bitmaps of equal size into one image, `columns` per row, with a
// one-pixel black gutter.
inline Bitmap tile(std::span<const Bitmap> images, int columns) {
  if (images.empty()) throw ContractError("cannot tile an empty image list");
  if (columns < 1) columns = 1;
  const int w = images.front().width, h = images.front().height;
  const int n = static_cast<int>(images.size());
  const int cols = std::min(columns, n);
  const int rows = (n + cols - 1) / cols;
  Bitmap out;
  out.width = cols * (w + 1) - 1;
  out.height = rows * (h + 1) - 1;
  out.values.assign(static_cast<std::size_t>(out.width) * static_cast<std::size_t>(out.height), 0);
  for (int i = 0; i < n; ++i) {
    const auto& b = images[static_cast<std::size_t>(i)];
    if (b.width != w || b.height != h) throw ContractError("tiled images must share one size");
    const int r0 = (i / cols) * (h + 1), c0 = (i % cols) * (w + 1);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) out.at(r0 + r, c0 + c) = b.at(r, c);
  }
  return out;
}

namespace detail {

inline std::string next_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok += static_cast<char>(ch);
  }
  return tok;
}

inline int parse_positive(const std::string& tok, const std::string& what, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used == tok.size() && v > 0) return v;
  } catch (const std::logic_error&) {
  }
  throw DataError(path.string() + ": bad PGM " + what + " '" + tok + "'");
}

}  // namespace detail

// Reads P2 or P5 files; values are rescaled to 0..255 when maxval differs.
inline Bitmap read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const auto magic = detail::next_token(in);
  if (magic != "P5" && magic != "P2") throw FormatError(path.string() + ": not a PGM file", 0);
  Bitmap b;
  b.width = detail::parse_positive(detail::next_token(in), "width", path);
  b.height = detail::parse_positive(detail::next_token(in), "height", path);
  const int maxval = detail::parse_positive(detail::next_token(in), "maxval", path);
  if (maxval > 255) throw DataError(path.string() + ": 16-bit PGM is not supported");
  const auto n = static_cast<std::size_t>(b.width) * static_cast<std::size_t>(b.height);
  b.values.resize(n);
  if (magic == "P5") {
    in.read(reinterpret_cast<char*>(b.values.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) throw DataError(path.string() + ": truncated PGM payload");
  } else {
    for (auto& v : b.values) {
      const auto tok = detail::next_token(in);
      if (tok.empty()) throw DataError(path.string() + ": truncated PGM payload");
      v = static_cast<std::uint8_t>(std::stoi(tok));
    }
  }
  if (maxval != 255)
    for (auto& v : b.values) v = static_cast<std::uint8_t>(std::lround(255.0 * std::min<int>(v, maxval) / maxval));
  return b;
}

}  // namespace microdiff::io
