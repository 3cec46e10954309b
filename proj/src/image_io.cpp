#include "fwvit/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

#include "fwvit/errors.hpp"

namespace fwvit {

namespace {

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Reads one header integer, skipping whitespace and '#' comments.
std::size_t header_int(const std::string& s, std::size_t& pos, const std::string& where) {
  for (;;) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos < s.size() && s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t v = 0, digits = 0;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
    v = v * 10 + static_cast<std::size_t>(s[pos++] - '0');
    if (++digits > 9) throw DataError(where + ": header value too large");
  }
  if (digits == 0) throw DataError(where + ": malformed header");
  return v;
}

}  // namespace

Tensor read_pnm(const std::filesystem::path& path) {
  const std::string s = read_all(path);
  const std::string where = path.string();
  if (s.size() < 2 || s[0] != 'P' || (s[1] != '5' && s[1] != '6')) {
    throw DataError(where + ": not a binary PPM/PGM file");
  }
  const std::size_t channels = s[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  const std::size_t w = header_int(s, pos, where);
  const std::size_t h = header_int(s, pos, where);
  const std::size_t maxval = header_int(s, pos, where);
  if (w == 0 || h == 0) throw DataError(where + ": empty image");
  if (maxval != 255) throw DataError(where + ": only maxval 255 is supported");
  if (pos >= s.size() || !std::isspace(static_cast<unsigned char>(s[pos]))) {
    throw DataError(where + ": malformed header");
  }
  ++pos;
  if (s.size() - pos < w * h * channels) throw DataError(where + ": truncated pixel data");

  Tensor img({channels, h, w});
  auto d = img.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const auto byte = static_cast<unsigned char>(s[pos + (y * w + x) * channels + c]);
        d[(c * h + y) * w + x] = static_cast<float>(byte) / 255.0f;
      }
  return img;
}

void write_pnm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw ShapeError("write_pnm: expected [1|3 x H x W], got " + shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string out = (c == 3 ? "P6\n" : "P5\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + c * h * w);
  const auto d = image.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) {
        const float v = std::clamp(d[(k * h + y) * w + x], 0.0f, 1.0f);
        out[header + (y * w + x) * c + k] = static_cast<char>(std::lround(v * 255.0f));
      }
  std::ofstream f(path, std::ios::binary);
  if (!f.write(out.data(), static_cast<std::streamsize>(out.size()))) {
    throw DataError("cannot write image " + path.string());
  }
}

Tensor read_mask(const std::filesystem::path& path) {
  const Tensor raw = read_pnm(path);
  if (raw.dim(0) != 1) throw DataError(path.string() + ": mask must be a PGM");
  Tensor mask({raw.dim(1), raw.dim(2)});
  auto m = mask.data();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = raw.data()[i] >= 0.5f ? 1.0f : 0.0f;
  return mask;
}

void write_mask(const std::filesystem::path& path, const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("write_mask: expected [H x W], got " + shape_str(mask.shape()));
  Tensor img({1, mask.dim(0), mask.dim(1)});
  for (std::size_t i = 0; i < mask.numel(); ++i) img.data()[i] = mask.data()[i] >= 0.5f ? 1.0f : 0.0f;
  write_pnm(path, img);
}

}  // namespace fwvit
