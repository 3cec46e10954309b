#include "fwvit/contexts.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "fwvit/errors.hpp"
#include "fwvit/image_io.hpp"
#include "fwvit/text.hpp"

namespace fwvit {

namespace {

using Color = std::array<double, 3>;

Color random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::fabs(a.data()[i] - b.data()[i]);
  return s / static_cast<double>(a.numel());
}

// Membership test for one of a few figure shapes, in normalized coordinates
// relative to the figure center and rotation.
struct Figure {
  int kind = 0;  // 0 ellipse, 1 rectangle, 2 triangle, 3 lobed blob
  double cx = 0, cy = 0, rx = 0, ry = 0, angle = 0;
  int lobes = 0;
  double lobe_phase = 0, lobe_depth = 0;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = (std::cos(angle) * dx + std::sin(angle) * dy) / rx;
    const double v = (-std::sin(angle) * dx + std::cos(angle) * dy) / ry;
    switch (kind) {
      case 0:
        return u * u + v * v <= 1.0;
      case 1:
        return std::fabs(u) <= 1.0 && std::fabs(v) <= 1.0;
      case 2:
        // apex at v = -1, base at v = 0.5
        return v <= 0.5 && std::fabs(u) <= (v + 1.0) / std::sqrt(3.0) * 1.5;
      default: {
        const double r = std::sqrt(u * u + v * v);
        const double theta = std::atan2(v, u);
        return r <= 1.0 + lobe_depth * std::sin(lobes * theta + lobe_phase);
      }
    }
  }
};

// 1-D area-resampling weights from n source pixels to m targets.
std::vector<std::vector<std::pair<std::size_t, double>>> area_weights(std::size_t n, std::size_t m) {
  std::vector<std::vector<std::pair<std::size_t, double>>> w(m);
  const double step = static_cast<double>(n) / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double lo = i * step, hi = (i + 1) * step;
    for (auto j = static_cast<std::size_t>(lo); j < n && static_cast<double>(j) < hi; ++j) {
      const double overlap = std::min(hi, j + 1.0) - std::max(lo, static_cast<double>(j));
      if (overlap > 0) w[i].emplace_back(j, overlap / step);
    }
  }
  return w;
}

}  // namespace

bool ContextSet::has_masks() const {
  return !masks.empty() && std::all_of(masks.begin(), masks.end(), [](const Tensor& m) { return m.defined(); });
}

void ContextSet::validate() const {
  if (images.empty()) throw DataError("context set is empty");
  if (ids.size() != images.size()) throw DataError("context ids and images differ in count");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != images[0].shape()) {
      throw DataError("context " + ids[i] + " has shape " + shape_str(images[i].shape()) + ", expected " +
                      shape_str(images[0].shape()));
    }
    for (float v : images[i].data()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw DataError("context " + ids[i] + " has pixel values outside [0,1]");
    }
  }
  for (double p : noise_levels) {
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("noise levels must lie in (0, 1]");
  }
  if (samples_per_context == 0) throw ConfigError("samples_per_context must be positive");
}

SyntheticImage synthesize_image(Rng& rng, std::size_t s) {
  const double S = static_cast<double>(s);
  const double two_pi = 2.0 * std::numbers::pi;

  // Smooth background: bilinear blend of four corner colors with a gentle
  // sinusoidal modulation.
  const Color c00 = random_color(rng), c01 = random_color(rng), c10 = random_color(rng), c11 = random_color(rng);
  const double wave_angle = rng.uniform() * two_pi, wave_freq = 0.5 + rng.uniform();
  const Color wave_phase = {rng.uniform() * two_pi, rng.uniform() * two_pi, rng.uniform() * two_pi};

  Figure fig;
  Tensor mask({s, s});
  for (int attempt = 0;; ++attempt) {
    fig.kind = static_cast<int>(rng.below(4));
    fig.cx = (0.3 + 0.4 * rng.uniform()) * S;
    fig.cy = (0.3 + 0.4 * rng.uniform()) * S;
    fig.rx = (0.2 + 0.25 * rng.uniform()) * S;
    fig.ry = (0.2 + 0.25 * rng.uniform()) * S;
    fig.angle = rng.uniform() * std::numbers::pi;
    fig.lobes = 3 + static_cast<int>(rng.below(4));
    fig.lobe_phase = rng.uniform() * two_pi;
    fig.lobe_depth = 0.15 + 0.2 * rng.uniform();
    std::size_t inside = 0;
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const bool in = fig.contains(x + 0.5, y + 0.5);
        mask.data()[y * s + x] = in ? 1.0f : 0.0f;
        inside += in;
      }
    const double frac = static_cast<double>(inside) / (S * S);
    if (frac >= 0.1 && frac <= 0.6) break;
    if (attempt > 1000) throw std::logic_error("synthesize_image: could not place a figure");
  }

  // Figure texture: stripes or checks between two colors.
  const Color ta = random_color(rng), tb = random_color(rng);
  const bool checks = rng.uniform() < 0.5;
  const double period = 2.0 + 3.0 * rng.uniform();
  const double tex_angle = rng.uniform() * std::numbers::pi;

  Tensor img({3, s, s});
  auto d = img.data();
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double u = (x + 0.5) / S, v = (y + 0.5) / S;
      const double along = std::cos(wave_angle) * u + std::sin(wave_angle) * v;
      double t = 0.0;
      if (checks) {
        const auto ix = static_cast<long>(std::floor((x + 0.5) / period));
        const auto iy = static_cast<long>(std::floor((y + 0.5) / period));
        t = ((ix + iy) & 1) ? 1.0 : 0.0;
      } else {
        const double w = std::cos(tex_angle) * (x + 0.5) + std::sin(tex_angle) * (y + 0.5);
        t = 0.5 + 0.5 * std::sin(two_pi * w / period);
      }
      const bool fg = mask.data()[y * s + x] > 0.5f;
      for (std::size_t c = 0; c < 3; ++c) {
        double val;
        if (fg) {
          val = ta[c] * (1.0 - t) + tb[c] * t;
        } else {
          val = (1 - u) * (1 - v) * c00[c] + u * (1 - v) * c01[c] + (1 - u) * v * c10[c] + u * v * c11[c];
          val += 0.12 * std::sin(two_pi * wave_freq * along + wave_phase[c]);
        }
        d[(c * s + y) * s + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return {img, mask};
}

ContextSet gen_contexts(std::uint64_t seed, std::size_t n, std::size_t image_size) {
  if (n < 2) throw ConfigError("gen_contexts: need at least 2 contexts, got " + std::to_string(n));
  if (image_size < 4) throw ConfigError("gen_contexts: image_size too small");
  ContextSet set;
  set.seed = seed;
  Rng rng(derive_seed(seed, "contexts"));
  while (set.images.size() < n) {
    SyntheticImage img = synthesize_image(rng, image_size);
    // Keep the contexts clearly distinct from one another.
    const bool distinct = std::all_of(set.images.begin(), set.images.end(), [&](const Tensor& other) {
      return mean_abs_diff(img.image, other) > 0.1;
    });
    if (!distinct) continue;
    set.ids.push_back("ctx" + std::to_string(set.images.size()));
    set.images.push_back(img.image);
    set.masks.push_back(img.mask);
  }
  return set;
}

std::vector<Tensor> gen_distractors(std::uint64_t seed, std::size_t n, std::size_t image_size) {
  Rng rng(derive_seed(seed, "distractors"));
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synthesize_image(rng, image_size).image);
  return out;
}

Tensor resize_square(const Tensor& image, std::size_t size) {
  if (image.rank() != 3) throw ShapeError("resize_square: expected [C x H x W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t m = std::min(h, w), y0 = (h - m) / 2, x0 = (w - m) / 2;
  const auto wts = area_weights(m, size);
  Tensor out({c, size, size});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double acc = 0.0;
        for (const auto& [sy, wy] : wts[y])
          for (const auto& [sx, wx] : wts[x]) acc += wy * wx * image.data()[(k * h + y0 + sy) * w + x0 + sx];
        out.data()[(k * size + y) * size + x] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  return out;
}

namespace {

Tensor to_rgb(const Tensor& img) {
  if (img.dim(0) != 1) return img;
  Tensor rgb({3, img.dim(1), img.dim(2)});
  for (std::size_t c = 0; c < 3; ++c) std::copy(img.data().begin(), img.data().end(), rgb.data().begin() + c * img.numel());
  return rgb;
}

Tensor load_mask_for(const std::filesystem::path& mask_path, const Tensor& img, std::size_t image_size) {
  const Tensor raw = read_mask(mask_path);
  if (raw.dim(0) != img.dim(1) || raw.dim(1) != img.dim(2)) {
    throw DataError(mask_path.string() + ": mask size differs from its image");
  }
  const Tensor r =
      resize_square(Tensor({1, raw.dim(0), raw.dim(1)}, {raw.data().begin(), raw.data().end()}), image_size);
  Tensor mask({image_size, image_size});
  for (std::size_t i = 0; i < mask.numel(); ++i) mask.data()[i] = r.data()[i] >= 0.5f ? 1.0f : 0.0f;
  return mask;
}

// "<id> <image> <mask or ->" per line, paths relative to the directory.
ContextSet load_manifest(const std::filesystem::path& dir, std::size_t n, std::size_t image_size) {
  const auto path = dir / kContextManifest;
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path.string());
  ContextSet set;
  std::string line;
  for (std::size_t lineno = 1; std::getline(f, line) && set.size() < n; ++lineno) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::istringstream in{std::string(t)};
    std::string id, image, mask, extra;
    if (!(in >> id >> image >> mask) || (in >> extra)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected '<id> <image> <mask>'");
    }
    const Tensor img = to_rgb(read_pnm(dir / image));
    set.ids.push_back(id);
    set.masks.push_back(mask == "-" ? Tensor() : load_mask_for(dir / mask, img, image_size));
    set.images.push_back(resize_square(img, image_size));
  }
  if (set.size() < n) {
    throw DataError(path.string() + " lists " + std::to_string(set.size()) + " contexts, need " + std::to_string(n));
  }
  return set;
}

}  // namespace

ContextSet load_contexts(const std::filesystem::path& dir, std::size_t n, std::size_t image_size) {
  namespace fs = std::filesystem;
  if (n < 2) throw ConfigError("load_contexts: need at least 2 contexts, got " + std::to_string(n));
  if (!fs::is_directory(dir)) throw DataError("image directory " + dir.string() + " does not exist");
  if (fs::exists(dir / kContextManifest)) return load_manifest(dir, n, image_size);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    const auto ext = e.path().extension().string();
    if (!e.is_regular_file() || (ext != ".ppm" && ext != ".pgm")) continue;
    if (name.size() > 9 && name.ends_with(".mask.pgm")) continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  ContextSet set;
  for (const auto& f : files) {
    if (set.size() == n) break;
    Tensor img;
    try {
      img = to_rgb(read_pnm(f));
    } catch (const DataError&) {
      continue;
    }
    const fs::path mask_path = f.parent_path() / (f.stem().string() + ".mask.pgm");
    set.masks.push_back(fs::exists(mask_path) ? load_mask_for(mask_path, img, image_size) : Tensor());
    set.ids.push_back(f.stem().string());
    set.images.push_back(resize_square(img, image_size));
  }
  if (set.size() < n) {
    throw DataError("image directory " + dir.string() + " has " + std::to_string(set.size()) +
                    " readable images, need " + std::to_string(n));
  }
  return set;
}

void write_contexts(const std::filesystem::path& dir, const ContextSet& contexts) {
  std::filesystem::create_directories(dir);
  std::string manifest = "# id image mask\n";
  for (std::size_t c = 0; c < contexts.size(); ++c) {
    const std::string& id = contexts.ids[c];
    const std::string image = "context_" + id + ".ppm";
    write_pnm(dir / image, contexts.images[c]);
    std::string mask = "-";
    if (c < contexts.masks.size() && contexts.masks[c].defined()) {
      mask = "mask_" + id + ".pgm";
      write_mask(dir / mask, contexts.masks[c]);
    }
    manifest += id + " " + image + " " + mask + "\n";
  }
  std::ofstream f(dir / kContextManifest, std::ios::binary | std::ios::trunc);
  if (!(f << manifest)) throw DataError("cannot write " + (dir / kContextManifest).string());
}

Tensor salt_pepper(const Tensor& image, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("salt_pepper: noise fraction must lie in [0,1]");
  if (image.rank() != 3) throw ShapeError("salt_pepper: expected [C x H x W], got " + shape_str(image.shape()));
  Tensor out = image.detach();
  const std::size_t c = image.dim(0), hw = image.dim(1) * image.dim(2);
  const auto count = static_cast<std::size_t>(std::floor(p * static_cast<double>(hw) + 1e-9));
  std::vector<std::size_t> idx(hw);
  for (std::size_t i = 0; i < hw; ++i) idx[i] = i;
  auto d = out.data();
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(idx[i], idx[i + rng.below(hw - i)]);
    const float v = rng.below(2) ? 1.0f : 0.0f;
    for (std::size_t k = 0; k < c; ++k) d[k * hw + idx[i]] = v;
  }
  return out;
}

Tensor probe_sample(const ContextSet& contexts, std::size_t context, double noise, std::size_t sample) {
  if (context >= contexts.size()) throw std::out_of_range("probe_sample: context index out of range");
  if (noise == 0.0) return contexts.images[context].detach();
  const auto level = static_cast<std::uint64_t>(std::llround(noise * 1e6));
  Rng rng(derive_seed(derive_seed(contexts.seed, "probe"), context, level, sample));
  return salt_pepper(contexts.images[context], noise, rng);
}

}  // namespace fwvit
