#pragma once

// Global image contexts, their figure masks, and salt-and-pepper probes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fwvit/rng.hpp"
#include "fwvit/tensor.hpp"

namespace fwvit {

struct ContextSet {
  std::vector<std::string> ids;
  std::vector<Tensor> images;  // [3 x S x S], values in [0,1]
  // [S x S] in {0,1}; empty tensors when no mask is known.
  std::vector<Tensor> masks;
  std::vector<double> noise_levels{0.1, 0.3, 0.5};
  std::size_t samples_per_context = 10;
  std::uint64_t seed = 0;

  std::size_t size() const { return images.size(); }
  bool has_masks() const;
  // Throws DataError if images disagree in shape or leave [0,1].
  void validate() const;
};

struct SyntheticImage {
  Tensor image;  // [3 x S x S]
  Tensor mask;   // [S x S]
};

// One structurally varied image: a smooth color field with a textured
// figure. The figure covers between 10% and 60% of the image.
SyntheticImage synthesize_image(Rng& rng, std::size_t image_size);

// n synthetic contexts; any two differ by a mean absolute pixel difference
// above 0.1. Requires n >= 2.
ContextSet gen_contexts(std::uint64_t seed, std::size_t n, std::size_t image_size);

inline constexpr const char* kContextManifest = "contexts.txt";

// With a contexts.txt manifest ("<id> <image> <mask or ->" per line) the
// first n listed contexts are loaded. Otherwise: the first n readable PPM/PGM files of `dir` in name order, center-cropped
// and area-resized to image_size. A "<stem>.mask.pgm" next to an image is
// taken as its figure mask. Throws DataError if fewer than n are readable.
ContextSet load_contexts(const std::filesystem::path& dir, std::size_t n, std::size_t image_size);

// context_<id>.ppm, mask_<id>.pgm and the contexts.txt manifest.
void write_contexts(const std::filesystem::path& dir, const ContextSet& contexts);

// n distractor images for reconstruction pretraining, from a stream disjoint
// from the context stream.
std::vector<Tensor> gen_distractors(std::uint64_t seed, std::size_t n, std::size_t image_size);

// Overwrites exactly floor(p * H * W) pixel locations, chosen without
// replacement, with all-channel 0 or 1 (probability 1/2 each).
Tensor salt_pepper(const Tensor& image, double p, Rng& rng);

// The evaluation sample for (context, noise level, sample index). Noise 0
// returns the clean image. Drawn from a stream keyed only by these indices
// and the set's seed, so the probe set never changes between epochs.
Tensor probe_sample(const ContextSet& contexts, std::size_t context, double noise, std::size_t sample);

// Center crop to square and area-average resize.
Tensor resize_square(const Tensor& image, std::size_t size);

}  // namespace fwvit
