#pragma once

// Binary PPM (P6) / PGM (P5) with maxval 255. Pixel values map to [0,1] as
// v / 255; writing rounds to the nearest level, so a read -> write round
// trip reproduces the file byte for byte.

#include <filesystem>

#include "fwvit/tensor.hpp"

namespace fwvit {

// [3 x H x W] for P6, [1 x H x W] for P5. Throws DataError.
Tensor read_pnm(const std::filesystem::path& path);

// Writes P6 for 3-channel and P5 for 1-channel tensors; values are clamped
// to [0,1].
void write_pnm(const std::filesystem::path& path, const Tensor& image);

// Binary mask [H x W] with entries in {0,1}, stored as PGM {0,255}.
Tensor read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const Tensor& mask);

}  // namespace fwvit
