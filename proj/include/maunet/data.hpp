#pragma once

#include "maunet/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace maunet {

struct Sample {
    Tensor image;  // [1, 3, H, W] in [0, 1]
    Tensor mask;   // [1, 1, H, W] in {0, 1}
    std::string id;
};

/// Images with 1-3 irregular elliptical blobs, brighter and redder than a
/// tissue-coloured background by a seeded contrast, plus Gaussian noise. Sample i depends only on (seed, i). Foreground
/// fraction is kept within [0.02, 0.5]. Throws ConfigError when count < 1
/// or resolution < 16.
std::vector<Sample> generate_synthetic(int count, int resolution, std::uint64_t seed);

/// Pairs images/<stem>.(png|ppm) with masks/<stem>.(png|pgm), resizes to
/// resolution x resolution (bilinear for images, nearest for masks) and
/// binarizes masks at 128. Result is sorted by stem.
/// Throws IoError, PairingError, FormatError.
std::vector<Sample> load_directory(const std::filesystem::path& images_dir, const std::filesystem::path& masks_dir,
                                   int resolution);

/// Writes samples in the directory layout load_directory reads.
void export_dataset(std::span<const Sample> samples, const std::filesystem::path& root);

/// Seeded shuffle, then the first round(train_frac * n) go to train.
/// Throws DomainError unless 0 < train_frac < 1.
std::pair<std::vector<Sample>, std::vector<Sample>> split(std::vector<Sample> samples, double train_frac,
                                                          std::uint64_t seed);

/// Stacks the chosen samples into [B,3,H,W] images and [B,1,H,W] masks.
std::pair<Tensor, Tensor> make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices);

/// Bilinear resize of an 8-bit interleaved image (half-pixel centres).
Tensor resize_bilinear(const std::uint8_t* pixels, int width, int height, int channels, int out_size);
/// Nearest-neighbour resize of a gray mask, thresholded at 128.
Tensor resize_mask_nearest(const std::uint8_t* pixels, int width, int height, int out_size);

}  // namespace maunet
