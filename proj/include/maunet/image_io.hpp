#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace maunet {

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major, interleaved RGB
};

// Binary netpbm (P5/P6, maxval 255) natively; PNG through libpng.
// Readers throw IoError when the file cannot be opened and FormatError
// on malformed content.
GrayImage read_pgm(const std::filesystem::path& path);
RgbImage read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
void write_ppm(const std::filesystem::path& path, const RgbImage& img);

RgbImage read_png_rgb(const std::filesystem::path& path);
GrayImage read_png_gray(const std::filesystem::path& path);

/// Dispatch on extension (.png / .ppm / .pgm). Gray inputs are replicated
/// to RGB; RGB inputs are averaged to gray.
RgbImage read_rgb(const std::filesystem::path& path);
GrayImage read_gray(const std::filesystem::path& path);

}  // namespace maunet
