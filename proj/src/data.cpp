#include "maunet/data.hpp"

#include "maunet/errors.hpp"
#include "maunet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

namespace maunet {

namespace {

struct Blob {
    double cx, cy, rx, ry, angle;
    std::array<double, 3> amp;
    std::array<double, 3> phase;
};

Blob random_blob(std::mt19937_64& rng, int res) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Blob b{};
    b.cx = (0.2 + 0.6 * u(rng)) * res;
    b.cy = (0.2 + 0.6 * u(rng)) * res;
    b.rx = (0.08 + 0.17 * u(rng)) * res;
    b.ry = (0.08 + 0.17 * u(rng)) * res;
    b.angle = std::numbers::pi * u(rng);
    for (std::size_t k = 0; k < 3; ++k) {
        b.amp[k] = 0.08 * u(rng);
        b.phase[k] = 2.0 * std::numbers::pi * u(rng);
    }
    return b;
}

// Inside test in the blob's rotated frame; the boundary radius is
// modulated by low-order sinusoids of the polar angle.
bool inside(const Blob& b, double x, double y) {
    const double dx = x - b.cx;
    const double dy = y - b.cy;
    const double c = std::cos(b.angle);
    const double s = std::sin(b.angle);
    const double u = (c * dx + s * dy) / b.rx;
    const double v = (-s * dx + c * dy) / b.ry;
    const double r = std::hypot(u, v);
    const double phi = std::atan2(v, u);
    double boundary = 1.0;
    for (std::size_t k = 0; k < 3; ++k) boundary += b.amp[k] * std::sin(static_cast<double>(k + 2) * phi + b.phase[k]);
    return r <= boundary;
}

std::string sample_id(int i) {
    std::string s = std::to_string(i);
    return "syn" + std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

std::map<std::string, std::filesystem::path> files_by_stem(const std::filesystem::path& dir,
                                                           std::initializer_list<const char*> exts) {
    if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::map<std::string, std::filesystem::path> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (std::find_if(exts.begin(), exts.end(), [&ext](const char* e) { return ext == e; }) == exts.end()) continue;
        const std::string stem = entry.path().stem().string();
        if (!out.emplace(stem, entry.path()).second) throw PairingError("stem '" + stem + "' appears twice in " + dir.string());
    }
    return out;
}

}  // namespace

std::vector<Sample> generate_synthetic(int count, int resolution, std::uint64_t seed) {
    if (count < 1) throw ConfigError("synthetic sample count must be >= 1");
    if (resolution < 16) throw ConfigError("synthetic resolution must be >= 16");
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    const int hw = resolution * resolution;
    for (int i = 0; i < count; ++i) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(i)};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> u(0.0, 1.0);

        Tensor mask({1, 1, resolution, resolution});
        for (;;) {
            std::uniform_int_distribution<int> n_blobs(1, 3);
            std::vector<Blob> blobs;
            for (int b = n_blobs(rng); b > 0; --b) blobs.push_back(random_blob(rng, resolution));
            int on = 0;
            for (int y = 0; y < resolution; ++y)
                for (int x = 0; x < resolution; ++x) {
                    bool hit = false;
                    for (const Blob& b : blobs) hit = hit || inside(b, x + 0.5, y + 0.5);
                    mask.at(0, 0, y, x) = hit ? 1.0 : 0.0;
                    on += hit;
                }
            const double frac = static_cast<double>(on) / hw;
            if (frac >= 0.02 && frac <= 0.5) break;
        }

        // Tissue-like background; the lesion is brighter and redder by a
        // seeded contrast, with per-channel jitter.
        std::array<double, 3> bg{}, fg{};
        constexpr std::array<double, 3> bg_lo{0.30, 0.15, 0.10};
        constexpr std::array<double, 3> direction{1.0, 0.6, 0.3};
        const double contrast = 0.2 + 0.15 * u(rng);
        for (std::size_t c = 0; c < 3; ++c) {
            bg[c] = bg_lo[c] + 0.3 * u(rng);
            fg[c] = std::min(1.0, bg[c] + contrast * direction[c] + 0.05 * (u(rng) - 0.5));
        }
        // Gentle illumination gradient across the frame.
        const double gx = 0.1 * (u(rng) - 0.5);
        const double gy = 0.1 * (u(rng) - 0.5);
        std::normal_distribution<double> noise(0.0, 0.03);
        Tensor image({1, 3, resolution, resolution});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < resolution; ++y)
                for (int x = 0; x < resolution; ++x) {
                    const double base = mask.at(0, 0, y, x) > 0.5 ? fg[static_cast<std::size_t>(c)] : bg[static_cast<std::size_t>(c)];
                    const double shade = gx * (2.0 * x / resolution - 1.0) + gy * (2.0 * y / resolution - 1.0);
                    image.at(0, c, y, x) = std::clamp(base + shade + noise(rng), 0.0, 1.0);
                }
        out.push_back({std::move(image), std::move(mask), sample_id(i)});
    }
    return out;
}

Tensor resize_bilinear(const std::uint8_t* pixels, int width, int height, int channels, int out_size) {
    Tensor out({1, channels, out_size, out_size});
    const double sx = static_cast<double>(width) / out_size;
    const double sy = static_cast<double>(height) / out_size;
    auto px = [&](int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c] / 255.0; };
    for (int y = 0; y < out_size; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_size; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < channels; ++c) {
                const double top = (1 - wx) * px(x0, y0, c) + wx * px(x1, y0, c);
                const double bot = (1 - wx) * px(x0, y1, c) + wx * px(x1, y1, c);
                out.at(0, c, y, x) = (1 - wy) * top + wy * bot;
            }
        }
    }
    return out;
}

Tensor resize_mask_nearest(const std::uint8_t* pixels, int width, int height, int out_size) {
    Tensor out({1, 1, out_size, out_size});
    for (int y = 0; y < out_size; ++y) {
        const int sy = std::min(height - 1, static_cast<int>((y + 0.5) * height / out_size));
        for (int x = 0; x < out_size; ++x) {
            const int sx = std::min(width - 1, static_cast<int>((x + 0.5) * width / out_size));
            out.at(0, 0, y, x) = pixels[static_cast<std::size_t>(sy) * width + sx] >= 128 ? 1.0 : 0.0;
        }
    }
    return out;
}

std::vector<Sample> load_directory(const std::filesystem::path& images_dir, const std::filesystem::path& masks_dir,
                                   int resolution) {
    if (resolution < 1) throw ConfigError("resolution must be positive");
    const auto images = files_by_stem(images_dir, {".png", ".ppm"});
    const auto masks = files_by_stem(masks_dir, {".png", ".pgm"});
    for (const auto& [stem, path] : images)
        if (!masks.count(stem)) throw PairingError("image '" + stem + "' has no mask partner");
    for (const auto& [stem, path] : masks)
        if (!images.count(stem)) throw PairingError("mask '" + stem + "' has no image partner");

    std::vector<Sample> out;
    for (const auto& [stem, image_path] : images) {
        const RgbImage img = read_rgb(image_path);
        const GrayImage msk = read_gray(masks.at(stem));
        out.push_back({resize_bilinear(img.pixels.data(), img.width, img.height, 3, resolution),
                       resize_mask_nearest(msk.pixels.data(), msk.width, msk.height, resolution), stem});
    }
    return out;
}

void export_dataset(std::span<const Sample> samples, const std::filesystem::path& root) {
    std::filesystem::create_directories(root / "images");
    std::filesystem::create_directories(root / "masks");
    for (const Sample& s : samples) {
        const Shape sh = s.image.shape();
        RgbImage img{sh.w, sh.h, std::vector<std::uint8_t>(static_cast<std::size_t>(sh.w) * sh.h * 3)};
        GrayImage msk{sh.w, sh.h, std::vector<std::uint8_t>(static_cast<std::size_t>(sh.w) * sh.h)};
        for (int y = 0; y < sh.h; ++y)
            for (int x = 0; x < sh.w; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * sh.w + x;
                for (int c = 0; c < 3; ++c) {
                    img.pixels[3 * p + c] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image.at(0, c, y, x), 0.0, 1.0) * 255.0));
                }
                msk.pixels[p] = s.mask.at(0, 0, y, x) > 0.5 ? 255 : 0;
            }
        write_ppm(root / "images" / (s.id + ".ppm"), img);
        write_pgm(root / "masks" / (s.id + ".pgm"), msk);
    }
}

std::pair<std::vector<Sample>, std::vector<Sample>> split(std::vector<Sample> samples, double train_frac,
                                                          std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0)) throw DomainError("train fraction must lie in (0, 1)");
    std::mt19937_64 rng(seed);
    std::shuffle(samples.begin(), samples.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(train_frac * static_cast<double>(samples.size())));
    std::vector<Sample> val(std::make_move_iterator(samples.begin() + static_cast<std::ptrdiff_t>(n_train)),
                            std::make_move_iterator(samples.end()));
    samples.resize(n_train);
    return {std::move(samples), std::move(val)};
}

std::pair<Tensor, Tensor> make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices) {
    if (indices.empty()) throw EmptyError("empty batch");
    std::vector<Tensor> images, masks;
    for (std::size_t i : indices) {
        if (i >= samples.size()) throw IndexError("sample index out of range");
        images.push_back(samples[i].image);
        masks.push_back(samples[i].mask);
    }
    return {stack_batch(images), stack_batch(masks)};
}

}  // namespace maunet
