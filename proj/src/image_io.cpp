#include "maunet/image_io.hpp"

#include "maunet/errors.hpp"

#include <png.h>

#include <cctype>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

namespace maunet {

namespace {

struct NetpbmHeader {
    std::string magic;
    int width = 0;
    int height = 0;
    int maxval = 0;
};

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

NetpbmHeader read_header(std::istream& in, const std::filesystem::path& path) {
    NetpbmHeader h;
    h.magic = next_token(in);
    try {
        h.width = std::stoi(next_token(in));
        h.height = std::stoi(next_token(in));
        h.maxval = std::stoi(next_token(in));
    } catch (const std::exception&) {
        throw FormatError("malformed netpbm header in " + path.string());
    }
    if (h.width <= 0 || h.height <= 0 || h.maxval != 255) {
        throw FormatError("unsupported netpbm geometry or maxval in " + path.string());
    }
    return h;
}

std::vector<std::uint8_t> read_netpbm(const std::filesystem::path& path, const char* magic, int channels,
                                      int& width, int& height) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const NetpbmHeader h = read_header(in, path);
    if (h.magic != magic) throw FormatError(path.string() + ": expected " + magic + ", found '" + h.magic + "'");
    std::vector<std::uint8_t> px(static_cast<std::size_t>(h.width) * h.height * channels);
    in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (in.gcount() != static_cast<std::streamsize>(px.size())) throw FormatError("truncated pixel data in " + path.string());
    width = h.width;
    height = h.height;
    return px;
}

void write_netpbm(const std::filesystem::path& path, const char* magic, int width, int height,
                  const std::vector<std::uint8_t>& px) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << magic << "\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

// libpng's default handlers print to stderr; errors become FormatError instead.
void png_error_quiet(png_structp png, png_const_charp) { png_longjmp(png, 1); }
void png_warning_quiet(png_structp, png_const_charp) {}

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};

// Decodes any PNG to 8-bit RGB or gray via libpng transforms.
std::vector<std::uint8_t> read_png(const std::filesystem::path& path, bool gray, int& width, int& height) {
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw FormatError(path.string() + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_quiet, png_warning_quiet);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("libpng initialisation failed");
    }
    std::vector<std::uint8_t> px;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("corrupt PNG data in " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    const bool src_gray = (color & PNG_COLOR_MASK_COLOR) == 0;
    if (gray && !src_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    if (!gray && src_gray) png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    const std::size_t channels = gray ? 1 : 3;
    if (rowbytes != static_cast<std::size_t>(width) * channels) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("unexpected PNG layout in " + path.string());
    }
    px.resize(rowbytes * static_cast<std::size_t>(height));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = px.data() + rowbytes * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return px;
}

std::string lower_ext(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return ext;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
    GrayImage img;
    img.pixels = read_netpbm(path, "P5", 1, img.width, img.height);
    return img;
}

RgbImage read_ppm(const std::filesystem::path& path) {
    RgbImage img;
    img.pixels = read_netpbm(path, "P6", 3, img.width, img.height);
    return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
    write_netpbm(path, "P5", img.width, img.height, img.pixels);
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
    write_netpbm(path, "P6", img.width, img.height, img.pixels);
}

RgbImage read_png_rgb(const std::filesystem::path& path) {
    RgbImage img;
    img.pixels = read_png(path, false, img.width, img.height);
    return img;
}

GrayImage read_png_gray(const std::filesystem::path& path) {
    GrayImage img;
    img.pixels = read_png(path, true, img.width, img.height);
    return img;
}

RgbImage read_rgb(const std::filesystem::path& path) {
    const std::string ext = lower_ext(path);
    if (ext == ".png") return read_png_rgb(path);
    if (ext == ".ppm") return read_ppm(path);
    if (ext == ".pgm") {
        GrayImage g = read_pgm(path);
        RgbImage out{g.width, g.height, std::vector<std::uint8_t>(g.pixels.size() * 3)};
        for (std::size_t i = 0; i < g.pixels.size(); ++i) {
            out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = g.pixels[i];
        }
        return out;
    }
    throw FormatError("unsupported image extension: " + path.string());
}

GrayImage read_gray(const std::filesystem::path& path) {
    const std::string ext = lower_ext(path);
    if (ext == ".png") return read_png_gray(path);
    if (ext == ".pgm") return read_pgm(path);
    if (ext == ".ppm") {
        RgbImage c = read_ppm(path);
        GrayImage out{c.width, c.height, std::vector<std::uint8_t>(c.pixels.size() / 3)};
        for (std::size_t i = 0; i < out.pixels.size(); ++i) {
            const int sum = c.pixels[3 * i] + c.pixels[3 * i + 1] + c.pixels[3 * i + 2];
            out.pixels[i] = static_cast<std::uint8_t>((sum + 1) / 3);
        }
        return out;
    }
    throw FormatError("unsupported mask extension: " + path.string());
}

}  // namespace maunet
