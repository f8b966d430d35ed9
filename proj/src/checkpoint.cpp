#include "maunet/errors.hpp"
#include "maunet/model.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace maunet {

namespace {

constexpr std::array<char, 6> kMagic{'M', 'A', 'U', 'N', '1', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::vector<char>& buf, T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
}

class Reader {
public:
    Reader(const std::vector<char>& buf, const std::filesystem::path& path) : buf_(buf), path_(path) {}

    template <typename T>
    T get() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }

    const char* take(std::size_t n) {
        if (buf_.size() - pos_ < n) throw FormatError("truncated checkpoint " + path_.string());
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    const std::vector<char>& buf_;
    const std::filesystem::path& path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    std::vector<char> buf(kMagic.begin(), kMagic.end());
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size()));
    uLong crc = crc32(0L, Z_NULL, 0);
    for (const auto& [name, t] : params) {
        put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        put<std::uint8_t>(buf, 4);
        const Shape s = t.shape();
        for (int e : {s.n, s.c, s.h, s.w}) put<std::uint32_t>(buf, static_cast<std::uint32_t>(e));
        const auto* payload = reinterpret_cast<const char*>(t.data().data());
        const std::size_t bytes = t.size() * sizeof(double);
        buf.insert(buf.end(), payload, payload + bytes);
        crc = crc32(crc, reinterpret_cast<const Bytef*>(payload), static_cast<uInt>(bytes));
    }
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(crc));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(buf, path);

    if (std::memcmp(r.take(kMagic.size()), kMagic.data(), kMagic.size()) != 0) {
        throw FormatError("bad checkpoint magic in " + path.string());
    }
    const auto count = r.get<std::uint32_t>();
    ModelParams params;
    uLong crc = crc32(0L, Z_NULL, 0);
    for (std::uint32_t e = 0; e < count; ++e) {
        const auto len = r.get<std::uint16_t>();
        std::string name(r.take(len), len);
        const auto rank = r.get<std::uint8_t>();
        if (rank != 4) throw FormatError("unsupported tensor rank " + std::to_string(rank) + " for '" + name + "'");
        std::array<int, 4> ext{};
        for (int& x : ext) {
            const auto v = r.get<std::uint32_t>();
            if (v == 0 || v > (1u << 24)) throw FormatError("implausible extent for '" + name + "'");
            x = static_cast<int>(v);
        }
        Tensor t(Shape{ext[0], ext[1], ext[2], ext[3]});
        const std::size_t bytes = t.size() * sizeof(double);
        const char* payload = r.take(bytes);
        std::memcpy(t.data().data(), payload, bytes);
        crc = crc32(crc, reinterpret_cast<const Bytef*>(payload), static_cast<uInt>(bytes));
        if (params.contains(name)) throw FormatError("duplicate entry '" + name + "'");
        params.insert(std::move(name), std::move(t));
    }
    const auto stored = r.get<std::uint32_t>();
    if (r.remaining() != 0) throw FormatError("trailing bytes in checkpoint " + path.string());
    if (stored != static_cast<std::uint32_t>(crc)) throw FormatError("checkpoint CRC mismatch in " + path.string());
    return params;
}

ModelParams load_checkpoint(const std::filesystem::path& path, const NetworkPlan& plan) {
    ModelParams params = load_checkpoint(path);
    const auto expected = param_shapes(plan);
    if (expected.size() != params.size()) {
        throw FormatError("checkpoint has " + std::to_string(params.size()) + " tensors, plan '" + plan.name +
                          "' needs " + std::to_string(expected.size()));
    }
    for (const auto& [name, shape] : expected) {
        if (!params.contains(name)) throw FormatError("checkpoint lacks parameter '" + name + "'");
        if (!(params.at(name).shape() == shape)) {
            throw FormatError("parameter '" + name + "' has shape " + to_string(params.at(name).shape()) +
                              ", plan expects " + to_string(shape));
        }
    }
    for (const auto& [name, t] : params) params.at(name).check_finite(name);
    return params;
}

}  // namespace maunet
