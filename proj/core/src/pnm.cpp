#include "protoseg/pnm.hpp"

#include <fstream>
#include <vector>

namespace protoseg {

namespace {

// Skips whitespace and '#' comments between header tokens.
std::size_t read_header_int(std::istream& in, const std::string& path) {
    int c = in.get();
    while (c == '#' || std::isspace(c)) {
        if (c == '#') {
            while (c != '\n' && c != EOF) c = in.get();
        }
        c = in.get();
    }
    std::size_t v = 0;
    bool any = false;
    while (c >= '0' && c <= '9') {
        v = v * 10 + static_cast<std::size_t>(c - '0');
        any = true;
        c = in.get();
    }
    if (!any) throw PnmError(path + ": malformed header");
    return v;
}

std::vector<unsigned char> read_payload(std::istream& in, std::size_t n, const std::string& path) {
    std::vector<unsigned char> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw PnmError(path + ": truncated pixel data, expected " + std::to_string(n) + " bytes");
    return buf;
}

}  // namespace

DenseArray<float> read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PnmError(path.string() + ": cannot open");
    char m0 = static_cast<char>(in.get()), m1 = static_cast<char>(in.get());
    if (m0 != 'P' || m1 != '6') throw PnmError(path.string() + ": not a P6 PPM");
    const std::size_t w = read_header_int(in, path.string());
    const std::size_t h = read_header_int(in, path.string());
    const std::size_t maxval = read_header_int(in, path.string());
    if (maxval != 255) throw PnmError(path.string() + ": only 8-bit PPM supported");
    auto buf = read_payload(in, w * h * 3, path.string());
    DenseArray<float> img({3, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<float>(buf[(y * w + x) * 3 + c]) / 255.0f;
    return img;
}

void write_ppm(const std::filesystem::path& path, const DenseArray<float>& image) {
    if (image.rank() != 3 || image.shape[0] != 3)
        throw PnmError("write_ppm: image must be [3,H,W]");
    const std::size_t h = image.shape[1], w = image.shape[2];
    std::ofstream out(path, std::ios::binary);
    if (!out) throw PnmError(path.string() + ": cannot open for writing");
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(w * h * 3);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                float v = image.at(c, y, x);
                v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
                buf[(y * w + x) * 3 + c] = static_cast<unsigned char>(v * 255.0f + 0.5f);
            }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

LabelMask read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PnmError(path.string() + ": cannot open");
    char m0 = static_cast<char>(in.get()), m1 = static_cast<char>(in.get());
    if (m0 != 'P' || m1 != '5') throw PnmError(path.string() + ": not a P5 PGM");
    const std::size_t w = read_header_int(in, path.string());
    const std::size_t h = read_header_int(in, path.string());
    const std::size_t maxval = read_header_int(in, path.string());
    if (maxval != 255) throw PnmError(path.string() + ": only 8-bit PGM supported");
    auto buf = read_payload(in, w * h, path.string());
    LabelMask mask(h, w);
    for (std::size_t i = 0; i < buf.size(); ++i) mask.v[i] = static_cast<int>(buf[i]);
    return mask;
}

void write_pgm(const std::filesystem::path& path, const LabelMask& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw PnmError(path.string() + ": cannot open for writing");
    out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
    std::vector<unsigned char> buf(mask.numel());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const int v = mask.v[i];
        buf[i] = static_cast<unsigned char>(v < 0 || v > 255 ? kIgnoreLabel : v);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace protoseg
