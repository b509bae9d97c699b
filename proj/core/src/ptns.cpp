#include "protoseg/ptns.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace protoseg {

namespace {

void put_u32le(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& in, std::size_t at) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) throw PtnsError("unexpected end of file", at);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32le(std::ostream& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32le(out, v);
}

}  // namespace

void write_ptns(std::ostream& out, const DenseArray<float>& a) {
    out.write("PTNS", 4);
    out.put(1);  // version
    out.put(static_cast<char>(a.rank()));
    for (std::size_t d : a.shape) put_u32le(out, static_cast<std::uint32_t>(d));
    for (float v : a.data) put_f32le(out, v);
}

DenseArray<float> read_ptns(std::istream& in, std::size_t base) {
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "PTNS", 4) != 0)
        throw PtnsError("bad PTNS magic", base);
    const int version = in.get();
    if (version != 1) throw PtnsError("unsupported PTNS version " + std::to_string(version), base + 4);
    const int rank = in.get();
    if (rank < 1) throw PtnsError("bad PTNS rank", base + 5);
    std::vector<std::size_t> shape;
    std::size_t off = base + 6;
    for (int i = 0; i < rank; ++i, off += 4) shape.push_back(get_u32le(in, off));
    DenseArray<float> a(shape);
    for (std::size_t i = 0; i < a.numel(); ++i, off += 4) {
        const std::uint32_t bits = get_u32le(in, off);
        std::memcpy(&a.data[i], &bits, 4);
    }
    return a;
}

void write_ptns_file(const std::filesystem::path& path, const DenseArray<float>& a) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    write_ptns(out, a);
}

DenseArray<float> read_ptns_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path.string() + ": cannot open");
    return read_ptns(in, 0);
}

void write_ptns_container(const std::filesystem::path& path, const PtnsEntries& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    out << "PTNC " << entries.size() << "\n";
    for (const auto& [name, arr] : entries) {
        std::ostringstream blob(std::ios::binary);
        write_ptns(blob, arr);
        const std::string bytes = blob.str();
        out << name << " " << bytes.size() << "\n";
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
}

PtnsEntries read_ptns_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path.string() + ": cannot open");
    std::string magic;
    std::size_t count = 0;
    in >> magic >> count;
    if (magic != "PTNC") throw PtnsError("bad PTNC header", 0);
    in.get();  // newline
    PtnsEntries entries;
    for (std::size_t i = 0; i < count; ++i) {
        std::string name;
        std::size_t len = 0;
        if (!(in >> name >> len))
            throw PtnsError("truncated container manifest", static_cast<std::size_t>(in.tellg()));
        in.get();
        const std::size_t at = static_cast<std::size_t>(in.tellg());
        entries.emplace_back(name, read_ptns(in, at));
    }
    return entries;
}

}  // namespace protoseg
