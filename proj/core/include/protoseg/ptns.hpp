#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "protoseg/array.hpp"

namespace protoseg {

/// PTNS binary tensor format: magic "PTNS", version byte 1, u8 rank,
/// rank x u32 little-endian dims, then row-major 32-bit little-endian floats.
struct PtnsError : std::runtime_error {
    PtnsError(const std::string& msg, std::size_t offset)
        : std::runtime_error(msg + " at offset " + std::to_string(offset)), offset(offset) {}
    std::size_t offset;
};

void write_ptns(std::ostream& out, const DenseArray<float>& a);
DenseArray<float> read_ptns(std::istream& in, std::size_t base_offset = 0);

void write_ptns_file(const std::filesystem::path& path, const DenseArray<float>& a);
DenseArray<float> read_ptns_file(const std::filesystem::path& path);

/// Container: ASCII header "PTNC <count>\n", then per entry a line
/// "<name> <byte_length>\n" followed by one PTNS blob.
using PtnsEntries = std::vector<std::pair<std::string, DenseArray<float>>>;

void write_ptns_container(const std::filesystem::path& path, const PtnsEntries& entries);
PtnsEntries read_ptns_container(const std::filesystem::path& path);

}  // namespace protoseg
