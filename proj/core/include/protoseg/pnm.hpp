#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "protoseg/array.hpp"

namespace protoseg {

struct PnmError : std::runtime_error {
    explicit PnmError(const std::string& msg) : std::runtime_error(msg) {}
};

/// 8-bit binary PPM (P6); values scaled to [0,1] floats, [3,H,W].
DenseArray<float> read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const DenseArray<float>& image);

/// 8-bit binary PGM (P5); pixel value = class id, 255 = ignore. Negative
/// labels are written as 255.
LabelMask read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelMask& mask);

}  // namespace protoseg
