#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace protoseg {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major real array. Shapes are explicit everywhere; there is no
/// broadcasting beyond the scalar ops in the graph layer.
template <typename T>
struct DenseArray {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    DenseArray() = default;
    explicit DenseArray(std::vector<std::size_t> s, T fill = T(0))
        : shape(std::move(s)), data(shape_numel(shape), fill) {}
    DenseArray(std::vector<std::size_t> s, std::vector<T> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("DenseArray: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape[i]; }

    T& at(std::size_t i) { return data[i]; }
    const T& at(std::size_t i) const { return data[i]; }

    // rank-2 (h,w)
    T& at(std::size_t y, std::size_t x) { return data[y * shape[1] + x]; }
    const T& at(std::size_t y, std::size_t x) const { return data[y * shape[1] + x]; }

    // rank-3 (c,h,w)
    T& at(std::size_t c, std::size_t y, std::size_t x) {
        return data[(c * shape[1] + y) * shape[2] + x];
    }
    const T& at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * shape[1] + y) * shape[2] + x];
    }

    // rank-4 (o,i,h,w)
    T& at(std::size_t o, std::size_t i, std::size_t y, std::size_t x) {
        return data[((o * shape[1] + i) * shape[2] + y) * shape[3] + x];
    }
    const T& at(std::size_t o, std::size_t i, std::size_t y, std::size_t x) const {
        return data[((o * shape[1] + i) * shape[2] + y) * shape[3] + x];
    }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const DenseArray& other) const { return shape == other.shape; }
};

template <typename To, typename From>
DenseArray<To> convert(const DenseArray<From>& a) {
    DenseArray<To> out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out.data[i] = static_cast<To>(a.data[i]);
    return out;
}

/// Integer label image. Values: -1 unselected/ignore, 0 background,
/// 1..N episode foreground; 255 reserved for ignore in external masks.
struct LabelMask {
    std::size_t h = 0, w = 0;
    std::vector<int> v;

    LabelMask() = default;
    LabelMask(std::size_t h_, std::size_t w_, int fill = 0) : h(h_), w(w_), v(h_ * w_, fill) {}

    int& at(std::size_t y, std::size_t x) { return v[y * w + x]; }
    int at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
    std::size_t numel() const { return v.size(); }

    bool operator==(const LabelMask& o) const { return h == o.h && w == o.w && v == o.v; }
};

constexpr int kIgnoreLabel = 255;

/// Bilinear resample with half-pixel centers (align-corners=false).
template <typename T>
DenseArray<T> bilinear_resize(const DenseArray<T>& in, std::size_t out_h, std::size_t out_w) {
    if (in.rank() != 3) throw ShapeError("bilinear_resize expects rank-3 [C,H,W]");
    const std::size_t c_n = in.shape[0], in_h = in.shape[1], in_w = in.shape[2];
    DenseArray<T> out({c_n, out_h, out_w});
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(in_h - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, in_h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(in_w - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, in_w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < c_n; ++c) {
                const double v00 = in.at(c, y0, x0), v01 = in.at(c, y0, x1);
                const double v10 = in.at(c, y1, x0), v11 = in.at(c, y1, x1);
                out.at(c, oy, ox) = static_cast<T>((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                                   wy * ((1 - wx) * v10 + wx * v11));
            }
        }
    }
    return out;
}

/// Nearest-neighbor resample; preserves the label alphabet exactly.
inline LabelMask nearest_resize(const LabelMask& in, std::size_t out_h, std::size_t out_w) {
    LabelMask out(out_h, out_w);
    const double sy = static_cast<double>(in.h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in.w) / static_cast<double>(out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        std::size_t y = static_cast<std::size_t>(std::clamp(
            std::round(fy), 0.0, static_cast<double>(in.h - 1)));
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            std::size_t x = static_cast<std::size_t>(std::clamp(
                std::round(fx), 0.0, static_cast<double>(in.w - 1)));
            out.at(oy, ox) = in.at(y, x);
        }
    }
    return out;
}

template <typename T>
DenseArray<T> hflip(const DenseArray<T>& in) {
    if (in.rank() != 3) throw ShapeError("hflip expects rank-3 [C,H,W]");
    DenseArray<T> out(in.shape);
    for (std::size_t c = 0; c < in.shape[0]; ++c)
        for (std::size_t y = 0; y < in.shape[1]; ++y)
            for (std::size_t x = 0; x < in.shape[2]; ++x)
                out.at(c, y, x) = in.at(c, y, in.shape[2] - 1 - x);
    return out;
}

inline LabelMask hflip(const LabelMask& in) {
    LabelMask out(in.h, in.w);
    for (std::size_t y = 0; y < in.h; ++y)
        for (std::size_t x = 0; x < in.w; ++x) out.at(y, x) = in.at(y, in.w - 1 - x);
    return out;
}

}  // namespace protoseg
