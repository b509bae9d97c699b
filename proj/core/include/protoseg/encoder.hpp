#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/array.hpp"
#include "protoseg/autodiff.hpp"
#include "protoseg/rng.hpp"

namespace protoseg {

/// Small fully-convolutional feature extractor. Later blocks keep stride 1
/// and widen the receptive field with dilation; the final block has no
/// trailing nonlinearity.
struct EncoderConfig {
    std::size_t input_channels = 3;
    std::vector<std::size_t> widths = {16, 32, 64};
    std::vector<int> strides = {2, 1, 1};
    std::vector<int> dilations = {1, 2, 4};
    std::size_t kernel_size = 3;

    std::size_t blocks() const { return widths.size(); }
    std::size_t feature_channels() const { return widths.back(); }

    void validate() const {
        if (widths.empty() || widths.size() != strides.size() || widths.size() != dilations.size())
            throw std::invalid_argument("EncoderConfig: widths/strides/dilations length mismatch");
        if (kernel_size % 2 == 0) throw std::invalid_argument("EncoderConfig: kernel size must be odd");
        for (std::size_t i = 1; i < dilations.size(); ++i)
            if (dilations[i] < dilations[i - 1])
                throw std::invalid_argument("EncoderConfig: dilations must be nondecreasing");
    }
};

template <typename T>
struct EncoderParams {
    EncoderConfig config;
    std::vector<DenseArray<T>> kernels;  // [C_out, C_in, k, k] per block
    std::vector<DenseArray<T>> biases;   // [C_out] per block

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& k : kernels) n += k.numel();
        for (const auto& b : biases) n += b.numel();
        return n;
    }

    bool same_values(const EncoderParams& o) const {
        if (kernels.size() != o.kernels.size()) return false;
        for (std::size_t i = 0; i < kernels.size(); ++i)
            if (kernels[i].data != o.kernels[i].data || biases[i].data != o.biases[i].data)
                return false;
        return true;
    }
};

/// Kaiming fan-in init for kernels, zero biases. Deterministic given seed.
template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    EncoderParams<T> p;
    p.config = config;
    Rng rng(hash_combine(seed, 0x656e636fULL));
    std::size_t cin = config.input_channels;
    const std::size_t k = config.kernel_size;
    for (std::size_t b = 0; b < config.blocks(); ++b) {
        const std::size_t cout = config.widths[b];
        DenseArray<T> kernel({cout, cin, k, k});
        const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
        for (T& v : kernel.data) v = static_cast<T>(rng.normal() * std_dev);
        p.kernels.push_back(std::move(kernel));
        p.biases.emplace_back(std::vector<std::size_t>{cout});
        cin = cout;
    }
    return p;
}

/// Forward pass as graph construction; param_kernels/param_biases are the
/// graph leaves so gradients land on them after backward.
template <typename T>
Node<T>* encoder_forward(Graph<T>& g, const EncoderConfig& config,
                         const std::vector<Node<T>*>& param_kernels,
                         const std::vector<Node<T>*>& param_biases, Node<T>* image) {
    Node<T>* x = image;
    for (std::size_t b = 0; b < config.blocks(); ++b) {
        const int d = config.dilations[b];
        const int pad = d * (static_cast<int>(config.kernel_size) - 1) / 2;
        x = g.conv2d(x, param_kernels[b], config.strides[b], d, pad);
        x = g.bias_add(x, param_biases[b]);
        if (b + 1 < config.blocks()) x = g.relu(x);
    }
    return x;
}

/// Convenience inference/training entry. Leaves for the parameters are
/// created inside the supplied graph and returned through out_kernel_leaves
/// when the caller needs the gradients.
template <typename T>
Node<T>* extract_features(Graph<T>& g, const EncoderParams<T>& params, const DenseArray<T>& image,
                          bool track_gradients, std::vector<Node<T>*>* out_kernel_leaves = nullptr,
                          std::vector<Node<T>*>* out_bias_leaves = nullptr) {
    if (image.rank() != 3 || image.shape[0] != params.config.input_channels)
        throw ShapeError("extract_features: image must be [" +
                         std::to_string(params.config.input_channels) + ",H,W]");
    if (image.shape[1] < 8 || image.shape[2] < 8)
        throw std::invalid_argument("extract_features: image smaller than 8x8");
    if (!image.all_finite()) throw std::invalid_argument("extract_features: non-finite image values");
    std::vector<Node<T>*> ks, bs;
    for (std::size_t b = 0; b < params.config.blocks(); ++b) {
        ks.push_back(g.leaf(params.kernels[b], track_gradients));
        bs.push_back(g.leaf(params.biases[b], track_gradients));
    }
    if (out_kernel_leaves) *out_kernel_leaves = ks;
    if (out_bias_leaves) *out_bias_leaves = bs;
    return encoder_forward(g, params.config, ks, bs, g.constant(image));
}

/// One-shot feature extraction without keeping a graph around.
template <typename T>
DenseArray<T> extract_features_value(const EncoderParams<T>& params, const DenseArray<T>& image) {
    Graph<T> g;
    return extract_features(g, params, image, false)->value;
}

}  // namespace protoseg
