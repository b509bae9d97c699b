#pragma once

#include <algorithm>
#include <utility>
#include <vector>

#include "protoseg/protocore.hpp"
#include "protoseg/rng.hpp"

namespace protoseg::testutil {

template <typename T>
DenseArray<T> random_array(std::vector<std::size_t> shape, Rng& rng, double lo = -1,
                           double hi = 1) {
    DenseArray<T> a(std::move(shape));
    for (T& v : a.data) v = static_cast<T>(rng.uniform(lo, hi));
    return a;
}

/// Small episode with clearly separated class regions: class n occupies a
/// bright block, everything else is dim background. The confident margins
/// keep argmax decisions away from ties, which finite differences need.
template <typename T>
EpisodeData<T> structured_episode(int n_way, int k_shot, int n_query, std::size_t hw,
                                  std::uint64_t seed) {
    Rng rng(seed);
    EpisodeData<T> ep;
    ep.support_images.resize(n_way);
    ep.support_masks.resize(n_way);
    auto make_pair = [&](int fg_class) {
        DenseArray<T> img({3, hw, hw});
        LabelMask mask(hw, hw, 0);
        for (T& v : img.data) v = static_cast<T>(0.1 + 0.02 * rng.uniform());
        const std::size_t half = hw / 2;
        // one blob per episode class, the fg_class blob largest
        for (int c = 1; c <= n_way; ++c) {
            const std::size_t y0 = (c == fg_class) ? 0 : half;
            const std::size_t x0 = (c % 2 == 1) ? 0 : half;
            const std::size_t extent = (c == fg_class) ? half + 1 : half / 2 + 1;
            for (std::size_t y = y0; y < std::min(hw, y0 + extent); ++y)
                for (std::size_t x = x0; x < std::min(hw, x0 + extent); ++x) {
                    mask.at(y, x) = c;
                    img.at(std::size_t{0}, y, x) = static_cast<T>(0.2 * c + 0.02 * rng.uniform());
                    img.at(std::size_t{1}, y, x) = static_cast<T>(0.9 - 0.2 * c);
                    img.at(std::size_t{2}, y, x) = static_cast<T>(c % 2);
                }
        }
        return std::make_pair(std::move(img), std::move(mask));
    };
    for (int c = 0; c < n_way; ++c)
        for (int k = 0; k < k_shot; ++k) {
            auto [img, mask] = make_pair(c + 1);
            ep.support_images[c].push_back(std::move(img));
            ep.support_masks[c].push_back(std::move(mask));
        }
    for (int t = 0; t < n_query; ++t) {
        auto [img, mask] = make_pair(1 + t % n_way);
        ep.query_images.push_back(std::move(img));
        ep.query_masks.push_back(std::move(mask));
    }
    return ep;
}

}  // namespace protoseg::testutil
