#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "protoseg/array.hpp"

namespace protoseg {

/// Dataset-level IoU: intersection/union pixel counts accumulated over all
/// queries of all episodes. Mergeable, so parallel workers can keep private
/// accumulators.
class IoUAccumulator {
public:
    void accumulate(const LabelMask& predicted, const LabelMask& truth) {
        if (predicted.h != truth.h || predicted.w != truth.w)
            throw ShapeError("IoUAccumulator: mask shape mismatch");
        for (std::size_t i = 0; i < truth.numel(); ++i) {
            const int t = truth.v[i];
            if (t < 0 || t == kIgnoreLabel) continue;  // ignored pixels count nowhere
            const int p = predicted.v[i];
            if (p == t) {
                counts_[t].intersection++;
                counts_[t].uni++;
            } else {
                counts_[t].uni++;
                if (p >= 0 && p != kIgnoreLabel) counts_[p].uni++;
            }
        }
    }

    void merge(const IoUAccumulator& other) {
        for (const auto& [cls, c] : other.counts_) {
            counts_[cls].intersection += c.intersection;
            counts_[cls].uni += c.uni;
        }
    }

    /// Unweighted mean over foreground classes with nonzero union.
    double mean_iou() const {
        double sum = 0;
        std::size_t n = 0;
        for (const auto& [cls, c] : counts_) {
            if (cls < 1 || c.uni == 0) continue;
            sum += static_cast<double>(c.intersection) / static_cast<double>(c.uni);
            ++n;
        }
        if (n == 0) throw std::runtime_error("mean_iou: no foreground class with nonzero union");
        return sum / static_cast<double>(n);
    }

    /// Two-class mean over {background, all-foreground-merged}; classes with
    /// zero union are excluded. Feed binarized masks into a dedicated
    /// accumulator for this metric.
    double binary_iou() const {
        double sum = 0;
        std::size_t n = 0;
        for (const auto& [cls, c] : counts_) {
            if (c.uni == 0) continue;
            sum += static_cast<double>(c.intersection) / static_cast<double>(c.uni);
            ++n;
        }
        if (n == 0) throw std::runtime_error("binary_iou: empty accumulator");
        return sum / static_cast<double>(n);
    }

    double class_iou(int cls) const {
        auto it = counts_.find(cls);
        if (it == counts_.end() || it->second.uni == 0)
            throw std::runtime_error("class_iou: class " + std::to_string(cls) + " has no pixels");
        return static_cast<double>(it->second.intersection) / static_cast<double>(it->second.uni);
    }

    bool has_class(int cls) const {
        auto it = counts_.find(cls);
        return it != counts_.end() && it->second.uni > 0;
    }

private:
    struct Counts {
        std::uint64_t intersection = 0;
        std::uint64_t uni = 0;
    };
    std::map<int, Counts> counts_;
};

/// All foreground labels merged to 1; ignore labels preserved.
inline LabelMask binarize(const LabelMask& m) {
    LabelMask out(m.h, m.w);
    for (std::size_t i = 0; i < m.numel(); ++i) {
        const int v = m.v[i];
        out.v[i] = (v < 0 || v == kIgnoreLabel) ? v : (v > 0 ? 1 : 0);
    }
    return out;
}

struct RunStats {
    double mean = 0;
    double stddev = 0;  // sample standard deviation
};

/// Mean and sample stddev over per-run metric values.
inline RunStats multi_run_report(const std::vector<double>& per_run) {
    if (per_run.empty()) throw std::invalid_argument("multi_run_report: no runs");
    RunStats s;
    for (double v : per_run) s.mean += v;
    s.mean /= static_cast<double>(per_run.size());
    if (per_run.size() > 1) {
        double acc = 0;
        for (double v : per_run) acc += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(acc / static_cast<double>(per_run.size() - 1));
    }
    return s;
}

}  // namespace protoseg
