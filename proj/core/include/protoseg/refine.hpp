#pragma once

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/array.hpp"
#include "protoseg/encoder.hpp"
#include "protoseg/optim.hpp"
#include "protoseg/protocore.hpp"

namespace protoseg {

template <typename T>
struct RefineConfig {
    int adapt_steps = 5;
    T adapt_learning_rate = T(1e-4);  // sized for the small built-in encoder
    int fusion_steps = 2;
    T omega_s = T(0.5);
    T omega_q = T(0.5);
    T temperature = T(20);
    // Selection/threshold map kind. The softmaxed map is the default reading;
    // raw cosine selection stays available for the ablation.
    bool select_on_softmax = true;
};

/// Per-class alpha^n = (max + mean)/2 of the class's score plane.
struct ThresholdVector {
    std::vector<double> alpha;
};

template <typename T>
ThresholdVector self_adaptive_threshold(const ScoreMap<T>& map) {
    const std::size_t p_n = map.scores.shape[0];
    const std::size_t hw = map.scores.shape[1] * map.scores.shape[2];
    if (hw == 0) throw std::invalid_argument("self_adaptive_threshold: empty score map");
    ThresholdVector tv;
    for (std::size_t p = 0; p < p_n; ++p) {
        double mx = map.scores.data[p * hw];
        double sum = 0;
        for (std::size_t i = 0; i < hw; ++i) {
            const double v = map.scores.data[p * hw + i];
            mx = std::max(mx, v);
            sum += v;
        }
        tv.alpha.push_back((mx + sum / static_cast<double>(hw)) / 2.0);
    }
    return tv;
}

/// Keep a pixel's predicted label only when its winning-class score exceeds
/// that class's threshold; everything else becomes -1.
template <typename T>
LabelMask hard_select(const LabelMask& pred_mask, const ScoreMap<T>& map,
                      const ThresholdVector& thresholds) {
    if (pred_mask.h != map.scores.shape[1] || pred_mask.w != map.scores.shape[2])
        throw ShapeError("hard_select: mask/map shape mismatch");
    const std::size_t hw = pred_mask.numel();
    LabelMask out(pred_mask.h, pred_mask.w, -1);
    for (std::size_t i = 0; i < hw; ++i) {
        const int n = pred_mask.v[i];
        if (n < 0) continue;
        const double s = static_cast<double>(map.scores.data[static_cast<std::size_t>(n) * hw + i]);
        if (s > thresholds.alpha.at(static_cast<std::size_t>(n))) out.v[i] = n;
    }
    return out;
}

/// Per class: omega_s*p_s + omega_q*p_q; classes whose query prototype is an
/// EMPTY fallback keep p_s unchanged.
template <typename T>
PrototypeSet<T> fuse_prototypes(const PrototypeSet<T>& p_s, const PrototypeSet<T>& p_q, T omega_s,
                                T omega_q) {
    if (p_s.prototypes.size() != p_q.prototypes.size())
        throw std::invalid_argument("fuse_prototypes: class alphabet mismatch");
    PrototypeSet<T> out;
    for (std::size_t c = 0; c < p_s.prototypes.size(); ++c) {
        if (p_s.at(c).vector.shape != p_q.at(c).vector.shape)
            throw ShapeError("fuse_prototypes: channel mismatch");
        Prototype<T> f;
        f.class_id = p_s.at(c).class_id;
        if (p_q.at(c).from_support_fallback) {
            f.vector = p_s.at(c).vector;
            f.from_support_fallback = true;
        } else {
            f.vector = DenseArray<T>(p_s.at(c).vector.shape);
            for (std::size_t i = 0; i < f.vector.numel(); ++i)
                f.vector.data[i] =
                    omega_s * p_s.at(c).vector.data[i] + omega_q * p_q.at(c).vector.data[i];
            f.support_count = p_q.at(c).support_count;
        }
        out.prototypes.push_back(std::move(f));
    }
    return out;
}

/// Elementwise arithmetic mean of two score maps of the same kind.
template <typename T>
ScoreMap<T> fuse_maps(const ScoreMap<T>& m1, const ScoreMap<T>& m2) {
    if (m1.kind != m2.kind) throw std::invalid_argument("fuse_maps: score map kind mismatch");
    if (!m1.scores.same_shape(m2.scores)) throw ShapeError("fuse_maps: shape mismatch");
    ScoreMap<T> out{DenseArray<T>(m1.scores.shape), m1.kind};
    for (std::size_t i = 0; i < out.scores.numel(); ++i)
        out.scores.data[i] = (m1.scores.data[i] + m2.scores.data[i]) / T(2);
    return out;
}

struct RefineTraceStep {
    int step = 0;
    int query = 0;
    std::vector<double> alpha;
    std::vector<std::size_t> selected;
    std::vector<double> prototype_norm;
};

struct RefineTrace {
    std::vector<RefineTraceStep> steps;

    /// One line per (step, query): tab-separated step index, query index,
    /// per-class alpha, per-class selected-pixel counts, per-class fused
    /// prototype norms (comma-joined).
    std::string serialize() const {
        std::ostringstream os;
        for (const auto& s : steps) {
            os << s.step << '\t' << s.query << '\t';
            for (std::size_t i = 0; i < s.alpha.size(); ++i) os << (i ? "," : "") << s.alpha[i];
            os << '\t';
            for (std::size_t i = 0; i < s.selected.size(); ++i) os << (i ? "," : "") << s.selected[i];
            os << '\t';
            for (std::size_t i = 0; i < s.prototype_norm.size(); ++i)
                os << (i ? "," : "") << s.prototype_norm[i];
            os << '\n';
        }
        return os.str();
    }
};

struct AdaptDivergedError : std::runtime_error {
    explicit AdaptDivergedError(int step)
        : std::runtime_error("adaptation loss became non-finite at step " + std::to_string(step)) {}
};

/// Retrain the encoder on the episode's support set (Adam over all
/// parameters). The input parameters are never mutated; adapt_steps = 0
/// returns an identical copy.
template <typename T>
EncoderParams<T> adapt(const EncoderParams<T>& params, const EpisodeData<T>& episode,
                       const RefineConfig<T>& config) {
    EncoderParams<T> p = params;
    if (config.adapt_steps <= 0) return p;

    std::vector<DenseArray<T>*> flat;
    for (auto& k : p.kernels) flat.push_back(&k);
    for (auto& b : p.biases) flat.push_back(&b);
    AdamState<T> state = AdamState<T>::zeros_like(flat);

    const std::size_t n = episode.n_classes();
    for (int step = 0; step < config.adapt_steps; ++step) {
        Graph<T> g;
        std::vector<Node<T>*> ks, bs;
        for (auto& k : p.kernels) ks.push_back(g.leaf(k));
        for (auto& b : p.biases) bs.push_back(g.leaf(b));

        std::vector<std::vector<Node<T>*>> fs(n);
        std::vector<std::vector<LabelMask>> fmasks(n);
        std::vector<std::vector<const LabelMask*>> lmasks(n);
        for (std::size_t c = 0; c < n; ++c)
            for (std::size_t k = 0; k < episode.support_images[c].size(); ++k) {
                Node<T>* f = encoder_forward(g, p.config, ks, bs,
                                             g.constant(episode.support_images[c][k]));
                fs[c].push_back(f);
                fmasks[c].push_back(nearest_resize(episode.support_masks[c][k], f->value.shape[1],
                                                   f->value.shape[2]));
                lmasks[c].push_back(&episode.support_masks[c][k]);
            }
        Node<T>* loss = adapt_loss_node(g, fs, fmasks, lmasks, config.temperature);
        if (!std::isfinite(static_cast<double>(loss->value.data[0]))) throw AdaptDivergedError(step);
        g.backward(loss);

        std::vector<const DenseArray<T>*> grads;
        for (Node<T>* k : ks) grads.push_back(&k->grad);
        for (Node<T>* b : bs) grads.push_back(&b->grad);
        adam_step(flat, grads, state, config.adapt_learning_rate);
    }
    return p;
}

namespace detail {

/// Selection-kind score map for one query feature against a prototype set.
template <typename T>
ScoreMap<T> selection_map(const DenseArray<T>& feature, const PrototypeSet<T>& protos,
                          const RefineConfig<T>& config) {
    ScoreMap<T> raw = cosine_score_map(feature, protos);
    if (!config.select_on_softmax) return raw;
    for (T& v : raw.scores.data) v *= config.temperature;
    softmax_class_inplace(raw.scores);
    raw.kind = ScoreKind::softmaxed;
    return raw;
}

}  // namespace detail

template <typename T>
struct RefineResult {
    std::vector<LabelMask> query_masks;  // at label resolution
    PrototypeSet<T> final_prototypes;
    RefineTrace trace;
    EncoderParams<T> adapted_params;
};

/// Full test-time pipeline: optional adaptation, support prototypes from the
/// (possibly adapted) encoder, then fusion_steps rounds of hard selection,
/// query-prototype pooling and prototype/map fusion. Query features are
/// computed once and reused; only prototypes and working maps change across
/// fusion steps.
template <typename T>
RefineResult<T> refine_and_segment(const EncoderParams<T>& params, const EpisodeData<T>& episode,
                                   const RefineConfig<T>& config) {
    RefineResult<T> out;
    out.adapted_params = adapt(params, episode, config);
    const EncoderParams<T>& p = out.adapted_params;
    const std::size_t n = episode.n_classes();

    std::vector<std::vector<DenseArray<T>>> fs(n);
    std::vector<std::vector<LabelMask>> fmasks(n);
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t k = 0; k < episode.support_images[c].size(); ++k) {
            fs[c].push_back(extract_features_value(p, episode.support_images[c][k]));
            fmasks[c].push_back(nearest_resize(episode.support_masks[c][k], fs[c][k].shape[1],
                                               fs[c][k].shape[2]));
        }
    PrototypeSet<T> p_s = support_prototypes(fs, fmasks);

    std::vector<DenseArray<T>> fq;
    for (const auto& img : episode.query_images) fq.push_back(extract_features_value(p, img));

    std::vector<ScoreMap<T>> working;
    for (const auto& f : fq) working.push_back(detail::selection_map(f, p_s, config));

    PrototypeSet<T> current = p_s;
    for (int step = 1; step <= config.fusion_steps; ++step) {
        // hard selection per query, then query prototypes averaged over T
        std::vector<LabelMask> selected(fq.size());
        std::vector<ThresholdVector> alphas(fq.size());
        for (std::size_t t = 0; t < fq.size(); ++t) {
            LabelMask pred = argmax_mask(working[t].scores);
            alphas[t] = self_adaptive_threshold(working[t]);
            selected[t] = hard_select(pred, working[t], alphas[t]);
        }
        PrototypeSet<T> p_q;
        for (std::size_t c = 0; c <= n; ++c) {
            Prototype<T> proto;
            proto.class_id = static_cast<int>(c);
            DenseArray<T> acc({p_s.channels()});
            std::size_t used = 0, pixels = 0;
            for (std::size_t t = 0; t < fq.size(); ++t) {
                auto m = masked_average_pool(fq[t], selected[t], static_cast<int>(c));
                if (!m) continue;
                for (std::size_t i = 0; i < acc.numel(); ++i) acc.data[i] += m->data[i];
                ++used;
                pixels += mask_count<T>(selected[t], static_cast<int>(c));
            }
            if (used == 0) {
                proto.vector = p_s.at(c).vector;
                proto.from_support_fallback = true;
            } else {
                for (T& v : acc.data) v /= static_cast<T>(used);
                proto.vector = std::move(acc);
                proto.support_count = pixels;
            }
            p_q.prototypes.push_back(std::move(proto));
        }
        current = fuse_prototypes(p_s, p_q, config.omega_s, config.omega_q);

        for (std::size_t t = 0; t < fq.size(); ++t) {
            RefineTraceStep rec;
            rec.step = step;
            rec.query = static_cast<int>(t);
            rec.alpha = alphas[t].alpha;
            for (std::size_t c = 0; c <= n; ++c)
                rec.selected.push_back(mask_count<T>(selected[t], static_cast<int>(c)));
            for (std::size_t c = 0; c <= n; ++c) {
                double s = 0;
                for (const T& v : current.at(c).vector.data) s += static_cast<double>(v) * v;
                rec.prototype_norm.push_back(std::sqrt(s));
            }
            out.trace.steps.push_back(std::move(rec));
        }

        if (step < config.fusion_steps) {
            for (std::size_t t = 0; t < fq.size(); ++t)
                working[t] = fuse_maps(working[t], detail::selection_map(fq[t], current, config));
        }
    }

    out.final_prototypes = current;
    for (std::size_t t = 0; t < fq.size(); ++t) {
        ScoreMap<T> raw = cosine_score_map(fq[t], current);
        auto [mask, sm] = predict_mask(raw, episode.query_masks[t].h, episode.query_masks[t].w,
                                       config.temperature);
        out.query_masks.push_back(std::move(mask));
    }
    return out;
}

}  // namespace protoseg
