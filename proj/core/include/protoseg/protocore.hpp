#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/array.hpp"
#include "protoseg/autodiff.hpp"
#include "protoseg/encoder.hpp"

namespace protoseg {

struct EmptySupportClassError : std::runtime_error {
    explicit EmptySupportClassError(int class_id)
        : std::runtime_error("empty support class " + std::to_string(class_id) +
                             ": no labeled pixels across all shots") {}
};

template <typename T>
struct Prototype {
    int class_id = 0;
    DenseArray<T> vector;           // [C]
    std::size_t support_count = 0;  // pixels pooled, diagnostic
    bool from_support_fallback = false;
};

/// One prototype per class id 0..N (0 = background).
template <typename T>
struct PrototypeSet {
    std::vector<Prototype<T>> prototypes;

    std::size_t n_classes() const { return prototypes.size() - 1; }
    std::size_t channels() const { return prototypes.at(0).vector.shape[0]; }
    const Prototype<T>& at(std::size_t cls) const { return prototypes.at(cls); }
    Prototype<T>& at(std::size_t cls) { return prototypes.at(cls); }
};

enum class ScoreKind { cosine_raw, softmaxed };

template <typename T>
struct ScoreMap {
    DenseArray<T> scores;  // [N+1, h, w]
    ScoreKind kind = ScoreKind::cosine_raw;

    std::size_t n_classes() const { return scores.shape[0] - 1; }
};

/// Episode payload at the tensor level: N x K support pairs plus T query
/// pairs, masks remapped to 0..N at label resolution.
template <typename T>
struct EpisodeData {
    std::vector<std::vector<DenseArray<T>>> support_images;  // [N][K]
    std::vector<std::vector<LabelMask>> support_masks;       // [N][K]
    std::vector<DenseArray<T>> query_images;                 // [T]
    std::vector<LabelMask> query_masks;                      // [T]

    std::size_t n_classes() const { return support_images.size(); }
    std::size_t k_shots() const { return support_images.at(0).size(); }
    std::size_t n_queries() const { return query_images.size(); }
};

// ---------------------------------------------------------------------------
// graph-level builders (shared by training, adaptation and inference)
// ---------------------------------------------------------------------------

template <typename T>
Node<T>* average_nodes(Graph<T>& g, const std::vector<Node<T>*>& nodes) {
    Node<T>* acc = nodes.at(0);
    for (std::size_t i = 1; i < nodes.size(); ++i) acc = g.add(acc, nodes[i]);
    if (nodes.size() > 1) acc = g.scalar_mul(acc, T(1) / static_cast<T>(nodes.size()));
    return acc;
}

/// Per-class prototypes from support features. Foreground class n averages
/// the per-shot pooled vectors of its own K shots, skipping shots with no
/// labeled pixels; the background prototype pools every non-foreground
/// location across all N*K support images.
template <typename T>
std::vector<Node<T>*> support_prototype_nodes(Graph<T>& g,
                                              const std::vector<std::vector<Node<T>*>>& features,
                                              const std::vector<std::vector<LabelMask>>& masks) {
    const std::size_t n = features.size();
    std::vector<Node<T>*> protos(n + 1, nullptr);

    std::vector<Node<T>*> all_features;
    std::vector<const LabelMask*> all_masks;
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t k = 0; k < features[c].size(); ++k) {
            all_features.push_back(features[c][k]);
            all_masks.push_back(&masks[c][k]);
        }

    protos[0] = g.masked_mean(all_features, all_masks, 0);
    if (!protos[0]) throw EmptySupportClassError(0);

    for (std::size_t c = 1; c <= n; ++c) {
        std::vector<Node<T>*> shots;
        for (std::size_t k = 0; k < features[c - 1].size(); ++k) {
            Node<T>* m = g.masked_mean({features[c - 1][k]}, {&masks[c - 1][k]},
                                       static_cast<int>(c));
            if (m) shots.push_back(m);
        }
        if (shots.empty()) throw EmptySupportClassError(static_cast<int>(c));
        protos[c] = average_nodes(g, shots);
    }
    return protos;
}

/// Raw cosine scores upsampled to label resolution, temperature-scaled and
/// softmaxed. Returns the softmaxed node; the raw cosine node (at feature
/// resolution) is returned through out_cosine when non-null.
template <typename T>
Node<T>* score_softmax_node(Graph<T>& g, Node<T>* feature, const std::vector<Node<T>*>& protos,
                            T temperature, std::size_t out_h, std::size_t out_w,
                            Node<T>** out_cosine = nullptr) {
    Node<T>* cos = g.cosine_map(feature, protos);
    if (out_cosine) *out_cosine = cos;
    Node<T>* up = g.bilinear_upsample(cos, out_h, out_w);
    return g.softmax_class(g.scalar_mul(up, temperature));
}

/// Mean cross entropy over pixels not labeled -1/255.
template <typename T>
Node<T>* cross_entropy_loss(Graph<T>& g, Node<T>* softmaxed, const LabelMask& target) {
    return g.masked_nll(softmaxed, target);
}

/// Argmax over the class axis; ties broken by lowest class id.
template <typename T>
LabelMask argmax_mask(const DenseArray<T>& scores) {
    const std::size_t p_n = scores.shape[0], h = scores.shape[1], w = scores.shape[2];
    LabelMask out(h, w);
    const std::size_t hw = h * w;
    for (std::size_t i = 0; i < hw; ++i) {
        std::size_t best = 0;
        for (std::size_t p = 1; p < p_n; ++p)
            if (scores.data[p * hw + i] > scores.data[best * hw + i]) best = p;
        out.v[i] = static_cast<int>(best);
    }
    return out;
}

/// Support-side objective: segment the support images with their own
/// prototypes and average the cross entropies.
template <typename T>
Node<T>* adapt_loss_node(Graph<T>& g, const std::vector<std::vector<Node<T>*>>& support_features,
                         const std::vector<std::vector<LabelMask>>& feature_masks,
                         const std::vector<std::vector<const LabelMask*>>& label_masks,
                         T temperature) {
    std::vector<Node<T>*> protos = support_prototype_nodes(g, support_features, feature_masks);
    std::vector<Node<T>*> ces;
    for (std::size_t c = 0; c < support_features.size(); ++c)
        for (std::size_t k = 0; k < support_features[c].size(); ++k) {
            const LabelMask& tgt = *label_masks[c][k];
            Node<T>* sm = score_softmax_node(g, support_features[c][k], protos, temperature,
                                             tgt.h, tgt.w);
            ces.push_back(cross_entropy_loss(g, sm, tgt));
        }
    return average_nodes(g, ces);
}

/// Full bidirectional training objective: support prototypes score the
/// queries, query prototypes (pooled under the predicted query masks) score
/// the supports, and both cross-entropy terms are summed.
template <typename T>
Node<T>* bidirectional_loss_node(Graph<T>& g, const EncoderConfig& config,
                                 const std::vector<Node<T>*>& kernels,
                                 const std::vector<Node<T>*>& biases, const EpisodeData<T>& ep,
                                 T temperature) {
    const std::size_t n = ep.n_classes();

    std::vector<std::vector<Node<T>*>> fs(n);
    std::vector<std::vector<LabelMask>> fmasks(n);
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t k = 0; k < ep.support_images[c].size(); ++k) {
            Node<T>* f = encoder_forward(g, config, kernels, biases,
                                         g.constant(ep.support_images[c][k]));
            fs[c].push_back(f);
            fmasks[c].push_back(
                nearest_resize(ep.support_masks[c][k], f->value.shape[1], f->value.shape[2]));
        }
    std::vector<Node<T>*> protos = support_prototype_nodes(g, fs, fmasks);

    // query direction
    std::vector<Node<T>*> query_features;
    std::vector<LabelMask> predicted_feature_masks;
    std::vector<Node<T>*> query_ces;
    for (std::size_t t = 0; t < ep.n_queries(); ++t) {
        Node<T>* fq = encoder_forward(g, config, kernels, biases, g.constant(ep.query_images[t]));
        query_features.push_back(fq);
        Node<T>* cos = nullptr;
        Node<T>* sm = score_softmax_node(g, fq, protos, temperature, ep.query_masks[t].h,
                                         ep.query_masks[t].w, &cos);
        query_ces.push_back(cross_entropy_loss(g, sm, ep.query_masks[t]));
        predicted_feature_masks.push_back(argmax_mask(cos->value));
    }
    Node<T>* query_term = average_nodes(g, query_ces);

    // support direction: query prototypes from the predicted query masks,
    // averaged over the T queries; empty classes fall back to the support
    // prototype so the support-side scoring stays defined
    std::vector<Node<T>*> qprotos(n + 1, nullptr);
    for (std::size_t c = 0; c <= n; ++c) {
        std::vector<Node<T>*> per_query;
        for (std::size_t t = 0; t < query_features.size(); ++t) {
            Node<T>* m = g.masked_mean({query_features[t]}, {&predicted_feature_masks[t]},
                                       static_cast<int>(c));
            if (m) per_query.push_back(m);
        }
        qprotos[c] = per_query.empty() ? protos[c] : average_nodes(g, per_query);
    }
    std::vector<Node<T>*> support_ces;
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t k = 0; k < fs[c].size(); ++k) {
            const LabelMask& tgt = ep.support_masks[c][k];
            Node<T>* sm = score_softmax_node(g, fs[c][k], qprotos, temperature, tgt.h, tgt.w);
            support_ces.push_back(cross_entropy_loss(g, sm, tgt));
        }
    Node<T>* support_term = average_nodes(g, support_ces);

    return g.add(support_term, query_term);
}

// ---------------------------------------------------------------------------
// value-level API (inference path)
// ---------------------------------------------------------------------------

/// Mean feature column where mask == class_id; nullopt is the EMPTY marker.
template <typename T>
std::optional<DenseArray<T>> masked_average_pool(const DenseArray<T>& feature,
                                                 const LabelMask& mask, int class_id) {
    Graph<T> g;
    Node<T>* f = g.constant(feature);
    Node<T>* m = g.masked_mean({f}, {&mask}, class_id);
    if (!m) return std::nullopt;
    return m->value;
}

template <typename T>
std::size_t mask_count(const LabelMask& m, int class_id) {
    std::size_t c = 0;
    for (int v : m.v)
        if (v == class_id) ++c;
    return c;
}

/// Value-level support prototypes; masks must already be at feature
/// resolution.
template <typename T>
PrototypeSet<T> support_prototypes(const std::vector<std::vector<DenseArray<T>>>& features,
                                   const std::vector<std::vector<LabelMask>>& masks) {
    Graph<T> g;
    std::vector<std::vector<Node<T>*>> fs(features.size());
    for (std::size_t c = 0; c < features.size(); ++c)
        for (const auto& f : features[c]) fs[c].push_back(g.constant(f));
    std::vector<Node<T>*> nodes = support_prototype_nodes(g, fs, masks);
    PrototypeSet<T> out;
    for (std::size_t c = 0; c < nodes.size(); ++c) {
        Prototype<T> p;
        p.class_id = static_cast<int>(c);
        p.vector = nodes[c]->value;
        if (c == 0) {
            for (std::size_t i = 0; i < features.size(); ++i)
                for (std::size_t k = 0; k < masks[i].size(); ++k)
                    p.support_count += mask_count<T>(masks[i][k], 0);
        } else {
            for (std::size_t k = 0; k < masks[c - 1].size(); ++k)
                p.support_count += mask_count<T>(masks[c - 1][k], static_cast<int>(c));
        }
        out.prototypes.push_back(std::move(p));
    }
    return out;
}

template <typename T>
ScoreMap<T> cosine_score_map(const DenseArray<T>& feature, const PrototypeSet<T>& protos) {
    Graph<T> g;
    Node<T>* f = g.constant(feature);
    std::vector<Node<T>*> ps;
    for (const auto& p : protos.prototypes) ps.push_back(g.constant(p.vector));
    return ScoreMap<T>{g.cosine_map(f, ps)->value, ScoreKind::cosine_raw};
}

template <typename T>
void softmax_class_inplace(DenseArray<T>& scores) {
    const std::size_t p_n = scores.shape[0], hw = scores.shape[1] * scores.shape[2];
    for (std::size_t i = 0; i < hw; ++i) {
        T m = scores.data[i];
        for (std::size_t p = 1; p < p_n; ++p) m = std::max(m, scores.data[p * hw + i]);
        T z = T(0);
        for (std::size_t p = 0; p < p_n; ++p) {
            scores.data[p * hw + i] = std::exp(scores.data[p * hw + i] - m);
            z += scores.data[p * hw + i];
        }
        for (std::size_t p = 0; p < p_n; ++p) scores.data[p * hw + i] /= z;
    }
}

/// Upsample raw cosine scores, temperature-scale, softmax, argmax.
template <typename T>
std::pair<LabelMask, ScoreMap<T>> predict_mask(const ScoreMap<T>& raw, std::size_t out_h,
                                               std::size_t out_w, T temperature) {
    if (raw.kind != ScoreKind::cosine_raw)
        throw std::invalid_argument("predict_mask expects a raw cosine score map");
    if (temperature <= T(0)) throw std::invalid_argument("predict_mask: temperature must be > 0");
    DenseArray<T> up = bilinear_resize(raw.scores, out_h, out_w);
    for (T& v : up.data) v *= temperature;
    softmax_class_inplace(up);
    LabelMask labels = argmax_mask(up);
    return {std::move(labels), ScoreMap<T>{std::move(up), ScoreKind::softmaxed}};
}

/// Value-level cross entropy (mean over non-ignored pixels).
template <typename T>
double cross_entropy_value(const ScoreMap<T>& softmaxed, const LabelMask& target) {
    if (softmaxed.kind != ScoreKind::softmaxed)
        throw std::invalid_argument("cross_entropy_value expects a softmaxed map");
    Graph<T> g;
    Node<T>* p = g.constant(softmaxed.scores);
    return static_cast<double>(g.masked_nll(p, target)->value.data[0]);
}

}  // namespace protoseg
