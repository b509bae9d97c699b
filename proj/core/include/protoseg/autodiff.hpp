#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "protoseg/array.hpp"

namespace protoseg {

template <typename T>
struct Node {
    DenseArray<T> value;
    DenseArray<T> grad;  // allocated iff requires_grad
    std::vector<Node<T>*> parents;
    std::function<void()> backward_fn;
    bool requires_grad = false;
    bool is_leaf = false;
};

/// Reverse-mode graph over DenseArray values. Nodes are owned by the graph
/// and created in topological order, so the backward sweep is a plain
/// reverse iteration. One graph is confined to one thread; values are
/// immutable once produced.
template <typename T>
class Graph {
public:
    Node<T>* leaf(DenseArray<T> value, bool requires_grad = true) {
        Node<T>* n = alloc(std::move(value), {}, requires_grad);
        n->is_leaf = true;
        return n;
    }

    Node<T>* constant(DenseArray<T> value) { return leaf(std::move(value), false); }

    /// Cross-correlation with holes. input [Cin,H,W], kernel [Cout,Cin,kh,kw].
    Node<T>* conv2d(Node<T>* x, Node<T>* k, int stride, int dilation, int padding) {
        if (x->value.rank() != 3 || k->value.rank() != 4)
            throw ShapeError("conv2d: expected input rank 3 and kernel rank 4");
        const std::size_t cin = x->value.shape[0], h = x->value.shape[1], w = x->value.shape[2];
        const std::size_t cout = k->value.shape[0], kh = k->value.shape[2], kw = k->value.shape[3];
        if (k->value.shape[1] != cin)
            throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                             " != kernel channels " + std::to_string(k->value.shape[1]));
        const long oh = (static_cast<long>(h) + 2L * padding - dilation * (static_cast<long>(kh) - 1) - 1) / stride + 1;
        const long ow = (static_cast<long>(w) + 2L * padding - dilation * (static_cast<long>(kw) - 1) - 1) / stride + 1;
        if (oh < 1 || ow < 1) throw ShapeError("conv2d: output would be empty");

        DenseArray<T> out({cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
        conv_forward(x->value, k->value, out, stride, dilation, padding);

        Node<T>* n = alloc(std::move(out), {x, k}, x->requires_grad || k->requires_grad);
        if (n->requires_grad) {
            n->backward_fn = [n, x, k, stride, dilation, padding]() {
                conv_backward(x->value, k->value, n->grad,
                              x->requires_grad ? &x->grad : nullptr,
                              k->requires_grad ? &k->grad : nullptr, stride, dilation, padding);
            };
        }
        return n;
    }

    /// x [C,H,W] + b [C], broadcast over spatial locations.
    Node<T>* bias_add(Node<T>* x, Node<T>* b) {
        if (x->value.rank() != 3 || b->value.rank() != 1 || b->value.shape[0] != x->value.shape[0])
            throw ShapeError("bias_add: need [C,H,W] and [C]");
        DenseArray<T> out = x->value;
        const std::size_t c_n = x->value.shape[0], hw = x->value.shape[1] * x->value.shape[2];
        for (std::size_t c = 0; c < c_n; ++c)
            for (std::size_t i = 0; i < hw; ++i) out.data[c * hw + i] += b->value.data[c];
        Node<T>* n = alloc(std::move(out), {x, b}, x->requires_grad || b->requires_grad);
        if (n->requires_grad) {
            n->backward_fn = [n, x, b, c_n, hw]() {
                if (x->requires_grad)
                    for (std::size_t i = 0; i < n->grad.numel(); ++i) x->grad.data[i] += n->grad.data[i];
                if (b->requires_grad)
                    for (std::size_t c = 0; c < c_n; ++c)
                        for (std::size_t i = 0; i < hw; ++i) b->grad.data[c] += n->grad.data[c * hw + i];
            };
        }
        return n;
    }

    Node<T>* relu(Node<T>* x) {
        DenseArray<T> out = x->value;
        for (T& v : out.data) v = v > T(0) ? v : T(0);
        Node<T>* n = alloc(std::move(out), {x}, x->requires_grad);
        if (n->requires_grad) {
            // gradient at exactly 0 is defined as 0
            n->backward_fn = [n, x]() {
                for (std::size_t i = 0; i < x->grad.numel(); ++i)
                    if (x->value.data[i] > T(0)) x->grad.data[i] += n->grad.data[i];
            };
        }
        return n;
    }

    Node<T>* add(Node<T>* a, Node<T>* b) { return binary(a, b, Bin::Add); }
    Node<T>* sub(Node<T>* a, Node<T>* b) { return binary(a, b, Bin::Sub); }
    Node<T>* mul(Node<T>* a, Node<T>* b) { return binary(a, b, Bin::Mul); }

    Node<T>* scalar_mul(Node<T>* x, T c) {
        DenseArray<T> out = x->value;
        for (T& v : out.data) v *= c;
        Node<T>* n = alloc(std::move(out), {x}, x->requires_grad);
        if (n->requires_grad) {
            n->backward_fn = [n, x, c]() {
                for (std::size_t i = 0; i < x->grad.numel(); ++i) x->grad.data[i] += c * n->grad.data[i];
            };
        }
        return n;
    }

    Node<T>* scalar_add(Node<T>* x, T c) {
        DenseArray<T> out = x->value;
        for (T& v : out.data) v += c;
        Node<T>* n = alloc(std::move(out), {x}, x->requires_grad);
        if (n->requires_grad) {
            n->backward_fn = [n, x]() {
                for (std::size_t i = 0; i < x->grad.numel(); ++i) x->grad.data[i] += n->grad.data[i];
            };
        }
        return n;
    }

    /// Sum over the given axes (all axes when empty -> scalar [1]).
    Node<T>* sum(Node<T>* x, std::vector<std::size_t> axes = {}) {
        return reduce(x, std::move(axes), false);
    }

    /// Mean over the given axes; empty selection is impossible for dense
    /// shapes (dims are positive), masked means live in masked_mean.
    Node<T>* mean(Node<T>* x, std::vector<std::size_t> axes = {}) {
        return reduce(x, std::move(axes), true);
    }

    /// Max over one axis; subgradient routed to the first argmax.
    Node<T>* max_over_axis(Node<T>* x, std::size_t axis) {
        if (axis >= x->value.rank()) throw ShapeError("max_over_axis: axis out of range");
        std::vector<std::size_t> out_shape;
        for (std::size_t i = 0; i < x->value.rank(); ++i)
            if (i != axis) out_shape.push_back(x->value.shape[i]);
        if (out_shape.empty()) out_shape = {1};
        const std::size_t n_ax = x->value.shape[axis];
        std::size_t inner = 1, outer = 1;
        for (std::size_t i = axis + 1; i < x->value.rank(); ++i) inner *= x->value.shape[i];
        for (std::size_t i = 0; i < axis; ++i) outer *= x->value.shape[i];
        DenseArray<T> out(out_shape);
        auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                std::size_t best = (o * n_ax) * inner + in;
                for (std::size_t a = 1; a < n_ax; ++a) {
                    const std::size_t idx = (o * n_ax + a) * inner + in;
                    if (x->value.data[idx] > x->value.data[best]) best = idx;
                }
                out.data[o * inner + in] = x->value.data[best];
                (*argmax)[o * inner + in] = best;
            }
        Node<T>* n = alloc(std::move(out), {x}, x->requires_grad);
        if (n->requires_grad) {
            n->backward_fn = [n, x, argmax]() {
                for (std::size_t i = 0; i < argmax->size(); ++i)
                    x->grad.data[(*argmax)[i]] += n->grad.data[i];
            };
        }
        return n;
    }

    /// Numerically stable softmax over the class axis of [P,h,w].
    Node<T>* softmax_class(Node<T>* x) {
        if (x->value.rank() != 3) throw ShapeError("softmax_class expects [P,h,w]");
        const std::size_t p_n = x->value.shape[0], hw = x->value.shape[1] * x->value.shape[2];
        DenseArray<T> out(x->value.shape);
        for (std::size_t i = 0; i < hw; ++i) {
            T m = x->value.data[i];
            for (std::size_t p = 1; p < p_n; ++p) m = std::max(m, x->value.data[p * hw + i]);
            T z = T(0);
            for (std::size_t p = 0; p < p_n; ++p) {
                const T e = std::exp(x->value.data[p * hw + i] - m);
                out.data[p * hw + i] = e;
                z += e;
            }
            for (std::size_t p = 0; p < p_n; ++p) out.data[p * hw + i] /= z;
        }
        Node<T>* n = alloc(std::move(out), {x}, x->requires_grad);
        if (n->requires_grad) {
            n->backward_fn = [n, x, p_n, hw]() {
                for (std::size_t i = 0; i < hw; ++i) {
                    T dot = T(0);
                    for (std::size_t p = 0; p < p_n; ++p)
                        dot += n->grad.data[p * hw + i] * n->value.data[p * hw + i];
                    for (std::size_t p = 0; p < p_n; ++p)
                        x->grad.data[p * hw + i] +=
                            n->value.data[p * hw + i] * (n->grad.data[p * hw + i] - dot);
                }
            };
        }
        return n;
    }

    /// Differentiable bilinear upsample, half-pixel centers.
    Node<T>* bilinear_upsample(Node<T>* x, std::size_t out_h, std::size_t out_w) {
        DenseArray<T> out = bilinear_resize(x->value, out_h, out_w);
        Node<T>* n = alloc(std::move(out), {x}, x->requires_grad);
        if (n->requires_grad) {
            const std::size_t c_n = x->value.shape[0];
            const std::size_t in_h = x->value.shape[1], in_w = x->value.shape[2];
            n->backward_fn = [n, x, c_n, in_h, in_w, out_h, out_w]() {
                const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
                const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
                    const std::size_t y0 = static_cast<std::size_t>(fy);
                    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
                    const double wy = fy - static_cast<double>(y0);
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
                        const std::size_t x0 = static_cast<std::size_t>(fx);
                        const std::size_t x1 = std::min(x0 + 1, in_w - 1);
                        const double wx = fx - static_cast<double>(x0);
                        for (std::size_t c = 0; c < c_n; ++c) {
                            const T g = n->grad.at(c, oy, ox);
                            x->grad.at(c, y0, x0) += static_cast<T>((1 - wy) * (1 - wx)) * g;
                            x->grad.at(c, y0, x1) += static_cast<T>((1 - wy) * wx) * g;
                            x->grad.at(c, y1, x0) += static_cast<T>(wy * (1 - wx)) * g;
                            x->grad.at(c, y1, x1) += static_cast<T>(wy * wx) * g;
                        }
                    }
                }
            };
        }
        return n;
    }

    /// Mean of feature columns over all locations (across one or more
    /// feature maps) where the paired mask equals class_id. Returns nullptr
    /// when no location matches (the EMPTY marker).
    Node<T>* masked_mean(const std::vector<Node<T>*>& features,
                         const std::vector<const LabelMask*>& masks, int class_id) {
        if (features.empty() || features.size() != masks.size())
            throw ShapeError("masked_mean: features/masks size mismatch");
        const std::size_t c_n = features[0]->value.shape[0];
        std::size_t count = 0;
        for (std::size_t f = 0; f < features.size(); ++f) {
            const auto& fv = features[f]->value;
            if (fv.rank() != 3 || fv.shape[0] != c_n)
                throw ShapeError("masked_mean: inconsistent feature shapes");
            if (masks[f]->h != fv.shape[1] || masks[f]->w != fv.shape[2])
                throw ShapeError("masked_mean: mask must be at feature resolution");
            for (int m : masks[f]->v)
                if (m == class_id) ++count;
        }
        if (count == 0) return nullptr;

        DenseArray<T> out({c_n});
        for (std::size_t f = 0; f < features.size(); ++f) {
            const auto& fv = features[f]->value;
            const std::size_t hw = fv.shape[1] * fv.shape[2];
            for (std::size_t i = 0; i < hw; ++i) {
                if (masks[f]->v[i] != class_id) continue;
                for (std::size_t c = 0; c < c_n; ++c) out.data[c] += fv.data[c * hw + i];
            }
        }
        for (T& v : out.data) v /= static_cast<T>(count);

        bool rg = false;
        for (Node<T>* f : features) rg = rg || f->requires_grad;
        std::vector<Node<T>*> parents(features.begin(), features.end());
        Node<T>* n = alloc(std::move(out), std::move(parents), rg);
        if (rg) {
            // own a copy of every mask: caller-side masks may not outlive
            // the graph's backward pass
            auto ms = std::make_shared<std::vector<LabelMask>>();
            for (const LabelMask* m : masks) ms->push_back(*m);
            std::vector<Node<T>*> fs = features;
            n->backward_fn = [n, fs, ms, class_id, c_n, count]() {
                for (std::size_t f = 0; f < fs.size(); ++f) {
                    if (!fs[f]->requires_grad) continue;
                    const std::size_t hw = fs[f]->value.shape[1] * fs[f]->value.shape[2];
                    for (std::size_t i = 0; i < hw; ++i) {
                        if ((*ms)[f].v[i] != class_id) continue;
                        for (std::size_t c = 0; c < c_n; ++c)
                            fs[f]->grad.data[c * hw + i] += n->grad.data[c] / static_cast<T>(count);
                    }
                }
            };
        }
        return n;
    }

    /// Per-pixel cosine similarity against each prototype: out[p,y,x] =
    /// <F_{y,x}, proto_p> / (|F_{y,x}||proto_p| + eps).
    Node<T>* cosine_map(Node<T>* feature, const std::vector<Node<T>*>& protos, T eps = T(1e-8)) {
        if (feature->value.rank() != 3) throw ShapeError("cosine_map: feature must be [C,h,w]");
        const std::size_t c_n = feature->value.shape[0];
        const std::size_t hw = feature->value.shape[1] * feature->value.shape[2];
        const std::size_t p_n = protos.size();
        for (Node<T>* p : protos)
            if (p->value.rank() != 1 || p->value.shape[0] != c_n)
                throw ShapeError("cosine_map: prototype channel mismatch");

        DenseArray<T> out({p_n, feature->value.shape[1], feature->value.shape[2]});
        std::vector<T> fnorm(hw), pnorm(p_n);
        for (std::size_t i = 0; i < hw; ++i) {
            T s = T(0);
            for (std::size_t c = 0; c < c_n; ++c) {
                const T v = feature->value.data[c * hw + i];
                s += v * v;
            }
            fnorm[i] = std::sqrt(s);
        }
        for (std::size_t p = 0; p < p_n; ++p) {
            T s = T(0);
            for (const T& v : protos[p]->value.data) s += v * v;
            pnorm[p] = std::sqrt(s);
        }
        for (std::size_t p = 0; p < p_n; ++p)
            for (std::size_t i = 0; i < hw; ++i) {
                T dot = T(0);
                for (std::size_t c = 0; c < c_n; ++c)
                    dot += feature->value.data[c * hw + i] * protos[p]->value.data[c];
                out.data[p * hw + i] = dot / (fnorm[i] * pnorm[p] + eps);
            }

        bool rg = feature->requires_grad;
        for (Node<T>* p : protos) rg = rg || p->requires_grad;
        std::vector<Node<T>*> parents{feature};
        parents.insert(parents.end(), protos.begin(), protos.end());
        Node<T>* n = alloc(std::move(out), std::move(parents), rg);
        if (rg) {
            std::vector<Node<T>*> ps = protos;
            auto fn = std::make_shared<std::vector<T>>(std::move(fnorm));
            auto pn = std::make_shared<std::vector<T>>(std::move(pnorm));
            n->backward_fn = [n, feature, ps, fn, pn, eps, c_n, hw, p_n]() {
                for (std::size_t p = 0; p < p_n; ++p) {
                    const T b = (*pn)[p];
                    for (std::size_t i = 0; i < hw; ++i) {
                        const T g = n->grad.data[p * hw + i];
                        if (g == T(0)) continue;
                        const T a = (*fn)[i];
                        const T denom = a * b + eps;
                        const T s = n->value.data[p * hw + i];
                        if (feature->requires_grad) {
                            const T ffac = (a > T(0)) ? s * b / (a * denom) : T(0);
                            for (std::size_t c = 0; c < c_n; ++c)
                                feature->grad.data[c * hw + i] +=
                                    g * (ps[p]->value.data[c] / denom -
                                         ffac * feature->value.data[c * hw + i]);
                        }
                        if (ps[p]->requires_grad) {
                            const T pfac = (b > T(0)) ? s * a / (b * denom) : T(0);
                            for (std::size_t c = 0; c < c_n; ++c)
                                ps[p]->grad.data[c] +=
                                    g * (feature->value.data[c * hw + i] / denom -
                                         pfac * ps[p]->value.data[c]);
                        }
                    }
                }
            };
        }
        return n;
    }

    /// Mean of -log(prob[target]) over pixels whose target label is a valid
    /// class; -1 and 255 are excluded from the mean.
    Node<T>* masked_nll(Node<T>* prob, const LabelMask& target) {
        if (prob->value.rank() != 3) throw ShapeError("masked_nll: prob must be [P,H,W]");
        const std::size_t p_n = prob->value.shape[0];
        if (target.h != prob->value.shape[1] || target.w != prob->value.shape[2])
            throw ShapeError("masked_nll: target/prob shape mismatch");
        const std::size_t hw = target.numel();
        std::size_t count = 0;
        double acc = 0;
        for (std::size_t i = 0; i < hw; ++i) {
            const int t = target.v[i];
            if (t < 0 || t == kIgnoreLabel) continue;
            if (static_cast<std::size_t>(t) >= p_n)
                throw ShapeError("masked_nll: target label out of class range");
            ++count;
            acc -= std::log(std::max(static_cast<double>(prob->value.data[t * hw + i]), 1e-30));
        }
        if (count == 0) throw std::runtime_error("masked_nll: every pixel is excluded");
        DenseArray<T> out({1});
        out.data[0] = static_cast<T>(acc / static_cast<double>(count));
        Node<T>* n = alloc(std::move(out), {prob}, prob->requires_grad);
        if (n->requires_grad) {
            auto tgt = std::make_shared<LabelMask>(target);
            n->backward_fn = [n, prob, tgt, hw, count]() {
                const T g = n->grad.data[0];
                for (std::size_t i = 0; i < hw; ++i) {
                    const int t = tgt->v[i];
                    if (t < 0 || t == kIgnoreLabel) continue;
                    const std::size_t idx = static_cast<std::size_t>(t) * hw + i;
                    const T p = std::max(prob->value.data[idx], T(1e-30));
                    prob->grad.data[idx] -= g / (p * static_cast<T>(count));
                }
            };
        }
        return n;
    }

    /// Populate gradients of every reachable node by reverse sweep.
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// reset per call.
    void backward(Node<T>* loss) {
        if (loss->value.numel() != 1)
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss->value.shape));
        for (auto& n : nodes_)
            if (n.requires_grad && !n.is_leaf) n.grad.fill(T(0));
        if (!loss->requires_grad) return;
        if (loss->is_leaf) {
            loss->grad.data[0] += T(1);
            return;
        }
        loss->grad.data[0] = T(1);
        bool seen_loss = false;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (&*it == loss) seen_loss = true;
            if (!seen_loss) continue;
            if (it->requires_grad && it->backward_fn) it->backward_fn();
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    enum class Bin { Add, Sub, Mul };

    Node<T>* binary(Node<T>* a, Node<T>* b, Bin op) {
        if (!a->value.same_shape(b->value))
            throw ShapeError("elementwise: shape mismatch " + shape_str(a->value.shape) + " vs " +
                             shape_str(b->value.shape));
        DenseArray<T> out(a->value.shape);
        for (std::size_t i = 0; i < out.numel(); ++i) {
            switch (op) {
                case Bin::Add: out.data[i] = a->value.data[i] + b->value.data[i]; break;
                case Bin::Sub: out.data[i] = a->value.data[i] - b->value.data[i]; break;
                case Bin::Mul: out.data[i] = a->value.data[i] * b->value.data[i]; break;
            }
        }
        Node<T>* n = alloc(std::move(out), {a, b}, a->requires_grad || b->requires_grad);
        if (n->requires_grad) {
            n->backward_fn = [n, a, b, op]() {
                for (std::size_t i = 0; i < n->grad.numel(); ++i) {
                    const T g = n->grad.data[i];
                    switch (op) {
                        case Bin::Add:
                            if (a->requires_grad) a->grad.data[i] += g;
                            if (b->requires_grad) b->grad.data[i] += g;
                            break;
                        case Bin::Sub:
                            if (a->requires_grad) a->grad.data[i] += g;
                            if (b->requires_grad) b->grad.data[i] -= g;
                            break;
                        case Bin::Mul:
                            if (a->requires_grad) a->grad.data[i] += g * b->value.data[i];
                            if (b->requires_grad) b->grad.data[i] += g * a->value.data[i];
                            break;
                    }
                }
            };
        }
        return n;
    }

    Node<T>* reduce(Node<T>* x, std::vector<std::size_t> axes, bool take_mean) {
        const std::size_t r = x->value.rank();
        std::vector<bool> reduced(r, axes.empty());
        for (std::size_t a : axes) {
            if (a >= r) throw ShapeError("reduce: axis out of range");
            reduced[a] = true;
        }
        std::vector<std::size_t> out_shape;
        for (std::size_t i = 0; i < r; ++i)
            if (!reduced[i]) out_shape.push_back(x->value.shape[i]);
        if (out_shape.empty()) out_shape = {1};

        // out index for each input element, via strides over kept axes
        std::vector<std::size_t> in_strides(r, 1), out_stride_of_axis(r, 0);
        for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x->value.shape[i];
        std::size_t os = 1;
        for (std::size_t i = r; i-- > 0;) {
            if (!reduced[i]) {
                out_stride_of_axis[i] = os;
                os *= x->value.shape[i];
            }
        }
        auto out_index = [r, in_strides, out_stride_of_axis, reduced,
                          dims = x->value.shape](std::size_t lin) {
            std::size_t oi = 0;
            for (std::size_t i = 0; i < r; ++i) {
                const std::size_t c = (lin / in_strides[i]) % dims[i];
                if (!reduced[i]) oi += c * out_stride_of_axis[i];
            }
            return oi;
        };

        DenseArray<T> out(out_shape);
        const std::size_t denom = x->value.numel() / out.numel();
        for (std::size_t i = 0; i < x->value.numel(); ++i) out.data[out_index(i)] += x->value.data[i];
        if (take_mean)
            for (T& v : out.data) v /= static_cast<T>(denom);

        Node<T>* n = alloc(std::move(out), {x}, x->requires_grad);
        if (n->requires_grad) {
            n->backward_fn = [n, x, out_index, denom, take_mean]() {
                const T scale = take_mean ? T(1) / static_cast<T>(denom) : T(1);
                for (std::size_t i = 0; i < x->grad.numel(); ++i)
                    x->grad.data[i] += scale * n->grad.data[out_index(i)];
            };
        }
        return n;
    }

    Node<T>* alloc(DenseArray<T> value, std::vector<Node<T>*> parents, bool requires_grad) {
        nodes_.emplace_back();
        Node<T>& n = nodes_.back();
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.requires_grad = requires_grad;
        if (requires_grad) n.grad = DenseArray<T>(n.value.shape);
        return &n;
    }

    static void conv_forward(const DenseArray<T>& in, const DenseArray<T>& k, DenseArray<T>& out,
                             int stride, int dilation, int padding) {
        const long h = static_cast<long>(in.shape[1]), w = static_cast<long>(in.shape[2]);
        const std::size_t cin = in.shape[0], kh = k.shape[2], kw = k.shape[3];
        const std::size_t cout = k.shape[0];
        const long oh = static_cast<long>(out.shape[1]), ow = static_cast<long>(out.shape[2]);
        for (std::size_t co = 0; co < cout; ++co) {
            T* orow0 = out.data.data() + co * oh * ow;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* irow0 = in.data.data() + ci * h * w;
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const T kv = k.at(co, ci, ky, kx);
                        if (kv == T(0)) continue;
                        const long dy = static_cast<long>(ky) * dilation - padding;
                        const long dx = static_cast<long>(kx) * dilation - padding;
                        // oy range with iy = oy*stride + dy in [0, h)
                        long oy0 = dy < 0 ? (-dy + stride - 1) / stride : 0;
                        long oy1 = std::min(oh, dy >= h ? 0 : (h - 1 - dy) / stride + 1);
                        long ox0 = dx < 0 ? (-dx + stride - 1) / stride : 0;
                        long ox1 = std::min(ow, dx >= w ? 0 : (w - 1 - dx) / stride + 1);
                        for (long oy = oy0; oy < oy1; ++oy) {
                            const T* ir = irow0 + (oy * stride + dy) * w + dx;
                            T* orow = orow0 + oy * ow;
                            if (stride == 1) {
                                for (long ox = ox0; ox < ox1; ++ox) orow[ox] += kv * ir[ox];
                            } else {
                                for (long ox = ox0; ox < ox1; ++ox) orow[ox] += kv * ir[ox * stride];
                            }
                        }
                    }
            }
        }
    }

    static void conv_backward(const DenseArray<T>& in, const DenseArray<T>& k,
                              const DenseArray<T>& gout, DenseArray<T>* gin, DenseArray<T>* gk,
                              int stride, int dilation, int padding) {
        const long h = static_cast<long>(in.shape[1]), w = static_cast<long>(in.shape[2]);
        const std::size_t cin = in.shape[0], kh = k.shape[2], kw = k.shape[3];
        const std::size_t cout = k.shape[0];
        const long oh = static_cast<long>(gout.shape[1]), ow = static_cast<long>(gout.shape[2]);
        for (std::size_t co = 0; co < cout; ++co) {
            const T* grow0 = gout.data.data() + co * oh * ow;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* irow0 = in.data.data() + ci * h * w;
                T* girow0 = gin ? gin->data.data() + ci * h * w : nullptr;
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const T kv = k.at(co, ci, ky, kx);
                        const long dy = static_cast<long>(ky) * dilation - padding;
                        const long dx = static_cast<long>(kx) * dilation - padding;
                        long oy0 = dy < 0 ? (-dy + stride - 1) / stride : 0;
                        long oy1 = std::min(oh, dy >= h ? 0 : (h - 1 - dy) / stride + 1);
                        long ox0 = dx < 0 ? (-dx + stride - 1) / stride : 0;
                        long ox1 = std::min(ow, dx >= w ? 0 : (w - 1 - dx) / stride + 1);
                        T gw = T(0);
                        for (long oy = oy0; oy < oy1; ++oy) {
                            const long ibase = (oy * stride + dy) * w + dx;
                            const T* grow = grow0 + oy * ow;
                            const T* ir = irow0 + ibase;
                            for (long ox = ox0; ox < ox1; ++ox) {
                                const T g = grow[ox];
                                gw += g * ir[ox * stride];
                                if (girow0) girow0[ibase + ox * stride] += kv * g;
                            }
                        }
                        if (gk) gk->at(co, ci, ky, kx) += gw;
                    }
            }
        }
    }

    std::deque<Node<T>> nodes_;
};

}  // namespace protoseg
