#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <utility>

#include "ptl/tensor.hpp"

namespace ptl {

// Handle into a Graph's node list.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Define-by-run tape. Forward values are computed eagerly as ops are
// recorded; backward() replays the tape in reverse, summing gradient
// contributions from every consumer.
template <typename S>
class Graph {
public:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        std::function<void(Graph&, int)> backprop;  // empty for leaves
        bool requires_grad = true;
        bool released = false;
    };

    Var leaf(Tensor<S> v, bool requires_grad = true) {
        return emplace(std::move(v), requires_grad, nullptr);
    }
    Var constant(Tensor<S> v) { return leaf(std::move(v), false); }

    Var emplace(Tensor<S> v, bool requires_grad, std::function<void(Graph&, int)> bp) {
        nodes_.push_back(Node{std::move(v), Tensor<S>{}, std::move(bp), requires_grad, false});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<S>& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
    const Tensor<S>& grad(Var v) const {
        const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
        if (n.grad.shape.empty() && !n.value.shape.empty())
            throw std::logic_error("graph: gradient not populated; call backward() first");
        return n.grad;
    }
    bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }

    int size() const { return static_cast<int>(nodes_.size()); }

    void clear() { nodes_.clear(); }

    // Reverse sweep from a scalar root. Nodes below stop_before still receive
    // gradient contributions from newer nodes but are not propagated through;
    // this is the truncation point for cross-batch state gradients.
    void backward(Var root, int stop_before = 0) {
        if (value(root).numel() != 1)
            throw std::invalid_argument("backward: root must be scalar, got shape " +
                                        value(root).shape_str());
        for (int i = 0; i <= root.id; ++i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            n.grad = Tensor<S>::zeros(n.value.shape);
        }
        nodes_[static_cast<std::size_t>(root.id)].grad.data[0] = S(1);
        for (int i = root.id; i >= stop_before; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backprop && n.requires_grad) n.backprop(*this, i);
        }
    }

    // Drops value/grad storage (and backward closures) of nodes below idx.
    // Shapes stay so later grad allocation remains valid.
    void release_before(int idx) {
        for (int i = 0; i < idx && i < size(); ++i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.released) continue;
            n.value.data.clear();
            n.value.data.shrink_to_fit();
            n.grad = Tensor<S>{};
            n.backprop = nullptr;
            n.released = true;
        }
    }

    void accumulate(int parent, const Tensor<S>& contribution) {
        Node& p = nodes_[static_cast<std::size_t>(parent)];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < contribution.data.size(); ++i)
            p.grad.data[i] += contribution.data[i];
    }
    Tensor<S>& grad_slot(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

private:
    std::vector<Node> nodes_;
};

namespace detail {

// cols(ohw, c*k*k + kh*k + kw) = src(c, oh*stride - pad + kh, ow*stride - pad + kw), 0 outside.
template <typename S>
void im2col(const S* src, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            MatX<S>& cols, int row_offset) {
    for (int c = 0; c < C; ++c) {
        const S* plane = src + static_cast<std::int64_t>(c) * H * W;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const int col = (c * k + kh) * k + kw;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + kh;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + kw;
                        const S v = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                        ? plane[ih * W + iw]
                                        : S(0);
                        cols(row_offset + oh * Wo + ow, col) = v;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add columns back into the image.
template <typename S>
void col2im_add(const MatX<S>& cols, int C, int H, int W, int k, int stride, int pad, int Ho,
                int Wo, S* dst, int row_offset) {
    for (int c = 0; c < C; ++c) {
        S* plane = dst + static_cast<std::int64_t>(c) * H * W;
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const int col = (c * k + kh) * k + kw;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + kw;
                        if (iw < 0 || iw >= W) continue;
                        plane[ih * W + iw] += cols(row_offset + oh * Wo + ow, col);
                    }
                }
            }
        }
    }
}

// Floor semantics: trailing rows/columns that do not fit a full stride are
// dropped, matching the usual strided-convolution convention.
inline int conv_out_extent(int in, int k, int stride, int pad, const char* what) {
    const int span = in + 2 * pad - k;
    if (span < 0)
        throw std::invalid_argument(std::string(what) + ": extent " + std::to_string(in) +
                                    " with kernel " + std::to_string(k) + ", stride " +
                                    std::to_string(stride) + ", padding " + std::to_string(pad) +
                                    " has no positive output extent");
    return span / stride + 1;
}

template <typename S>
void require_rank(const Tensor<S>& t, std::size_t rank, const char* what) {
    if (t.shape.size() != rank)
        throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                    ", got shape " + t.shape_str());
}

}  // namespace detail

template <typename S>
Var unary_pointwise(Graph<S>& g, Var x, S (*fwd)(S), S (*dfdy)(S, S), const char* /*name*/) {
    const Tensor<S>& xv = g.value(x);
    Tensor<S> out(xv.shape);
    for (std::int64_t i = 0; i < xv.numel(); ++i) out.data[i] = fwd(xv.data[i]);
    return g.emplace(std::move(out), g.requires_grad(x), [x, dfdy](Graph<S>& gg, int self) {
        const Tensor<S>& y = gg.value(Var{self});
        const Tensor<S>& xv2 = gg.value(x);
        const Tensor<S>& dy = gg.grad_slot(self);
        Tensor<S> dx(xv2.shape);
        for (std::int64_t i = 0; i < xv2.numel(); ++i)
            dx.data[i] = dy.data[i] * dfdy(xv2.data[i], y.data[i]);
        gg.accumulate(x.id, dx);
    });
}

template <typename S>
Var sigmoid(Graph<S>& g, Var x) {
    return unary_pointwise<S>(
        g, x,
        [](S v) {
            if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
            const S e = std::exp(v);
            return e / (S(1) + e);
        },
        [](S, S y) { return y * (S(1) - y); }, "sigmoid");
}

template <typename S>
Var tanh_op(Graph<S>& g, Var x) {
    return unary_pointwise<S>(
        g, x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; }, "tanh");
}

template <typename S>
Var relu(Graph<S>& g, Var x) {
    return unary_pointwise<S>(
        g, x, [](S v) { return v > S(0) ? v : S(0); },
        [](S v, S) { return v > S(0) ? S(1) : S(0); }, "relu");
}

template <typename S>
Var binary_pointwise(Graph<S>& g, Var a, Var b, const char* name, bool product) {
    const Tensor<S>& av = g.value(a);
    const Tensor<S>& bv = g.value(b);
    if (!av.same_shape(bv))
        throw std::invalid_argument(std::string(name) + ": shape mismatch " + av.shape_str() +
                                    " vs " + bv.shape_str());
    Tensor<S> out(av.shape);
    for (std::int64_t i = 0; i < av.numel(); ++i)
        out.data[i] = product ? av.data[i] * bv.data[i] : av.data[i] + bv.data[i];
    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    return g.emplace(std::move(out), rg, [a, b, product](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        if (!product) {
            gg.accumulate(a.id, dy);
            gg.accumulate(b.id, dy);
            return;
        }
        const Tensor<S>& av2 = gg.value(a);
        const Tensor<S>& bv2 = gg.value(b);
        Tensor<S> da(av2.shape), db(bv2.shape);
        for (std::int64_t i = 0; i < av2.numel(); ++i) {
            da.data[i] = dy.data[i] * bv2.data[i];
            db.data[i] = dy.data[i] * av2.data[i];
        }
        gg.accumulate(a.id, da);
        gg.accumulate(b.id, db);
    });
}

template <typename S>
Var add(Graph<S>& g, Var a, Var b) {
    return binary_pointwise(g, a, b, "add", false);
}
template <typename S>
Var hadamard(Graph<S>& g, Var a, Var b) {
    return binary_pointwise(g, a, b, "hadamard", true);
}

template <typename S>
Var scale(Graph<S>& g, Var x, S c) {
    const Tensor<S>& xv = g.value(x);
    Tensor<S> out(xv.shape);
    for (std::int64_t i = 0; i < xv.numel(); ++i) out.data[i] = xv.data[i] * c;
    return g.emplace(std::move(out), g.requires_grad(x), [x, c](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        Tensor<S> dx(dy.shape);
        for (std::int64_t i = 0; i < dy.numel(); ++i) dx.data[i] = dy.data[i] * c;
        gg.accumulate(x.id, dx);
    });
}

template <typename S>
Var sum_all(Graph<S>& g, Var x) {
    const Tensor<S>& xv = g.value(x);
    S total = S(0);
    for (S v : xv.data) total += v;
    return g.emplace(Tensor<S>::scalar(total), g.requires_grad(x), [x](Graph<S>& gg, int self) {
        const S dy = gg.grad_slot(self).data[0];
        Tensor<S> dx = Tensor<S>::full(gg.value(x).shape, dy);
        gg.accumulate(x.id, dx);
    });
}

// input [N,inC,H,W], weight [outC,inC,k,k], optional bias [outC].
template <typename S>
Var conv2d(Graph<S>& g, Var input, Var weight, Var bias, int stride, int padding) {
    const Tensor<S>& x = g.value(input);
    const Tensor<S>& w = g.value(weight);
    detail::require_rank(x, 4, "conv2d input");
    detail::require_rank(w, 4, "conv2d weight");
    if (x.shape[1] != w.shape[1])
        throw std::invalid_argument("conv2d: input channels of " + x.shape_str() +
                                    " do not match weight " + w.shape_str());
    if (w.shape[2] != w.shape[3])
        throw std::invalid_argument("conv2d: non-square kernel in " + w.shape_str());
    const int N = x.shape[0], inC = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int outC = w.shape[0], k = w.shape[2];
    const int Ho = detail::conv_out_extent(H, k, stride, padding, "conv2d height");
    const int Wo = detail::conv_out_extent(W, k, stride, padding, "conv2d width");
    if (bias.valid()) {
        const Tensor<S>& b = g.value(bias);
        if (b.shape != std::vector<int>{outC})
            throw std::invalid_argument("conv2d: bias " + b.shape_str() + " does not match outC " +
                                        std::to_string(outC));
    }

    const int K = inC * k * k;
    const int oHW = Ho * Wo;
    auto cols = std::make_shared<MatX<S>>(N * oHW, K);
    for (int n = 0; n < N; ++n)
        detail::im2col(x.data.data() + static_cast<std::int64_t>(n) * inC * H * W, inC, H, W, k,
                       stride, padding, Ho, Wo, *cols, n * oHW);
    Eigen::Map<const MatX<S>> wmap(w.data.data(), K, outC);
    MatX<S> outAll = *cols * wmap;

    Tensor<S> out({N, outC, Ho, Wo});
    const S* bptr = bias.valid() ? g.value(bias).data.data() : nullptr;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < outC; ++c) {
            const S bv = bptr ? bptr[c] : S(0);
            for (int hw = 0; hw < oHW; ++hw) out.at4(n, c, hw / Wo, hw % Wo) = outAll(n * oHW + hw, c) + bv;
        }

    const bool rg = g.requires_grad(input) || g.requires_grad(weight) ||
                    (bias.valid() && g.requires_grad(bias));
    auto bp = [input, weight, bias, stride, padding, N, inC, H, W, outC, k, Ho, Wo, oHW, K,
               cols](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        MatX<S> dOutAll(N * oHW, outC);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < outC; ++c)
                for (int hw = 0; hw < oHW; ++hw)
                    dOutAll(n * oHW + hw, c) = dy.at4(n, c, hw / Wo, hw % Wo);
        if (gg.requires_grad(weight)) {
            MatX<S> dW = cols->transpose() * dOutAll;  // K x outC
            Tensor<S> dw({outC, inC, k, k});
            for (int c = 0; c < outC; ++c)
                for (int kk = 0; kk < K; ++kk) dw.data[static_cast<std::int64_t>(c) * K + kk] = dW(kk, c);
            gg.accumulate(weight.id, dw);
        }
        if (gg.requires_grad(input)) {
            const Tensor<S>& w2 = gg.value(weight);
            Eigen::Map<const MatX<S>> wmap2(w2.data.data(), K, outC);
            MatX<S> dCols = dOutAll * wmap2.transpose();
            Tensor<S> dx({N, inC, H, W});
            for (int n = 0; n < N; ++n)
                detail::col2im_add(dCols, inC, H, W, k, stride, padding, Ho, Wo,
                                   dx.data.data() + static_cast<std::int64_t>(n) * inC * H * W,
                                   n * oHW);
            gg.accumulate(input.id, dx);
        }
        if (bias.valid() && gg.requires_grad(bias)) {
            Tensor<S> db({outC});
            for (int c = 0; c < outC; ++c) db.data[c] = dOutAll.col(c).sum();
            gg.accumulate(bias.id, db);
        }
    };
    return g.emplace(std::move(out), rg, rg ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

template <typename S>
Var conv2d(Graph<S>& g, Var input, Var weight, int stride, int padding) {
    return conv2d(g, input, weight, Var{}, stride, padding);
}

// input [N,inC,Hi,Wi], weight [inC,outC,k,k], optional bias [outC].
// Fractionally strided convolution: the adjoint of conv2d with the same geometry.
template <typename S>
Var conv_transpose2d(Graph<S>& g, Var input, Var weight, Var bias, int stride, int padding) {
    const Tensor<S>& x = g.value(input);
    const Tensor<S>& w = g.value(weight);
    detail::require_rank(x, 4, "conv_transpose2d input");
    detail::require_rank(w, 4, "conv_transpose2d weight");
    if (x.shape[1] != w.shape[0])
        throw std::invalid_argument("conv_transpose2d: input channels of " + x.shape_str() +
                                    " do not match weight " + w.shape_str());
    const int N = x.shape[0], inC = x.shape[1], Hi = x.shape[2], Wi = x.shape[3];
    const int outC = w.shape[1], k = w.shape[2];
    const int Ho = (Hi - 1) * stride - 2 * padding + k;
    const int Wo = (Wi - 1) * stride - 2 * padding + k;
    if (Ho < 1 || Wo < 1)
        throw std::invalid_argument("conv_transpose2d: non-positive output extent for input " +
                                    x.shape_str());
    if (bias.valid()) {
        const Tensor<S>& b = g.value(bias);
        if (b.shape != std::vector<int>{outC})
            throw std::invalid_argument("conv_transpose2d: bias " + b.shape_str() +
                                        " does not match outC " + std::to_string(outC));
    }
    const int K = outC * k * k;
    const int iHW = Hi * Wi;

    // Gather x as (N*HiWi) x inC.
    MatX<S> xAll(N * iHW, inC);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < inC; ++c)
            for (int hw = 0; hw < iHW; ++hw) xAll(n * iHW + hw, c) = x.at4(n, c, hw / Wi, hw % Wi);
    Eigen::Map<const MatX<S>> wmap(w.data.data(), K, inC);  // (oc,kh,kw) x ic
    MatX<S> colsAll = xAll * wmap.transpose();              // (N*HiWi) x K

    Tensor<S> out({N, outC, Ho, Wo});
    for (int n = 0; n < N; ++n)
        detail::col2im_add(colsAll, outC, Ho, Wo, k, stride, padding, Hi, Wi,
                           out.data.data() + static_cast<std::int64_t>(n) * outC * Ho * Wo,
                           n * iHW);
    if (bias.valid()) {
        const Tensor<S>& b = g.value(bias);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < outC; ++c)
                for (int hw = 0; hw < Ho * Wo; ++hw) out.at4(n, c, hw / Wo, hw % Wo) += b.data[c];
    }

    const bool rg = g.requires_grad(input) || g.requires_grad(weight) ||
                    (bias.valid() && g.requires_grad(bias));
    auto bp = [input, weight, bias, stride, padding, N, inC, Hi, Wi, outC, k, Ho, Wo, iHW,
               K](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        MatX<S> dCols(N * iHW, K);
        for (int n = 0; n < N; ++n)
            detail::im2col(dy.data.data() + static_cast<std::int64_t>(n) * outC * Ho * Wo, outC,
                           Ho, Wo, k, stride, padding, Hi, Wi, dCols, n * iHW);
        const Tensor<S>& w2 = gg.value(weight);
        Eigen::Map<const MatX<S>> wmap2(w2.data.data(), K, inC);
        if (gg.requires_grad(input)) {
            MatX<S> dxAll = dCols * wmap2;  // (N*HiWi) x inC
            Tensor<S> dx({N, inC, Hi, Wi});
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < inC; ++c)
                    for (int hw = 0; hw < iHW; ++hw)
                        dx.at4(n, c, hw / Wi, hw % Wi) = dxAll(n * iHW + hw, c);
            gg.accumulate(input.id, dx);
        }
        if (gg.requires_grad(weight)) {
            const Tensor<S>& xv = gg.value(input);
            MatX<S> xAll2(N * iHW, inC);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < inC; ++c)
                    for (int hw = 0; hw < iHW; ++hw)
                        xAll2(n * iHW + hw, c) = xv.at4(n, c, hw / Wi, hw % Wi);
            MatX<S> dW = dCols.transpose() * xAll2;  // K x inC
            Tensor<S> dw({inC, outC, k, k});
            for (int c = 0; c < inC; ++c)
                for (int kk = 0; kk < K; ++kk) dw.data[static_cast<std::int64_t>(c) * K + kk] = dW(kk, c);
            gg.accumulate(weight.id, dw);
        }
        if (bias.valid() && gg.requires_grad(bias)) {
            Tensor<S> db({outC});
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < outC; ++c)
                    for (int hw = 0; hw < Ho * Wo; ++hw) db.data[c] += dy.at4(n, c, hw / Wo, hw % Wo);
            gg.accumulate(bias.id, db);
        }
    };
    return g.emplace(std::move(out), rg, rg ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

template <typename S>
Var conv_transpose2d(Graph<S>& g, Var input, Var weight, int stride, int padding) {
    return conv_transpose2d(g, input, weight, Var{}, stride, padding);
}

// input [N,F], weight [O,F], bias [O].
template <typename S>
Var linear(Graph<S>& g, Var input, Var weight, Var bias) {
    const Tensor<S>& x = g.value(input);
    const Tensor<S>& w = g.value(weight);
    const Tensor<S>& b = g.value(bias);
    detail::require_rank(x, 2, "linear input");
    detail::require_rank(w, 2, "linear weight");
    if (x.shape[1] != w.shape[1])
        throw std::invalid_argument("linear: feature extents differ, input " + x.shape_str() +
                                    " vs weight " + w.shape_str());
    const int N = x.shape[0], F = x.shape[1], O = w.shape[0];
    if (b.shape != std::vector<int>{O})
        throw std::invalid_argument("linear: bias " + b.shape_str() + " does not match output " +
                                    std::to_string(O));
    using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> xm(x.data.data(), N, F);
    Eigen::Map<const RowMat> wm(w.data.data(), O, F);
    Tensor<S> out({N, O});
    Eigen::Map<RowMat> om(out.data.data(), N, O);
    om.noalias() = xm * wm.transpose();
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) om(n, o) += b.data[o];

    const bool rg = g.requires_grad(input) || g.requires_grad(weight) || g.requires_grad(bias);
    auto bp = [input, weight, bias, N, F, O](Graph<S>& gg, int self) {
        using RM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        const Tensor<S>& dy = gg.grad_slot(self);
        Eigen::Map<const RM> dym(dy.data.data(), N, O);
        if (gg.requires_grad(input)) {
            const Tensor<S>& w2 = gg.value(weight);
            Eigen::Map<const RM> wm2(w2.data.data(), O, F);
            Tensor<S> dx({N, F});
            Eigen::Map<RM>(dx.data.data(), N, F).noalias() = dym * wm2;
            gg.accumulate(input.id, dx);
        }
        if (gg.requires_grad(weight)) {
            const Tensor<S>& x2 = gg.value(input);
            Eigen::Map<const RM> xm2(x2.data.data(), N, F);
            Tensor<S> dw({O, F});
            Eigen::Map<RM>(dw.data.data(), O, F).noalias() = dym.transpose() * xm2;
            gg.accumulate(weight.id, dw);
        }
        if (gg.requires_grad(bias)) {
            Tensor<S> db({O});
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) db.data[o] += dy.at2(n, o);
            gg.accumulate(bias.id, db);
        }
    };
    return g.emplace(std::move(out), rg, rg ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

template <typename S>
Var concat_channels(Graph<S>& g, Var a, Var b) {
    const Tensor<S>& av = g.value(a);
    const Tensor<S>& bv = g.value(b);
    detail::require_rank(av, 4, "concat_channels");
    detail::require_rank(bv, 4, "concat_channels");
    if (av.shape[0] != bv.shape[0] || av.shape[2] != bv.shape[2] || av.shape[3] != bv.shape[3])
        throw std::invalid_argument("concat_channels: batch/spatial mismatch " + av.shape_str() +
                                    " vs " + bv.shape_str());
    const int N = av.shape[0], Ca = av.shape[1], Cb = bv.shape[1], H = av.shape[2], W = av.shape[3];
    Tensor<S> out({N, Ca + Cb, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::copy_n(av.data.data() + n * Ca * plane, Ca * plane,
                    out.data.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane);
        std::copy_n(bv.data.data() + n * Cb * plane, Cb * plane,
                    out.data.data() + (static_cast<std::int64_t>(n) * (Ca + Cb) + Ca) * plane);
    }
    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    auto bp = [a, b, N, Ca, Cb, plane](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        Tensor<S> da(gg.value(a).shape), db(gg.value(b).shape);
        for (int n = 0; n < N; ++n) {
            std::copy_n(dy.data.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane,
                        Ca * plane, da.data.data() + n * Ca * plane);
            std::copy_n(dy.data.data() + (static_cast<std::int64_t>(n) * (Ca + Cb) + Ca) * plane,
                        Cb * plane, db.data.data() + n * Cb * plane);
        }
        gg.accumulate(a.id, da);
        gg.accumulate(b.id, db);
    };
    return g.emplace(std::move(out), rg, rg ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

template <typename S>
Var slice_channels(Graph<S>& g, Var x, int first, int count) {
    const Tensor<S>& xv = g.value(x);
    detail::require_rank(xv, 4, "slice_channels");
    if (first < 0 || count < 1 || first + count > xv.shape[1])
        throw std::invalid_argument("slice_channels: [" + std::to_string(first) + ", " +
                                    std::to_string(first + count) + ") out of range for " +
                                    xv.shape_str());
    const int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Tensor<S> out({N, count, H, W});
    for (int n = 0; n < N; ++n)
        std::copy_n(xv.data.data() + (static_cast<std::int64_t>(n) * C + first) * plane,
                    count * plane, out.data.data() + static_cast<std::int64_t>(n) * count * plane);
    auto bp = [x, first, count, N, C, plane](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        Tensor<S> dx(gg.value(x).shape);
        for (int n = 0; n < N; ++n)
            std::copy_n(dy.data.data() + static_cast<std::int64_t>(n) * count * plane,
                        count * plane,
                        dx.data.data() + (static_cast<std::int64_t>(n) * C + first) * plane);
        gg.accumulate(x.id, dx);
    };
    return g.emplace(std::move(out), g.requires_grad(x),
                     g.requires_grad(x) ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

// Concatenates tensors along dimension 0; trailing dimensions must match.
// Stacking gate filters [O,C,k,k] (and their biases [O]) lets sibling
// convolutions over the same input share one im2col and one GEMM.
template <typename S>
Var stack_leading(Graph<S>& g, const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("stack_leading: no inputs");
    const Tensor<S>& first = g.value(parts[0]);
    std::vector<int> tail(first.shape.begin() + 1, first.shape.end());
    std::int64_t chunk = 1;
    for (int d : tail) chunk *= d;
    int total0 = 0;
    for (const Var& p : parts) {
        const Tensor<S>& pv = g.value(p);
        if (pv.shape.empty() ||
            !std::equal(tail.begin(), tail.end(), pv.shape.begin() + 1, pv.shape.end()))
            throw std::invalid_argument("stack_leading: trailing shape mismatch " +
                                        first.shape_str() + " vs " + pv.shape_str());
        total0 += pv.shape[0];
    }
    std::vector<int> oshape{total0};
    oshape.insert(oshape.end(), tail.begin(), tail.end());
    Tensor<S> out(std::move(oshape));
    S* dst = out.data.data();
    bool rg = false;
    for (const Var& p : parts) {
        const Tensor<S>& pv = g.value(p);
        std::copy_n(pv.data.data(), pv.data.size(), dst);
        dst += pv.data.size();
        rg = rg || g.requires_grad(p);
    }
    auto bp = [parts](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        const S* src = dy.data.data();
        for (const Var& p : parts) {
            const Tensor<S>& pv = gg.value(p);
            Tensor<S> dp(pv.shape);
            std::copy_n(src, dp.data.size(), dp.data.data());
            src += dp.data.size();
            gg.accumulate(p.id, dp);
        }
    };
    return g.emplace(std::move(out), rg, rg ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

template <typename S>
Var global_avg_pool(Graph<S>& g, Var x) {
    const Tensor<S>& xv = g.value(x);
    detail::require_rank(xv, 4, "global_avg_pool");
    const int N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
    Tensor<S> out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            S acc = S(0);
            const S* p = xv.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) acc += p[i];
            out.at2(n, c) = acc / static_cast<S>(HW);
        }
    auto bp = [x, N, C, HW](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        Tensor<S> dx(gg.value(x).shape);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const S v = dy.at2(n, c) / static_cast<S>(HW);
                S* p = dx.data.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) p[i] = v;
            }
        gg.accumulate(x.id, dx);
    };
    return g.emplace(std::move(out), g.requires_grad(x),
                     g.requires_grad(x) ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

// Non-overlapping window mean; spatial extents must divide by the window.
template <typename S>
Var avg_pool2d(Graph<S>& g, Var x, int window) {
    const Tensor<S>& xv = g.value(x);
    detail::require_rank(xv, 4, "avg_pool2d");
    const int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (window < 1 || H % window != 0 || W % window != 0)
        throw std::invalid_argument("avg_pool2d: window " + std::to_string(window) +
                                    " does not divide " + xv.shape_str());
    const int Ho = H / window, Wo = W / window;
    const S inv = S(1) / static_cast<S>(window * window);
    Tensor<S> out({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    S acc = S(0);
                    for (int dh = 0; dh < window; ++dh)
                        for (int dw = 0; dw < window; ++dw)
                            acc += xv.at4(n, c, oh * window + dh, ow * window + dw);
                    out.at4(n, c, oh, ow) = acc * inv;
                }
    auto bp = [x, N, C, Ho, Wo, window, inv](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        Tensor<S> dx(gg.value(x).shape);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        const S v = dy.at4(n, c, oh, ow) * inv;
                        for (int dh = 0; dh < window; ++dh)
                            for (int dw = 0; dw < window; ++dw)
                                dx.at4(n, c, oh * window + dh, ow * window + dw) = v;
                    }
        gg.accumulate(x.id, dx);
    };
    return g.emplace(std::move(out), g.requires_grad(x),
                     g.requires_grad(x) ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

// Mean over the leading (batch) axis: [N,C,H,W] -> [C,H,W].
template <typename S>
Var mean_over_batch(Graph<S>& g, Var x) {
    const Tensor<S>& xv = g.value(x);
    detail::require_rank(xv, 4, "mean_over_batch");
    const int N = xv.shape[0];
    const std::int64_t rest = xv.numel() / N;
    Tensor<S> out({xv.shape[1], xv.shape[2], xv.shape[3]});
    for (int n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < rest; ++i) out.data[i] += xv.data[n * rest + i];
    const S inv = S(1) / static_cast<S>(N);
    for (std::int64_t i = 0; i < rest; ++i) out.data[i] *= inv;
    auto bp = [x, N, rest, inv](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        Tensor<S> dx(gg.value(x).shape);
        for (int n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < rest; ++i) dx.data[n * rest + i] = dy.data[i] * inv;
        gg.accumulate(x.id, dx);
    };
    return g.emplace(std::move(out), g.requires_grad(x),
                     g.requires_grad(x) ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

// Replicate [C,H,W] across a new batch axis of extent n.
template <typename S>
Var broadcast_batch(Graph<S>& g, Var x, int n) {
    const Tensor<S>& xv = g.value(x);
    detail::require_rank(xv, 3, "broadcast_batch");
    const std::int64_t rest = xv.numel();
    Tensor<S> out({n, xv.shape[0], xv.shape[1], xv.shape[2]});
    for (int i = 0; i < n; ++i) std::copy_n(xv.data.data(), rest, out.data.data() + i * rest);
    auto bp = [x, n, rest](Graph<S>& gg, int self) {
        const Tensor<S>& dy = gg.grad_slot(self);
        Tensor<S> dx(gg.value(x).shape);
        for (int i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < rest; ++j) dx.data[j] += dy.data[i * rest + j];
        gg.accumulate(x.id, dx);
    };
    return g.emplace(std::move(out), g.requires_grad(x),
                     g.requires_grad(x) ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

// Mean over the batch of -log softmax(logits)[label], max-stabilized.
template <typename S>
Var softmax_cross_entropy(Graph<S>& g, Var logits, const std::vector<int>& labels) {
    const Tensor<S>& lv = g.value(logits);
    detail::require_rank(lv, 2, "softmax_cross_entropy");
    const int N = lv.shape[0], K = lv.shape[1];
    if (static_cast<int>(labels.size()) != N)
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for batch " + std::to_string(N));
    for (int l : labels)
        if (l < 0 || l >= K)
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(l) +
                                        " out of [0, " + std::to_string(K) + ")");
    S loss = S(0);
    for (int n = 0; n < N; ++n) {
        S mx = lv.at2(n, 0);
        for (int k = 1; k < K; ++k) mx = std::max(mx, lv.at2(n, k));
        S denom = S(0);
        for (int k = 0; k < K; ++k) denom += std::exp(lv.at2(n, k) - mx);
        loss += std::log(denom) - (lv.at2(n, labels[n]) - mx);
    }
    loss /= static_cast<S>(N);
    auto bp = [logits, labels, N, K](Graph<S>& gg, int self) {
        const S dy = gg.grad_slot(self).data[0];
        const Tensor<S>& lv2 = gg.value(logits);
        Tensor<S> dx({N, K});
        for (int n = 0; n < N; ++n) {
            S mx = lv2.at2(n, 0);
            for (int k = 1; k < K; ++k) mx = std::max(mx, lv2.at2(n, k));
            S denom = S(0);
            for (int k = 0; k < K; ++k) denom += std::exp(lv2.at2(n, k) - mx);
            for (int k = 0; k < K; ++k) {
                const S p = std::exp(lv2.at2(n, k) - mx) / denom;
                dx.at2(n, k) = dy * (p - (k == labels[n] ? S(1) : S(0))) / static_cast<S>(N);
            }
        }
        gg.accumulate(logits.id, dx);
    };
    return g.emplace(Tensor<S>::scalar(loss), g.requires_grad(logits),
                     g.requires_grad(logits) ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

// Mean absolute difference; subgradient 0 at exact ties.
template <typename S>
Var l1_loss(Graph<S>& g, Var a, Var b) {
    const Tensor<S>& av = g.value(a);
    const Tensor<S>& bv = g.value(b);
    if (!av.same_shape(bv))
        throw std::invalid_argument("l1_loss: shape mismatch " + av.shape_str() + " vs " +
                                    bv.shape_str());
    S loss = S(0);
    for (std::int64_t i = 0; i < av.numel(); ++i) loss += std::abs(av.data[i] - bv.data[i]);
    loss /= static_cast<S>(av.numel());
    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    auto bp = [a, b](Graph<S>& gg, int self) {
        const S dy = gg.grad_slot(self).data[0];
        const Tensor<S>& av2 = gg.value(a);
        const Tensor<S>& bv2 = gg.value(b);
        const S inv = dy / static_cast<S>(av2.numel());
        Tensor<S> da(av2.shape), db(bv2.shape);
        for (std::int64_t i = 0; i < av2.numel(); ++i) {
            const S d = av2.data[i] - bv2.data[i];
            const S s = d > S(0) ? inv : (d < S(0) ? -inv : S(0));
            da.data[i] = s;
            db.data[i] = -s;
        }
        gg.accumulate(a.id, da);
        gg.accumulate(b.id, db);
    };
    return g.emplace(Tensor<S>::scalar(loss), rg,
                     rg ? std::function<void(Graph<S>&, int)>(bp) : nullptr);
}

}  // namespace ptl
