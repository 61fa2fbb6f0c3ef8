#pragma once

#include <unordered_map>

#include "ptl/graph.hpp"

namespace ptl {

template <typename S>
struct ParamRef {
    std::string name;
    Tensor<S>* tensor;
};

// Binds parameter tensors into the current graph as leaves, once per pass.
// After backward(), grads() pairs each bound tensor with its leaf Var so the
// optimizer can collect gradients.
template <typename S>
class ParamBinder {
public:
    explicit ParamBinder(Graph<S>& g) : g_(&g) {}

    Var operator()(Tensor<S>& t) {
        auto it = map_.find(&t);
        if (it != map_.end()) return it->second;
        Var v = g_->leaf(t, true);
        map_.emplace(&t, v);
        bound_.push_back({&t, v});
        return v;
    }

    const std::vector<std::pair<Tensor<S>*, Var>>& bound() const { return bound_; }

private:
    Graph<S>* g_;
    std::unordered_map<const Tensor<S>*, Var> map_;
    std::vector<std::pair<Tensor<S>*, Var>> bound_;
};

// Weights of the four gate convolutions. Kernels are k x k (k odd), stride 1,
// "same" padding (k-1)/2 so the Hadamard with the carried state lines up.
template <typename S>
struct BConvCellParams {
    int in_channels = 0;
    int cell_channels = 0;
    int kernel = 3;
    Tensor<S> w_i, w_f, w_o, w_c;
    Tensor<S> b_i, b_f, b_o, b_c;

    BConvCellParams() = default;
    BConvCellParams(int in_c, int cell_c, int k)
        : in_channels(in_c),
          cell_channels(cell_c),
          kernel(k),
          w_i({cell_c, in_c, k, k}),
          w_f({cell_c, in_c, k, k}),
          w_o({cell_c, in_c, k, k}),
          w_c({cell_c, in_c, k, k}),
          b_i({cell_c}),
          b_f({cell_c}),
          b_o({cell_c}),
          b_c({cell_c}) {
        if (k % 2 == 0) throw std::invalid_argument("bconv cell: kernel must be odd");
    }

    int padding() const { return (kernel - 1) / 2; }

    void init(std::mt19937_64& rng) {
        // Xavier-style uniform: unit-variance preserving for the
        // sigmoid/tanh gate convolutions.
        const S bound = std::sqrt(S(3) / static_cast<S>(in_channels * kernel * kernel));
        for (Tensor<S>* w : {&w_i, &w_f, &w_o, &w_c}) fill_uniform(*w, -bound, bound, rng);
        for (Tensor<S>* b : {&b_i, &b_o, &b_c}) std::fill(b->data.begin(), b->data.end(), S(0));
        // Positive forget bias keeps early state retention alive.
        std::fill(b_f.data.begin(), b_f.data.end(), S(1));
    }

    void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
        out.push_back({prefix + ".w_i", &w_i});
        out.push_back({prefix + ".w_f", &w_f});
        out.push_back({prefix + ".w_o", &w_o});
        out.push_back({prefix + ".w_c", &w_c});
        out.push_back({prefix + ".b_i", &b_i});
        out.push_back({prefix + ".b_f", &b_f});
        out.push_back({prefix + ".b_o", &b_o});
        out.push_back({prefix + ".b_c", &b_c});
    }
};

// v2 adds a transpose-conv recovery of the carried hidden state and a 1x1 mix
// back to the cell's input channel count.
template <typename S>
struct BConvCellV2Params {
    BConvCellParams<S> base;
    Tensor<S> w_rec, b_rec;  // [cellC, cellC, k, k], [cellC]
    Tensor<S> w_mix, b_mix;  // [inC, inC + cellC, 1, 1], [inC]

    BConvCellV2Params() = default;
    BConvCellV2Params(int in_c, int cell_c, int k)
        : base(in_c, cell_c, k),
          w_rec({cell_c, cell_c, k, k}),
          b_rec({cell_c}),
          w_mix({in_c, in_c + cell_c, 1, 1}),
          b_mix({in_c}) {}

    void init(std::mt19937_64& rng) {
        base.init(rng);
        const S br =
            std::sqrt(S(3) / static_cast<S>(base.cell_channels * base.kernel * base.kernel));
        fill_uniform(w_rec, -br, br, rng);
        std::fill(b_rec.data.begin(), b_rec.data.end(), S(0));
        const S bm = std::sqrt(S(3) / static_cast<S>(base.in_channels + base.cell_channels));
        fill_uniform(w_mix, -bm, bm, rng);
        std::fill(b_mix.data.begin(), b_mix.data.end(), S(0));
    }

    void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
        base.collect(prefix, out);
        out.push_back({prefix + ".w_rec", &w_rec});
        out.push_back({prefix + ".b_rec", &b_rec});
        out.push_back({prefix + ".w_mix", &w_mix});
        out.push_back({prefix + ".b_mix", &b_mix});
    }
};

// Batch-persistent latent state, stored batch-reduced (one [C,H,W] slab).
// c_var/h_var are only populated in the cross-batch-gradient experiment mode
// and point into the rolling graph; they are cleared on reset.
template <typename S>
struct CellState {
    Tensor<S> c;        // [cellC, H, W]
    Tensor<S> h;        // [cellC, H, W], v2 only (empty otherwise)
    bool has_hidden = false;
    bool epoch_fresh = true;
    Var c_var{};
    Var h_var{};

    CellState() = default;
    CellState(int cell_c, int height, int width, bool with_hidden)
        : c({cell_c, height, width}), has_hidden(with_hidden) {
        if (with_hidden) h = Tensor<S>({cell_c, height, width});
    }

    void reset() {
        std::fill(c.data.begin(), c.data.end(), S(0));
        if (has_hidden) std::fill(h.data.begin(), h.data.end(), S(0));
        epoch_fresh = true;
        c_var = Var{};
        h_var = Var{};
    }

    bool is_zero() const {
        for (S v : c.data)
            if (v != S(0)) return false;
        if (has_hidden)
            for (S v : h.data)
                if (v != S(0)) return false;
        return true;
    }
};

template <typename S>
struct CellForward {
    Var y;
    Var new_c;  // batch mean of the per-sample latent state
    Var new_h;  // v2 only
};

namespace detail {
template <typename S>
void check_cell_shapes(const Tensor<S>& x, const CellState<S>& state,
                       const BConvCellParams<S>& p) {
    require_rank(x, 4, "bconv_forward input");
    if (x.shape[1] != p.in_channels)
        throw std::invalid_argument("bconv_forward: input " + x.shape_str() + " has " +
                                    std::to_string(x.shape[1]) + " channels, cell expects " +
                                    std::to_string(p.in_channels));
    if (state.c.shape != std::vector<int>{p.cell_channels, x.shape[2], x.shape[3]})
        throw std::invalid_argument("bconv_forward: state " + state.c.shape_str() +
                                    " does not match input " + x.shape_str());
}

// Carried state enters either as the live Var from the rolling graph
// (cross-batch gradient mode) or as a detached constant.
template <typename S>
Var state_entry(Graph<S>& g, const Tensor<S>& slab, Var live, bool state_backprop) {
    if (state_backprop && live.valid()) return live;
    return g.constant(slab);
}
}  // namespace detail

// i = sig(Wi*x+bi); f = sig(Wf*x+bf); o = sig(Wo*x+bo)
// C = f.C_prev + i.tanh(Wc*x+bc);  y = o.tanh(C)
// Gates see only x; there is no hidden-state term in the recurrence.
template <typename S>
CellForward<S> bconv_forward(Graph<S>& g, Var x, CellState<S>& state, BConvCellParams<S>& p,
                             ParamBinder<S>& bind, bool update_state, bool state_backprop = false) {
    detail::check_cell_shapes(g.value(x), state, p);
    const int n = g.value(x).shape[0];
    const int pad = p.padding();
    Var c_prev = detail::state_entry(g, state.c, state.c_var, state_backprop);
    Var c_prev_b = broadcast_batch(g, c_prev, n);
    // One stacked convolution for all four gates: shares the im2col of x and
    // runs a single GEMM instead of four.
    const int cc = p.cell_channels;
    Var wall = stack_leading(g, {bind(p.w_i), bind(p.w_f), bind(p.w_o), bind(p.w_c)});
    Var ball = stack_leading(g, {bind(p.b_i), bind(p.b_f), bind(p.b_o), bind(p.b_c)});
    Var pre = conv2d(g, x, wall, ball, 1, pad);
    Var gi = sigmoid(g, slice_channels(g, pre, 0, cc));
    Var gf = sigmoid(g, slice_channels(g, pre, cc, cc));
    Var go = sigmoid(g, slice_channels(g, pre, 2 * cc, cc));
    Var cand = tanh_op(g, slice_channels(g, pre, 3 * cc, cc));
    Var c_new = add(g, hadamard(g, gf, c_prev_b), hadamard(g, gi, cand));
    Var y = hadamard(g, go, tanh_op(g, c_new));
    Var c_mean = mean_over_batch(g, c_new);
    if (update_state) {
        state.c = g.value(c_mean);  // detached copy
        state.c_var = state_backprop ? c_mean : Var{};
        state.epoch_fresh = false;
    }
    return {y, c_mean, Var{}};
}

// v2: recover the carried hidden state through a transpose conv, mix it with
// the current input through a 1x1 conv, then run the same gate dynamics.
// New hidden state is the running average (H_prev + mean(y)) / 2.
template <typename S>
CellForward<S> bconv_v2_forward(Graph<S>& g, Var x, CellState<S>& state, BConvCellV2Params<S>& p,
                                ParamBinder<S>& bind, bool update_state,
                                bool state_backprop = false) {
    if (!state.has_hidden)
        throw std::invalid_argument("bconv_v2_forward: state carries no hidden slab");
    const Tensor<S>& xv = g.value(x);
    detail::require_rank(xv, 4, "bconv_v2_forward input");
    const int n = xv.shape[0];
    const int pad = p.base.padding();
    Var h_prev = detail::state_entry(g, state.h, state.h_var, state_backprop);
    Var h_prev_b = broadcast_batch(g, h_prev, n);
    // k odd with same padding: transpose conv preserves the spatial extents.
    Var recovered = conv_transpose2d(g, h_prev_b, bind(p.w_rec), bind(p.b_rec), 1, pad);
    Var mixed = conv2d(g, concat_channels(g, x, recovered), bind(p.w_mix), bind(p.b_mix), 1, 0);
    CellForward<S> inner = bconv_forward(g, mixed, state, p.base, bind, update_state, state_backprop);
    Var y_mean = mean_over_batch(g, inner.y);
    Var h_new = scale(g, add(g, h_prev, y_mean), S(0.5));
    if (update_state) {
        state.h = g.value(h_new);
        state.h_var = state_backprop ? h_new : Var{};
    }
    return {inner.y, inner.new_c, h_new};
}

}  // namespace ptl
