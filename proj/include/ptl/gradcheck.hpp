#pragma once

#include "ptl/training.hpp"

namespace ptl {

namespace detail {

// Rebuilds the graph on every call and optionally harvests analytic grads,
// which is exactly the shape grad_check() wants.
template <typename Builder>
std::function<double(std::unordered_map<const Tensor<double>*, Tensor<double>>*)> make_eval(
    const std::vector<std::pair<std::string, Tensor<double>*>>& tensors, Builder build) {
    return [tensors, build](std::unordered_map<const Tensor<double>*, Tensor<double>>* grads) {
        Graph<double> g;
        ParamBinder<double> bind(g);
        Var loss = build(g, bind);
        if (grads) {
            g.backward(loss);
            for (const auto& [name, t] : tensors)
                for (const auto& [tensor, var] : bind.bound())
                    if (tensor == t) (*grads)[t] = g.grad(var);
        }
        return static_cast<double>(g.value(loss).data[0]);
    };
}

}  // namespace detail

// Finite-difference suite over every differentiable primitive plus the
// composite cells and a small end-to-end network. 64-bit only.
inline GradCheckReport run_gradcheck_suite(std::uint64_t seed, double tolerance = 1e-5,
                                           int probes = 10) {
    using T = Tensor<double>;
    GradCheckReport report;
    report.tolerance = tolerance;
    std::mt19937_64 rng(seed);
    auto rand_t = [&rng](std::vector<int> shape) {
        T t(std::move(shape));
        fill_uniform(t, -1.0, 1.0, rng);
        return t;
    };
    auto add_entry = [&](const std::string& name,
                         std::vector<std::pair<std::string, T*>> tensors, auto build,
                         double step = 1e-5) {
        auto eval = detail::make_eval(tensors, build);
        report.entries.push_back(grad_check<double>(name, tensors, eval, probes, tolerance,
                                                    seed + report.entries.size(), step));
    };

    // conv2d: strided + padded
    T cx = rand_t({2, 3, 6, 6}), cw = rand_t({4, 3, 3, 3}), cb = rand_t({4});
    add_entry("conv2d", {{"x", &cx}, {"w", &cw}, {"b", &cb}},
              [&](Graph<double>& g, ParamBinder<double>& bind) {
                  return sum_all(g, tanh_op(g, conv2d(g, bind(cx), bind(cw), bind(cb), 2, 1)));
              });

    T tx = rand_t({2, 3, 4, 4}), tw = rand_t({3, 2, 3, 3}), tb = rand_t({2});
    add_entry("conv_transpose2d", {{"x", &tx}, {"w", &tw}, {"b", &tb}},
              [&](Graph<double>& g, ParamBinder<double>& bind) {
                  return sum_all(g, tanh_op(g, conv_transpose2d(g, bind(tx), bind(tw), bind(tb), 2, 1)));
              });

    T lx = rand_t({3, 5}), lw = rand_t({4, 5}), lb = rand_t({4});
    add_entry("linear", {{"x", &lx}, {"w", &lw}, {"b", &lb}},
              [&](Graph<double>& g, ParamBinder<double>& bind) {
                  return sum_all(g, tanh_op(g, linear(g, bind(lx), bind(lw), bind(lb))));
              });

    T px = rand_t({2, 2, 3, 3});
    add_entry("sigmoid", {{"x", &px}}, [&](Graph<double>& g, ParamBinder<double>& bind) {
        return sum_all(g, sigmoid(g, bind(px)));
    });
    add_entry("tanh", {{"x", &px}}, [&](Graph<double>& g, ParamBinder<double>& bind) {
        return sum_all(g, tanh_op(g, bind(px)));
    });

    T ha = rand_t({2, 2, 3, 3}), hb = rand_t({2, 2, 3, 3});
    add_entry("add_hadamard", {{"a", &ha}, {"b", &hb}},
              [&](Graph<double>& g, ParamBinder<double>& bind) {
                  Var s = add(g, bind(ha), bind(hb));
                  return sum_all(g, hadamard(g, s, bind(ha)));
              });

    T ca = rand_t({2, 2, 3, 3}), cbq = rand_t({2, 3, 3, 3});
    add_entry("concat_slice", {{"a", &ca}, {"b", &cbq}},
              [&](Graph<double>& g, ParamBinder<double>& bind) {
                  Var cat = concat_channels(g, bind(ca), bind(cbq));
                  return sum_all(g, tanh_op(g, slice_channels(g, cat, 1, 3)));
              });

    T gx = rand_t({2, 3, 4, 4});
    add_entry("global_avg_pool", {{"x", &gx}}, [&](Graph<double>& g, ParamBinder<double>& bind) {
        return sum_all(g, tanh_op(g, global_avg_pool(g, bind(gx))));
    });
    add_entry("avg_pool2d", {{"x", &gx}}, [&](Graph<double>& g, ParamBinder<double>& bind) {
        return sum_all(g, tanh_op(g, avg_pool2d(g, bind(gx), 2)));
    });
    add_entry("batch_mean_broadcast", {{"x", &gx}},
              [&](Graph<double>& g, ParamBinder<double>& bind) {
                  Var m = mean_over_batch(g, bind(gx));
                  return sum_all(g, tanh_op(g, broadcast_batch(g, m, 3)));
              });

    T logits = rand_t({4, 5});
    const std::vector<int> labels{1, 0, 4, 2};
    add_entry("softmax_cross_entropy", {{"logits", &logits}},
              [&](Graph<double>& g, ParamBinder<double>& bind) {
                  return softmax_cross_entropy(g, bind(logits), labels);
              });

    T la = rand_t({3, 4}), lb2 = rand_t({3, 4});
    add_entry("l1_loss", {{"a", &la}, {"b", &lb2}},
              [&](Graph<double>& g, ParamBinder<double>& bind) {
                  return l1_loss(g, bind(la), bind(lb2));
              });

    // Composite BConv-Cell with nonzero carried state.
    {
        BConvCellParams<double> cell(3, 4, 3);
        cell.init(rng);
        CellState<double> state(4, 5, 5, false);
        fill_uniform(state.c, -0.5, 0.5, rng);
        T x = rand_t({2, 3, 5, 5});
        std::vector<std::pair<std::string, T*>> tensors{
            {"x", &x},         {"w_i", &cell.w_i}, {"w_f", &cell.w_f}, {"w_o", &cell.w_o},
            {"w_c", &cell.w_c}, {"b_i", &cell.b_i}, {"b_f", &cell.b_f}, {"b_o", &cell.b_o},
            {"b_c", &cell.b_c}};
        add_entry("bconv_cell", tensors, [&cell, &state, &x](Graph<double>& g, ParamBinder<double>& bind) {
            CellForward<double> out = bconv_forward(g, bind(x), state, cell, bind, false);
            return add(g, sum_all(g, tanh_op(g, out.y)), sum_all(g, out.new_c));
        });
    }

    // Composite BConv-Cell-v2 with nonzero latent and hidden state.
    {
        BConvCellV2Params<double> cell(3, 4, 3);
        cell.init(rng);
        CellState<double> state(4, 5, 5, true);
        fill_uniform(state.c, -0.5, 0.5, rng);
        fill_uniform(state.h, -0.5, 0.5, rng);
        T x = rand_t({2, 3, 5, 5});
        std::vector<std::pair<std::string, T*>> tensors{{"x", &x},
                                                        {"w_i", &cell.base.w_i},
                                                        {"w_c", &cell.base.w_c},
                                                        {"b_f", &cell.base.b_f},
                                                        {"w_rec", &cell.w_rec},
                                                        {"b_rec", &cell.b_rec},
                                                        {"w_mix", &cell.w_mix},
                                                        {"b_mix", &cell.b_mix}};
        add_entry("bconv_cell_v2", tensors,
                  [&cell, &state, &x](Graph<double>& g, ParamBinder<double>& bind) {
                      CellForward<double> out = bconv_v2_forward(g, bind(x), state, cell, bind, false);
                      return add(g, sum_all(g, tanh_op(g, out.y)),
                                 add(g, sum_all(g, out.new_c), sum_all(g, out.new_h)));
                  });
    }

    // Full small network, v1 and v2, cross-entropy loss over every layer class.
    for (int version : {1, 2}) {
        NetConfig nc;
        nc.image_channels = 3;
        nc.resolution = 8;
        nc.classes = 3;
        nc.stem_channels = 3;
        nc.block_channels = {4, 6};
        nc.block_strides = {1, 2};
        nc.cell_channels = {3, 4};
        nc.head_hidden = 8;
        nc.version = version;
        auto net = std::make_shared<PTLNetwork<double>>(nc);
        net->init(seed + version);
        net->set_mode(Mode::train);
        // Nonzero states so the carried-state path is exercised.
        for (auto& s : net->states) {
            fill_uniform(s.c, -0.3, 0.3, rng);
            if (s.has_hidden) fill_uniform(s.h, -0.3, 0.3, rng);
        }
        auto x = std::make_shared<T>(rand_t({2, 3, 8, 8}));
        const std::vector<int> net_labels{0, 2};
        std::vector<std::pair<std::string, T*>> tensors{{"image", x.get()}};
        for (auto& p : net->params()) tensors.push_back({p.name, p.tensor});
        add_entry("ptl_network_v" + std::to_string(version), tensors,
                  [net, x, net_labels](Graph<double>& g, ParamBinder<double>& bind) {
                      // update_state=false path: keep states fixed across eval calls
                      const Mode saved = net->mode;
                      net->mode = Mode::eval;  // no write-back
                      struct Restore {
                          PTLNetwork<double>* n;
                          Mode m;
                          ~Restore() { n->mode = m; }
                      } restore{net.get(), saved};
                      NetworkOutput<double> out = net->forward(g, bind(*x), bind);
                      return softmax_cross_entropy(g, out.logits, net_labels);
                  });
    }
    return report;
}

}  // namespace ptl
