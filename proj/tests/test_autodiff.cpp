#include "doctest.h"
#include "oracles.hpp"
#include "ptl/gradcheck.hpp"

using ptl::Graph;
using ptl::Tensor;
using ptl::Var;
using DT = Tensor<double>;

TEST_CASE("backward of sum is ones; untouched leaves get zero") {
    Graph<double> g;
    Var x = g.leaf(DT::full({2, 3}, 2.0));
    Var unused = g.leaf(DT::full({4}, 1.0));
    Var loss = ptl::sum_all(g, x);
    g.backward(loss);
    for (double v : g.grad(x).data) CHECK(v == 1.0);
    for (double v : g.grad(unused).data) CHECK(v == 0.0);
}

TEST_CASE("gradients accumulate over multiple consumers") {
    std::mt19937_64 rng(2);
    DT a(std::vector<int>{5});
    DT b(std::vector<int>{5});
    ptl::fill_uniform(a, -1.0, 1.0, rng);
    ptl::fill_uniform(b, -1.0, 1.0, rng);
    Graph<double> g;
    Var x = g.leaf(DT::full({5}, 0.3));
    Var va = g.constant(a);
    Var vb = g.constant(b);
    // loss = sum(x .* a) + sum(x .* b)  =>  dloss/dx = a + b
    Var loss = ptl::add(g, ptl::sum_all(g, ptl::hadamard(g, x, va)),
                        ptl::sum_all(g, ptl::hadamard(g, x, vb)));
    g.backward(loss);
    for (int i = 0; i < 5; ++i)
        CHECK(g.grad(x).data[static_cast<std::size_t>(i)] ==
              doctest::Approx(a.data[static_cast<std::size_t>(i)] +
                              b.data[static_cast<std::size_t>(i)])
                  .epsilon(1e-14));
}

TEST_CASE("backward requires a scalar root") {
    Graph<double> g;
    Var x = g.leaf(DT::full({2, 2}, 1.0));
    CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
}

TEST_CASE("scale and add chain differentiates to the constants") {
    Graph<double> g;
    Var x = g.leaf(DT::full({3}, 1.0));
    Var loss = ptl::sum_all(g, ptl::scale(g, x, 2.5));
    g.backward(loss);
    for (double v : g.grad(x).data) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("finite-difference suite covers every primitive and composite") {
    ptl::GradCheckReport report = ptl::run_gradcheck_suite(123);
    bool saw_conv = false, saw_net = false;
    for (const auto& e : report.entries) {
        INFO(e.name << " max_rel_err " << e.max_rel_err);
        CHECK(e.pass);
        CHECK(e.probes > 0);
        if (e.name.find("conv2d") != std::string::npos) saw_conv = true;
        if (e.name.find("ptl_network") != std::string::npos) saw_net = true;
    }
    CHECK(saw_conv);
    CHECK(saw_net);
    CHECK(report.pass());
}

TEST_CASE("grad_check flags a corrupted analytic gradient") {
    DT w = DT::full({3}, 0.7);
    std::vector<std::pair<std::string, DT*>> tensors{{"w", &w}};
    auto eval = [&w](std::unordered_map<const DT*, DT>* grads) {
        double s = 0;
        for (double v : w.data) s += v * v;
        if (grads) {
            DT gt(w.shape);
            for (std::size_t i = 0; i < w.data.size(); ++i)
                gt.data[i] = 2.0 * w.data[i] + 0.5;  // deliberately wrong by +0.5
            (*grads)[&w] = gt;
        }
        return s;
    };
    ptl::GradCheckEntry entry = ptl::grad_check<double>("corrupted", tensors, eval, 5, 1e-5, 1);
    CHECK(!entry.pass);
    CHECK(entry.max_rel_err > 1e-2);
}

TEST_CASE("backward truncation stops at the segment boundary") {
    Graph<double> g;
    Var a = g.leaf(DT::full({2}, 1.0));
    Var mid = ptl::scale(g, a, 3.0);
    const int boundary = g.size();
    Var b = g.leaf(DT::full({2}, 1.0));
    Var loss = ptl::sum_all(g, ptl::hadamard(g, mid, b));
    g.backward(loss, boundary);
    // b is past the boundary and gets its gradient; a sits before it.
    for (double v : g.grad(b).data) CHECK(v == doctest::Approx(3.0).epsilon(1e-15));
    for (double v : g.grad(a).data) CHECK(v == 0.0);
}
