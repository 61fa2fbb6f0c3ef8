#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "ptl/network.hpp"

using ptl::Graph;
using ptl::Mode;
using ptl::NetConfig;
using ptl::ParamBinder;
using ptl::PTLNetwork;
using ptl::Tensor;
using ptl::Var;
using DT = Tensor<double>;

namespace {
NetConfig tiny_config(int version = 1, bool cells = true) {
    NetConfig c;
    c.image_channels = 2;
    c.resolution = 8;
    c.classes = 3;
    c.stem_channels = 3;
    c.block_channels = {4, 6};
    c.block_strides = {1, 2};
    c.cell_channels = {3, 4};
    c.head_hidden = 5;
    c.cell_kernel = 3;
    c.cells_enabled = cells;
    c.version = version;
    return c;
}

DT rand_images(int n, const NetConfig& c, std::uint64_t seed) {
    DT x({n, c.image_channels, c.resolution, c.resolution});
    std::mt19937_64 rng(seed);
    ptl::fill_uniform(x, 0.0, 1.0, rng);
    return x;
}
}  // namespace

TEST_CASE("config validation") {
    NetConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    NetConfig bad = c;
    bad.cell_channels = {3};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.resolution = 7;  // stride 2 does not divide
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.version = 3;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.cell_kernel = 4;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("eval forward is pure: repeated calls bit-identical, states untouched") {
    for (int version : {1, 2}) {
        PTLNetwork<double> net(tiny_config(version));
        net.init(100 + static_cast<std::uint64_t>(version));
        net.set_mode(Mode::eval);
        DT x = rand_images(4, net.config, 9);
        auto [l1, f1] = net.infer(x);
        auto [l2, f2] = net.infer(x);
        CHECK(ptl::max_abs_diff(l1, l2) == 0.0);
        CHECK(ptl::max_abs_diff(f1, f2) == 0.0);
        for (const auto& s : net.states) CHECK(s.is_zero());
        CHECK(l1.shape == std::vector<int>{4, 3});
        CHECK(f1.shape == std::vector<int>{4, net.config.feature_channels()});
        CHECK(l1.all_finite());
    }
}

TEST_CASE("train forward advances states; infer refuses train mode") {
    PTLNetwork<double> net(tiny_config(2));
    net.init(7);
    net.set_mode(Mode::train);
    CHECK_THROWS_AS(net.infer(DT({1, 2, 8, 8})), std::logic_error);
    DT x = rand_images(4, net.config, 10);
    Graph<double> g;
    ParamBinder<double> bind(g);
    net.forward(g, g.constant(x), bind);
    bool any_nonzero = false;
    for (const auto& s : net.states) any_nonzero |= !s.is_zero();
    CHECK(any_nonzero);
    // Switching back to eval zeroes them.
    net.set_mode(Mode::eval);
    for (const auto& s : net.states) CHECK(s.is_zero());
}

TEST_CASE("stem equals fuse-then-cell composed by hand") {
    PTLNetwork<double> net(tiny_config(1));
    net.init(21);
    net.set_mode(Mode::eval);
    DT x = rand_images(3, net.config, 14);

    Graph<double> g;
    ParamBinder<double> bind(g);
    Var xv = g.constant(x);
    Var y = net.stem_forward(g, xv, bind);

    Graph<double> g2;
    ParamBinder<double> bind2(g2);
    Var xv2 = g2.constant(x);
    Var fused = ptl::conv2d(g2, xv2, bind2(net.w_stem_fuse), bind2(net.b_stem_fuse), 1, 0);
    ptl::CellState<double> fresh(net.config.stem_channels, 8, 8, false);
    auto out = ptl::bconv_forward(g2, fused, fresh, net.stem_cell.v1, bind2, false);
    CHECK(ptl::max_abs_diff(g.value(y), g2.value(out.y)) == 0.0);
}

TEST_CASE("forward rejects wrong resolution or channel count") {
    PTLNetwork<double> net(tiny_config(1));
    net.init(3);
    net.set_mode(Mode::eval);
    CHECK_THROWS_AS(net.infer(DT({1, 2, 4, 4})), std::invalid_argument);
    CHECK_THROWS_AS(net.infer(DT({1, 5, 8, 8})), std::invalid_argument);
}

TEST_CASE("backbone-only network has no states and matches a manual block stack") {
    PTLNetwork<double> net(tiny_config(1, false));
    net.init(31);
    net.set_mode(Mode::eval);
    CHECK(net.states.empty());
    DT x = rand_images(2, net.config, 15);
    auto [logits, feature] = net.infer(x);

    // Manual: blocks, GAP, head.
    Graph<double> g;
    ParamBinder<double> bind(g);
    Var h = g.constant(x);
    for (auto& p : net.pairs) h = p.block.forward(g, h, bind);
    Var feat = ptl::global_avg_pool(g, h);
    Var hid = ptl::relu(g, ptl::linear(g, feat, bind(net.w_head1), bind(net.b_head1)));
    Var out = ptl::linear(g, hid, bind(net.w_head2), bind(net.b_head2));
    CHECK(ptl::max_abs_diff(logits, g.value(out)) == 0.0);
    CHECK(ptl::max_abs_diff(feature, g.value(feat)) == 0.0);
}

TEST_CASE("masked fusion turns the full network into its backbone") {
    // Zero every cell path contribution: with the final 1x1 fusion reading
    // only the block channels as identity, logits must match the backbone
    // network holding the same block and head weights.
    NetConfig cfg = tiny_config(1);
    PTLNetwork<double> full(cfg);
    full.init(55);
    // Fusion: identity on the block channels, zero on the cell channels.
    std::fill(full.w_fusion.data.begin(), full.w_fusion.data.end(), 0.0);
    std::fill(full.b_fusion.data.begin(), full.b_fusion.data.end(), 0.0);
    const int f = cfg.feature_channels();
    for (int c = 0; c < f; ++c) full.w_fusion.at4(c, c, 0, 0) = 1.0;
    full.set_mode(Mode::eval);

    PTLNetwork<double> backbone(tiny_config(1, false));
    backbone.init(55);
    for (std::size_t i = 0; i < full.pairs.size(); ++i) {
        backbone.pairs[i].block.w1 = full.pairs[i].block.w1;
        backbone.pairs[i].block.b1 = full.pairs[i].block.b1;
        backbone.pairs[i].block.w2 = full.pairs[i].block.w2;
        backbone.pairs[i].block.b2 = full.pairs[i].block.b2;
    }
    backbone.w_head1 = full.w_head1;
    backbone.b_head1 = full.b_head1;
    backbone.w_head2 = full.w_head2;
    backbone.b_head2 = full.b_head2;
    backbone.set_mode(Mode::eval);

    DT x = rand_images(3, cfg, 22);
    auto [lf, ff] = full.infer(x);
    auto [lb, fb] = backbone.infer(x);
    CHECK(ptl::max_abs_diff(lf, lb) < 1e-12);
    CHECK(ptl::max_abs_diff(ff, fb) < 1e-12);
}

TEST_CASE("parameter counts: closed forms and the PTL > backbone ordering") {
    // 1x1 fuse conv from 2 to 3 channels with bias: 2*3 + 3 = 9.
    {
        NetConfig c = tiny_config(1);
        c.image_channels = 2;
        c.stem_channels = 3;
        PTLNetwork<double> n(c);
        CHECK(n.w_stem_fuse.numel() + n.b_stem_fuse.numel() == 9);
    }
    NetConfig cfg = tiny_config(1);
    PTLNetwork<double> full(cfg);
    PTLNetwork<double> bare(tiny_config(1, false));
    CHECK(full.param_count() > bare.param_count());

    // Backbone closed form: blocks (2 convs each) + head.
    // block0: [4,2,3,3]+4 + [4,4,3,3]+4 = 72+4+144+4 = 224
    // block1: [6,4,3,3]+6 + [6,6,3,3]+6 = 216+6+324+6 = 552
    // head: [5,6]+5 + [3,5]+3 = 35 + 18 = 53
    CHECK(bare.param_count() == 224 + 552 + 53);

    // Full adds stem fuse (2*3+3=9), three cells and two pair fuses, fusion.
    // stem cell (in 3, cell 3, k3): 4*(3*3*9)+4*3 = 324+12 = 336
    // pair0 fuse [3,4+3,1,1]+3 = 21+3 = 24; cell (3->3): 336
    // pair1 fuse [4,6+3,1,1]+4 = 36+4 = 40; cell (4->4): 4*(4*4*9)+16 = 576+16 = 592
    // fusion [6,6+4,1,1]+6 = 60+6 = 66
    CHECK(full.param_count() == bare.param_count() + 9 + 336 + 24 + 336 + 40 + 592 + 66);

    // Every parameter is registered exactly once under a unique name.
    auto refs = full.params();
    std::set<std::string> names;
    std::int64_t total = 0;
    for (const auto& r : refs) {
        names.insert(r.name);
        total += r.tensor->numel();
    }
    CHECK(names.size() == refs.size());
    CHECK(total == full.param_count());
}

TEST_CASE("reset_states restores the fresh-network forward exactly") {
    PTLNetwork<float> net(tiny_config(2));
    net.init(63);
    DT xd = rand_images(4, net.config, 29);
    Tensor<float> x = xd.cast<float>();

    net.set_mode(Mode::eval);
    auto [l0, f0] = net.infer(x);

    net.set_mode(Mode::train);
    Graph<float> g;
    ParamBinder<float> bind(g);
    net.forward(g, g.constant(x), bind);
    net.reset_states();
    for (const auto& s : net.states) CHECK(s.is_zero());

    net.set_mode(Mode::eval);
    auto [l1, f1] = net.infer(x);
    CHECK(ptl::max_abs_diff(l0, l1) == 0.0);
}

TEST_CASE("eval logits are batch-composition invariant within 1e-6, 32-bit") {
    PTLNetwork<float> net(tiny_config(1));
    net.init(77);
    net.set_mode(Mode::eval);
    DT xd = rand_images(5, net.config, 41);
    Tensor<float> all = xd.cast<float>();
    auto [batch_logits, bf] = net.infer(all);

    for (int i = 0; i < 5; ++i) {
        Tensor<float> one({1, 2, 8, 8});
        std::copy_n(all.data.data() + i * one.numel(), one.numel(), one.data.data());
        auto [solo, sf] = net.infer(one);
        for (int k = 0; k < 3; ++k)
            CHECK(std::abs(static_cast<double>(solo.at2(0, k)) - batch_logits.at2(i, k)) < 1e-6);
    }
}

TEST_CASE("train-mode forward writes a state delta that is not numerically trivial") {
    PTLNetwork<double> net(tiny_config(2));
    net.init(83);
    net.set_mode(Mode::train);
    DT x = rand_images(4, net.config, 47);
    Graph<double> g;
    ParamBinder<double> bind(g);
    net.forward(g, g.constant(x), bind);
    double total = 0;
    for (const auto& s : net.states)
        for (double v : s.c.data) total += std::abs(v);
    CHECK(total > 1e-6);
}
