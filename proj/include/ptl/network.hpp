#pragma once

#include "ptl/cells.hpp"

namespace ptl {

enum class Mode { train, eval };

struct NetConfig {
    int image_channels = 3;
    int resolution = 16;  // square inputs
    int classes = 4;
    int stem_channels = 8;
    std::vector<int> block_channels{16, 32, 64};
    std::vector<int> block_strides{1, 2, 2};
    std::vector<int> cell_channels{8, 16, 16};
    int head_hidden = 128;
    int cell_kernel = 3;
    bool cells_enabled = true;
    int version = 1;  // 1 or 2
    bool state_backprop = false;

    int feature_channels() const { return block_channels.back(); }

    void validate() const {
        if (classes < 2) throw std::invalid_argument("network: classes must be >= 2");
        if (block_channels.empty()) throw std::invalid_argument("network: no conv blocks");
        if (block_channels.size() != block_strides.size() ||
            block_channels.size() != cell_channels.size())
            throw std::invalid_argument(
                "network: block_channels, block_strides and cell_channels must have equal length");
        if (version != 1 && version != 2)
            throw std::invalid_argument("network: version must be 1 or 2");
        if (cell_kernel < 1 || cell_kernel % 2 == 0)
            throw std::invalid_argument("network: cell kernel must be odd");
        int r = resolution;
        for (int s : block_strides) {
            if (s < 1) throw std::invalid_argument("network: stride must be positive");
            if (r % s != 0)
                throw std::invalid_argument("network: resolution not divisible by stride chain");
            r /= s;
        }
        if (r < 1) throw std::invalid_argument("network: resolution collapses to zero");
    }
};

// Two 3x3 convs with rectifier activations; the first conv carries the stride.
template <typename S>
struct ConvBlock {
    int stride = 1;
    Tensor<S> w1, b1, w2, b2;

    ConvBlock() = default;
    ConvBlock(int in_c, int out_c, int s)
        : stride(s), w1({out_c, in_c, 3, 3}), b1({out_c}), w2({out_c, out_c, 3, 3}), b2({out_c}) {}

    void init(std::mt19937_64& rng) {
        // He-style uniform: compensates the relu halving so activation
        // variance survives the block stack.
        const S bd1 = std::sqrt(S(6) / static_cast<S>(w1.shape[1] * 9));
        const S bd2 = std::sqrt(S(6) / static_cast<S>(w2.shape[1] * 9));
        fill_uniform(w1, -bd1, bd1, rng);
        fill_uniform(w2, -bd2, bd2, rng);
        std::fill(b1.data.begin(), b1.data.end(), S(0));
        std::fill(b2.data.begin(), b2.data.end(), S(0));
    }

    void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
        out.push_back({prefix + ".w1", &w1});
        out.push_back({prefix + ".b1", &b1});
        out.push_back({prefix + ".w2", &w2});
        out.push_back({prefix + ".b2", &b2});
    }

    Var forward(Graph<S>& g, Var x, ParamBinder<S>& bind) {
        Var h = relu(g, conv2d(g, x, bind(w1), bind(b1), stride, 1));
        return relu(g, conv2d(g, h, bind(w2), bind(b2), 1, 1));
    }
};

// Version-dispatched cell unit so v1 and v2 networks share one code path.
template <typename S>
struct CellUnit {
    int version = 1;
    BConvCellParams<S> v1;
    BConvCellV2Params<S> v2;

    CellUnit() = default;
    CellUnit(int ver, int in_c, int cell_c, int k) : version(ver) {
        if (ver == 1)
            v1 = BConvCellParams<S>(in_c, cell_c, k);
        else
            v2 = BConvCellV2Params<S>(in_c, cell_c, k);
    }

    int cell_channels() const { return version == 1 ? v1.cell_channels : v2.base.cell_channels; }

    void init(std::mt19937_64& rng) {
        if (version == 1)
            v1.init(rng);
        else
            v2.init(rng);
    }
    void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
        if (version == 1)
            v1.collect(prefix, out);
        else
            v2.collect(prefix, out);
    }
    CellForward<S> forward(Graph<S>& g, Var x, CellState<S>& state, ParamBinder<S>& bind,
                           bool update_state, bool state_backprop) {
        return version == 1 ? bconv_forward(g, x, state, v1, bind, update_state, state_backprop)
                            : bconv_v2_forward(g, x, state, v2, bind, update_state, state_backprop);
    }
};

// One (Conv-block, 1x1 fusion, cell) unit:
//   x_i = block(x_{i-1});  y_i = cell(fuse(cat(x_i, pool(y_{i-1}))), C_prev)
template <typename S>
struct BlockPair {
    ConvBlock<S> block;
    Tensor<S> w_fuse, b_fuse;  // [cellC, blockC + prevCellC, 1, 1]
    CellUnit<S> cell;

    BlockPair() = default;
    BlockPair(int ver, int in_c, int block_c, int stride, int prev_cell_c, int cell_c, int k)
        : block(in_c, block_c, stride),
          w_fuse({cell_c, block_c + prev_cell_c, 1, 1}),
          b_fuse({cell_c}),
          cell(ver, cell_c, cell_c, k) {}

    void init(std::mt19937_64& rng) {
        block.init(rng);
        const S bd = std::sqrt(S(3) / static_cast<S>(w_fuse.shape[1]));
        fill_uniform(w_fuse, -bd, bd, rng);
        std::fill(b_fuse.data.begin(), b_fuse.data.end(), S(0));
        cell.init(rng);
    }
    void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
        block.collect(prefix + ".block", out);
        out.push_back({prefix + ".w_fuse", &w_fuse});
        out.push_back({prefix + ".b_fuse", &b_fuse});
        cell.collect(prefix + ".cell", out);
    }
};

template <typename S>
struct NetworkOutput {
    Var logits;
    Var feature;
};

template <typename S>
class PTLNetwork {
public:
    NetConfig config;
    Tensor<S> w_stem_fuse, b_stem_fuse;  // 1x1 on the raw image (i = 0 case)
    CellUnit<S> stem_cell;
    std::vector<BlockPair<S>> pairs;
    Tensor<S> w_fusion, b_fusion;  // 1x1 over cat(last block, last cell)
    Tensor<S> w_head1, b_head1, w_head2, b_head2;
    std::vector<CellState<S>> states;  // stem first, then one per pair
    Mode mode = Mode::train;

    explicit PTLNetwork(const NetConfig& cfg) : config(cfg) {
        config.validate();
        const int k = config.cell_kernel;
        if (config.cells_enabled) {
            w_stem_fuse = Tensor<S>({config.stem_channels, config.image_channels, 1, 1});
            b_stem_fuse = Tensor<S>({config.stem_channels});
            stem_cell = CellUnit<S>(config.version, config.stem_channels, config.stem_channels, k);
        }
        int in_c = config.image_channels;
        int prev_cell = config.stem_channels;
        int res = config.resolution;
        std::vector<int> cell_res;
        cell_res.push_back(res);  // stem state resolution
        for (std::size_t i = 0; i < config.block_channels.size(); ++i) {
            const int bc = config.block_channels[i];
            const int cc = config.cell_channels[i];
            const int s = config.block_strides[i];
            if (config.cells_enabled)
                pairs.emplace_back(config.version, in_c, bc, s, prev_cell, cc, k);
            else
                pairs.emplace_back(BlockPair<S>{});
            if (!config.cells_enabled) pairs.back().block = ConvBlock<S>(in_c, bc, s);
            in_c = bc;
            prev_cell = cc;
            res /= s;
            cell_res.push_back(res);
        }
        const int f = config.feature_channels();
        if (config.cells_enabled) {
            w_fusion = Tensor<S>({f, config.block_channels.back() + config.cell_channels.back(), 1, 1});
            b_fusion = Tensor<S>({f});
        }
        w_head1 = Tensor<S>({config.head_hidden, f});
        b_head1 = Tensor<S>({config.head_hidden});
        w_head2 = Tensor<S>({config.classes, config.head_hidden});
        b_head2 = Tensor<S>({config.classes});
        if (config.cells_enabled) {
            const bool hidden = config.version == 2;
            states.emplace_back(config.stem_channels, cell_res[0], cell_res[0], hidden);
            for (std::size_t i = 0; i < pairs.size(); ++i)
                states.emplace_back(config.cell_channels[i], cell_res[i + 1], cell_res[i + 1], hidden);
        }
    }

    void init(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        // He-style uniform for the hidden head (feeds relu), Xavier-style for logits.
        auto fill_linear = [&rng](Tensor<S>& w, Tensor<S>& b, S gain) {
            const S bd = std::sqrt(gain / static_cast<S>(w.shape.back()));
            fill_uniform(w, -bd, bd, rng);
            std::fill(b.data.begin(), b.data.end(), S(0));
        };
        if (config.cells_enabled) {
            const S bd = std::sqrt(S(3) / static_cast<S>(config.image_channels));
            fill_uniform(w_stem_fuse, -bd, bd, rng);
            std::fill(b_stem_fuse.data.begin(), b_stem_fuse.data.end(), S(0));
            stem_cell.init(rng);
        }
        for (auto& p : pairs) {
            if (config.cells_enabled)
                p.init(rng);
            else
                p.block.init(rng);
        }
        if (config.cells_enabled) {
            const S bd = std::sqrt(S(3) / static_cast<S>(w_fusion.shape[1]));
            fill_uniform(w_fusion, -bd, bd, rng);
            std::fill(b_fusion.data.begin(), b_fusion.data.end(), S(0));
        }
        fill_linear(w_head1, b_head1, S(6));
        fill_linear(w_head2, b_head2, S(3));
    }

    std::vector<ParamRef<S>> params() {
        std::vector<ParamRef<S>> out;
        if (config.cells_enabled) {
            out.push_back({"stem.w_fuse", &w_stem_fuse});
            out.push_back({"stem.b_fuse", &b_stem_fuse});
            stem_cell.collect("stem.cell", out);
        }
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const std::string prefix = "pair" + std::to_string(i);
            if (config.cells_enabled)
                pairs[i].collect(prefix, out);
            else
                pairs[i].block.collect(prefix + ".block", out);
        }
        if (config.cells_enabled) {
            out.push_back({"fusion.w", &w_fusion});
            out.push_back({"fusion.b", &b_fusion});
        }
        out.push_back({"head.w1", &w_head1});
        out.push_back({"head.b1", &b_head1});
        out.push_back({"head.w2", &w_head2});
        out.push_back({"head.b2", &b_head2});
        return out;
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (const auto& p : params()) n += p.tensor->numel();
        return n;
    }

    void reset_states() {
        for (auto& s : states) s.reset();
    }

    void set_mode(Mode m) {
        mode = m;
        if (m == Mode::eval) reset_states();
    }

    // Full forward. Train mode advances states; eval mode reads the all-zero
    // states and never writes back.
    NetworkOutput<S> forward(Graph<S>& g, Var images, ParamBinder<S>& bind) {
        const Tensor<S>& im = g.value(images);
        detail::require_rank(im, 4, "network input");
        if (im.shape[1] != config.image_channels || im.shape[2] != config.resolution ||
            im.shape[3] != config.resolution)
            throw std::invalid_argument("network: input " + im.shape_str() +
                                        " does not match configured resolution " +
                                        std::to_string(config.resolution) + " with " +
                                        std::to_string(config.image_channels) + " channels");
        const bool train = mode == Mode::train;
        const bool sbp = config.state_backprop && train;
        if (!config.cells_enabled) return backbone_forward(g, images, bind);

        Var y = stem_forward(g, images, bind);
        Var x = images;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            auto [nx, ny] = pair_forward(g, x, y, static_cast<int>(i), bind);
            x = nx;
            y = ny;
        }
        Var fused = conv2d(g, concat_channels(g, x, y), bind(w_fusion), bind(b_fusion), 1, 0);
        Var feature = global_avg_pool(g, fused);
        Var logits = head_forward(g, feature, bind);
        (void)train;
        (void)sbp;
        return {logits, feature};
    }

    Var stem_forward(Graph<S>& g, Var images, ParamBinder<S>& bind) {
        const bool train = mode == Mode::train;
        Var fused = conv2d(g, images, bind(w_stem_fuse), bind(b_stem_fuse), 1, 0);
        return stem_cell.forward(g, fused, states[0], bind, train,
                                 config.state_backprop && train).y;
    }

    std::pair<Var, Var> pair_forward(Graph<S>& g, Var x_prev, Var y_prev, int i,
                                     ParamBinder<S>& bind) {
        const bool train = mode == Mode::train;
        BlockPair<S>& p = pairs[static_cast<std::size_t>(i)];
        Var x = p.block.forward(g, x_prev, bind);
        Var y_in = y_prev;
        if (p.block.stride > 1) y_in = avg_pool2d(g, y_prev, p.block.stride);
        Var fused = conv2d(g, concat_channels(g, x, y_in), bind(p.w_fuse), bind(p.b_fuse), 1, 0);
        Var y = p.cell
                    .forward(g, fused, states[static_cast<std::size_t>(i) + 1], bind, train,
                             config.state_backprop && train)
                    .y;
        return {x, y};
    }

    // Plain block stack + head; no cells, no fusion. Baseline and the
    // distillation student run through here.
    NetworkOutput<S> backbone_forward(Graph<S>& g, Var images, ParamBinder<S>& bind) {
        Var x = images;
        for (auto& p : pairs) x = p.block.forward(g, x, bind);
        Var feature = global_avg_pool(g, x);
        Var logits = head_forward(g, feature, bind);
        return {logits, feature};
    }

    Var head_forward(Graph<S>& g, Var feature, ParamBinder<S>& bind) {
        Var h = relu(g, linear(g, feature, bind(w_head1), bind(b_head1)));
        return linear(g, h, bind(w_head2), bind(b_head2));
    }

    // Inference on plain tensors (scratch graph). Eval mode only: states are
    // zero and must stay untouched.
    std::pair<Tensor<S>, Tensor<S>> infer(const Tensor<S>& images) {
        if (mode != Mode::eval)
            throw std::logic_error("infer: network must be in eval mode");
        Graph<S> g;
        ParamBinder<S> bind(g);
        Var im = g.constant(images);
        NetworkOutput<S> out = forward(g, im, bind);
        return {g.value(out.logits), g.value(out.feature)};
    }
};

}  // namespace ptl
