#pragma once

#include <map>
#include <optional>

#include "ptl/data.hpp"
#include "ptl/network.hpp"

namespace ptl {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat key=value run configuration ('#' starts a comment). Unknown keys are
// rejected so typos surface immediately.
struct RunConfig {
    std::string dtype = "f32";  // f32 | f64
    std::uint64_t seed = 1;
    int epochs = 10;
    int batch_size = 32;
    double lr = 0.01;
    double momentum = 0.9;
    double lr_decay = 0.1;
    int lr_decay_every = 10;
    double lambda = 0.8;
    bool state_backprop = false;
    bool report_timing = true;
    bool augment = false;

    int version = 1;
    bool cells = true;
    int stem_channels = 8;
    std::vector<int> block_channels{16, 32, 64};
    std::vector<int> block_strides{1, 2, 2};
    std::vector<int> cell_channels{8, 16, 16};
    int head_hidden = 128;
    int cell_kernel = 3;

    std::string data_kind = "synthetic";  // synthetic | cifar
    int data_classes = 4;
    int data_per_class = 200;
    int data_eval_per_class = 50;
    int data_resolution = 16;
    int data_channels = 3;
    double data_noise_std = 0.05;
    std::uint64_t data_seed = 7;
    std::string cifar_train;
    std::string cifar_test;
    int data_limit = 0;       // 0 = all records
    int data_eval_limit = 0;

    void validate() const {
        auto fail = [](const std::string& field, const std::string& why) {
            throw ConfigError("config: " + field + ": " + why);
        };
        if (dtype != "f32" && dtype != "f64") fail("dtype", "must be f32 or f64");
        if (epochs < 0) fail("epochs", "must be >= 0");
        if (batch_size < 1) fail("batch_size", "must be >= 1");
        if (lr <= 0) fail("lr", "must be positive");
        if (momentum < 0 || momentum >= 1) fail("momentum", "must be in [0,1)");
        if (lr_decay <= 0) fail("lr_decay", "must be positive");
        if (lr_decay_every < 1) fail("lr_decay_every", "must be >= 1");
        if (lambda < 0 || lambda > 1) fail("lambda", "must be in [0,1]");
        if (version != 1 && version != 2) fail("network.version", "must be v1 or v2");
        if (data_kind != "synthetic" && data_kind != "cifar")
            fail("data.kind", "must be synthetic or cifar");
        if (data_kind == "synthetic") {
            if (data_classes < 2) fail("data.classes", "must be >= 2");
            if (data_per_class < 1) fail("data.per_class", "must be >= 1");
            if (data_resolution < 1) fail("data.resolution", "must be >= 1");
            if (data_channels < 1) fail("data.channels", "must be >= 1");
            if (data_noise_std < 0) fail("data.noise_std", "must be >= 0");
        } else if (cifar_train.empty()) {
            fail("data.cifar_train", "required for data.kind=cifar");
        }
        try {
            net_config().validate();
        } catch (const std::invalid_argument& e) {
            fail("network", e.what());
        }
    }

    int image_channels() const { return data_kind == "cifar" ? 3 : data_channels; }
    int image_resolution() const { return data_kind == "cifar" ? 32 : data_resolution; }
    int class_count() const { return data_kind == "cifar" ? 10 : data_classes; }

    NetConfig net_config() const {
        NetConfig n;
        n.image_channels = image_channels();
        n.resolution = image_resolution();
        n.classes = class_count();
        n.stem_channels = stem_channels;
        n.block_channels = block_channels;
        n.block_strides = block_strides;
        n.cell_channels = cell_channels;
        n.head_hidden = head_hidden;
        n.cell_kernel = cell_kernel;
        n.cells_enabled = cells;
        n.version = version;
        n.state_backprop = state_backprop;
        return n;
    }

    std::string to_text() const;
    static RunConfig parse_text(const std::string& text);
    static RunConfig parse_file(const std::string& path);
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos <= v.size()) {
        const auto comma = v.find(',', pos);
        const std::string tok = trim(v.substr(pos, comma == std::string::npos ? v.size() - pos
                                                                              : comma - pos));
        try {
            out.push_back(std::stoi(tok));
        } catch (...) {
            throw ConfigError("config: " + key + ": '" + tok + "' is not an integer");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

template <typename T, typename F>
T parse_num(const std::string& key, const std::string& v, F conv) {
    try {
        std::size_t used = 0;
        T r = conv(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("config: " + key + ": '" + v + "' is not a valid number");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: " + key + ": '" + v + "' is not a boolean");
}

}  // namespace detail

inline std::string RunConfig::to_text() const {
    std::ostringstream os;
    os << "dtype=" << dtype << "\n"
       << "seed=" << seed << "\n"
       << "epochs=" << epochs << "\n"
       << "batch_size=" << batch_size << "\n"
       << "lr=" << lr << "\n"
       << "momentum=" << momentum << "\n"
       << "lr_decay=" << lr_decay << "\n"
       << "lr_decay_every=" << lr_decay_every << "\n"
       << "lambda=" << lambda << "\n"
       << "state_backprop=" << (state_backprop ? "true" : "false") << "\n"
       << "report_timing=" << (report_timing ? "true" : "false") << "\n"
       << "augment=" << (augment ? "true" : "false") << "\n"
       << "network.version=v" << version << "\n"
       << "network.cells=" << (cells ? "true" : "false") << "\n"
       << "network.stem_channels=" << stem_channels << "\n"
       << "network.block_channels=" << detail::join_ints(block_channels) << "\n"
       << "network.block_strides=" << detail::join_ints(block_strides) << "\n"
       << "network.cell_channels=" << detail::join_ints(cell_channels) << "\n"
       << "network.head_hidden=" << head_hidden << "\n"
       << "network.cell_kernel=" << cell_kernel << "\n"
       << "data.kind=" << data_kind << "\n"
       << "data.classes=" << data_classes << "\n"
       << "data.per_class=" << data_per_class << "\n"
       << "data.eval_per_class=" << data_eval_per_class << "\n"
       << "data.resolution=" << data_resolution << "\n"
       << "data.channels=" << data_channels << "\n"
       << "data.noise_std=" << data_noise_std << "\n"
       << "data.seed=" << data_seed << "\n"
       << "data.cifar_train=" << cifar_train << "\n"
       << "data.cifar_test=" << cifar_test << "\n"
       << "data.limit=" << data_limit << "\n"
       << "data.eval_limit=" << data_eval_limit << "\n";
    return os.str();
}

inline RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        auto to_i = [&](const std::string& v) {
            return detail::parse_num<int>(key, v, [](const std::string& s, std::size_t* u) {
                return std::stoi(s, u);
            });
        };
        auto to_d = [&](const std::string& v) {
            return detail::parse_num<double>(key, v, [](const std::string& s, std::size_t* u) {
                return std::stod(s, u);
            });
        };
        auto to_u64 = [&](const std::string& v) {
            return detail::parse_num<std::uint64_t>(key, v, [](const std::string& s, std::size_t* u) {
                return std::stoull(s, u);
            });
        };
        if (key == "dtype") c.dtype = val;
        else if (key == "seed") c.seed = to_u64(val);
        else if (key == "epochs") c.epochs = to_i(val);
        else if (key == "batch_size") c.batch_size = to_i(val);
        else if (key == "lr") c.lr = to_d(val);
        else if (key == "momentum") c.momentum = to_d(val);
        else if (key == "lr_decay") c.lr_decay = to_d(val);
        else if (key == "lr_decay_every") c.lr_decay_every = to_i(val);
        else if (key == "lambda") c.lambda = to_d(val);
        else if (key == "state_backprop") c.state_backprop = detail::parse_bool(key, val);
        else if (key == "report_timing") c.report_timing = detail::parse_bool(key, val);
        else if (key == "augment") c.augment = detail::parse_bool(key, val);
        else if (key == "network.version") {
            if (val == "v1" || val == "1") c.version = 1;
            else if (val == "v2" || val == "2") c.version = 2;
            else throw ConfigError("config: network.version: '" + val + "' is not v1 or v2");
        }
        else if (key == "network.cells") c.cells = detail::parse_bool(key, val);
        else if (key == "network.stem_channels") c.stem_channels = to_i(val);
        else if (key == "network.block_channels") c.block_channels = detail::parse_int_list(key, val);
        else if (key == "network.block_strides") c.block_strides = detail::parse_int_list(key, val);
        else if (key == "network.cell_channels") c.cell_channels = detail::parse_int_list(key, val);
        else if (key == "network.head_hidden") c.head_hidden = to_i(val);
        else if (key == "network.cell_kernel") c.cell_kernel = to_i(val);
        else if (key == "data.kind") c.data_kind = val;
        else if (key == "data.classes") c.data_classes = to_i(val);
        else if (key == "data.per_class") c.data_per_class = to_i(val);
        else if (key == "data.eval_per_class") c.data_eval_per_class = to_i(val);
        else if (key == "data.resolution") c.data_resolution = to_i(val);
        else if (key == "data.channels") c.data_channels = to_i(val);
        else if (key == "data.noise_std") c.data_noise_std = to_d(val);
        else if (key == "data.seed") c.data_seed = to_u64(val);
        else if (key == "data.cifar_train") c.cifar_train = val;
        else if (key == "data.cifar_test") c.cifar_test = val;
        else if (key == "data.limit") c.data_limit = to_i(val);
        else if (key == "data.eval_limit") c.data_eval_limit = to_i(val);
        else throw ConfigError("config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

inline RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse_text(os.str());
}

// Train/eval dataset pair per the config's data section.
template <typename S>
std::pair<Dataset<S>, std::optional<Dataset<S>>> make_datasets(const RunConfig& c) {
    if (c.data_kind == "synthetic") {
        Dataset<S> train = synth_generate<S>(c.data_classes, c.data_per_class, c.data_resolution,
                                             c.data_channels, c.data_noise_std, c.data_seed);
        std::optional<Dataset<S>> eval;
        if (c.data_eval_per_class > 0)
            eval = synth_generate<S>(c.data_classes, c.data_eval_per_class, c.data_resolution,
                                     c.data_channels, c.data_noise_std, c.data_seed + 1);
        return {std::move(train), std::move(eval)};
    }
    Dataset<S> train = cifar_read<S>(c.cifar_train, c.data_limit);
    std::optional<Dataset<S>> eval;
    if (!c.cifar_test.empty()) eval = cifar_read<S>(c.cifar_test, c.data_eval_limit);
    return {std::move(train), std::move(eval)};
}

}  // namespace ptl
