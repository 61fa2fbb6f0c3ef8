#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ptl/commands.hpp"

using ptl::RunConfig;

namespace {
namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& sub = "") const {
        return sub.empty() ? path.string() : (path / sub).string();
    }
};

std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

RunConfig tiny_run_config() {
    RunConfig c;
    c.epochs = 2;
    c.batch_size = 8;
    c.seed = 3;
    c.report_timing = false;
    c.stem_channels = 3;
    c.block_channels = {4, 6};
    c.block_strides = {1, 2};
    c.cell_channels = {3, 4};
    c.head_hidden = 5;
    c.data_classes = 3;
    c.data_per_class = 8;
    c.data_eval_per_class = 4;
    c.data_resolution = 8;
    c.data_channels = 2;
    return c;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(PTL_CLI_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
}  // namespace

TEST_CASE("train writes metrics and a loadable checkpoint; reruns are byte-identical") {
    TempDir dir("ptl_cli_train");
    RunConfig cfg = tiny_run_config();
    std::ostringstream log;
    ptl::cmd_train<float>(cfg, dir.str("a"), "", log);
    ptl::cmd_train<float>(cfg, dir.str("b"), "", log);

    const std::string csv_a = slurp(dir.str("a/metrics.csv"));
    CHECK(csv_a == slurp(dir.str("b/metrics.csv")));
    CHECK(slurp(dir.str("a/checkpoint.bcnv")) == slurp(dir.str("b/checkpoint.bcnv")));
    CHECK(csv_a.rfind("epoch,loss,train_acc,eval_acc,lr,seconds\n", 0) == 0);
    CHECK(std::count(csv_a.begin(), csv_a.end(), '\n') == 3);  // header + 2 epochs
    CHECK(csv_a.find(",0.000\n") != std::string::npos);        // timing suppressed

    ptl::Checkpoint ck = ptl::checkpoint_load(dir.str("a/checkpoint.bcnv"));
    RunConfig echoed = RunConfig::parse_text(ck.config_text);
    CHECK(echoed.to_text() == cfg.to_text());
}

TEST_CASE("zero-epoch training preserves the init checkpoint parameters") {
    TempDir dir("ptl_cli_zero");
    RunConfig cfg = tiny_run_config();
    ptl::cmd_train<float>(cfg, dir.str("base"), "", std::cout);

    RunConfig zero = cfg;
    zero.epochs = 0;
    zero.seed = 99;  // different init seed must not matter: params come from --init
    std::ostringstream log;
    ptl::cmd_train<float>(zero, dir.str("resumed"), dir.str("base/checkpoint.bcnv"), log);

    ptl::Checkpoint a = ptl::checkpoint_load(dir.str("base/checkpoint.bcnv"));
    ptl::Checkpoint b = ptl::checkpoint_load(dir.str("resumed/checkpoint.bcnv"));
    REQUIRE(a.tensors.size() == b.tensors.size());
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
        CHECK(a.tensors[i].name == b.tensors[i].name);
        CHECK(a.tensors[i].values == b.tensors[i].values);
    }
    const std::string csv = slurp(dir.str("resumed/metrics.csv"));
    CHECK(csv == ptl::detail::kMetricsHeader);
}

TEST_CASE("chained fine-tuning is reproducible end to end") {
    TempDir dir("ptl_cli_chain");
    RunConfig cfg = tiny_run_config();
    for (const char* run : {"x", "y"}) {
        std::ostringstream log;
        const std::string base = dir.str(std::string("a_") + run);
        const std::string cont = dir.str(std::string("b_") + run);
        ptl::cmd_train<float>(cfg, base, "", log);
        RunConfig second = cfg;
        second.seed = 17;
        ptl::cmd_train<float>(second, cont, base + "/checkpoint.bcnv", log);
    }
    CHECK(slurp(dir.str("b_x/metrics.csv")) == slurp(dir.str("b_y/metrics.csv")));
    CHECK(slurp(dir.str("b_x/checkpoint.bcnv")) == slurp(dir.str("b_y/checkpoint.bcnv")));
}

TEST_CASE("eval reproduces training-time accuracy from a cold checkpoint load") {
    TempDir dir("ptl_cli_eval");
    RunConfig cfg = tiny_run_config();
    cfg.epochs = 3;
    std::ostringstream log;
    ptl::cmd_train<float>(cfg, dir.str("run"), "", log);

    // In-memory evaluation of the trained network.
    auto [train_ds, eval_ds] = ptl::make_datasets<float>(cfg);
    ptl::PTLNetwork<float> net(cfg.net_config());
    ptl::checkpoint_apply(ptl::checkpoint_load(dir.str("run/checkpoint.bcnv")), net.params());
    net.set_mode(ptl::Mode::eval);
    const double mem_acc = ptl::evaluate(net, *eval_ds, cfg.batch_size);

    const double cli_acc = ptl::cmd_eval<float>(cfg, dir.str("run/checkpoint.bcnv"),
                                                dir.str("evalout"), log);
    CHECK(cli_acc == mem_acc);

    const std::string per_class = slurp(dir.str("evalout/per_class.csv"));
    CHECK(per_class.rfind("class,total,correct,accuracy\n", 0) == 0);
    CHECK(std::count(per_class.begin(), per_class.end(), '\n') == 1 + cfg.data_classes);
}

TEST_CASE("an untrained network scores near chance level") {
    TempDir dir("ptl_cli_chance");
    RunConfig cfg = tiny_run_config();
    cfg.data_classes = 4;
    cfg.data_per_class = 64;
    cfg.data_eval_per_class = 0;
    auto [ds, none] = ptl::make_datasets<float>(cfg);
    ptl::PTLNetwork<float> net(cfg.net_config());
    net.init(cfg.seed);
    net.set_mode(ptl::Mode::eval);
    const double acc = ptl::evaluate(net, ds, 32);
    // 256 Bernoulli(1/4) trials: +-5 sigma is ~[0.115, 0.385].
    CHECK(acc > 0.10);
    CHECK(acc < 0.40);
}

TEST_CASE("distill command writes a backbone checkpoint without teacher tensors") {
    TempDir dir("ptl_cli_distill");
    RunConfig cfg = tiny_run_config();
    std::ostringstream log;
    ptl::cmd_train<float>(cfg, dir.str("teacher"), "", log);

    for (double lambda : {0.0, 0.8, 1.0}) {
        RunConfig dcfg = cfg;
        dcfg.epochs = 1;
        dcfg.lambda = lambda;
        const std::string out = dir.str("student_" + std::to_string(lambda));
        ptl::cmd_distill<float>(dcfg, dir.str("teacher/checkpoint.bcnv"), out, "", log);
        ptl::Checkpoint ck = ptl::checkpoint_load(out + "/checkpoint.bcnv");
        for (const auto& t : ck.tensors) {
            CHECK(t.name.find("cell") == std::string::npos);
            CHECK(t.name.find("fuse") == std::string::npos);
        }
        RunConfig echoed = RunConfig::parse_text(ck.config_text);
        CHECK(!echoed.cells);
    }
}

TEST_CASE("inspect-state emits per-batch per-cell rows and rejects backbones") {
    TempDir dir("ptl_cli_inspect");
    RunConfig cfg = tiny_run_config();
    cfg.version = 2;
    std::ostringstream log;
    ptl::cmd_inspect_state<float>(cfg, dir.str("probe"), "", log);
    const std::string csv = slurp(dir.str("probe/state_probe.csv"));
    CHECK(csv.rfind("batch,cell,c_l2,c_mean,h_l2,h_mean\n", 0) == 0);
    const int batches = (cfg.data_classes * cfg.data_per_class + cfg.batch_size - 1) / cfg.batch_size;
    const int cells = 1 + static_cast<int>(cfg.block_channels.size());
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + batches * cells);

    RunConfig bare = cfg;
    bare.cells = false;
    CHECK_THROWS_AS(ptl::cmd_inspect_state<float>(bare, dir.str("probe2"), "", log),
                    ptl::ConfigError);
}

TEST_CASE("gradcheck command reports per-entry lines and honors the negative control") {
    RunConfig cfg = tiny_run_config();
    std::ostringstream log;
    CHECK(ptl::cmd_gradcheck(cfg, log, false));
    CHECK(log.str().find("PASS conv2d") != std::string::npos);
    CHECK(log.str().find("all checks passed") != std::string::npos);
    std::ostringstream log2;
    CHECK(!ptl::cmd_gradcheck(cfg, log2, true));
    CHECK(log2.str().find("FAIL negative_control") != std::string::npos);
}

TEST_CASE("CLI binary: exit codes for config, data, and load failures") {
    TempDir dir("ptl_cli_binary");
    {
        std::ofstream f(dir.str("bad.cfg"));
        f << "lambda = 2.5\n";
    }
    CHECK(run_cli("train --config " + dir.str("bad.cfg") + " --out " + dir.str("o1")) == 2);
    {
        std::ofstream f(dir.str("nodata.cfg"));
        f << "data.kind = cifar\ndata.cifar_train = " << dir.str("missing.bin") << "\n";
    }
    CHECK(run_cli("train --config " + dir.str("nodata.cfg") + " --out " + dir.str("o2")) == 3);
    {
        std::ofstream f(dir.str("junk.bcnv"), std::ios::binary);
        f << "not a checkpoint";
    }
    {
        std::ofstream f(dir.str("tiny.cfg"));
        RunConfig cfg = tiny_run_config();
        f << cfg.to_text();
    }
    CHECK(run_cli("eval --config " + dir.str("tiny.cfg") + " --init " + dir.str("junk.bcnv") +
                  " --out " + dir.str("o3")) == 4);
    CHECK(run_cli("eval --config " + dir.str("tiny.cfg") + " --out " + dir.str("o4")) == 2);
    CHECK(run_cli("gradcheck --negative-control") == 5);
    CHECK(run_cli("") != 0);  // a subcommand is required
}

TEST_CASE("CLI binary: train then eval round trip with seed and dtype overrides") {
    TempDir dir("ptl_cli_roundtrip");
    {
        std::ofstream f(dir.str("run.cfg"));
        RunConfig cfg = tiny_run_config();
        cfg.epochs = 1;
        f << cfg.to_text();
    }
    CHECK(run_cli("train --config " + dir.str("run.cfg") + " --out " + dir.str("run") +
                  " --seed 5 --dtype f64") == 0);
    CHECK(fs::exists(dir.str("run/checkpoint.bcnv")));
    CHECK(fs::exists(dir.str("run/metrics.csv")));
    CHECK(run_cli("eval --config " + dir.str("run.cfg") + " --dtype f64 --init " +
                  dir.str("run/checkpoint.bcnv") + " --out " + dir.str("ev")) == 0);
    CHECK(fs::exists(dir.str("ev/per_class.csv")));
}
