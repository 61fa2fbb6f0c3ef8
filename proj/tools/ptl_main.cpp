#include <CLI11.hpp>

#include "ptl/commands.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitLoad = 4;
constexpr int kExitGradcheck = 5;

struct CommonArgs {
    std::string config_path;
    std::string out_dir = ".";
    std::string init_path;
    std::string teacher_path;
    std::string dtype_override;
    std::int64_t seed_override = -1;
};

ptl::RunConfig load_config(const CommonArgs& args) {
    ptl::RunConfig cfg = args.config_path.empty() ? ptl::RunConfig{}
                                                  : ptl::RunConfig::parse_file(args.config_path);
    if (args.seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed_override);
    if (!args.dtype_override.empty()) cfg.dtype = args.dtype_override;
    cfg.validate();
    return cfg;
}

template <typename Fn32, typename Fn64>
int dispatch(const ptl::RunConfig& cfg, Fn32 f32, Fn64 f64) {
    if (cfg.dtype == "f64")
        f64();
    else
        f32();
    return 0;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool with_init, bool with_teacher) {
    cmd->add_option("--config", args.config_path, "run configuration file (key=value)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed_override, "override the config seed");
    cmd->add_option("--dtype", args.dtype_override, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    if (with_init)
        cmd->add_option("--init", args.init_path, "initial checkpoint (fine-tuning chains)");
    if (with_teacher) cmd->add_option("--teacher", args.teacher_path, "teacher checkpoint");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"BConv-Cell / PTL training and distillation CLI"};
    app.require_subcommand(1);

    CommonArgs args;
    bool negative_control = false;

    CLI::App* train = app.add_subcommand("train", "train a network, write checkpoint + metrics");
    add_common(train, args, true, false);
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, args, true, false);
    CLI::App* distill = app.add_subcommand("distill", "student-teacher distillation");
    add_common(distill, args, true, true);
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_common(gradcheck, args, false, false);
    gradcheck->add_flag("--negative-control", negative_control,
                        "inject a corrupted gradient; the suite must fail");
    CLI::App* inspect = app.add_subcommand("inspect-state", "per-batch latent state probe");
    add_common(inspect, args, true, false);

    CLI11_PARSE(app, argc, argv);

    try {
        ptl::RunConfig cfg = load_config(args);
        if (train->parsed())
            return dispatch(cfg,
                            [&] { ptl::cmd_train<float>(cfg, args.out_dir, args.init_path); },
                            [&] { ptl::cmd_train<double>(cfg, args.out_dir, args.init_path); });
        if (eval->parsed()) {
            if (args.init_path.empty())
                throw ptl::ConfigError("eval: --init CHECKPOINT is required");
            return dispatch(cfg,
                            [&] { ptl::cmd_eval<float>(cfg, args.init_path, args.out_dir); },
                            [&] { ptl::cmd_eval<double>(cfg, args.init_path, args.out_dir); });
        }
        if (distill->parsed()) {
            if (args.teacher_path.empty())
                throw ptl::ConfigError("distill: --teacher CHECKPOINT is required");
            return dispatch(
                cfg,
                [&] { ptl::cmd_distill<float>(cfg, args.teacher_path, args.out_dir, args.init_path); },
                [&] { ptl::cmd_distill<double>(cfg, args.teacher_path, args.out_dir, args.init_path); });
        }
        if (gradcheck->parsed())
            return ptl::cmd_gradcheck(cfg, std::cout, negative_control) ? 0 : kExitGradcheck;
        if (inspect->parsed())
            return dispatch(
                cfg, [&] { ptl::cmd_inspect_state<float>(cfg, args.out_dir, args.init_path); },
                [&] { ptl::cmd_inspect_state<double>(cfg, args.out_dir, args.init_path); });
    } catch (const ptl::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const ptl::DataError& e) {
        std::cerr << e.what() << "\n";
        return kExitData;
    } catch (const ptl::LoadError& e) {
        std::cerr << e.what() << "\n";
        return kExitLoad;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
