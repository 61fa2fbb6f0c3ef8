#pragma once

#include <chrono>

#include "ptl/data.hpp"
#include "ptl/network.hpp"
#include "ptl/optimizer.hpp"

namespace ptl {

struct EpochRow {
    int epoch = 0;
    double loss = 0;
    double train_acc = 0;
    double eval_acc = 0;
    double lr = 0;
    double seconds = 0;
};

template <typename S>
int count_correct(const Tensor<S>& logits, const std::vector<int>& labels) {
    const int n = logits.shape[0], k = logits.shape[1];
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        int best = 0;
        for (int j = 1; j < k; ++j)
            if (logits.at2(i, j) > logits.at2(i, best)) best = j;
        if (best == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return correct;
}

// Eval-mode accuracy over the whole dataset.
template <typename S>
double evaluate(PTLNetwork<S>& net, const Dataset<S>& ds, int batch_size,
                std::vector<int>* per_class_correct = nullptr,
                std::vector<int>* per_class_total = nullptr) {
    if (net.mode != Mode::eval) throw std::logic_error("evaluate: network must be in eval mode");
    if (per_class_correct) per_class_correct->assign(static_cast<std::size_t>(ds.class_count), 0);
    if (per_class_total) per_class_total->assign(static_cast<std::size_t>(ds.class_count), 0);
    int correct = 0;
    for (int start = 0; start < ds.size(); start += batch_size) {
        const int end = std::min(start + batch_size, ds.size());
        std::vector<int> idx;
        for (int i = start; i < end; ++i) idx.push_back(i);
        auto [logits, feature] = net.infer(ds.gather_images(idx));
        const auto labels = ds.gather_labels(idx);
        for (int i = 0; i < end - start; ++i) {
            int best = 0;
            for (int j = 1; j < ds.class_count; ++j)
                if (logits.at2(i, j) > logits.at2(i, best)) best = j;
            const int truth = labels[static_cast<std::size_t>(i)];
            if (per_class_total) ++(*per_class_total)[static_cast<std::size_t>(truth)];
            if (best == truth) {
                ++correct;
                if (per_class_correct) ++(*per_class_correct)[static_cast<std::size_t>(truth)];
            }
        }
    }
    return static_cast<double>(correct) / ds.size();
}

template <typename S>
struct TrainHooks {
    // Observes train-mode logits per batch (used by epoch-boundary tests).
    std::function<void(int, const Tensor<S>&)> on_batch_logits;
    // Observes states after each batch's write-back (inspect-state probe).
    std::function<void(int, const PTLNetwork<S>&)> on_batch_states;
};

namespace detail {
// Collects per-parameter gradients from (up to two segments of) binder maps.
template <typename S>
std::vector<Tensor<S>> collect_grads(Graph<S>& g, const std::vector<ParamRef<S>>& params,
                                     const std::vector<std::pair<Tensor<S>*, Var>>& bound_now,
                                     const std::vector<std::pair<Tensor<S>*, Var>>& bound_prev) {
    std::unordered_map<const Tensor<S>*, Tensor<S>> acc;
    auto fold = [&](const std::vector<std::pair<Tensor<S>*, Var>>& bound) {
        for (const auto& [tensor, var] : bound) {
            const Tensor<S>& grad = g.grad(var);
            auto it = acc.find(tensor);
            if (it == acc.end()) {
                acc.emplace(tensor, grad);
            } else {
                for (std::int64_t i = 0; i < grad.numel(); ++i) it->second.data[i] += grad.data[i];
            }
        }
    };
    fold(bound_now);
    fold(bound_prev);
    std::vector<Tensor<S>> out(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto it = acc.find(params[i].tensor);
        if (it != acc.end()) out[i] = std::move(it->second);
    }
    return out;
}
}  // namespace detail

// One training epoch: reset states, iterate seeded shuffled batches, forward,
// cross-entropy, backward, SGD-M step, detached state write-back.
template <typename S>
EpochRow train_epoch(PTLNetwork<S>& net, const Dataset<S>& ds, SgdMomentum<S>& opt,
                     const BatchPlan& plan, int epoch, const TrainHooks<S>* hooks = nullptr,
                     bool augment = false) {
    if (net.mode != Mode::train) throw std::logic_error("train_epoch: network must be in train mode");
    ds.validate();
    const auto t0 = std::chrono::steady_clock::now();
    net.reset_states();
    const auto params = net.params();
    const bool rolling = net.config.state_backprop;

    Graph<S> g;
    std::vector<std::pair<Tensor<S>*, Var>> prev_bound;
    int seg_start = 0, prev_seg_start = 0;

    std::mt19937_64 aug_rng(plan.seed * 0xA0761D6478BD642FULL + static_cast<std::uint64_t>(epoch));
    double loss_sum = 0;
    int correct = 0, seen = 0, batch_idx = 0;
    for (const auto& idx : plan.batches(ds.size(), epoch)) {
        if (!rolling) g.clear();
        prev_seg_start = rolling ? seg_start : 0;
        seg_start = g.size();

        Tensor<S> images = ds.gather_images(idx);
        if (augment) images = augment_batch(images, aug_rng);
        const auto labels = ds.gather_labels(idx);

        ParamBinder<S> bind(g);
        Var im = g.constant(std::move(images));
        NetworkOutput<S> out = net.forward(g, im, bind);
        Var loss = softmax_cross_entropy(g, out.logits, labels);
        g.backward(loss, rolling ? prev_seg_start : 0);

        auto grads = detail::collect_grads(g, params, bind.bound(),
                                           rolling ? prev_bound
                                                   : std::vector<std::pair<Tensor<S>*, Var>>{});
        opt.step(params, grads, epoch);

        const double batch_loss = static_cast<double>(g.value(loss).data[0]);
        if (!std::isfinite(batch_loss))
            throw std::runtime_error("train_epoch: non-finite loss at epoch " +
                                     std::to_string(epoch) + ", batch " + std::to_string(batch_idx));
        loss_sum += batch_loss * static_cast<double>(idx.size());
        correct += count_correct(g.value(out.logits), labels);
        seen += static_cast<int>(idx.size());
        if (hooks && hooks->on_batch_logits) hooks->on_batch_logits(batch_idx, g.value(out.logits));
        if (hooks && hooks->on_batch_states) hooks->on_batch_states(batch_idx, net);

        if (rolling) g.release_before(prev_seg_start);
        ++batch_idx;
        prev_bound = bind.bound();
    }
    EpochRow row;
    row.epoch = epoch;
    row.loss = loss_sum / seen;
    row.train_acc = static_cast<double>(correct) / seen;
    row.lr = opt.lr(epoch);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return row;
}

// (1 - lambda) * CE + lambda * L1. lambda = 0 short-circuits to the plain
// cross-entropy node so an STD epoch at lambda = 0 is bit-identical to
// ordinary training.
template <typename S>
Var distill_loss(Graph<S>& g, Var student_logits, const std::vector<int>& labels,
                 Var student_feat, Var teacher_feat, double lambda) {
    if (lambda < 0 || lambda > 1)
        throw std::invalid_argument("distill_loss: lambda " + std::to_string(lambda) +
                                    " outside [0,1]");
    Var ce = softmax_cross_entropy(g, student_logits, labels);
    if (lambda == 0) return ce;
    Var l1 = l1_loss(g, student_feat, teacher_feat);
    return add(g, scale(g, ce, static_cast<S>(1.0 - lambda)), scale(g, l1, static_cast<S>(lambda)));
}

// One STD epoch: frozen eval-mode teacher, trainable student.
template <typename S>
EpochRow distill_epoch(PTLNetwork<S>& student, PTLNetwork<S>& teacher, const Dataset<S>& ds,
                       SgdMomentum<S>& opt, const BatchPlan& plan, int epoch, double lambda,
                       bool augment = false) {
    if (teacher.mode != Mode::eval)
        throw std::logic_error("distill_epoch: teacher must be in eval mode");
    if (student.mode != Mode::train)
        throw std::logic_error("distill_epoch: student must be in train mode");
    if (lambda < 0 || lambda > 1)
        throw std::invalid_argument("distill_epoch: lambda outside [0,1]");
    if (teacher.config.feature_channels() != student.config.feature_channels())
        throw std::invalid_argument("distill_epoch: feature extents differ, teacher " +
                                    std::to_string(teacher.config.feature_channels()) +
                                    " vs student " +
                                    std::to_string(student.config.feature_channels()));
    ds.validate();
    const auto t0 = std::chrono::steady_clock::now();
    student.reset_states();
    const auto params = student.params();

    std::mt19937_64 aug_rng(plan.seed * 0xA0761D6478BD642FULL + static_cast<std::uint64_t>(epoch));
    double loss_sum = 0;
    int correct = 0, seen = 0;
    for (const auto& idx : plan.batches(ds.size(), epoch)) {
        Tensor<S> images = ds.gather_images(idx);
        if (augment) images = augment_batch(images, aug_rng);
        const auto labels = ds.gather_labels(idx);

        Graph<S> g;
        ParamBinder<S> bind(g);
        Var im = g.constant(images);
        NetworkOutput<S> out = student.forward(g, im, bind);
        Var loss;
        if (lambda == 0) {
            loss = softmax_cross_entropy(g, out.logits, labels);
        } else {
            auto [t_logits, t_feat] = teacher.infer(images);
            Var teacher_feat = g.constant(std::move(t_feat));
            loss = distill_loss(g, out.logits, labels, out.feature, teacher_feat, lambda);
        }
        g.backward(loss);
        auto grads = detail::collect_grads(g, params, bind.bound(), {});
        opt.step(params, grads, epoch);

        const double batch_loss = static_cast<double>(g.value(loss).data[0]);
        if (!std::isfinite(batch_loss))
            throw std::runtime_error("distill_epoch: non-finite loss at epoch " +
                                     std::to_string(epoch));
        loss_sum += batch_loss * static_cast<double>(idx.size());
        correct += count_correct(g.value(out.logits), labels);
        seen += static_cast<int>(idx.size());
    }
    EpochRow row;
    row.epoch = epoch;
    row.loss = loss_sum / seen;
    row.train_acc = static_cast<double>(correct) / seen;
    row.lr = opt.lr(epoch);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return row;
}

// ---- finite-difference gradient checking -------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0;
    int probes = 0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 1e-5;
    bool pass() const {
        for (const auto& e : entries)
            if (!e.pass) return false;
        return true;
    }
    double max_rel_err() const {
        double m = 0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_err);
        return m;
    }
};

// eval(grads): recompute the forward pass and return the scalar loss; when
// grads != nullptr additionally fill analytic gradients keyed by tensor.
// Each probe draws a random direction v over the whole tensor and compares
// the central-difference directional derivative against the analytic dot
// product grad . v; relative error against max(|analytic|, |numeric|, 1e-7).
// The 1e-7 floor covers near-degenerate probes (saturated gates can leave a
// directional derivative of ~1e-9 on a unit-scale loss) where the quotient
// would otherwise amplify round-off that central differences cannot resolve;
// such probes still must agree to 1e-12 absolute to pass at tolerance 1e-5.
// Directional probes keep the compared magnitudes healthy where single
// coordinates would drown in cancellation noise.
//
// The central-difference error is U-shaped in the step size (round-off noise
// below, truncation and piecewise-linear kink error above), and no single
// step suits both near-saturated gates (tiny directional derivative, noise
// limited) and relu-path weights (kink limited). Each probe therefore tries
// a short ladder of steps around the base step and keeps the best agreement;
// a genuinely wrong gradient disagrees at every step, so this never masks a
// real defect.
template <typename S>
GradCheckEntry grad_check(
    const std::string& name, const std::vector<std::pair<std::string, Tensor<S>*>>& tensors,
    const std::function<double(std::unordered_map<const Tensor<S>*, Tensor<S>>*)>& eval,
    int probes_per_tensor, double tolerance, std::uint64_t seed, double step = 1e-5) {
    static_assert(std::is_same_v<S, double>, "grad_check requires 64-bit tensors");
    GradCheckEntry entry{name, 0, 0, true};
    std::unordered_map<const Tensor<S>*, Tensor<S>> analytic;
    eval(&analytic);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (const auto& [tname, t] : tensors) {
        auto it = analytic.find(t);
        const std::vector<double> orig = t->data;
        for (int p = 0; p < probes_per_tensor; ++p) {
            std::vector<double> v(orig.size());
            double a = 0.0;
            for (std::size_t j = 0; j < v.size(); ++j) {
                v[j] = dist(rng);
                if (it != analytic.end()) a += it->second.data[j] * v[j];
            }
            double rel = std::numeric_limits<double>::infinity();
            for (const double h : {step, step * 10.0, step * 100.0, step * 1000.0, step * 0.1}) {
                for (std::size_t j = 0; j < v.size(); ++j) t->data[j] = orig[j] + h * v[j];
                const double lp = eval(nullptr);
                for (std::size_t j = 0; j < v.size(); ++j) t->data[j] = orig[j] - h * v[j];
                const double lm = eval(nullptr);
                t->data = orig;
                const double numeric = (lp - lm) / (2 * h);
                rel = std::min(rel, std::abs(a - numeric) /
                                        std::max({std::abs(a), std::abs(numeric), 1e-7}));
                if (rel < tolerance * 0.1) break;
            }
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
            ++entry.probes;
        }
    }
    entry.pass = entry.max_rel_err < tolerance;
    return entry;
}

}  // namespace ptl
