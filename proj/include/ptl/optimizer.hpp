#pragma once

#include "ptl/cells.hpp"

namespace ptl {

// v <- momentum * v + g;  p <- p - lr(epoch) * v
// lr(epoch) = lr0 * decay_factor^floor(epoch / decay_every)
template <typename S>
class SgdMomentum {
public:
    double lr0 = 0.01;
    double momentum = 0.9;
    double decay_factor = 0.1;
    int decay_every = 10;

    SgdMomentum() = default;
    SgdMomentum(double lr, double m, double decay, int every)
        : lr0(lr), momentum(m), decay_factor(decay), decay_every(every) {
        if (m < 0 || m >= 1) throw std::invalid_argument("sgd: momentum must be in [0,1)");
    }

    double lr(int epoch) const {
        if (epoch < 0) throw std::invalid_argument("sgd: negative epoch");
        double v = lr0;
        for (int i = 0; i < epoch / decay_every; ++i) v *= decay_factor;
        return v;
    }

    void attach(const std::vector<ParamRef<S>>& params) {
        velocity_.clear();
        for (const auto& p : params) velocity_.push_back(Tensor<S>::zeros(p.tensor->shape));
    }

    // grads[i] may be empty (parameter untouched this step): velocity still decays.
    void step(const std::vector<ParamRef<S>>& params, const std::vector<Tensor<S>>& grads,
              int epoch) {
        if (velocity_.size() != params.size())
            throw std::logic_error("sgd: attach() parameter set does not match step()");
        const S rate = static_cast<S>(lr(epoch));
        const S mom = static_cast<S>(momentum);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<S>& p = *params[i].tensor;
            Tensor<S>& v = velocity_[i];
            const bool has_grad = !grads[i].shape.empty();
            if (has_grad && !grads[i].same_shape(p))
                throw std::invalid_argument("sgd: gradient shape " + grads[i].shape_str() +
                                            " does not match parameter '" + params[i].name +
                                            "' " + p.shape_str());
            for (std::int64_t j = 0; j < p.numel(); ++j) {
                v.data[j] = mom * v.data[j] + (has_grad ? grads[i].data[j] : S(0));
                p.data[j] -= rate * v.data[j];
            }
        }
    }

private:
    std::vector<Tensor<S>> velocity_;
};

}  // namespace ptl
