#pragma once

#include "tame/autodiff/tensor.hpp"

#include <vector>

namespace tame::ad {

struct AdamWConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam over a fixed list of parameter matrices.
class AdamW {
public:
    AdamW() = default;
    AdamW(AdamWConfig cfg, const std::vector<Shape>& shapes);

    // Updates params[i] in place with grads[i]; an empty grad counts as zero.
    void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads);
    void reset();

    const AdamWConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    long steps() const { return t_; }
    const std::vector<Matrix>& first_moments() const { return m_; }
    const std::vector<Matrix>& second_moments() const { return v_; }

private:
    AdamWConfig cfg_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    long t_ = 0;
};

}  // namespace tame::ad
