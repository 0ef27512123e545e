#include "tame/autodiff/adamw.hpp"

#include <cmath>
#include <stdexcept>

namespace tame::ad {

AdamW::AdamW(AdamWConfig cfg, const std::vector<Shape>& shapes) : cfg_(cfg) {
    if (cfg.lr < 0.0 || cfg.weight_decay < 0.0) throw std::invalid_argument("AdamW: negative lr or weight decay");
    for (const auto& s : shapes) {
        m_.push_back(Matrix::Zero(s.rows, s.cols));
        v_.push_back(Matrix::Zero(s.rows, s.cols));
    }
}

void AdamW::reset() {
    for (auto& m : m_) m.setZero();
    for (auto& v : v_) v.setZero();
    t_ = 0;
}

void AdamW::step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw std::invalid_argument("AdamW::step: parameter count mismatch");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        if (shape_of(p) != shape_of(m_[i])) throw ShapeError("AdamW::step", shape_of(p), shape_of(m_[i]));
        if (grads[i].size() == 0) {
            m_[i] *= cfg_.beta1;
            v_[i] *= cfg_.beta2;
        } else {
            if (shape_of(grads[i]) != shape_of(p)) throw ShapeError("AdamW::step grad", shape_of(grads[i]), shape_of(p));
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseAbs2();
        }
        if (cfg_.weight_decay != 0.0) p *= (1.0 - cfg_.lr * cfg_.weight_decay);
        p.array() -= cfg_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
    }
}

}  // namespace tame::ad
