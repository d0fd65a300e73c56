#include "awmark/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace awmark {

Tensor ParamSet::add(const std::string& name, Tensor t) {
    if (has(name)) throw std::invalid_argument("ParamSet: duplicate parameter name " + name);
    entries_.push_back({name, t});
    return t;
}

Tensor ParamSet::get(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.value;
    throw std::invalid_argument("ParamSet: no parameter named " + name);
}

bool ParamSet::has(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return true;
    return false;
}

void ParamSet::set_requires_grad(bool rg) {
    for (auto& e : entries_) e.value.set_requires_grad(rg);
}

void ParamSet::zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
}

bool ParamSet::all_finite() const {
    for (const auto& e : entries_)
        if (!e.value.all_finite()) return false;
    return true;
}

Tensor init_conv_weight(int co, int ci, int kh, int kw, SeededRng& rng) {
    const double limit = std::sqrt(6.0 / (static_cast<double>(ci) * kh * kw));
    Tensor w = Tensor::zeros({co, ci, kh, kw});
    for (std::int64_t i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
    return w;
}

Tensor init_linear_weight(int out, int in, SeededRng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    Tensor w = Tensor::zeros({out, in});
    for (std::int64_t i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
    return w;
}

void SgdMomentum::step(ParamSet& params, double grad_scale) {
    if (velocity_.size() != params.size()) {
        velocity_.clear();
        for (const auto& e : params.entries())
            velocity_.emplace_back(static_cast<std::size_t>(e.value.size()), 0.0);
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor t = params.entries()[p].value;
        const double* g = t.grad();
        if (!g) continue;
        std::vector<double>& v = velocity_[p];
        double* d = t.data();
        for (std::int64_t i = 0; i < t.size(); ++i) {
            v[i] = momentum_ * v[i] + g[i] * grad_scale;
            d[i] -= lr_ * v[i];
        }
    }
}

}  // namespace awmark
