#ifndef AWMARK_NN_HPP
#define AWMARK_NN_HPP

#include <string>
#include <vector>

#include "awmark/rng.hpp"
#include "awmark/tensor.hpp"

namespace awmark {

/// Ordered, named collection of parameter tensors for one model. Order is
/// fixed at construction and determines checkpoint and SGD traversal order.
class ParamSet {
public:
    struct Entry {
        std::string name;
        Tensor value;
    };

    Tensor add(const std::string& name, Tensor t);
    Tensor get(const std::string& name) const;
    bool has(const std::string& name) const;

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    std::size_t size() const { return entries_.size(); }

    void set_requires_grad(bool rg);
    void zero_grad();
    bool all_finite() const;

private:
    std::vector<Entry> entries_;
};

/// He-style uniform init, limit sqrt(6 / fan_in), bias zero.
Tensor init_conv_weight(int co, int ci, int kh, int kw, SeededRng& rng);
Tensor init_linear_weight(int out, int in, SeededRng& rng);

/// Plain SGD with momentum. step() consumes whatever gradient currently sits
/// on each parameter (scaled by grad_scale, e.g. 1/batch) and leaves the
/// gradient buffers untouched; callers zero them between steps.
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

    void step(ParamSet& params, double grad_scale = 1.0);

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_;
    double momentum_;
    std::vector<std::vector<double>> velocity_;
};

struct TrainLog {
    std::vector<double> epoch_loss;
};

}  // namespace awmark

#endif
