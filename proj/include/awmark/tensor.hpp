#ifndef AWMARK_TENSOR_HPP
#define AWMARK_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace awmark {

/// Dense row-major tensor of 64-bit floats. Copies are shallow: a Tensor is a
/// handle to a shared payload, which is what lets the tape reference inputs
/// and outputs cheaply. Gradients accumulate into the payload during
/// Tape::backward and stay there until zero_grad().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    std::int64_t size() const;
    int dim(int axis) const;

    double* data();
    const double* data() const;

    bool requires_grad() const;
    void set_requires_grad(bool rg);

    /// Value of a scalar (size-1) tensor.
    double item() const;

    /// Gradient buffer; allocated and zeroed on first access.
    double* grad();
    const double* grad() const;
    bool grad_allocated() const;
    void zero_grad();

    bool all_finite() const;

    /// Identity of the underlying payload, for graph bookkeeping.
    const void* id() const { return impl_.get(); }

private:
    struct Impl {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
    Impl& impl();
    const Impl& impl() const;
};

/// Record of executed differentiable operations, in execution (topological)
/// order. backward() walks it exactly once in reverse. A Tape is
/// single-threaded; concurrent tapes over shared read-only parameter tensors
/// are fine.
class Tape {
public:
    explicit Tape(bool active = true) : active_(active) {}

    bool active() const { return active_; }

    struct Record {
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> backward_fn;  // consumes output grad, accumulates into inputs
    };

    void record(Record rec) { records_.push_back(std::move(rec)); }
    std::size_t num_ops() const { return records_.size(); }
    void clear() { records_.clear(); }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// requires_grad tensor reachable from the tape; leaves off the path are
    /// untouched (their grad() reads as zero).
    void backward(const Tensor& loss);

    // Non-smooth-point bookkeeping for finite-difference checks: ops flag the
    // tape when an input sits within kink_tol of a kink (relu at 0, clamp at
    // a bound, a norm at 0).
    void set_kink_tol(double tol) { kink_tol_ = tol; }
    double kink_tol() const { return kink_tol_; }
    void note_kink() { kink_flag_ = true; }
    bool kink_flagged() const { return kink_flag_; }

private:
    std::vector<Record> records_;
    bool active_ = true;
    double kink_tol_ = 0.0;
    bool kink_flag_ = false;
};

std::string shape_str(const std::vector<int>& shape);

/// Keeps large tensor buffers on the heap instead of per-allocation mmap
/// (glibc's default threshold causes page-fault churn in training and attack
/// loops). Call once at process start; no-op on non-glibc platforms.
void tune_allocator();

// ---- forward ops (record onto the tape when any input requires grad) ----

/// 2-D convolution over a single CHW sample. x: [Ci,H,W], w: [Co,Ci,Kh,Kw],
/// b: [Co]. Zero padding. The CHW layout is used consistently by every
/// network in this project; HWC images are converted at the boundary.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int pad);

/// x: [In], w: [Out,In], b: [Out] -> [Out]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scalar_mul(Tape& tape, const Tensor& x, double s);

/// Elementwise clamp. Gradient is identity strictly inside (lo, hi) and zero
/// outside and at the exact boundary.
Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi);

Tensor concat(Tape& tape, const std::vector<Tensor>& xs, int axis);

/// v: [L] -> [L,h,w], each channel spatially constant.
Tensor broadcast_channels(Tape& tape, const Tensor& v, int h, int w);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// x: [C,H,W] -> [C]
Tensor global_avg_pool(Tape& tape, const Tensor& x);

/// Euclidean norm of a tensor viewed as a flat vector -> scalar.
Tensor l2_norm(Tape& tape, const Tensor& x);

/// a.b / (|a||b|) -> scalar. Throws on zero-norm input.
Tensor cosine_similarity(Tape& tape, const Tensor& a, const Tensor& b);

/// rows: [K,D], v: [D] -> [K] of cosine similarities row-vs-v.
Tensor cosine_rows(Tape& tape, const Tensor& rows, const Tensor& v);

Tensor mse_loss(Tape& tape, const Tensor& x, const Tensor& y);

/// Mean over bits of the numerically stable logit form of binary
/// cross-entropy. targets must be exactly 0 or 1.
Tensor bce_with_logits(Tape& tape, const Tensor& logits, const Tensor& targets);

/// Stable log-softmax cross-entropy of logits [K] against a class index.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, int target);

// ---- finite-difference oracle ----

struct GradCheckReport {
    double max_rel_err = 0.0;
    int coords_checked = 0;
    bool unreliable = false;  // graph passed within fd reach of a kink; result skipped
};

/// Central-difference check of Tape::backward. builder must produce a scalar
/// from the given leaves. Checks every coordinate of every requires_grad
/// leaf, or a seeded random subset of max_coords_per_leaf when that is > 0.
/// Relative error is |analytic - numeric| / max(1, |numeric|).
GradCheckReport grad_check(
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& builder,
    const std::vector<Tensor>& point, double fd_step = 1e-5,
    int max_coords_per_leaf = 0, std::uint64_t subset_seed = 0);

}  // namespace awmark

#endif
