#include "awmark/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "awmark/rng.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace awmark {

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

namespace {

std::int64_t shape_size(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape));
        n *= d;
    }
    return n;
}

void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---- Tensor ----

Tensor::Impl& Tensor::impl() {
    if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
    return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
    if (!impl_) throw std::logic_error("tensor: use of undefined tensor");
    return *impl_;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->data.assign(shape_size(shape), 0.0);
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    check(shape_size(shape) == static_cast<std::int64_t>(data.size()),
          "tensor: shape " + shape_str(shape) + " does not match data length " +
              std::to_string(data.size()));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const { return impl().shape; }

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(impl().data.size()); }

int Tensor::dim(int axis) const { return impl().shape.at(axis); }

double* Tensor::data() { return impl().data.data(); }
const double* Tensor::data() const { return impl().data.data(); }

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool rg) { impl().requires_grad = rg; }

double Tensor::item() const {
    check(size() == 1, "tensor: item() on non-scalar " + shape_str(shape()));
    return impl().data[0];
}

double* Tensor::grad() {
    auto& im = impl();
    if (im.grad.size() != im.data.size()) im.grad.assign(im.data.size(), 0.0);
    return im.grad.data();
}

const double* Tensor::grad() const {
    const auto& im = impl();
    return im.grad.size() == im.data.size() ? im.grad.data() : nullptr;
}

bool Tensor::grad_allocated() const { return grad() != nullptr; }

void Tensor::zero_grad() {
    auto& im = impl();
    std::fill(im.grad.begin(), im.grad.end(), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : impl().data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- Tape ----

void Tape::backward(const Tensor& loss) {
    check(loss.defined() && loss.size() == 1,
          "backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    Tensor seed = loss;
    seed.grad()[0] += 1.0;
    std::unordered_set<const void*> needed;
    needed.insert(seed.id());
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        if (!needed.count(it->output.id())) continue;
        it->backward_fn();
        for (const Tensor& in : it->inputs)
            if (in.requires_grad()) needed.insert(in.id());
    }
}

// ---- op helpers ----

namespace {

bool want_record(const Tape& tape, std::initializer_list<const Tensor*> ins) {
    if (!tape.active()) return false;
    for (const Tensor* t : ins)
        if ((*t).requires_grad()) return true;
    return false;
}

void same_shape(const char* op, const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

// elementwise unary with y = f(x), dx = df(x, y) * gy
template <typename F, typename DF>
Tensor unary_op(const char* name, Tape& tape, const Tensor& x, F f, DF df) {
    (void)name;
    Tensor y = Tensor::zeros(x.shape(), false);
    const double* xd = x.data();
    double* yd = y.data();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) yd[i] = f(xd[i]);
    if (want_record(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape.record({{x}, y, [xc, yc, df, n]() mutable {
                         const double* g = yc.grad();
                         const double* xv = xc.data();
                         const double* yv = yc.data();
                         double* gx = xc.grad();
                         for (std::int64_t i = 0; i < n; ++i) gx[i] += df(xv[i], yv[i]) * g[i];
                     }});
    }
    return y;
}

#if defined(__GNUC__) || defined(__clang__)
#define AWMARK_HAVE_SIMD_CONV 1
typedef double conv_v4 __attribute__((vector_size(32), aligned(8), may_alias));
namespace {
inline conv_v4 cv_load(const double* p) { return *reinterpret_cast<const conv_v4*>(p); }
inline void cv_store(double* p, conv_v4 v) { *reinterpret_cast<conv_v4*>(p) = v; }
inline conv_v4 cv_splat(double v) { return conv_v4{v, v, v, v}; }
}  // namespace
#endif

// ---- direct 3x3 convolution, stride 1, pad 1 (the hot path) ----
// Four output channels at a time; x is tiled by 8 so the accumulators live
// in registers while the input channels stream past. Rows are processed in
// strips so a strip's input window is served from cache across
// output-channel blocks. With accumulate=true the result adds onto out
// (used by gradient passes).

void conv3x3_s1(const double* in, int ci, int h, int w, const double* wt,
                const double* bias, int co, double* out, bool accumulate = false) {
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    std::vector<double> scratch(4 * static_cast<std::size_t>(w));
    const int strip = 8;
    for (int ys = 0; ys < h; ys += strip) {
        const int ye = std::min(h, ys + strip);
        for (int ocb = 0; ocb < co; ocb += 4) {
            const int nb = std::min(4, co - ocb);
            const int o1i = nb > 1 ? 1 : 0, o2i = nb > 2 ? 2 : 0, o3i = nb > 3 ? 3 : 0;
            for (int y = ys; y < ye; ++y) {
                double* acc0 = scratch.data();
                double* acc1 = scratch.data() + w;
                double* acc2 = scratch.data() + 2 * w;
                double* acc3 = scratch.data() + 3 * w;
                const double b0 = bias ? bias[ocb] : 0.0;
                const double b1 = bias && nb > 1 ? bias[ocb + 1] : 0.0;
                const double b2 = bias && nb > 2 ? bias[ocb + 2] : 0.0;
                const double b3 = bias && nb > 3 ? bias[ocb + 3] : 0.0;
                for (int x = 0; x < w; ++x) {
                    acc0[x] = b0;
                    acc1[x] = b1;
                    acc2[x] = b2;
                    acc3[x] = b3;
                }
                const int sy_lo = std::max(0, y - 1), sy_hi = std::min(h - 1, y + 1);
#ifdef AWMARK_HAVE_SIMD_CONV
                // interior x tiles [1, w-1) in chunks of 8; accumulators in
                // registers across the full ic sweep of a tile
                int xt = 1;
                for (; xt + 8 <= w - 1; xt += 8) {
                    conv_v4 va0 = cv_load(acc0 + xt), vb0 = cv_load(acc0 + xt + 4);
                    conv_v4 va1 = cv_load(acc1 + xt), vb1 = cv_load(acc1 + xt + 4);
                    conv_v4 va2 = cv_load(acc2 + xt), vb2 = cv_load(acc2 + xt + 4);
                    conv_v4 va3 = cv_load(acc3 + xt), vb3 = cv_load(acc3 + xt + 4);
                    for (int ic = 0; ic < ci; ++ic) {
                        const double* src = in + static_cast<std::int64_t>(ic) * hw;
                        const double* w0 = wt + (static_cast<std::int64_t>(ocb + 0) * ci + ic) * 9;
                        const double* w1 = wt + (static_cast<std::int64_t>(ocb + o1i) * ci + ic) * 9;
                        const double* w2 = wt + (static_cast<std::int64_t>(ocb + o2i) * ci + ic) * 9;
                        const double* w3 = wt + (static_cast<std::int64_t>(ocb + o3i) * ci + ic) * 9;
                        for (int sy = sy_lo; sy <= sy_hi; ++sy) {
                            const int ky = sy - y + 1;
                            const double* row = src + static_cast<std::int64_t>(sy) * w + xt;
                            for (int kx = 0; kx < 3; ++kx) {
                                const conv_v4 r0 = cv_load(row + kx - 1);
                                const conv_v4 r1 = cv_load(row + kx + 3);
                                const int k = ky * 3 + kx;
                                va0 += cv_splat(w0[k]) * r0;
                                vb0 += cv_splat(w0[k]) * r1;
                                va1 += cv_splat(w1[k]) * r0;
                                vb1 += cv_splat(w1[k]) * r1;
                                va2 += cv_splat(w2[k]) * r0;
                                vb2 += cv_splat(w2[k]) * r1;
                                va3 += cv_splat(w3[k]) * r0;
                                vb3 += cv_splat(w3[k]) * r1;
                            }
                        }
                    }
                    cv_store(acc0 + xt, va0);
                    cv_store(acc0 + xt + 4, vb0);
                    cv_store(acc1 + xt, va1);
                    cv_store(acc1 + xt + 4, vb1);
                    cv_store(acc2 + xt, va2);
                    cv_store(acc2 + xt + 4, vb2);
                    cv_store(acc3 + xt, va3);
                    cv_store(acc3 + xt + 4, vb3);
                }
                // leftover interior columns plus the two edge columns
                for (int ic = 0; ic < ci; ++ic) {
                    const double* src = in + static_cast<std::int64_t>(ic) * hw;
                    const double* w0 = wt + (static_cast<std::int64_t>(ocb + 0) * ci + ic) * 9;
                    const double* w1 = wt + (static_cast<std::int64_t>(ocb + o1i) * ci + ic) * 9;
                    const double* w2 = wt + (static_cast<std::int64_t>(ocb + o2i) * ci + ic) * 9;
                    const double* w3 = wt + (static_cast<std::int64_t>(ocb + o3i) * ci + ic) * 9;
                    for (int sy = sy_lo; sy <= sy_hi; ++sy) {
                        const int ky = sy - y + 1;
                        const double* row = src + static_cast<std::int64_t>(sy) * w;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int x0 = std::max(xt, (kx == 0) ? 1 : 0);
                            const int x1 = (kx == 2) ? w - 1 : w;
                            const double c0 = w0[ky * 3 + kx], c1 = w1[ky * 3 + kx];
                            const double c2 = w2[ky * 3 + kx], c3 = w3[ky * 3 + kx];
                            const double* r = row + kx - 1;
                            for (int x = x0; x < x1; ++x) {
                                const double v = r[x];
                                acc0[x] += c0 * v;
                                acc1[x] += c1 * v;
                                acc2[x] += c2 * v;
                                acc3[x] += c3 * v;
                            }
                            // edge column x = 0 (not covered by the tiles)
                            if (kx == 1 || (kx == 2 && w >= 2)) {
                                const double v = r[0];
                                acc0[0] += c0 * v;
                                acc1[0] += c1 * v;
                                acc2[0] += c2 * v;
                                acc3[0] += c3 * v;
                            }
                        }
                    }
                }
#else
                for (int ic = 0; ic < ci; ++ic) {
                    const double* src = in + static_cast<std::int64_t>(ic) * hw;
                    const double* w0 = wt + (static_cast<std::int64_t>(ocb + 0) * ci + ic) * 9;
                    const double* w1 = wt + (static_cast<std::int64_t>(ocb + o1i) * ci + ic) * 9;
                    const double* w2 = wt + (static_cast<std::int64_t>(ocb + o2i) * ci + ic) * 9;
                    const double* w3 = wt + (static_cast<std::int64_t>(ocb + o3i) * ci + ic) * 9;
                    for (int sy = sy_lo; sy <= sy_hi; ++sy) {
                        const int ky = sy - y + 1;
                        const double* row = src + static_cast<std::int64_t>(sy) * w;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int x0 = (kx == 0) ? 1 : 0;
                            const int x1 = (kx == 2) ? w - 1 : w;
                            const double c0 = w0[ky * 3 + kx], c1 = w1[ky * 3 + kx];
                            const double c2 = w2[ky * 3 + kx], c3 = w3[ky * 3 + kx];
                            const double* r = row + kx - 1;
                            for (int x = x0; x < x1; ++x) {
                                const double v = r[x];
                                acc0[x] += c0 * v;
                                acc1[x] += c1 * v;
                                acc2[x] += c2 * v;
                                acc3[x] += c3 * v;
                            }
                        }
                    }
                }
#endif
                double* o0 = out + (static_cast<std::int64_t>(ocb) * h + y) * w;
                double* o1 = out + (static_cast<std::int64_t>(ocb + o1i) * h + y) * w;
                double* o2 = out + (static_cast<std::int64_t>(ocb + o2i) * h + y) * w;
                double* o3 = out + (static_cast<std::int64_t>(ocb + o3i) * h + y) * w;
                if (accumulate) {
                    for (int x = 0; x < w; ++x) o0[x] += acc0[x];
                    if (nb > 1)
                        for (int x = 0; x < w; ++x) o1[x] += acc1[x];
                    if (nb > 2)
                        for (int x = 0; x < w; ++x) o2[x] += acc2[x];
                    if (nb > 3)
                        for (int x = 0; x < w; ++x) o3[x] += acc3[x];
                } else {
                    std::memcpy(o0, acc0, w * sizeof(double));
                    if (nb > 1) std::memcpy(o1, acc1, w * sizeof(double));
                    if (nb > 2) std::memcpy(o2, acc2, w * sizeof(double));
                    if (nb > 3) std::memcpy(o3, acc3, w * sizeof(double));
                }
            }
        }
    }
}

// 3x3 stride-2 pad-1 forward. Input rows are split by column parity into
// packed buffers so every inner loop is unit-stride: with ev[j] = row[2j] and
// od[j] = row[2j+1], the taps at kx = 0,1,2 read od[ox-1], ev[ox], od[ox].
void conv3x3_s2(const double* in, int ci, int h, int w, const double* wt, const double* bias,
                int co, int ho, int wo, double* out) {
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t howo = static_cast<std::int64_t>(ho) * wo;
    const int nev = (w + 1) / 2, nod = w / 2;
    std::vector<double> scratch(4 * static_cast<std::size_t>(wo));
    std::vector<double> packed(static_cast<std::size_t>(nev) + nod);
    for (int ocb = 0; ocb < co; ocb += 4) {
        const int nb = std::min(4, co - ocb);
        const int o1 = ocb + (nb > 1 ? 1 : 0), o2 = ocb + (nb > 2 ? 2 : 0),
                  o3 = ocb + (nb > 3 ? 3 : 0);
        for (int oy = 0; oy < ho; ++oy) {
            double* acc0 = scratch.data();
            double* acc1 = scratch.data() + wo;
            double* acc2 = scratch.data() + 2 * wo;
            double* acc3 = scratch.data() + 3 * wo;
            for (int x = 0; x < wo; ++x) {
                acc0[x] = bias ? bias[ocb] : 0.0;
                acc1[x] = bias && nb > 1 ? bias[ocb + 1] : 0.0;
                acc2[x] = bias && nb > 2 ? bias[ocb + 2] : 0.0;
                acc3[x] = bias && nb > 3 ? bias[ocb + 3] : 0.0;
            }
            for (int ic = 0; ic < ci; ++ic) {
                const double* src = in + static_cast<std::int64_t>(ic) * hw;
                const double* w0 = wt + (static_cast<std::int64_t>(ocb) * ci + ic) * 9;
                const double* w1 = wt + (static_cast<std::int64_t>(o1) * ci + ic) * 9;
                const double* w2 = wt + (static_cast<std::int64_t>(o2) * ci + ic) * 9;
                const double* w3 = wt + (static_cast<std::int64_t>(o3) * ci + ic) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const int sy = 2 * oy + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    const double* row = src + static_cast<std::int64_t>(sy) * w;
                    double* ev = packed.data();
                    double* od = packed.data() + nev;
                    for (int j = 0; j < nev; ++j) ev[j] = row[2 * j];
                    for (int j = 0; j < nod; ++j) od[j] = row[2 * j + 1];
                    for (int kx = 0; kx < 3; ++kx) {
                        const double c0 = w0[ky * 3 + kx], c1 = w1[ky * 3 + kx];
                        const double c2 = w2[ky * 3 + kx], c3 = w3[ky * 3 + kx];
                        const double* r;
                        int x0, x1;
                        if (kx == 0) {
                            r = od - 1;
                            x0 = 1;
                            x1 = std::min(wo, nod + 1);
                        } else if (kx == 1) {
                            r = ev;
                            x0 = 0;
                            x1 = std::min(wo, nev);
                        } else {
                            r = od;
                            x0 = 0;
                            x1 = std::min(wo, nod);
                        }
                        for (int x = x0; x < x1; ++x) {
                            const double v = r[x];
                            acc0[x] += c0 * v;
                            acc1[x] += c1 * v;
                            acc2[x] += c2 * v;
                            acc3[x] += c3 * v;
                        }
                    }
                }
            }
            std::memcpy(out + static_cast<std::int64_t>(ocb) * howo + static_cast<std::int64_t>(oy) * wo,
                        acc0, wo * sizeof(double));
            if (nb > 1)
                std::memcpy(out + static_cast<std::int64_t>(ocb + 1) * howo + static_cast<std::int64_t>(oy) * wo,
                            acc1, wo * sizeof(double));
            if (nb > 2)
                std::memcpy(out + static_cast<std::int64_t>(ocb + 2) * howo + static_cast<std::int64_t>(oy) * wo,
                            acc2, wo * sizeof(double));
            if (nb > 3)
                std::memcpy(out + static_cast<std::int64_t>(ocb + 3) * howo + static_cast<std::int64_t>(oy) * wo,
                            acc3, wo * sizeof(double));
        }
    }
}

// input gradient of the 3x3 stride-2 conv, accumulated into gin. The same
// parity split as conv3x3_s2, applied to the scattered writes: per input
// channel the even/odd column planes are accumulated unit-stride, then
// interleaved once.
void conv3x3_s2_grad_input(const double* gout, const double* wt, int ci, int h, int w, int co,
                           int ho, int wo, double* gin) {
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t howo = static_cast<std::int64_t>(ho) * wo;
    const int nev = (w + 1) / 2, nod = w / 2;
    std::vector<double> planes(static_cast<std::size_t>(h) * (nev + nod));
    double* ev_plane = planes.data();                                       // [h][nev]
    double* od_plane = planes.data() + static_cast<std::size_t>(h) * nev;   // [h][nod]
    for (int ic = 0; ic < ci; ++ic) {
        std::fill(planes.begin(), planes.end(), 0.0);
        for (int oc = 0; oc < co; ++oc) {
            const double* wk = wt + (static_cast<std::int64_t>(oc) * ci + ic) * 9;
            const double* g = gout + static_cast<std::int64_t>(oc) * howo;
            for (int oy = 0; oy < ho; ++oy) {
                const double* grow = g + static_cast<std::int64_t>(oy) * wo;
                for (int ky = 0; ky < 3; ++ky) {
                    const int sy = 2 * oy + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const double c = wk[ky * 3 + kx];
                        double* dst;
                        int x0, x1;
                        if (kx == 0) {
                            dst = od_plane + static_cast<std::int64_t>(sy) * nod - 1;
                            x0 = 1;
                            x1 = std::min(wo, nod + 1);
                        } else if (kx == 1) {
                            dst = ev_plane + static_cast<std::int64_t>(sy) * nev;
                            x0 = 0;
                            x1 = std::min(wo, nev);
                        } else {
                            dst = od_plane + static_cast<std::int64_t>(sy) * nod;
                            x0 = 0;
                            x1 = std::min(wo, nod);
                        }
                        for (int x = x0; x < x1; ++x) dst[x] += c * grow[x];
                    }
                }
            }
        }
        double* dst = gin + static_cast<std::int64_t>(ic) * hw;
        for (int y = 0; y < h; ++y) {
            const double* ev = ev_plane + static_cast<std::int64_t>(y) * nev;
            const double* od = od_plane + static_cast<std::int64_t>(y) * nod;
            double* row = dst + static_cast<std::int64_t>(y) * w;
            for (int j = 0; j < nev; ++j) row[2 * j] += ev[j];
            for (int j = 0; j < nod; ++j) row[2 * j + 1] += od[j];
        }
    }
}

// generic forward for any kernel/stride/pad
void conv_generic(const double* in, int ci, int h, int w, const double* wt, const double* bias,
                  int co, int kh, int kw, int stride, int pad, int ho, int wo, double* out) {
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t howo = static_cast<std::int64_t>(ho) * wo;
    for (int oc = 0; oc < co; ++oc) {
        double* o = out + oc * howo;
        const double bv = bias ? bias[oc] : 0.0;
        for (std::int64_t i = 0; i < howo; ++i) o[i] = bv;
        for (int ic = 0; ic < ci; ++ic) {
            const double* src = in + ic * hw;
            const double* wk = wt + (static_cast<std::int64_t>(oc) * ci + ic) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const double c = wk[ky * kw + kx];
                    for (int oy = 0; oy < ho; ++oy) {
                        const int sy = oy * stride + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        int x0 = 0;
                        while (x0 < wo && x0 * stride + kx - pad < 0) ++x0;
                        int x1 = wo;
                        while (x1 > x0 && (x1 - 1) * stride + kx - pad >= w) --x1;
                        const double* r = src + static_cast<std::int64_t>(sy) * w + kx - pad;
                        double* orow = o + static_cast<std::int64_t>(oy) * wo;
                        for (int ox = x0; ox < x1; ++ox) orow[ox] += c * r[ox * stride];
                    }
                }
            }
        }
    }
}

void conv_grad_input_generic(const double* gout, const double* wt, int ci, int h, int w, int co,
                             int kh, int kw, int stride, int pad, int ho, int wo, double* gin) {
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t howo = static_cast<std::int64_t>(ho) * wo;
    for (int oc = 0; oc < co; ++oc) {
        const double* g = gout + oc * howo;
        for (int ic = 0; ic < ci; ++ic) {
            const double* wk = wt + (static_cast<std::int64_t>(oc) * ci + ic) * kh * kw;
            double* dst = gin + ic * hw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const double c = wk[ky * kw + kx];
                    if (c == 0.0) continue;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int sy = oy * stride + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        int x0 = 0;
                        while (x0 < wo && x0 * stride + kx - pad < 0) ++x0;
                        int x1 = wo;
                        while (x1 > x0 && (x1 - 1) * stride + kx - pad >= w) --x1;
                        const double* grow = g + static_cast<std::int64_t>(oy) * wo;
                        double* drow = dst + static_cast<std::int64_t>(sy) * w + kx - pad;
                        for (int ox = x0; ox < x1; ++ox) drow[ox * stride] += c * grow[ox];
                    }
                }
            }
        }
    }
}

#if defined(__GNUC__) || defined(__clang__)
#define AWMARK_HAVE_V4DF 1
typedef double v4df __attribute__((vector_size(32), aligned(8), may_alias));
namespace {
inline v4df v4_load(const double* p) { return *reinterpret_cast<const v4df*>(p); }
inline double v4_hsum(v4df v) { return (v[0] + v[1]) + (v[2] + v[3]); }
}  // namespace
#endif

// weight gradient of the 3x3/s1/p1 conv. One streaming pass per (oc,ic) pair
// accumulates all nine taps; rows are processed in blocks so the pass data
// stays cache-resident across the channel loops.
void conv3x3_s1_grad_weight(const double* gout, const double* in, int ci, int h, int w, int co,
                            double* gw) {
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const int yb = 4;
    for (int y0 = 0; y0 < h; y0 += yb) {
        const int y1 = std::min(h, y0 + yb);
        for (int oc = 0; oc < co; ++oc) {
            const double* g = gout + oc * hw;
            for (int ic = 0; ic < ci; ++ic) {
                const double* src = in + ic * hw;
                double acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
                for (int oy = y0; oy < y1; ++oy) {
                    const double* grow = g + static_cast<std::int64_t>(oy) * w;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int sy = oy + ky - 1;
                        if (sy < 0 || sy >= h) continue;
                        const double* r = src + static_cast<std::int64_t>(sy) * w;
                        double s0 = 0.0, s1 = 0.0, s2 = 0.0;
                        int ox = 1;
#ifdef AWMARK_HAVE_V4DF
                        v4df a0 = {0, 0, 0, 0}, a1 = {0, 0, 0, 0}, b0 = {0, 0, 0, 0},
                             b1 = {0, 0, 0, 0}, c0 = {0, 0, 0, 0}, c1 = {0, 0, 0, 0};
                        for (; ox + 8 <= w - 1; ox += 8) {
                            const v4df g0 = v4_load(grow + ox), g1 = v4_load(grow + ox + 4);
                            a0 += g0 * v4_load(r + ox - 1);
                            a1 += g1 * v4_load(r + ox + 3);
                            b0 += g0 * v4_load(r + ox);
                            b1 += g1 * v4_load(r + ox + 4);
                            c0 += g0 * v4_load(r + ox + 1);
                            c1 += g1 * v4_load(r + ox + 5);
                        }
                        s0 = v4_hsum(a0) + v4_hsum(a1);
                        s1 = v4_hsum(b0) + v4_hsum(b1);
                        s2 = v4_hsum(c0) + v4_hsum(c1);
#endif
                        for (; ox < w - 1; ++ox) {
                            s0 += grow[ox] * r[ox - 1];
                            s1 += grow[ox] * r[ox];
                            s2 += grow[ox] * r[ox + 1];
                        }
                        // edge columns ox = 0 and ox = w-1
                        if (w >= 2) {
                            s1 += grow[0] * r[0];
                            s2 += grow[0] * r[1];
                            s0 += grow[w - 1] * r[w - 2];
                            s1 += grow[w - 1] * r[w - 1];
                        } else {
                            s1 += grow[0] * r[0];
                        }
                        acc[ky * 3 + 0] += s0;
                        acc[ky * 3 + 1] += s1;
                        acc[ky * 3 + 2] += s2;
                    }
                }
                double* wk = gw + (static_cast<std::int64_t>(oc) * ci + ic) * 9;
                for (int k = 0; k < 9; ++k) wk[k] += acc[k];
            }
        }
    }
}

void conv_grad_weight_generic(const double* gout, const double* in, int ci, int h, int w, int co,
                              int kh, int kw, int stride, int pad, int ho, int wo, double* gw) {
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t howo = static_cast<std::int64_t>(ho) * wo;
    for (int oc = 0; oc < co; ++oc) {
        const double* g = gout + oc * howo;
        for (int ic = 0; ic < ci; ++ic) {
            const double* src = in + ic * hw;
            double* wk = gw + (static_cast<std::int64_t>(oc) * ci + ic) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    // four-lane partial sums; fixed order, SIMD-friendly
                    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int sy = oy * stride + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        int x0 = 0;
                        while (x0 < wo && x0 * stride + kx - pad < 0) ++x0;
                        int x1 = wo;
                        while (x1 > x0 && (x1 - 1) * stride + kx - pad >= w) --x1;
                        const double* grow = g + static_cast<std::int64_t>(oy) * wo;
                        const double* r = src + static_cast<std::int64_t>(sy) * w + kx - pad;
                        int ox = x0;
                        if (stride == 1) {
                            for (; ox + 4 <= x1; ox += 4) {
                                a0 += grow[ox] * r[ox];
                                a1 += grow[ox + 1] * r[ox + 1];
                                a2 += grow[ox + 2] * r[ox + 2];
                                a3 += grow[ox + 3] * r[ox + 3];
                            }
                        } else {
                            for (; ox + 4 <= x1; ox += 4) {
                                a0 += grow[ox] * r[ox * stride];
                                a1 += grow[ox + 1] * r[(ox + 1) * stride];
                                a2 += grow[ox + 2] * r[(ox + 2) * stride];
                                a3 += grow[ox + 3] * r[(ox + 3) * stride];
                            }
                        }
                        for (; ox < x1; ++ox) a0 += grow[ox] * r[ox * stride];
                    }
                    wk[ky * kw + kx] += (a0 + a1) + (a2 + a3);
                }
            }
        }
    }
}

}  // namespace

// ---- ops ----

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check(x.shape().size() == 3, "conv2d: input must be [C,H,W], got " + shape_str(x.shape()));
    check(w.shape().size() == 4, "conv2d: weight must be [Co,Ci,Kh,Kw], got " + shape_str(w.shape()));
    check(b.shape().size() == 1, "conv2d: bias must be [Co], got " + shape_str(b.shape()));
    check(stride >= 1 && pad >= 0, "conv2d: invalid stride/pad");
    const int ci = x.dim(0), h = x.dim(1), iw = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    check(w.dim(1) == ci, "conv2d: input channels mismatch, input " + shape_str(x.shape()) +
                              " vs weight " + shape_str(w.shape()));
    check(b.dim(0) == co, "conv2d: bias length mismatch, weight " + shape_str(w.shape()) +
                              " vs bias " + shape_str(b.shape()));
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (iw + 2 * pad - kw) / stride + 1;
    check(ho >= 1 && wo >= 1, "conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                                  shape_str(x.shape()));

    Tensor y = Tensor::zeros({co, ho, wo}, false);
    const bool fast_s1 = (kh == 3 && kw == 3 && stride == 1 && pad == 1);
    const bool fast_s2 = (kh == 3 && kw == 3 && stride == 2 && pad == 1);
    if (fast_s1)
        conv3x3_s1(x.data(), ci, h, iw, w.data(), b.data(), co, y.data());
    else if (fast_s2)
        conv3x3_s2(x.data(), ci, h, iw, w.data(), b.data(), co, ho, wo, y.data());
    else
        conv_generic(x.data(), ci, h, iw, w.data(), b.data(), co, kh, kw, stride, pad, ho, wo, y.data());

    if (want_record(tape, {&x, &w, &b})) {
        y.set_requires_grad(true);
        Tensor xc = x, wc = w, bc = b, yc = y;
        tape.record({{x, w, b}, y, [xc, wc, bc, yc, ci, h, iw, co, kh, kw, stride, pad, ho, wo,
                      fast_s1, fast_s2]() mutable {
                         const double* g = yc.grad();
                         if (bc.requires_grad()) {
                             double* gb = bc.grad();
                             const std::int64_t howo = static_cast<std::int64_t>(ho) * wo;
                             for (int oc = 0; oc < co; ++oc) {
                                 double acc = 0.0;
                                 const double* go = g + oc * howo;
                                 for (std::int64_t i = 0; i < howo; ++i) acc += go[i];
                                 gb[oc] += acc;
                             }
                         }
                         if (wc.requires_grad()) {
                             if (fast_s1)
                                 conv3x3_s1_grad_weight(g, xc.data(), ci, h, iw, co, wc.grad());
                             else
                                 conv_grad_weight_generic(g, xc.data(), ci, h, iw, co, kh, kw,
                                                          stride, pad, ho, wo, wc.grad());
                         }
                         if (xc.requires_grad()) {
                             if (fast_s1) {
                                 // input grad of 3x3/s1/p1 is the same conv with
                                 // channel-transposed, spatially flipped weights
                                 std::vector<double> wt(static_cast<std::size_t>(ci) * co * 9);
                                 const double* wv = wc.data();
                                 for (int oc = 0; oc < co; ++oc)
                                     for (int ic = 0; ic < ci; ++ic)
                                         for (int k = 0; k < 9; ++k)
                                             wt[(static_cast<std::int64_t>(ic) * co + oc) * 9 + (8 - k)] =
                                                 wv[(static_cast<std::int64_t>(oc) * ci + ic) * 9 + k];
                                 conv3x3_s1(g, co, h, iw, wt.data(), nullptr, ci, xc.grad(),
                                            /*accumulate=*/true);
                             } else if (fast_s2) {
                                 conv3x3_s2_grad_input(g, wc.data(), ci, h, iw, co, ho, wo,
                                                       xc.grad());
                             } else {
                                 conv_grad_input_generic(g, wc.data(), ci, h, iw, co, kh, kw, stride,
                                                         pad, ho, wo, xc.grad());
                             }
                         }
                     }});
    }
    return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    check(x.shape().size() == 1, "linear: input must be a vector, got " + shape_str(x.shape()));
    check(w.shape().size() == 2, "linear: weight must be [Out,In], got " + shape_str(w.shape()));
    const int in = x.dim(0), out = w.dim(0);
    check(w.dim(1) == in, "linear: shape mismatch, input " + shape_str(x.shape()) + " vs weight " +
                              shape_str(w.shape()));
    check(b.shape().size() == 1 && b.dim(0) == out,
          "linear: bias shape mismatch, weight " + shape_str(w.shape()) + " vs bias " +
              shape_str(b.shape()));
    Tensor y = Tensor::zeros({out}, false);
    const double* xd = x.data();
    const double* wd = w.data();
    double* yd = y.data();
    for (int o = 0; o < out; ++o) {
        double acc = b.data()[o];
        const double* row = wd + static_cast<std::int64_t>(o) * in;
        for (int i = 0; i < in; ++i) acc += row[i] * xd[i];
        yd[o] = acc;
    }
    if (want_record(tape, {&x, &w, &b})) {
        y.set_requires_grad(true);
        Tensor xc = x, wc = w, bc = b, yc = y;
        tape.record({{x, w, b}, y, [xc, wc, bc, yc, in, out]() mutable {
                         const double* g = yc.grad();
                         if (bc.requires_grad()) {
                             double* gb = bc.grad();
                             for (int o = 0; o < out; ++o) gb[o] += g[o];
                         }
                         if (wc.requires_grad()) {
                             double* gw = wc.grad();
                             const double* xv = xc.data();
                             for (int o = 0; o < out; ++o)
                                 for (int i = 0; i < in; ++i)
                                     gw[static_cast<std::int64_t>(o) * in + i] += g[o] * xv[i];
                         }
                         if (xc.requires_grad()) {
                             double* gx = xc.grad();
                             const double* wv = wc.data();
                             for (int o = 0; o < out; ++o) {
                                 const double go = g[o];
                                 const double* row = wv + static_cast<std::int64_t>(o) * in;
                                 for (int i = 0; i < in; ++i) gx[i] += go * row[i];
                             }
                         }
                     }});
    }
    return y;
}

Tensor relu(Tape& tape, const Tensor& x) {
    if (tape.kink_tol() > 0.0) {
        const double tol = tape.kink_tol();
        const double* xd = x.data();
        for (std::int64_t i = 0; i < x.size(); ++i)
            if (std::fabs(xd[i]) <= tol) {
                tape.note_kink();
                break;
            }
    }
    return unary_op("relu", tape, x, [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    return unary_op("sigmoid", tape, x,
                    [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                                   : std::exp(v) / (1.0 + std::exp(v)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(Tape& tape, const Tensor& x) {
    return unary_op("tanh", tape, x, [](double v) { return std::tanh(v); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    same_shape("add", a, b);
    Tensor y = Tensor::zeros(a.shape(), false);
    const double* ad = a.data();
    const double* bd = b.data();
    double* yd = y.data();
    for (std::int64_t i = 0; i < a.size(); ++i) yd[i] = ad[i] + bd[i];
    if (want_record(tape, {&a, &b})) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape.record({{a, b}, y, [ac, bc, yc]() mutable {
                         const double* g = yc.grad();
                         const std::int64_t n = yc.size();
                         if (ac.requires_grad()) {
                             double* ga = ac.grad();
                             for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
                         }
                         if (bc.requires_grad()) {
                             double* gb = bc.grad();
                             for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
                         }
                     }});
    }
    return y;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    same_shape("sub", a, b);
    Tensor y = Tensor::zeros(a.shape(), false);
    const double* ad = a.data();
    const double* bd = b.data();
    double* yd = y.data();
    for (std::int64_t i = 0; i < a.size(); ++i) yd[i] = ad[i] - bd[i];
    if (want_record(tape, {&a, &b})) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape.record({{a, b}, y, [ac, bc, yc]() mutable {
                         const double* g = yc.grad();
                         const std::int64_t n = yc.size();
                         if (ac.requires_grad()) {
                             double* ga = ac.grad();
                             for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
                         }
                         if (bc.requires_grad()) {
                             double* gb = bc.grad();
                             for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
                         }
                     }});
    }
    return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    same_shape("mul", a, b);
    Tensor y = Tensor::zeros(a.shape(), false);
    const double* ad = a.data();
    const double* bd = b.data();
    double* yd = y.data();
    for (std::int64_t i = 0; i < a.size(); ++i) yd[i] = ad[i] * bd[i];
    if (want_record(tape, {&a, &b})) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape.record({{a, b}, y, [ac, bc, yc]() mutable {
                         const double* g = yc.grad();
                         const std::int64_t n = yc.size();
                         if (ac.requires_grad()) {
                             double* ga = ac.grad();
                             const double* bv = bc.data();
                             for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
                         }
                         if (bc.requires_grad()) {
                             double* gb = bc.grad();
                             const double* av = ac.data();
                             for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
                         }
                     }});
    }
    return y;
}

Tensor scalar_mul(Tape& tape, const Tensor& x, double s) {
    return unary_op("scalar_mul", tape, x, [s](double v) { return s * v; },
                    [s](double, double) { return s; });
}

Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
    check(lo <= hi, "clamp: lo > hi");
    if (tape.kink_tol() > 0.0) {
        const double tol = tape.kink_tol();
        const double* xd = x.data();
        for (std::int64_t i = 0; i < x.size(); ++i)
            if (std::fabs(xd[i] - lo) <= tol || std::fabs(xd[i] - hi) <= tol) {
                tape.note_kink();
                break;
            }
    }
    return unary_op("clamp", tape, x,
                    [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
                    [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor concat(Tape& tape, const std::vector<Tensor>& xs, int axis) {
    check(!xs.empty(), "concat: no inputs");
    const auto& s0 = xs[0].shape();
    check(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: bad axis");
    std::vector<int> oshape = s0;
    for (std::size_t i = 1; i < xs.size(); ++i) {
        const auto& si = xs[i].shape();
        check(si.size() == s0.size(), "concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(si));
        for (std::size_t d = 0; d < s0.size(); ++d)
            if (static_cast<int>(d) != axis)
                check(si[d] == s0[d], "concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(si));
        oshape[axis] += si[axis];
    }
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

    Tensor y = Tensor::zeros(oshape, false);
    const std::int64_t ochunk = static_cast<std::int64_t>(oshape[axis]) * inner;
    std::int64_t off = 0;
    for (const Tensor& x : xs) {
        const std::int64_t chunk = static_cast<std::int64_t>(x.shape()[axis]) * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(y.data() + o * ochunk + off, x.data() + o * chunk, chunk * sizeof(double));
        off += chunk;
    }

    bool rec = tape.active();
    if (rec) {
        rec = false;
        for (const Tensor& x : xs) rec = rec || x.requires_grad();
    }
    if (rec) {
        y.set_requires_grad(true);
        std::vector<Tensor> ins = xs;
        Tensor yc = y;
        tape.record({ins, y, [ins, yc, outer, inner, ochunk, axis]() mutable {
                         const double* g = yc.grad();
                         std::int64_t off2 = 0;
                         for (Tensor& x : ins) {
                             const std::int64_t chunk =
                                 static_cast<std::int64_t>(x.shape()[axis]) * inner;
                             if (x.requires_grad()) {
                                 double* gx = x.grad();
                                 for (std::int64_t o = 0; o < outer; ++o) {
                                     const double* gsrc = g + o * ochunk + off2;
                                     double* gdst = gx + o * chunk;
                                     for (std::int64_t i = 0; i < chunk; ++i) gdst[i] += gsrc[i];
                                 }
                             }
                             off2 += chunk;
                         }
                     }});
    }
    return y;
}

Tensor broadcast_channels(Tape& tape, const Tensor& v, int h, int w) {
    check(v.shape().size() == 1, "broadcast_channels: input must be a vector, got " + shape_str(v.shape()));
    check(h >= 1 && w >= 1, "broadcast_channels: bad target size");
    const int l = v.dim(0);
    Tensor y = Tensor::zeros({l, h, w}, false);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (int c = 0; c < l; ++c) {
        double* dst = y.data() + c * hw;
        const double val = v.data()[c];
        for (std::int64_t i = 0; i < hw; ++i) dst[i] = val;
    }
    if (want_record(tape, {&v})) {
        y.set_requires_grad(true);
        Tensor vc = v, yc = y;
        tape.record({{v}, y, [vc, yc, l, hw]() mutable {
                         const double* g = yc.grad();
                         double* gv = vc.grad();
                         for (int c = 0; c < l; ++c) {
                             double acc = 0.0;
                             const double* gc = g + c * hw;
                             for (std::int64_t i = 0; i < hw; ++i) acc += gc[i];
                             gv[c] += acc;
                         }
                     }});
    }
    return y;
}

Tensor sum(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    const double* xd = x.data();
    for (std::int64_t i = 0; i < x.size(); ++i) acc += xd[i];
    Tensor y = Tensor::scalar(acc);
    if (want_record(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape.record({{x}, y, [xc, yc]() mutable {
                         const double g = yc.grad()[0];
                         double* gx = xc.grad();
                         for (std::int64_t i = 0; i < xc.size(); ++i) gx[i] += g;
                     }});
    }
    return y;
}

Tensor mean(Tape& tape, const Tensor& x) {
    const std::int64_t n = x.size();
    double acc = 0.0;
    const double* xd = x.data();
    for (std::int64_t i = 0; i < n; ++i) acc += xd[i];
    Tensor y = Tensor::scalar(acc / static_cast<double>(n));
    if (want_record(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape.record({{x}, y, [xc, yc, n]() mutable {
                         const double g = yc.grad()[0] / static_cast<double>(n);
                         double* gx = xc.grad();
                         for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
                     }});
    }
    return y;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
    check(x.shape().size() == 3, "global_avg_pool: input must be [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    Tensor y = Tensor::zeros({c}, false);
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        const double* src = x.data() + ch * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += src[i];
        y.data()[ch] = acc / static_cast<double>(hw);
    }
    if (want_record(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape.record({{x}, y, [xc, yc, c, hw]() mutable {
                         const double* g = yc.grad();
                         double* gx = xc.grad();
                         for (int ch = 0; ch < c; ++ch) {
                             const double gv = g[ch] / static_cast<double>(hw);
                             double* dst = gx + ch * hw;
                             for (std::int64_t i = 0; i < hw; ++i) dst[i] += gv;
                         }
                     }});
    }
    return y;
}

Tensor l2_norm(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    const double* xd = x.data();
    for (std::int64_t i = 0; i < x.size(); ++i) acc += xd[i] * xd[i];
    const double norm = std::sqrt(acc);
    if (tape.kink_tol() > 0.0 && norm <= tape.kink_tol()) tape.note_kink();
    Tensor y = Tensor::scalar(norm);
    if (want_record(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape.record({{x}, y, [xc, yc]() mutable {
                         const double nv = yc.data()[0];
                         if (nv == 0.0) return;  // subgradient 0 at the kink
                         const double g = yc.grad()[0] / nv;
                         double* gx = xc.grad();
                         const double* xv = xc.data();
                         for (std::int64_t i = 0; i < xc.size(); ++i) gx[i] += g * xv[i];
                     }});
    }
    return y;
}

namespace {

struct CosineParts {
    double dot = 0.0, na = 0.0, nb = 0.0, sim = 0.0;
};

CosineParts cosine_forward(const char* op, const double* a, const double* b, std::int64_t n) {
    CosineParts p;
    double naa = 0.0, nbb = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        p.dot += a[i] * b[i];
        naa += a[i] * a[i];
        nbb += b[i] * b[i];
    }
    p.na = std::sqrt(naa);
    p.nb = std::sqrt(nbb);
    if (p.na == 0.0 || p.nb == 0.0)
        throw std::invalid_argument(std::string(op) + ": zero-norm input (degenerate embedding)");
    p.sim = p.dot / (p.na * p.nb);
    return p;
}

}  // namespace

Tensor cosine_similarity(Tape& tape, const Tensor& a, const Tensor& b) {
    check(a.size() == b.size(), "cosine_similarity: length mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const std::int64_t n = a.size();
    CosineParts p = cosine_forward("cosine_similarity", a.data(), b.data(), n);
    if (tape.kink_tol() > 0.0 && (p.na <= tape.kink_tol() || p.nb <= tape.kink_tol()))
        tape.note_kink();
    Tensor y = Tensor::scalar(p.sim);
    if (want_record(tape, {&a, &b})) {
        y.set_requires_grad(true);
        Tensor ac = a, bc = b, yc = y;
        tape.record({{a, b}, y, [ac, bc, yc, p, n]() mutable {
                         const double g = yc.grad()[0];
                         const double* av = ac.data();
                         const double* bv = bc.data();
                         const double inv_ab = 1.0 / (p.na * p.nb);
                         if (ac.requires_grad()) {
                             double* ga = ac.grad();
                             const double ca = p.sim / (p.na * p.na);
                             for (std::int64_t i = 0; i < n; ++i)
                                 ga[i] += g * (bv[i] * inv_ab - ca * av[i]);
                         }
                         if (bc.requires_grad()) {
                             double* gb = bc.grad();
                             const double cb = p.sim / (p.nb * p.nb);
                             for (std::int64_t i = 0; i < n; ++i)
                                 gb[i] += g * (av[i] * inv_ab - cb * bv[i]);
                         }
                     }});
    }
    return y;
}

Tensor cosine_rows(Tape& tape, const Tensor& rows, const Tensor& v) {
    check(rows.shape().size() == 2, "cosine_rows: rows must be [K,D], got " + shape_str(rows.shape()));
    check(v.shape().size() == 1 && v.dim(0) == rows.dim(1),
          "cosine_rows: shape mismatch " + shape_str(rows.shape()) + " vs " + shape_str(v.shape()));
    const int k = rows.dim(0), d = rows.dim(1);
    double nv2 = 0.0;
    for (int i = 0; i < d; ++i) nv2 += v.data()[i] * v.data()[i];
    const double nv = std::sqrt(nv2);
    check(nv != 0.0, "cosine_rows: zero-norm input (degenerate embedding)");

    Tensor y = Tensor::zeros({k}, false);
    std::vector<double> rnorm(k);
    for (int r = 0; r < k; ++r) {
        const double* row = rows.data() + static_cast<std::int64_t>(r) * d;
        double dot = 0.0, nr2 = 0.0;
        for (int i = 0; i < d; ++i) {
            dot += row[i] * v.data()[i];
            nr2 += row[i] * row[i];
        }
        const double nr = std::sqrt(nr2);
        check(nr != 0.0, "cosine_rows: zero-norm row (degenerate embedding)");
        rnorm[r] = nr;
        y.data()[r] = dot / (nr * nv);
    }
    if (want_record(tape, {&rows, &v})) {
        y.set_requires_grad(true);
        Tensor rc = rows, vc = v, yc = y;
        tape.record({{rows, v}, y, [rc, vc, yc, rnorm, nv, k, d]() mutable {
                         const double* g = yc.grad();
                         const double* s = yc.data();
                         const double* vv = vc.data();
                         for (int r = 0; r < k; ++r) {
                             if (g[r] == 0.0) continue;
                             const double* row = rc.data() + static_cast<std::int64_t>(r) * d;
                             const double inv = 1.0 / (rnorm[r] * nv);
                             if (rc.requires_grad()) {
                                 double* gr = rc.grad() + static_cast<std::int64_t>(r) * d;
                                 const double cr = s[r] / (rnorm[r] * rnorm[r]);
                                 for (int i = 0; i < d; ++i)
                                     gr[i] += g[r] * (vv[i] * inv - cr * row[i]);
                             }
                             if (vc.requires_grad()) {
                                 double* gv = vc.grad();
                                 const double cv = s[r] / (nv * nv);
                                 for (int i = 0; i < d; ++i)
                                     gv[i] += g[r] * (row[i] * inv - cv * vv[i]);
                             }
                         }
                     }});
    }
    return y;
}

Tensor mse_loss(Tape& tape, const Tensor& x, const Tensor& y) {
    same_shape("mse_loss", x, y);
    const std::int64_t n = x.size();
    double acc = 0.0;
    const double* xd = x.data();
    const double* yd = y.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = xd[i] - yd[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (want_record(tape, {&x, &y})) {
        out.set_requires_grad(true);
        Tensor xc = x, yc = y, oc = out;
        tape.record({{x, y}, out, [xc, yc, oc, n]() mutable {
                         const double g = oc.grad()[0] * 2.0 / static_cast<double>(n);
                         const double* xv = xc.data();
                         const double* yv = yc.data();
                         if (xc.requires_grad()) {
                             double* gx = xc.grad();
                             for (std::int64_t i = 0; i < n; ++i) gx[i] += g * (xv[i] - yv[i]);
                         }
                         if (yc.requires_grad()) {
                             double* gy = yc.grad();
                             for (std::int64_t i = 0; i < n; ++i) gy[i] -= g * (xv[i] - yv[i]);
                         }
                     }});
    }
    return out;
}

Tensor bce_with_logits(Tape& tape, const Tensor& logits, const Tensor& targets) {
    check(logits.size() == targets.size(), "bce_with_logits: length mismatch " +
                                               shape_str(logits.shape()) + " vs " +
                                               shape_str(targets.shape()));
    const std::int64_t n = logits.size();
    const double* ld = logits.data();
    const double* td = targets.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        check(td[i] == 0.0 || td[i] == 1.0, "bce_with_logits: target not in {0,1}");
        // max(l,0) - l*t + log(1 + exp(-|l|))
        const double l = ld[i];
        acc += (l > 0.0 ? l : 0.0) - l * td[i] + std::log1p(std::exp(-std::fabs(l)));
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (want_record(tape, {&logits, &targets})) {
        check(!targets.requires_grad(), "bce_with_logits: targets are not differentiable");
        out.set_requires_grad(true);
        Tensor lc = logits, tc = targets, oc = out;
        tape.record({{logits, targets}, out, [lc, tc, oc, n]() mutable {
                         const double g = oc.grad()[0] / static_cast<double>(n);
                         double* gl = lc.grad();
                         const double* lv = lc.data();
                         const double* tv = tc.data();
                         for (std::int64_t i = 0; i < n; ++i) {
                             const double l = lv[i];
                             const double sig = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l))
                                                         : std::exp(l) / (1.0 + std::exp(l));
                             gl[i] += g * (sig - tv[i]);
                         }
                     }});
    }
    return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, int target) {
    check(logits.shape().size() == 1, "softmax_cross_entropy: logits must be a vector, got " +
                                          shape_str(logits.shape()));
    const int k = logits.dim(0);
    check(target >= 0 && target < k, "softmax_cross_entropy: target out of range");
    const double* ld = logits.data();
    double mx = ld[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, ld[i]);
    double lse = 0.0;
    for (int i = 0; i < k; ++i) lse += std::exp(ld[i] - mx);
    lse = mx + std::log(lse);
    Tensor out = Tensor::scalar(lse - ld[target]);
    if (want_record(tape, {&logits})) {
        out.set_requires_grad(true);
        Tensor lc = logits, oc = out;
        tape.record({{logits}, out, [lc, oc, k, target, lse]() mutable {
                         const double g = oc.grad()[0];
                         double* gl = lc.grad();
                         const double* lv = lc.data();
                         for (int i = 0; i < k; ++i) {
                             const double p = std::exp(lv[i] - lse);
                             gl[i] += g * (p - (i == target ? 1.0 : 0.0));
                         }
                     }});
    }
    return out;
}

// ---- grad_check ----

GradCheckReport grad_check(
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& builder,
    const std::vector<Tensor>& point, double fd_step, int max_coords_per_leaf,
    std::uint64_t subset_seed) {
    check(fd_step > 0.0, "grad_check: fd_step must be positive");
    GradCheckReport rep;

    Tape tape(true);
    tape.set_kink_tol(2.0 * fd_step);
    Tensor out = builder(tape, point);
    check(out.size() == 1, "grad_check: builder output must be a scalar, got " + shape_str(out.shape()));
    if (tape.kink_flagged()) {
        rep.unreliable = true;
        return rep;
    }
    for (const Tensor& leaf : point) {
        Tensor l = leaf;
        l.grad();
        l.zero_grad();
    }
    tape.backward(out);

    auto eval = [&](void) -> double {
        Tape t(false);
        return builder(t, point).item();
    };

    for (std::size_t li = 0; li < point.size(); ++li) {
        Tensor leaf = point[li];
        if (!leaf.requires_grad()) continue;
        const double* analytic = leaf.grad();
        std::vector<std::int64_t> coords;
        const std::int64_t n = leaf.size();
        if (max_coords_per_leaf > 0 && n > max_coords_per_leaf) {
            SeededRng rng(splitmix64(subset_seed) ^ splitmix64(li + 1));
            for (int c = 0; c < max_coords_per_leaf; ++c)
                coords.push_back(static_cast<std::int64_t>(rng.integer(n)));
        } else {
            coords.resize(n);
            for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
        }
        for (std::int64_t c : coords) {
            const double x0 = leaf.data()[c];
            leaf.data()[c] = x0 + fd_step;
            const double fp = eval();
            leaf.data()[c] = x0 - fd_step;
            const double fm = eval();
            leaf.data()[c] = x0;
            const double numeric = (fp - fm) / (2.0 * fd_step);
            const double a = analytic ? analytic[c] : 0.0;
            const double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(numeric));
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
            ++rep.coords_checked;
        }
    }
    return rep;
}

}  // namespace awmark
