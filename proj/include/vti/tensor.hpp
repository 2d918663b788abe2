#pragma once

// Dense row-major tensors with a define-by-run reverse-mode tape.
//
// The scalar type is float by default; compiling with -DVTI_REAL64 switches
// the whole library to double (used by the gradient-check builds). A binary
// must link exactly one of the two library variants.
//
// Ops are pure functions of their inputs (dropout takes an explicit mask).
// Passing a null Tape skips recording, so the same forward code serves both
// training and inference. Tensors are immutable once written by an op; only
// grad buffers mutate, during backward().

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vti/errors.hpp"

namespace vti {

#ifdef VTI_REAL64
using real = double;
#else
using real = float;
#endif

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, real fill = real(0), bool requires_grad = false);

    static Tensor scalar(real v);
    static Tensor from(std::vector<int> shape, std::vector<real> values);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    long long size() const { return static_cast<long long>(impl_->data.size()); }
    int rows() const;  // rank-2 only
    int cols() const;

    real* data() { return impl_->data.data(); }
    const real* data() const { return impl_->data.data(); }
    std::vector<real>& vec() { return impl_->data; }
    const std::vector<real>& vec() const { return impl_->data; }
    real& at(long long i) { return impl_->data[static_cast<size_t>(i)]; }
    real at(long long i) const { return impl_->data[static_cast<size_t>(i)]; }
    real& at2(int r, int c);
    real at2(int r, int c) const;
    real item() const;  // scalar tensors only

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool v);
    // Grad buffers are shared mutable state of the handle, not part of the
    // tensor's value; backward rules hold const handles and still accumulate.
    real* grad() const { return impl_->grad.data(); }
    std::vector<real>& grad_vec() const { return impl_->grad; }
    void zero_grad();

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  private:
    struct Impl {
        std::vector<int> shape;
        std::vector<real> data;
        std::vector<real> grad;  // sized like data iff requires_grad
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

// Ordered record of one forward pass; replaying in reverse order populates
// grads. Rebuilt per step. A tape and its tensors belong to one thread.
class Tape {
  public:
    void record(const Tensor& out, std::function<void()> backward_fn) {
        outs_.push_back(out);
        ops_.push_back(std::move(backward_fn));
    }
    std::size_t size() const { return ops_.size(); }
    void clear() {
        ops_.clear();
        outs_.clear();
    }
    void replay_backward() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }
    // Grads of op outputs are scratch space for one replay; leaves accumulate.
    void zero_intermediate_grads() {
        for (Tensor& t : outs_) t.zero_grad();
    }

  private:
    std::vector<std::function<void()>> ops_;
    std::vector<Tensor> outs_;
};

// Seeds loss grad with 1 and replays the tape. Repeated calls accumulate.
void backward(const Tensor& loss, Tape& tape);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b, Tape* tape);  // equal shapes, scalar, or matrix+row-vector bias
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape);  // equal shapes or scalar operand
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);  // equal shapes or scalar operand
Tensor scale(const Tensor& x, real c, Tape* tape);
Tensor shift(const Tensor& x, real c, Tape* tape);
Tensor tanh(const Tensor& x, Tape* tape);
Tensor sigmoid(const Tensor& x, Tape* tape);
Tensor relu(const Tensor& x, Tape* tape);
Tensor exp(const Tensor& x, Tape* tape);  // domain |x| <= 87 (float) / 700 (double)
Tensor log(const Tensor& x, Tape* tape);  // domain x > 0
Tensor clip(const Tensor& x, real lo, real hi, Tape* tape);  // pass-through grad inside [lo, hi]
Tensor dropout(const Tensor& x, const Tensor& mask, real rate, Tape* tape);  // inverted scaling 1/(1-rate)

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape, bool trans_a = false, bool trans_b = false);

// ---- shape ----
Tensor concat_cols(std::span<const Tensor> parts, Tape* tape);
Tensor concat_cols(const Tensor& a, const Tensor& b, Tape* tape);
Tensor concat_rows(const Tensor& a, const Tensor& b, Tape* tape);
Tensor slice_cols(const Tensor& x, int start, int len, Tape* tape);
Tensor gather_rows(const Tensor& table, std::span<const int> ids, Tape* tape);
Tensor pick(const Tensor& x, long long index, Tape* tape);  // scalar out
Tensor flatten_spatial(const Tensor& x, Tape* tape);        // (C,H,W) -> (H*W, C)

// ---- reductions / normalizations ----
Tensor sum(const Tensor& x, Tape* tape);  // scalar out
Tensor softmax(const Tensor& x, int axis, Tape* tape);
Tensor log_softmax(const Tensor& x, int axis, Tape* tape);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tape* tape);  // per row, eps 1e-5

// ---- conv ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad, Tape* tape);

// ---- verification ----
struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
};

// Central-difference check of d(f)/d(wrt) against the tape gradient.
// err = |analytic - numeric| / max(1, |analytic|), maxed over coordinates.
GradCheckReport grad_check(const std::function<Tensor(Tape*)>& f, std::span<Tensor> wrt,
                           double eps, double tol);
GradCheckReport grad_check(const std::function<Tensor(Tape*, const Tensor&)>& f, Tensor x,
                           double eps, double tol);

}  // namespace vti
