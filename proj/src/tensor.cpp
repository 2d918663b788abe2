#include "vti/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace vti {

namespace {

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ')';
    return os.str();
}

long long shape_size(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) {
        if (d <= 0) throw ContractError("tensor: non-positive extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

bool is_scalar(const Tensor& t) { return t.size() == 1; }

// C(m,n) += op(A) * op(B); row-major contiguous.
void gemm_acc(bool ta, bool tb, int m, int n, int k, const real* A, const real* B, real* C) {
    if (!ta && !tb) {
        for (int i = 0; i < m; ++i) {
            const real* a_row = A + static_cast<size_t>(i) * k;
            real* c_row = C + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const real a = a_row[p];
                if (a == real(0)) continue;
                const real* b_row = B + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
            }
        }
    } else if (!ta && tb) {
        // B stored (n, k)
        for (int i = 0; i < m; ++i) {
            const real* a_row = A + static_cast<size_t>(i) * k;
            real* c_row = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const real* b_row = B + static_cast<size_t>(j) * k;
                real acc = 0;
                for (int p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
                c_row[j] += acc;
            }
        }
    } else if (ta && !tb) {
        // A stored (k, m)
        for (int p = 0; p < k; ++p) {
            const real* a_row = A + static_cast<size_t>(p) * m;
            const real* b_row = B + static_cast<size_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                const real a = a_row[i];
                if (a == real(0)) continue;
                real* c_row = C + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
            }
        }
    } else {
        // A stored (k, m), B stored (n, k)
        for (int i = 0; i < m; ++i) {
            real* c_row = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const real* b_row = B + static_cast<size_t>(j) * k;
                real acc = 0;
                for (int p = 0; p < k; ++p) acc += A[static_cast<size_t>(p) * m + i] * b_row[p];
                c_row[j] += acc;
            }
        }
    }
}

constexpr double kExpLimit = sizeof(real) == 4 ? 87.0 : 700.0;

}  // namespace

Tensor::Tensor(std::vector<int> shape, real fill, bool requires_grad) {
    impl_ = std::make_shared<Impl>();
    long long n = shape_size(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<size_t>(n), fill);
    if (requires_grad) set_requires_grad(true);
}

Tensor Tensor::scalar(real v) {
    Tensor t(std::vector<int>{1});
    t.at(0) = v;
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<real> values) {
    long long n = shape_size(shape);
    require(n == static_cast<long long>(values.size()),
            "tensor: data length " + std::to_string(values.size()) + " does not match shape " +
                shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
}

int Tensor::rows() const {
    require(rank() == 2, "tensor: rows() on rank " + std::to_string(rank()));
    return dim(0);
}

int Tensor::cols() const {
    require(rank() == 2, "tensor: cols() on rank " + std::to_string(rank()));
    return dim(1);
}

real& Tensor::at2(int r, int c) { return impl_->data[static_cast<size_t>(r) * dim(1) + c]; }
real Tensor::at2(int r, int c) const { return impl_->data[static_cast<size_t>(r) * dim(1) + c]; }

real Tensor::item() const {
    require(size() == 1, "tensor: item() on non-scalar of shape " + shape_str(shape()));
    return impl_->data[0];
}

void Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    if (v) {
        impl_->grad.assign(impl_->data.size(), real(0));
    } else {
        impl_->grad.clear();
    }
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
}

void backward(const Tensor& loss, Tape& tape) {
    require(loss.defined() && loss.size() == 1, "backward: loss must be a scalar tensor");
    if (!loss.requires_grad()) return;  // constant loss: nothing reachable
    tape.zero_intermediate_grads();
    loss.grad()[0] = real(1);
    tape.replay_backward();
}

namespace {

// Marks the output differentiable and records the rule when a tape is active
// and any input carries grad.
template <typename Fn>
void record(Tape* tape, bool any_grad, Tensor& out, Fn&& fn) {
    if (tape && any_grad) {
        out.set_requires_grad(true);
        tape->record(out, std::forward<Fn>(fn));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    const bool grads = a.requires_grad() || b.requires_grad();
    if (a.shape() == b.shape()) {
        Tensor out(a.shape());
        for (long long i = 0; i < a.size(); ++i) out.at(i) = a.at(i) + b.at(i);
        record(tape, grads, out, [a, b, out]() mutable {
            const real* go = out.grad();
            if (a.requires_grad())
                for (long long i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
            if (b.requires_grad())
                for (long long i = 0; i < b.size(); ++i) b.grad()[i] += go[i];
        });
        return out;
    }
    if (is_scalar(b) || is_scalar(a)) {
        const Tensor& big = is_scalar(b) ? a : b;
        const Tensor& sc = is_scalar(b) ? b : a;
        Tensor out(big.shape());
        const real s = sc.at(0);
        for (long long i = 0; i < big.size(); ++i) out.at(i) = big.at(i) + s;
        record(tape, grads, out, [big, sc, out]() mutable {
            const real* go = out.grad();
            if (big.requires_grad())
                for (long long i = 0; i < big.size(); ++i) big.grad()[i] += go[i];
            if (sc.requires_grad()) {
                real acc = 0;
                for (long long i = 0; i < out.size(); ++i) acc += go[i];
                sc.grad()[0] += acc;
            }
        });
        return out;
    }
    // matrix + row-vector bias
    if (a.rank() == 2 && (b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1)) &&
        b.size() == a.dim(1)) {
        const int n = a.dim(0), d = a.dim(1);
        Tensor out(a.shape());
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c)
                out.at(static_cast<long long>(r) * d + c) =
                    a.at(static_cast<long long>(r) * d + c) + b.at(c);
        record(tape, grads, out, [a, b, out, n, d]() mutable {
            const real* go = out.grad();
            if (a.requires_grad())
                for (long long i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
            if (b.requires_grad())
                for (int r = 0; r < n; ++r)
                    for (int c = 0; c < d; ++c) b.grad()[c] += go[static_cast<long long>(r) * d + c];
        });
        return out;
    }
    throw ContractError("add: incompatible shapes " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
    const bool grads = a.requires_grad() || b.requires_grad();
    if (a.shape() == b.shape()) {
        Tensor out(a.shape());
        for (long long i = 0; i < a.size(); ++i) out.at(i) = a.at(i) - b.at(i);
        record(tape, grads, out, [a, b, out]() mutable {
            const real* go = out.grad();
            if (a.requires_grad())
                for (long long i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
            if (b.requires_grad())
                for (long long i = 0; i < b.size(); ++i) b.grad()[i] -= go[i];
        });
        return out;
    }
    if (is_scalar(b)) {
        Tensor out(a.shape());
        const real s = b.at(0);
        for (long long i = 0; i < a.size(); ++i) out.at(i) = a.at(i) - s;
        record(tape, grads, out, [a, b, out]() mutable {
            const real* go = out.grad();
            if (a.requires_grad())
                for (long long i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
            if (b.requires_grad()) {
                real acc = 0;
                for (long long i = 0; i < out.size(); ++i) acc += go[i];
                b.grad()[0] -= acc;
            }
        });
        return out;
    }
    if (is_scalar(a)) {
        Tensor out(b.shape());
        const real s = a.at(0);
        for (long long i = 0; i < b.size(); ++i) out.at(i) = s - b.at(i);
        record(tape, grads, out, [a, b, out]() mutable {
            const real* go = out.grad();
            if (a.requires_grad()) {
                real acc = 0;
                for (long long i = 0; i < out.size(); ++i) acc += go[i];
                a.grad()[0] += acc;
            }
            if (b.requires_grad())
                for (long long i = 0; i < b.size(); ++i) b.grad()[i] -= go[i];
        });
        return out;
    }
    throw ContractError("sub: incompatible shapes " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    const bool grads = a.requires_grad() || b.requires_grad();
    if (a.shape() == b.shape()) {
        Tensor out(a.shape());
        for (long long i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * b.at(i);
        record(tape, grads, out, [a, b, out]() mutable {
            const real* go = out.grad();
            if (a.requires_grad())
                for (long long i = 0; i < a.size(); ++i) a.grad()[i] += go[i] * b.at(i);
            if (b.requires_grad())
                for (long long i = 0; i < b.size(); ++i) b.grad()[i] += go[i] * a.at(i);
        });
        return out;
    }
    if (is_scalar(b) || is_scalar(a)) {
        const Tensor& big = is_scalar(b) ? a : b;
        const Tensor& sc = is_scalar(b) ? b : a;
        Tensor out(big.shape());
        const real s = sc.at(0);
        for (long long i = 0; i < big.size(); ++i) out.at(i) = big.at(i) * s;
        record(tape, grads, out, [big, sc, out, s]() mutable {
            const real* go = out.grad();
            if (big.requires_grad())
                for (long long i = 0; i < big.size(); ++i) big.grad()[i] += go[i] * s;
            if (sc.requires_grad()) {
                real acc = 0;
                for (long long i = 0; i < out.size(); ++i) acc += go[i] * big.at(i);
                sc.grad()[0] += acc;
            }
        });
        return out;
    }
    throw ContractError("mul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

Tensor scale(const Tensor& x, real c, Tape* tape) {
    Tensor out(x.shape());
    for (long long i = 0; i < x.size(); ++i) out.at(i) = x.at(i) * c;
    record(tape, x.requires_grad(), out, [x, out, c]() mutable {
        const real* go = out.grad();
        for (long long i = 0; i < x.size(); ++i) x.grad()[i] += go[i] * c;
    });
    return out;
}

Tensor shift(const Tensor& x, real c, Tape* tape) {
    Tensor out(x.shape());
    for (long long i = 0; i < x.size(); ++i) out.at(i) = x.at(i) + c;
    record(tape, x.requires_grad(), out, [x, out]() mutable {
        const real* go = out.grad();
        for (long long i = 0; i < x.size(); ++i) x.grad()[i] += go[i];
    });
    return out;
}

Tensor tanh(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    for (long long i = 0; i < x.size(); ++i) out.at(i) = std::tanh(x.at(i));
    record(tape, x.requires_grad(), out, [x, out]() mutable {
        const real* go = out.grad();
        for (long long i = 0; i < x.size(); ++i) {
            const real y = out.at(i);
            x.grad()[i] += go[i] * (real(1) - y * y);
        }
    });
    return out;
}

Tensor sigmoid(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    for (long long i = 0; i < x.size(); ++i) {
        const real v = x.at(i);
        out.at(i) = v >= real(0) ? real(1) / (real(1) + std::exp(-v))
                                 : std::exp(v) / (real(1) + std::exp(v));
    }
    record(tape, x.requires_grad(), out, [x, out]() mutable {
        const real* go = out.grad();
        for (long long i = 0; i < x.size(); ++i) {
            const real y = out.at(i);
            x.grad()[i] += go[i] * y * (real(1) - y);
        }
    });
    return out;
}

Tensor relu(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    for (long long i = 0; i < x.size(); ++i) out.at(i) = x.at(i) > real(0) ? x.at(i) : real(0);
    record(tape, x.requires_grad(), out, [x, out]() mutable {
        const real* go = out.grad();
        for (long long i = 0; i < x.size(); ++i)
            if (x.at(i) > real(0)) x.grad()[i] += go[i];
    });
    return out;
}

Tensor exp(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    for (long long i = 0; i < x.size(); ++i) {
        if (std::abs(static_cast<double>(x.at(i))) > kExpLimit)
            throw DomainError("exp: input " + std::to_string(x.at(i)) + " outside safe domain");
        out.at(i) = std::exp(x.at(i));
    }
    record(tape, x.requires_grad(), out, [x, out]() mutable {
        const real* go = out.grad();
        for (long long i = 0; i < x.size(); ++i) x.grad()[i] += go[i] * out.at(i);
    });
    return out;
}

Tensor log(const Tensor& x, Tape* tape) {
    Tensor out(x.shape());
    for (long long i = 0; i < x.size(); ++i) {
        if (!(x.at(i) > real(0)))
            throw DomainError("log: input " + std::to_string(x.at(i)) + " is not positive");
        out.at(i) = std::log(x.at(i));
    }
    record(tape, x.requires_grad(), out, [x, out]() mutable {
        const real* go = out.grad();
        for (long long i = 0; i < x.size(); ++i) x.grad()[i] += go[i] / x.at(i);
    });
    return out;
}

Tensor clip(const Tensor& x, real lo, real hi, Tape* tape) {
    require(lo < hi, "clip: lo must be < hi");
    Tensor out(x.shape());
    for (long long i = 0; i < x.size(); ++i) out.at(i) = std::clamp(x.at(i), lo, hi);
    record(tape, x.requires_grad(), out, [x, out, lo, hi]() mutable {
        const real* go = out.grad();
        for (long long i = 0; i < x.size(); ++i)
            if (x.at(i) >= lo && x.at(i) <= hi) x.grad()[i] += go[i];
    });
    return out;
}

Tensor dropout(const Tensor& x, const Tensor& mask, real rate, Tape* tape) {
    require(x.shape() == mask.shape(), "dropout: mask shape " + shape_str(mask.shape()) +
                                           " does not match input " + shape_str(x.shape()));
    require(rate >= real(0) && rate < real(1), "dropout: rate must be in [0,1)");
    const real inv = real(1) / (real(1) - rate);
    Tensor out(x.shape());
    for (long long i = 0; i < x.size(); ++i) out.at(i) = x.at(i) * mask.at(i) * inv;
    record(tape, x.requires_grad(), out, [x, mask, out, inv]() mutable {
        const real* go = out.grad();
        for (long long i = 0; i < x.size(); ++i) x.grad()[i] += go[i] * mask.at(i) * inv;
    });
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape, bool trans_a, bool trans_b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be rank-2, got " +
                                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int m = trans_a ? a.dim(1) : a.dim(0);
    const int ka = trans_a ? a.dim(0) : a.dim(1);
    const int kb = trans_b ? b.dim(1) : b.dim(0);
    const int n = trans_b ? b.dim(0) : b.dim(1);
    require(ka == kb, "matmul: inner dimensions differ, " + shape_str(a.shape()) +
                          (trans_a ? "^T" : "") + " * " + shape_str(b.shape()) +
                          (trans_b ? "^T" : ""));
    Tensor out(std::vector<int>{m, n});
    gemm_acc(trans_a, trans_b, m, n, ka, a.data(), b.data(), out.data());
    const bool grads = a.requires_grad() || b.requires_grad();
    record(tape, grads, out, [a, b, out, trans_a, trans_b, m, n, k = ka]() mutable {
        const real* go = out.grad();
        if (a.requires_grad()) {
            // dA' = dOut * B'^T; transpose back if a was transposed.
            if (!trans_a) {
                gemm_acc(false, !trans_b, m, k, n, go, b.data(), a.grad());
            } else {
                gemm_acc(trans_b, true, k, m, n, b.data(), go, a.grad());
            }
        }
        if (b.requires_grad()) {
            if (!trans_b) {
                gemm_acc(!trans_a, false, k, n, m, a.data(), go, b.grad());
            } else {
                gemm_acc(true, trans_a, n, k, m, go, a.data(), b.grad());
            }
        }
    });
    return out;
}

Tensor concat_cols(std::span<const Tensor> parts, Tape* tape) {
    require(!parts.empty(), "concat_cols: no operands");
    const int n = parts[0].rows();
    int total = 0;
    bool grads = false;
    for (const Tensor& p : parts) {
        require(p.rank() == 2 && p.rows() == n, "concat_cols: row counts differ");
        total += p.cols();
        grads = grads || p.requires_grad();
    }
    Tensor out(std::vector<int>{n, total});
    int off = 0;
    for (const Tensor& p : parts) {
        const int d = p.cols();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) out.at2(r, off + c) = p.at2(r, c);
        off += d;
    }
    std::vector<Tensor> held(parts.begin(), parts.end());
    record(tape, grads, out, [held, out, n]() mutable {
        const real* go = out.grad();
        const int total = out.cols();
        int off = 0;
        for (Tensor& p : held) {
            const int d = p.cols();
            if (p.requires_grad())
                for (int r = 0; r < n; ++r)
                    for (int c = 0; c < d; ++c)
                        p.grad()[static_cast<long long>(r) * d + c] +=
                            go[static_cast<long long>(r) * total + off + c];
            off += d;
        }
    });
    return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b, Tape* tape) {
    const Tensor parts[2] = {a, b};
    return concat_cols(std::span<const Tensor>(parts, 2), tape);
}

Tensor concat_rows(const Tensor& a, const Tensor& b, Tape* tape) {
    require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols(),
            "concat_rows: column counts differ");
    const int d = a.cols();
    Tensor out(std::vector<int>{a.rows() + b.rows(), d});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    record(tape, a.requires_grad() || b.requires_grad(), out, [a, b, out]() mutable {
        const real* go = out.grad();
        if (a.requires_grad())
            for (long long i = 0; i < a.size(); ++i) a.grad()[i] += go[i];
        if (b.requires_grad())
            for (long long i = 0; i < b.size(); ++i) b.grad()[i] += go[a.size() + i];
    });
    return out;
}

Tensor slice_cols(const Tensor& x, int start, int len, Tape* tape) {
    require(x.rank() == 2, "slice_cols: rank-2 input required");
    require(start >= 0 && len > 0 && start + len <= x.cols(), "slice_cols: range out of bounds");
    const int n = x.rows();
    Tensor out(std::vector<int>{n, len});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < len; ++c) out.at2(r, c) = x.at2(r, start + c);
    record(tape, x.requires_grad(), out, [x, out, start, len, n]() mutable {
        const real* go = out.grad();
        const int d = x.cols();
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < len; ++c)
                x.grad()[static_cast<long long>(r) * d + start + c] +=
                    go[static_cast<long long>(r) * len + c];
    });
    return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids, Tape* tape) {
    require(table.rank() == 2, "gather_rows: rank-2 table required");
    require(!ids.empty(), "gather_rows: empty id list");
    const int v = table.rows(), d = table.cols();
    for (int id : ids)
        require(id >= 0 && id < v,
                "gather_rows: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
    Tensor out(std::vector<int>{static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
        for (int c = 0; c < d; ++c) out.at2(static_cast<int>(i), c) = table.at2(ids[i], c);
    std::vector<int> idv(ids.begin(), ids.end());
    record(tape, table.requires_grad(), out, [table, out, idv, d]() mutable {
        const real* go = out.grad();
        for (size_t i = 0; i < idv.size(); ++i)
            for (int c = 0; c < d; ++c)
                table.grad()[static_cast<long long>(idv[i]) * d + c] += go[i * d + c];
    });
    return out;
}

Tensor pick(const Tensor& x, long long index, Tape* tape) {
    require(index >= 0 && index < x.size(), "pick: index out of range");
    Tensor out = Tensor::scalar(x.at(index));
    record(tape, x.requires_grad(), out, [x, out, index]() mutable {
        x.grad()[index] += out.grad()[0];
    });
    return out;
}

Tensor flatten_spatial(const Tensor& x, Tape* tape) {
    require(x.rank() == 3, "flatten_spatial: rank-3 (C,H,W) input required");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int hw = H * W;
    Tensor out(std::vector<int>{hw, C});
    for (int c = 0; c < C; ++c)
        for (int p = 0; p < hw; ++p) out.at2(p, c) = x.at(static_cast<long long>(c) * hw + p);
    record(tape, x.requires_grad(), out, [x, out, C, hw]() mutable {
        const real* go = out.grad();
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < hw; ++p)
                x.grad()[static_cast<long long>(c) * hw + p] += go[static_cast<long long>(p) * C + c];
    });
    return out;
}

Tensor sum(const Tensor& x, Tape* tape) {
    real acc = 0;
    for (long long i = 0; i < x.size(); ++i) acc += x.at(i);
    Tensor out = Tensor::scalar(acc);
    record(tape, x.requires_grad(), out, [x, out]() mutable {
        const real g = out.grad()[0];
        for (long long i = 0; i < x.size(); ++i) x.grad()[i] += g;
    });
    return out;
}

namespace {

// Iterates the slices of a rank-1/rank-2 tensor along `axis`.
// Each slice is (count elements, stride between them, base offset).
struct SliceIter {
    int n_slices, len;
    long long stride, slice_stride;
};

SliceIter slice_layout(const Tensor& x, int axis) {
    if (x.rank() == 1) {
        require(axis == 0, "softmax: axis out of range for rank-1 tensor");
        return {1, x.dim(0), 1, 0};
    }
    require(x.rank() == 2, "softmax: rank-1 or rank-2 input required");
    require(axis == 0 || axis == 1, "softmax: axis must be 0 or 1");
    if (axis == 1) return {x.dim(0), x.dim(1), 1, x.dim(1)};
    return {x.dim(1), x.dim(0), x.dim(1), 1};
}

}  // namespace

Tensor softmax(const Tensor& x, int axis, Tape* tape) {
    const SliceIter it = slice_layout(x, axis);
    Tensor out(x.shape());
    for (int s = 0; s < it.n_slices; ++s) {
        const long long base = s * it.slice_stride;
        real mx = x.at(base);
        for (int i = 1; i < it.len; ++i) mx = std::max(mx, x.at(base + i * it.stride));
        real denom = 0;
        for (int i = 0; i < it.len; ++i) {
            const real e = std::exp(x.at(base + i * it.stride) - mx);
            out.at(base + i * it.stride) = e;
            denom += e;
        }
        for (int i = 0; i < it.len; ++i) out.at(base + i * it.stride) /= denom;
    }
    record(tape, x.requires_grad(), out, [x, out, it]() mutable {
        const real* go = out.grad();
        for (int s = 0; s < it.n_slices; ++s) {
            const long long base = s * it.slice_stride;
            real dot = 0;
            for (int i = 0; i < it.len; ++i) {
                const long long k = base + i * it.stride;
                dot += go[k] * out.at(k);
            }
            for (int i = 0; i < it.len; ++i) {
                const long long k = base + i * it.stride;
                x.grad()[k] += out.at(k) * (go[k] - dot);
            }
        }
    });
    return out;
}

Tensor log_softmax(const Tensor& x, int axis, Tape* tape) {
    const SliceIter it = slice_layout(x, axis);
    Tensor out(x.shape());
    for (int s = 0; s < it.n_slices; ++s) {
        const long long base = s * it.slice_stride;
        real mx = x.at(base);
        for (int i = 1; i < it.len; ++i) mx = std::max(mx, x.at(base + i * it.stride));
        real denom = 0;
        for (int i = 0; i < it.len; ++i) denom += std::exp(x.at(base + i * it.stride) - mx);
        const real lse = mx + std::log(denom);
        for (int i = 0; i < it.len; ++i)
            out.at(base + i * it.stride) = x.at(base + i * it.stride) - lse;
    }
    record(tape, x.requires_grad(), out, [x, out, it]() mutable {
        const real* go = out.grad();
        for (int s = 0; s < it.n_slices; ++s) {
            const long long base = s * it.slice_stride;
            real gsum = 0;
            for (int i = 0; i < it.len; ++i) gsum += go[base + i * it.stride];
            for (int i = 0; i < it.len; ++i) {
                const long long k = base + i * it.stride;
                x.grad()[k] += go[k] - std::exp(out.at(k)) * gsum;
            }
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tape* tape) {
    require(x.rank() == 2, "layer_norm: rank-2 input required");
    const int n = x.rows(), d = x.cols();
    require(gamma.size() == d && beta.size() == d, "layer_norm: parameter size mismatch");
    constexpr real eps = real(1e-5);
    Tensor out(x.shape());
    Tensor xhat(x.shape());
    std::vector<real> inv_std(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        real mean = 0;
        for (int c = 0; c < d; ++c) mean += x.at2(r, c);
        mean /= d;
        real var = 0;
        for (int c = 0; c < d; ++c) {
            const real t = x.at2(r, c) - mean;
            var += t * t;
        }
        var /= d;
        const real is = real(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = is;
        for (int c = 0; c < d; ++c) {
            const real h = (x.at2(r, c) - mean) * is;
            xhat.at2(r, c) = h;
            out.at2(r, c) = h * gamma.at(c) + beta.at(c);
        }
    }
    const bool grads = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    record(tape, grads, out, [x, gamma, beta, out, xhat, inv_std, n, d]() mutable {
        const real* go = out.grad();
        for (int r = 0; r < n; ++r) {
            const real is = inv_std[static_cast<size_t>(r)];
            real m1 = 0, m2 = 0;
            for (int c = 0; c < d; ++c) {
                const real gy = go[static_cast<long long>(r) * d + c] * gamma.at(c);
                m1 += gy;
                m2 += gy * xhat.at2(r, c);
            }
            m1 /= d;
            m2 /= d;
            for (int c = 0; c < d; ++c) {
                const long long k = static_cast<long long>(r) * d + c;
                if (x.requires_grad()) {
                    const real gy = go[k] * gamma.at(c);
                    x.grad()[k] += is * (gy - m1 - xhat.at2(r, c) * m2);
                }
                if (gamma.requires_grad()) gamma.grad()[c] += go[k] * xhat.at2(r, c);
                if (beta.requires_grad()) beta.grad()[c] += go[k];
            }
        }
    });
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad, Tape* tape) {
    require(x.rank() == 3, "conv2d: input must be (C,H,W)");
    require(w.rank() == 4, "conv2d: weight must be (OC,IC,KH,KW)");
    const int IC = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    require(w.dim(1) == IC, "conv2d: weight input channels " + std::to_string(w.dim(1)) +
                                " do not match input " + std::to_string(IC));
    require(b.size() == OC, "conv2d: bias size mismatch");
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int OH = (H + 2 * pad - KH) / stride + 1;
    const int OW = (W + 2 * pad - KW) / stride + 1;
    require(OH > 0 && OW > 0, "conv2d: output would be empty");
    Tensor out(std::vector<int>{OC, OH, OW});
    auto xin = [&](int c, int y, int xx) -> real {
        if (y < 0 || y >= H || xx < 0 || xx >= W) return real(0);
        return x.at((static_cast<long long>(c) * H + y) * W + xx);
    };
    for (int oc = 0; oc < OC; ++oc)
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                real acc = b.at(oc);
                for (int ic = 0; ic < IC; ++ic)
                    for (int ky = 0; ky < KH; ++ky)
                        for (int kx = 0; kx < KW; ++kx)
                            acc += w.at(((static_cast<long long>(oc) * IC + ic) * KH + ky) * KW + kx) *
                                   xin(ic, oy * stride - pad + ky, ox * stride - pad + kx);
                out.at((static_cast<long long>(oc) * OH + oy) * OW + ox) = acc;
            }
    const bool grads = x.requires_grad() || w.requires_grad() || b.requires_grad();
    record(tape, grads, out,
           [x, w, b, out, stride, pad, IC, H, W, OC, KH, KW, OH, OW]() mutable {
               const real* go = out.grad();
               for (int oc = 0; oc < OC; ++oc)
                   for (int oy = 0; oy < OH; ++oy)
                       for (int ox = 0; ox < OW; ++ox) {
                           const real g = go[(static_cast<long long>(oc) * OH + oy) * OW + ox];
                           if (g == real(0)) continue;
                           if (b.requires_grad()) b.grad()[oc] += g;
                           for (int ic = 0; ic < IC; ++ic)
                               for (int ky = 0; ky < KH; ++ky)
                                   for (int kx = 0; kx < KW; ++kx) {
                                       const int y = oy * stride - pad + ky;
                                       const int xx = ox * stride - pad + kx;
                                       if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                                       const long long xi =
                                           (static_cast<long long>(ic) * H + y) * W + xx;
                                       const long long wi =
                                           ((static_cast<long long>(oc) * IC + ic) * KH + ky) * KW +
                                           kx;
                                       if (w.requires_grad()) w.grad()[wi] += g * x.at(xi);
                                       if (x.requires_grad()) x.grad()[xi] += g * w.at(wi);
                                   }
                       }
           });
    return out;
}

GradCheckReport grad_check(const std::function<Tensor(Tape*)>& f, std::span<Tensor> wrt,
                           double eps, double tol) {
    require(eps > 0, "grad_check: eps must be positive");
    for (Tensor& t : wrt) {
        if (!t.requires_grad()) t.set_requires_grad(true);
        t.zero_grad();
    }
    Tape tape;
    Tensor loss = f(&tape);
    require(loss.size() == 1, "grad_check: f must be scalar-valued");
    backward(loss, tape);

    GradCheckReport rep;
    for (Tensor& t : wrt) {
        for (long long i = 0; i < t.size(); ++i) {
            const real saved = t.at(i);
            t.at(i) = saved + static_cast<real>(eps);
            const double fp = static_cast<double>(f(nullptr).item());
            t.at(i) = saved - static_cast<real>(eps);
            const double fm = static_cast<double>(f(nullptr).item());
            t.at(i) = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic = static_cast<double>(t.grad()[i]);
            const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
            rep.max_rel_err = std::max(rep.max_rel_err, err);
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

GradCheckReport grad_check(const std::function<Tensor(Tape*, const Tensor&)>& f, Tensor x,
                           double eps, double tol) {
    Tensor wrt[1] = {x};
    return grad_check([&](Tape* tape) { return f(tape, x); }, std::span<Tensor>(wrt, 1), eps, tol);
}

}  // namespace vti
