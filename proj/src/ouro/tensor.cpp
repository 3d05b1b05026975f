#include "ouro/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

namespace ouro {

Tensor Tensor::zeros(Shape s) {
    std::size_t n = numel_of(s);
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(n, 0.0);
    return t;
}

Tensor Tensor::full(Shape s, double v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.mut(), t.mut() + t.numel(), v);
    return t;
}

Tensor Tensor::from(Shape s, std::vector<double> v) {
    require(numel_of(s) == v.size(), "Tensor::from: data size does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(std::move(v));
    return t;
}

std::int64_t Tape::record(std::size_t numel, BackwardFn fn) {
    nodes_.push_back({numel, std::move(fn)});
    adj_.emplace_back(nullptr);
    return static_cast<std::int64_t>(nodes_.size()) - 1;
}

double* Tape::adjoint(std::int64_t node, std::size_t numel) {
    auto& buf = adj_[static_cast<std::size_t>(node)];
    if (!buf) buf = std::make_unique<std::vector<double>>(numel, 0.0);
    return buf->data();
}

void Tape::backward(const Tensor& loss, const std::vector<const Tensor*>& keep) {
    require(loss.tape == this && loss.node >= 0, "backward: loss is not recorded on this tape");
    require(loss.numel() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape));
    for (auto& b : adj_) b.reset();
    std::vector<char> keep_flag(nodes_.size(), 0);
    for (const Tensor* t : keep)
        if (t && t->tape == this && t->node >= 0) keep_flag[static_cast<std::size_t>(t->node)] = 1;
    adjoint(loss.node, 1)[0] = 1.0;
    // Node ids are a topological order by construction, so one reverse pass
    // visits every consumer before its producers. Interior adjoints are freed
    // right after use to bound peak memory.
    for (std::int64_t i = loss.node; i >= 0; --i) {
        auto ui = static_cast<std::size_t>(i);
        if (!adj_[ui]) continue;
        if (nodes_[ui].fn) {
            nodes_[ui].fn(adj_[ui]->data(), *this);
            if (!keep_flag[ui]) adj_[ui].reset();
        }
    }
    ran_backward_ = true;
}

std::vector<double> Tape::grad_of(const Tensor& t) const {
    require(t.tape == this && t.node >= 0, "grad_of: tensor is not recorded on this tape");
    require(ran_backward_, "grad_of: backward() has not run on this tape");
    const auto& buf = adj_[static_cast<std::size_t>(t.node)];
    if (!buf) return std::vector<double>(t.numel(), 0.0);
    return *buf;
}

Tensor watch(Tape& tape, const Tensor& t) {
    require(t.data != nullptr, "watch: empty tensor");
    Tensor out = t;
    out.tape = &tape;
    out.node = tape.record(t.numel(), nullptr);
    return out;
}

Tape* tape_of(const Tensor& a) { return a.node >= 0 ? a.tape : nullptr; }

Tape* tape_of(const Tensor& a, const Tensor& b) {
    Tape* ta = tape_of(a);
    Tape* tb = tape_of(b);
    if (ta && tb) require(ta == tb, "op inputs are recorded on different tapes");
    return ta ? ta : tb;
}

Tensor make_op_result(Shape shape, std::vector<double> value, Tape* tape, Tape::BackwardFn fn) {
    Tensor out = Tensor::from(std::move(shape), std::move(value));
    if (tape) {
        out.tape = tape;
        out.node = tape->record(out.numel(), std::move(fn));
    }
    return out;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        require(da == db || da == 1 || db == 1,
                "shapes do not broadcast: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

namespace {

constexpr std::size_t kMaxRank = 8;

// Odometer plan for walking an output shape while tracking offsets into two
// (possibly broadcast) operands. Broadcast dimensions get stride 0.
struct BcastPlan {
    Shape out;
    std::size_t n = 0;
    std::size_t rank = 0;
    std::array<std::size_t, kMaxRank> dims{};
    std::array<std::size_t, kMaxRank> sa{};
    std::array<std::size_t, kMaxRank> sb{};
    bool same = false;
};

std::array<std::size_t, kMaxRank> padded_strides(const Shape& s, std::size_t rank) {
    std::array<std::size_t, kMaxRank> st{};
    std::size_t acc = 1;
    std::size_t off = rank - s.size();
    for (std::size_t i = s.size(); i-- > 0;) {
        st[off + i] = (s[i] == 1) ? 0 : acc;
        acc *= s[i];
    }
    return st;
}

BcastPlan plan_bcast(const Shape& a, const Shape& b) {
    BcastPlan p;
    p.out = broadcast_shape(a, b);
    p.rank = p.out.size();
    require(p.rank <= kMaxRank, "broadcast rank limit exceeded");
    p.n = numel_of(p.out);
    for (std::size_t i = 0; i < p.rank; ++i) p.dims[i] = p.out[i];
    p.sa = padded_strides(a, p.rank);
    p.sb = padded_strides(b, p.rank);
    p.same = (a == b);
    return p;
}

// Calls f(out_index, a_offset, b_offset) across the broadcast output.
template <class F>
void bcast_walk(const BcastPlan& p, F f) {
    if (p.same) {
        for (std::size_t i = 0; i < p.n; ++i) f(i, i, i);
        return;
    }
    std::array<std::size_t, kMaxRank> ix{};
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < p.n; ++i) {
        f(i, oa, ob);
        for (std::size_t d = p.rank; d-- > 0;) {
            ++ix[d];
            oa += p.sa[d];
            ob += p.sb[d];
            if (ix[d] < p.dims[d]) break;
            oa -= p.sa[d] * p.dims[d];
            ob -= p.sb[d] * p.dims[d];
            ix[d] = 0;
        }
    }
}

// Splits a shape into [outer, dim, inner] around one axis.
struct AxisSplit {
    std::size_t outer = 1, dim = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
    require(axis < s.size(), "axis out of range for shape " + shape_str(s));
    AxisSplit sp;
    for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
    sp.dim = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

}  // namespace

std::vector<double> reduce_to_shape(const double* g, const Shape& from, const Shape& to) {
    std::vector<double> out(numel_of(to), 0.0);
    BcastPlan p = plan_bcast(from, to);
    require(p.out == from, "reduce_to_shape: shape " + shape_str(to) + " does not broadcast to " + shape_str(from));
    bcast_walk(p, [&](std::size_t i, std::size_t, std::size_t ob) { out[ob] += g[i]; });
    return out;
}

namespace {

// Shared implementation for add/sub/mul.
enum class BinOp { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op) {
    BcastPlan p = plan_bcast(a.shape, b.shape);
    std::vector<double> out(p.n);
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    switch (op) {
        case BinOp::Add:
            bcast_walk(p, [&](std::size_t i, std::size_t oa, std::size_t ob) { out[i] = pa[oa] + pb[ob]; });
            break;
        case BinOp::Sub:
            bcast_walk(p, [&](std::size_t i, std::size_t oa, std::size_t ob) { out[i] = pa[oa] - pb[ob]; });
            break;
        case BinOp::Mul:
            bcast_walk(p, [&](std::size_t i, std::size_t oa, std::size_t ob) { out[i] = pa[oa] * pb[ob]; });
            break;
    }
    Tape* tape = tape_of(a, b);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node, nb = b.node;
        std::size_t sza = a.numel(), szb = b.numel();
        auto da = a.data, db = b.data;
        fn = [p, op, na, nb, sza, szb, da, db](const double* g, Tape& t) {
            double* aa = na >= 0 ? t.adjoint(na, sza) : nullptr;
            double* ab = nb >= 0 ? t.adjoint(nb, szb) : nullptr;
            switch (op) {
                case BinOp::Add:
                    bcast_walk(p, [&](std::size_t i, std::size_t oa, std::size_t ob) {
                        if (aa) aa[oa] += g[i];
                        if (ab) ab[ob] += g[i];
                    });
                    break;
                case BinOp::Sub:
                    bcast_walk(p, [&](std::size_t i, std::size_t oa, std::size_t ob) {
                        if (aa) aa[oa] += g[i];
                        if (ab) ab[ob] -= g[i];
                    });
                    break;
                case BinOp::Mul: {
                    const double* va = da->data();
                    const double* vb = db->data();
                    bcast_walk(p, [&](std::size_t i, std::size_t oa, std::size_t ob) {
                        if (aa) aa[oa] += g[i] * vb[ob];
                        if (ab) ab[ob] += g[i] * va[oa];
                    });
                    break;
                }
            }
        };
    }
    return make_op_result(p.out, std::move(out), tape, std::move(fn));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul); }

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    const double* pa = a.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        fn = [na, n, c](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            for (std::size_t i = 0; i < n; ++i) aa[i] += c * g[i];
        };
    }
    return make_op_result(a.shape, std::move(out), tape, std::move(fn));
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    const double* pa = a.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + c;
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        fn = [na, n](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            for (std::size_t i = 0; i < n; ++i) aa[i] += g[i];
        };
    }
    return make_op_result(a.shape, std::move(out), tape, std::move(fn));
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

namespace {

// Unary elementwise op with derivative expressed from (x, y) values.
template <class FwdF, class BwdF>
Tensor unary_op(const Tensor& a, FwdF f, BwdF dfdx) {
    std::vector<double> out(a.numel());
    const double* pa = a.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i]);
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        auto da = a.data;
        auto dout = std::make_shared<std::vector<double>>(out);
        fn = [na, n, da, dout, dfdx](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            const double* x = da->data();
            const double* y = dout->data();
            for (std::size_t i = 0; i < n; ++i) aa[i] += g[i] * dfdx(x[i], y[i]);
        };
    }
    return make_op_result(a.shape, std::move(out), tape, std::move(fn));
}

}  // namespace

Tensor exp_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        a,
        [](double x) { return detail::softplus_val(x); },
        [](double x, double) { return detail::sigmoid_val(x); });
}

Tensor silu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return detail::silu_val(x); },
        [](double x, double) {
            double s = detail::sigmoid_val(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

namespace detail {

void mm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
        std::size_t n, bool ta, bool tb, bool acc) {
    if (!acc) std::fill(c, c + m * n, 0.0);
    if (!ta && !tb) {
        for (std::size_t i = 0; i < m; ++i) {
            double* cr = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                double av = a[i * k + p];
                const double* br = b + p * n;
                for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
    } else if (!ta && tb) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                const double* ar = a + i * k;
                const double* br = b + j * k;
                for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
                c[i * n + j] += s;
            }
        }
    } else if (ta && !tb) {
        for (std::size_t p = 0; p < k; ++p) {
            const double* ar = a + p * m;
            const double* br = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                double av = ar[i];
                double* cr = c + i * n;
                for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
                c[i * n + j] += s;
            }
        }
    }
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    require(a.rank() == 2 && b.rank() == 2,
            "matmul: operands must be rank 2, got " + shape_str(a.shape) + " x " + shape_str(b.shape));
    std::size_t m = ta ? a.shape[1] : a.shape[0];
    std::size_t k = ta ? a.shape[0] : a.shape[1];
    std::size_t kb = tb ? b.shape[1] : b.shape[0];
    std::size_t n = tb ? b.shape[0] : b.shape[1];
    require(k == kb, "matmul: inner dims disagree: " + shape_str(a.shape) + " x " + shape_str(b.shape));

    std::vector<double> out(m * n);
    detail::mm(a.ptr(), b.ptr(), out.data(), m, k, n, ta, tb, false);

    Tape* tape = tape_of(a, b);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node, nb = b.node;
        std::size_t sza = a.numel(), szb = b.numel();
        auto da = a.data, db = b.data;
        fn = [na, nb, sza, szb, da, db, m, k, n, ta, tb](const double* g, Tape& t) {
            // With A' = op(a), B' = op(b): dA' = G B'^T and dB' = A'^T G, then
            // un-transpose back into the operands' storage layouts.
            if (na >= 0) {
                double* aa = t.adjoint(na, sza);
                if (!ta) {
                    // dA (m x k) = G * B'^T
                    detail::mm(g, db->data(), aa, m, n, k, false, !tb ? true : false, true);
                } else {
                    // a stored k x m; dA = (G B'^T)^T = B' G^T
                    detail::mm(db->data(), g, aa, k, n, m, tb, true, true);
                }
            }
            if (nb >= 0) {
                double* ab = t.adjoint(nb, szb);
                if (!tb) {
                    // dB (k x n) = A'^T G
                    detail::mm(da->data(), g, ab, k, m, n, !ta, false, true);
                } else {
                    // b stored n x k; dB = (A'^T G)^T = G^T A'
                    detail::mm(g, da->data(), ab, n, m, k, true, ta, true);
                }
            }
        };
    }
    return make_op_result({m, n}, std::move(out), tape, std::move(fn));
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    const double* pa = a.ptr();
    for (std::size_t i = 0; i < a.numel(); ++i) s += pa[i];
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        fn = [na, n](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            for (std::size_t i = 0; i < n; ++i) aa[i] += g[0];
        };
    }
    return make_op_result({1}, {s}, tape, std::move(fn));
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim) {
    AxisSplit sp = split_axis(a.shape, axis);
    Shape oshape;
    for (std::size_t i = 0; i < a.rank(); ++i) {
        if (i == axis) {
            if (keepdim) oshape.push_back(1);
        } else {
            oshape.push_back(a.shape[i]);
        }
    }
    if (oshape.empty()) oshape = {1};
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    const double* pa = a.ptr();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t d = 0; d < sp.dim; ++d) {
            const double* src = pa + (o * sp.dim + d) * sp.inner;
            double* dst = out.data() + o * sp.inner;
            for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
        }
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        fn = [na, n, sp](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t d = 0; d < sp.dim; ++d) {
                    double* dst = aa + (o * sp.dim + d) * sp.inner;
                    const double* src = g + o * sp.inner;
                    for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
                }
        };
    }
    return make_op_result(std::move(oshape), std::move(out), tape, std::move(fn));
}

Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim) {
    return scale(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(a.shape[axis]));
}

Tensor cumsum(const Tensor& a, std::size_t axis) {
    AxisSplit sp = split_axis(a.shape, axis);
    std::vector<double> out(a.numel());
    const double* pa = a.ptr();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            double run = 0.0;
            for (std::size_t d = 0; d < sp.dim; ++d) {
                std::size_t off = (o * sp.dim + d) * sp.inner + in;
                run += pa[off];
                out[off] = run;
            }
        }
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        fn = [na, n, sp](const double* g, Tape& t) {
            // d/dx[d] of sum_{d' >= d} out-grads: reverse running sum.
            double* aa = t.adjoint(na, n);
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    double run = 0.0;
                    for (std::size_t d = sp.dim; d-- > 0;) {
                        std::size_t off = (o * sp.dim + d) * sp.inner + in;
                        run += g[off];
                        aa[off] += run;
                    }
                }
        };
    }
    return make_op_result(a.shape, std::move(out), tape, std::move(fn));
}

Tensor reshape(const Tensor& a, Shape s) {
    require(numel_of(s) == a.numel(),
            "reshape: element count mismatch " + shape_str(a.shape) + " -> " + shape_str(s));
    std::vector<double> out(*a.data);
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        fn = [na, n](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            for (std::size_t i = 0; i < n; ++i) aa[i] += g[i];
        };
    }
    return make_op_result(std::move(s), std::move(out), tape, std::move(fn));
}

Tensor slice_index(const Tensor& a, std::size_t axis, std::size_t i) {
    AxisSplit sp = split_axis(a.shape, axis);
    require(i < sp.dim, "slice_index: index out of range");
    Shape oshape;
    for (std::size_t d = 0; d < a.rank(); ++d)
        if (d != axis) oshape.push_back(a.shape[d]);
    if (oshape.empty()) oshape = {1};
    std::vector<double> out(sp.outer * sp.inner);
    const double* pa = a.ptr();
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::memcpy(out.data() + o * sp.inner, pa + (o * sp.dim + i) * sp.inner,
                    sp.inner * sizeof(double));
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        fn = [na, n, sp, i](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            for (std::size_t o = 0; o < sp.outer; ++o) {
                double* dst = aa + (o * sp.dim + i) * sp.inner;
                const double* src = g + o * sp.inner;
                for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
            }
        };
    }
    return make_op_result(std::move(oshape), std::move(out), tape, std::move(fn));
}

Tensor stack(const std::vector<Tensor>& parts, std::size_t axis) {
    require(!parts.empty(), "stack: no tensors given");
    const Shape& base = parts[0].shape;
    for (const Tensor& p : parts)
        require(p.shape == base, "stack: mismatched part shapes");
    require(axis <= base.size(), "stack: axis out of range");
    Shape oshape = base;
    oshape.insert(oshape.begin() + static_cast<std::ptrdiff_t>(axis), parts.size());

    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= base[i];
    std::size_t inner = numel_of(base) / outer;
    std::size_t np = parts.size();

    std::vector<double> out(numel_of(oshape));
    for (std::size_t p = 0; p < np; ++p) {
        const double* src = parts[p].ptr();
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * np + p) * inner, src + o * inner, inner * sizeof(double));
    }

    Tape* tape = nullptr;
    for (const Tensor& p : parts)
        if (p.node >= 0) {
            if (tape) require(tape == p.tape, "stack: parts recorded on different tapes");
            tape = p.tape;
        }
    Tape::BackwardFn fn;
    if (tape) {
        std::vector<std::int64_t> ids(np);
        std::size_t pn = numel_of(base);
        for (std::size_t p = 0; p < np; ++p) ids[p] = parts[p].node;
        fn = [ids, outer, inner, np, pn](const double* g, Tape& t) {
            for (std::size_t p = 0; p < np; ++p) {
                if (ids[p] < 0) continue;
                double* ap = t.adjoint(ids[p], pn);
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = g + (o * np + p) * inner;
                    double* dst = ap + o * inner;
                    for (std::size_t in = 0; in < inner; ++in) dst[in] += src[in];
                }
            }
        };
    }
    return make_op_result(std::move(oshape), std::move(out), tape, std::move(fn));
}

Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& idx) {
    AxisSplit sp = split_axis(a.shape, axis);
    for (std::size_t i : idx) require(i < sp.dim, "index_select: index out of range");
    Shape oshape = a.shape;
    oshape[axis] = idx.size();
    std::vector<double> out(numel_of(oshape));
    const double* pa = a.ptr();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < idx.size(); ++j)
            std::memcpy(out.data() + (o * idx.size() + j) * sp.inner,
                        pa + (o * sp.dim + idx[j]) * sp.inner, sp.inner * sizeof(double));
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        fn = [na, n, sp, idx](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t j = 0; j < idx.size(); ++j) {
                    double* dst = aa + (o * sp.dim + idx[j]) * sp.inner;
                    const double* src = g + (o * idx.size() + j) * sp.inner;
                    for (std::size_t in = 0; in < sp.inner; ++in) dst[in] += src[in];
                }
        };
    }
    return make_op_result(std::move(oshape), std::move(out), tape, std::move(fn));
}

Tensor softmax_lastdim(const Tensor& a) {
    require(a.rank() >= 1, "softmax: rank 0 tensor");
    std::size_t cols = a.shape.back();
    std::size_t rows = a.numel() / cols;
    std::vector<double> out(a.numel());
    const double* pa = a.ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = pa + r * cols;
        double* y = out.data() + r * cols;
        double mx = x[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < cols; ++j) y[j] /= z;
    }
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        auto dout = std::make_shared<std::vector<double>>(out);
        fn = [na, n, rows, cols, dout](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            const double* y = dout->data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yr = y + r * cols;
                const double* gr = g + r * cols;
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                double* ar = aa + r * cols;
                for (std::size_t j = 0; j < cols; ++j) ar[j] += yr[j] * (gr[j] - dot);
            }
        };
    }
    return make_op_result(a.shape, std::move(out), tape, std::move(fn));
}

Tensor conv1d_depthwise_causal(const Tensor& x, const Tensor& taps) {
    require(x.rank() == 3, "conv1d: input must be B x T x E, got " + shape_str(x.shape));
    require(taps.rank() == 2 && taps.shape[0] == x.shape[2],
            "conv1d: taps must be E x W with E matching input channels");
    require(taps.node < 0, "conv1d: gradient w.r.t. taps is not supported");
    std::size_t bsz = x.shape[0], tn = x.shape[1], e = x.shape[2], w = taps.shape[1];
    std::vector<double> out(x.numel(), 0.0);
    const double* px = x.ptr();
    const double* pt = taps.ptr();
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t t = 0; t < tn; ++t)
            for (std::size_t c = 0; c < e; ++c) {
                double s = 0.0;
                for (std::size_t k = 0; k < w; ++k) {
                    // Tap w-1 hits the current token; earlier taps look back.
                    std::int64_t src = static_cast<std::int64_t>(t) - static_cast<std::int64_t>(w - 1 - k);
                    if (src < 0) continue;
                    s += pt[c * w + k] * px[(b * tn + static_cast<std::size_t>(src)) * e + c];
                }
                out[(b * tn + t) * e + c] = s;
            }
    Tape* tape = tape_of(x);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t nx = x.node;
        std::size_t n = x.numel();
        auto dt = taps.data;
        fn = [nx, n, bsz, tn, e, w, dt](const double* g, Tape& t) {
            double* ax = t.adjoint(nx, n);
            const double* pt = dt->data();
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t to = 0; to < tn; ++to)
                    for (std::size_t c = 0; c < e; ++c) {
                        double gv = g[(b * tn + to) * e + c];
                        if (gv == 0.0) continue;
                        for (std::size_t k = 0; k < w; ++k) {
                            std::int64_t src =
                                static_cast<std::int64_t>(to) - static_cast<std::int64_t>(w - 1 - k);
                            if (src < 0) continue;
                            ax[(b * tn + static_cast<std::size_t>(src)) * e + c] += pt[c * w + k] * gv;
                        }
                    }
        };
    }
    return make_op_result(x.shape, std::move(out), tape, std::move(fn));
}

Tensor shift2d(const Tensor& a, std::int64_t di, std::int64_t dj) {
    require(a.rank() >= 3, "shift2d: need at least rank 3, got " + shape_str(a.shape));
    std::size_t bsz = a.shape[0], ni = a.shape[1], nj = a.shape[2];
    std::size_t inner = a.numel() / (bsz * ni * nj);
    std::vector<double> out(a.numel(), 0.0);
    const double* pa = a.ptr();
    auto copy_plane = [&](double* dst, const double* src) {
        for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t i = 0; i < ni; ++i) {
                std::int64_t si = static_cast<std::int64_t>(i) + di;
                if (si < 0 || si >= static_cast<std::int64_t>(ni)) continue;
                for (std::size_t j = 0; j < nj; ++j) {
                    std::int64_t sj = static_cast<std::int64_t>(j) + dj;
                    if (sj < 0 || sj >= static_cast<std::int64_t>(nj)) continue;
                    std::memcpy(dst + ((b * ni + i) * nj + j) * inner,
                                src + ((b * ni + static_cast<std::size_t>(si)) * nj +
                                       static_cast<std::size_t>(sj)) *
                                          inner,
                                inner * sizeof(double));
                }
            }
    };
    copy_plane(out.data(), pa);
    Tape* tape = tape_of(a);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t na = a.node;
        std::size_t n = a.numel();
        fn = [na, n, bsz, ni, nj, inner, di, dj](const double* g, Tape& t) {
            double* aa = t.adjoint(na, n);
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t i = 0; i < ni; ++i) {
                    std::int64_t si = static_cast<std::int64_t>(i) + di;
                    if (si < 0 || si >= static_cast<std::int64_t>(ni)) continue;
                    for (std::size_t j = 0; j < nj; ++j) {
                        std::int64_t sj = static_cast<std::int64_t>(j) + dj;
                        if (sj < 0 || sj >= static_cast<std::int64_t>(nj)) continue;
                        double* dst = aa + ((b * ni + static_cast<std::size_t>(si)) * nj +
                                            static_cast<std::size_t>(sj)) *
                                               inner;
                        const double* src = g + ((b * ni + i) * nj + j) * inner;
                        for (std::size_t in = 0; in < inner; ++in) dst[in] += src[in];
                    }
                }
        };
    }
    return make_op_result(a.shape, std::move(out), tape, std::move(fn));
}

}  // namespace ouro
