#include "ouro/attention.hpp"

#include <algorithm>
#include <cmath>

namespace ouro {

std::vector<double> unrolled_hidden_state(const ScanTrace& tr) {
    std::size_t m = tr.tokens, e = tr.embed, n = tr.state;
    std::vector<double> h(m * e * n, 0.0);
    for (std::size_t ch = 0; ch < e; ++ch)
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t t = 0; t < m; ++t) {
                double acc = 0.0;
                for (std::size_t j = 0; j <= t; ++j) {
                    double prod = 1.0;
                    for (std::size_t k = j + 1; k <= t; ++k)
                        prod *= tr.a_bar[(k * e + ch) * n + s];
                    acc += prod * tr.b_bar[(j * e + ch) * n + s] * tr.u[j * e + ch];
                }
                h[(t * e + ch) * n + s] = acc;
            }
    return h;
}

std::vector<double> implicit_attention_channel(const ScanTrace& tr, std::size_t ch) {
    std::size_t m = tr.tokens, e = tr.embed, n = tr.state;
    require(ch < e, "implicit_attention_channel: channel out of range");
    std::vector<double> cube(m * m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            for (std::size_t s = 0; s < n; ++s) {
                double prod = 1.0;
                for (std::size_t k = j + 1; k <= i; ++k) prod *= tr.a_bar[(k * e + ch) * n + s];
                cube[(i * m + j) * n + s] = tr.c[i * n + s] * prod * tr.b_bar[(j * e + ch) * n + s];
            }
    return cube;
}

std::vector<double> attention_matrix(const std::vector<double>& cube, std::size_t m,
                                     std::size_t n) {
    require(cube.size() == m * m * n, "attention_matrix: cube size mismatch");
    std::vector<double> out(m * m, 0.0);
    for (std::size_t ij = 0; ij < m * m; ++ij)
        for (std::size_t s = 0; s < n; ++s) out[ij] += cube[ij * n + s];
    return out;
}

std::vector<std::vector<std::size_t>> neighbor_scan_lists(std::size_t grid, std::size_t p,
                                                          ScanOrder order) {
    require(p >= 1 && p % 2 == 1, "neighborhood side must be odd");
    std::size_t m = grid * grid;
    auto perm = scan_permutation(order, grid);
    auto inv = inverse_permutation(perm);
    std::ptrdiff_t r = static_cast<std::ptrdiff_t>(p / 2);
    std::vector<std::vector<std::size_t>> lists(m);
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t canon = perm[i];
        std::ptrdiff_t row = static_cast<std::ptrdiff_t>(canon / grid);
        std::ptrdiff_t col = static_cast<std::ptrdiff_t>(canon % grid);
        std::vector<std::size_t>& lst = lists[i];
        for (std::ptrdiff_t dr = -r; dr <= r; ++dr)
            for (std::ptrdiff_t dc = -r; dc <= r; ++dc) {
                std::ptrdiff_t nr = row + dr, nc = col + dc;
                if (nr < 0 || nc < 0 || nr >= static_cast<std::ptrdiff_t>(grid) ||
                    nc >= static_cast<std::ptrdiff_t>(grid))
                    continue;
                lst.push_back(inv[static_cast<std::size_t>(nr) * grid + static_cast<std::size_t>(nc)]);
            }
        std::sort(lst.begin(), lst.end());
    }
    return lists;
}

PatchedState patched_state(const ScanTrace& tr, const std::vector<std::vector<std::size_t>>& nbrs) {
    std::size_t m = tr.tokens, e = tr.embed, n = tr.state;
    require(nbrs.size() == m, "patched_state: neighbor lists do not match token count");
    PatchedState ps;
    ps.w.resize(m);
    for (std::size_t k = 0; k < m; ++k) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < e; ++ch) s += tr.delta[k * e + ch];
        ps.w[k] = s / static_cast<double>(e);
    }
    ps.h_p.assign(m * e * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k : nbrs[i]) {
            double wk = ps.w[k];
            const double* src = tr.h.data() + k * e * n;
            double* dst = ps.h_p.data() + i * e * n;
            for (std::size_t x = 0; x < e * n; ++x) dst[x] += wk * src[x];
        }
    return ps;
}

std::vector<double> enhanced_attention_channel(const ScanTrace& tr,
                                               const std::vector<std::vector<std::size_t>>& nbrs,
                                               std::size_t ch) {
    std::size_t m = tr.tokens, e = tr.embed, n = tr.state;
    require(ch < e && nbrs.size() == m, "enhanced_attention_channel: bad arguments");
    // Aggregation weights, channel mean of delta.
    std::vector<double> w(m);
    for (std::size_t k = 0; k < m; ++k) {
        double s = 0.0;
        for (std::size_t c = 0; c < e; ++c) s += tr.delta[k * e + c];
        w[k] = s / static_cast<double>(e);
    }
    std::vector<double> cube(m * m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k : nbrs[i])
            for (std::size_t j = 0; j <= k; ++j)
                for (std::size_t s = 0; s < n; ++s) {
                    double prod = 1.0;
                    for (std::size_t l = j + 1; l <= k; ++l) prod *= tr.a_bar[(l * e + ch) * n + s];
                    cube[(i * m + j) * n + s] +=
                        tr.c[i * n + s] * w[k] * prod * tr.b_bar[(j * e + ch) * n + s];
                }
    return cube;
}

std::vector<double> enhanced_embedding_mean(const ScanTrace& tr,
                                            const std::vector<std::vector<std::size_t>>& nbrs) {
    std::size_t m = tr.tokens, e = tr.embed, n = tr.state;
    std::vector<double> acc(m * m * n, 0.0);
    for (std::size_t ch = 0; ch < e; ++ch) {
        auto cube = enhanced_attention_channel(tr, nbrs, ch);
        for (std::size_t x = 0; x < acc.size(); ++x) acc[x] += cube[x];
    }
    double inv = 1.0 / static_cast<double>(e);
    for (double& v : acc) v *= inv;
    return acc;
}

Tensor pair_exp_contract(const Tensor& L, const Tensor& Bb) {
    require(L.rank() == 4 && L.shape == Bb.shape,
            "pair_exp_contract: L and Bb must share a B x M x E x N shape");
    std::size_t b = L.shape[0], m = L.shape[1], e = L.shape[2], n = L.shape[3];
    Tape* tape = tape_of(L, Bb);

    // Cache the pair exponentials for the backward pass; forward recomputing
    // them there would double the exp cost of every iteration.
    auto scache = std::make_shared<std::vector<double>>(b * m * m * e * n, 0.0);
    std::vector<double> q(b * m * m * n, 0.0);
    const double* pl = L.ptr();
    const double* pb = Bb.ptr();
    double* ps = scache->data();
    for (std::size_t ib = 0; ib < b; ++ib)
        for (std::size_t k = 0; k < m; ++k)
            for (std::size_t j = 0; j <= k; ++j) {
                const double* lk = pl + ((ib * m + k) * e) * n;
                const double* lj = pl + ((ib * m + j) * e) * n;
                const double* bj = pb + ((ib * m + j) * e) * n;
                double* sv = ps + (((ib * m + k) * m + j) * e) * n;
                double* qv = q.data() + ((ib * m + k) * m + j) * n;
                for (std::size_t ch = 0; ch < e; ++ch)
                    for (std::size_t s = 0; s < n; ++s) {
                        double ex = std::exp(lk[ch * n + s] - lj[ch * n + s]);
                        sv[ch * n + s] = ex;
                        qv[s] += ex * bj[ch * n + s];
                    }
            }

    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t nl = L.node, nb = Bb.node;
        std::size_t sz = L.numel();
        auto dbb = Bb.data;
        fn = [nl, nb, sz, b, m, e, n, scache, dbb](const double* g, Tape& t) {
            double* gl = nl >= 0 ? t.adjoint(nl, sz) : nullptr;
            double* gb = nb >= 0 ? t.adjoint(nb, sz) : nullptr;
            const double* ps = scache->data();
            const double* pb = dbb->data();
            for (std::size_t ib = 0; ib < b; ++ib)
                for (std::size_t k = 0; k < m; ++k)
                    for (std::size_t j = 0; j <= k; ++j) {
                        const double* sv = ps + (((ib * m + k) * m + j) * e) * n;
                        const double* bj = pb + ((ib * m + j) * e) * n;
                        const double* gq = g + ((ib * m + k) * m + j) * n;
                        double* glk = gl ? gl + ((ib * m + k) * e) * n : nullptr;
                        double* glj = gl ? gl + ((ib * m + j) * e) * n : nullptr;
                        double* gbj = gb ? gb + ((ib * m + j) * e) * n : nullptr;
                        for (std::size_t ch = 0; ch < e; ++ch)
                            for (std::size_t s = 0; s < n; ++s) {
                                double r = gq[s] * sv[ch * n + s];
                                if (gbj) gbj[ch * n + s] += r;
                                if (gl) {
                                    double tt = r * bj[ch * n + s];
                                    glk[ch * n + s] += tt;
                                    glj[ch * n + s] -= tt;
                                }
                            }
                    }
        };
    }
    return make_op_result({b, m, m, n}, std::move(q), tape, std::move(fn));
}

Tensor neighbor_weighted_sum(const Tensor& Q, const Tensor& w,
                             const std::vector<std::vector<std::size_t>>& nbrs) {
    require(Q.rank() == 4, "neighbor_weighted_sum: Q must be B x M x M x N");
    std::size_t b = Q.shape[0], m = Q.shape[1], n = Q.shape[3];
    require(Q.shape[2] == m && nbrs.size() == m, "neighbor_weighted_sum: shape mismatch");
    require(w.rank() == 2 && w.shape[0] == b && w.shape[1] == m,
            "neighbor_weighted_sum: w must be B x M");

    // Reverse lists: rev[k] = indices i whose neighborhood contains k.
    std::vector<std::vector<std::size_t>> rev(m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k : nbrs[i]) {
            require(k < m, "neighbor_weighted_sum: neighbor index out of range");
            rev[k].push_back(i);
        }

    std::vector<double> out(b * m * m * n, 0.0);
    const double* pq = Q.ptr();
    const double* pw = w.ptr();
    std::size_t row = m * n;  // one (k, :, :) slab
    for (std::size_t ib = 0; ib < b; ++ib)
        for (std::size_t i = 0; i < m; ++i) {
            double* dst = out.data() + (ib * m + i) * row;
            for (std::size_t k : nbrs[i]) {
                double wk = pw[ib * m + k];
                const double* src = pq + (ib * m + k) * row;
                for (std::size_t x = 0; x < row; ++x) dst[x] += wk * src[x];
            }
        }

    Tape* tape = tape_of(Q, w);
    Tape::BackwardFn fn;
    if (tape) {
        std::int64_t nq = Q.node, nw = w.node;
        std::size_t szq = Q.numel(), szw = w.numel();
        auto dq = Q.data;
        auto dw = w.data;
        fn = [nq, nw, szq, szw, b, m, n, row, rev, dq, dw](const double* g, Tape& t) {
            double* gq = nq >= 0 ? t.adjoint(nq, szq) : nullptr;
            double* gw = nw >= 0 ? t.adjoint(nw, szw) : nullptr;
            const double* pq = dq->data();
            const double* pw = dw->data();
            std::vector<double> grev(row);
            for (std::size_t ib = 0; ib < b; ++ib)
                for (std::size_t k = 0; k < m; ++k) {
                    if (rev[k].empty()) continue;
                    std::fill(grev.begin(), grev.end(), 0.0);
                    for (std::size_t i : rev[k]) {
                        const double* src = g + (ib * m + i) * row;
                        for (std::size_t x = 0; x < row; ++x) grev[x] += src[x];
                    }
                    if (gq) {
                        double wk = pw[ib * m + k];
                        double* dst = gq + (ib * m + k) * row;
                        for (std::size_t x = 0; x < row; ++x) dst[x] += wk * grev[x];
                    }
                    if (gw) {
                        const double* qk = pq + (ib * m + k) * row;
                        double s = 0.0;
                        for (std::size_t x = 0; x < row; ++x) s += qk[x] * grev[x];
                        gw[ib * m + k] += s;
                    }
                }
        };
    }
    return make_op_result({b, m, m, n}, std::move(out), tape, std::move(fn));
}

Tensor enhanced_embedding_t(const ScanTensors& st,
                            const std::vector<std::vector<std::size_t>>& nbrs, bool uniform_w) {
    std::size_t b = st.log_a_bar.shape[0], m = st.log_a_bar.shape[1], e = st.log_a_bar.shape[2],
                n = st.log_a_bar.shape[3];
    Tensor L = cumsum(st.log_a_bar, 1);
    Tensor q = pair_exp_contract(L, st.b_bar);
    Tensor w = uniform_w ? Tensor::full({b, m}, 1.0) : mean_axis(st.delta, 2);
    Tensor p = neighbor_weighted_sum(q, w, nbrs);
    Tensor lam = mul(reshape(st.c, {b, m, 1, n}), p);
    return scale(lam, 1.0 / static_cast<double>(e));
}

}  // namespace ouro
