#pragma once

#include <vector>

#include "ouro/ssm.hpp"
#include "ouro/tensor.hpp"

namespace ouro {

// The structured recurrence is linear in its input, so each output channel e
// has an exact attention form: o[:,e] = alpha_tilde_e * u[:,e], where
// alpha_e[i,j,m] = C(i)[m] * (prod_{k=j+1..i} A_bar(k)[e,m]) * B_bar(j)[e,m]
// and alpha_tilde_e sums over m. Everything here works per channel on one
// sample's ScanTrace, in scan (permuted) index space.

// Hidden states reconstructed by the direct unrolled formula (explicit
// products, no recurrence): M x E x N.
std::vector<double> unrolled_hidden_state(const ScanTrace& tr);

// Per-channel attention cube alpha_e: M x M x N, zero above the diagonal.
std::vector<double> implicit_attention_channel(const ScanTrace& tr, std::size_t e);

// Sum an attention cube over its state axis: M x M.
std::vector<double> attention_matrix(const std::vector<double>& cube, std::size_t m,
                                     std::size_t n);

// Neighborhoods live on the spatial token grid but index into scan positions:
// lists[i] holds the scan indices whose grid positions fall in the p x p
// window centred on scan position i's grid position, truncated at borders
// (the centre itself included), sorted ascending.
std::vector<std::vector<std::size_t>> neighbor_scan_lists(std::size_t grid, std::size_t p,
                                                          ScanOrder order);

// Patch-aggregated states h_p(i) = sum_{k in N(i)} w_k h(k) with w_k the
// channel mean of delta(k); weights are not normalised. Returns M x E x N
// plus the weights used (M).
struct PatchedState {
    std::vector<double> h_p;  // M x E x N
    std::vector<double> w;    // M
};
PatchedState patched_state(const ScanTrace& tr, const std::vector<std::vector<std::size_t>>& nbrs);

// Per-channel enhanced attention cube alpha_p_e: M x M x N, obtained by
// pushing the neighborhood sum through the attention form (linearity);
// entry (i,j) is zero whenever j exceeds every member of N(i).
std::vector<double> enhanced_attention_channel(const ScanTrace& tr,
                                               const std::vector<std::vector<std::size_t>>& nbrs,
                                               std::size_t e);

// Channel-mean enhanced embedding lambda[i,j,:] = mean_e alpha_p_e[i,j,:],
// M x M x N. This is the per-pair feature the generation loss ranks and
// contrasts; also what attn dumps aggregate.
std::vector<double> enhanced_embedding_mean(const ScanTrace& tr,
                                            const std::vector<std::vector<std::size_t>>& nbrs);

// ---- tape ops for the generation path ----------------------------------------
//
// The cumulative log decay L = cumsum(A*delta) turns the interval products
// into exp(L(k)-L(j)), which these two primitives consume without ever
// materialising a B x M x M x E x N intermediate.

// Q[b,k,j,m] = sum_e exp(L[b,k,e,m] - L[b,j,e,m]) * Bb[b,j,e,m] for j <= k,
// else 0. L, Bb: B x M x E x N; result B x M x M x N.
Tensor pair_exp_contract(const Tensor& L, const Tensor& Bb);

// out[b,i,j,m] = sum_{k in nbrs[i]} w[b,k] * Q[b,k,j,m]; w is B x M.
Tensor neighbor_weighted_sum(const Tensor& Q, const Tensor& w,
                             const std::vector<std::vector<std::size_t>>& nbrs);

// Differentiable channel-mean embedding for one scan: B x M x M x N. When
// `uniform_w` is set the aggregation weights are 1 instead of mean delta.
Tensor enhanced_embedding_t(const ScanTensors& st,
                            const std::vector<std::vector<std::size_t>>& nbrs, bool uniform_w);

}  // namespace ouro
