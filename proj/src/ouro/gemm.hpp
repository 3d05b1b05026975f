#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ouro/common.hpp"

namespace ouro {

// Integer GEMM analog of the mixed-precision inference kernel. Throughout,
// y[m][c] = sum_k w[m][k] * x[k][c]: weights carry one scale per output row m,
// activation channels run along the contraction dim k, so an outlier channel
// is one row of the K x C activation plane.

// Two signed 4-bit codes per byte, low nibble = even column, sign-extended on
// unpack. The packed form is the storage/transport format; kernels unpack to
// a contiguous int8 working plane once per call.
struct PackedInt4 {
    std::size_t rows = 0, cols = 0;
    std::size_t stride = 0;  // bytes per row = ceil(cols / 2)
    std::vector<std::uint8_t> bytes;
    std::int8_t get(std::size_t r, std::size_t c) const;
};

// Codes must lie in [-7, 7]; an odd trailing column leaves the high nibble 0.
PackedInt4 pack_int4(const std::int8_t* codes, std::size_t rows, std::size_t cols);
std::vector<std::int8_t> unpack_int4(const PackedInt4& p);

// Outlier channels pulled out of a K x C activation plane: one contiguous
// row of int8 codes per channel, channel indices strictly increasing.
struct OutlierBuffer {
    std::vector<std::size_t> channels;
    std::vector<std::int8_t> codes;  // channels.size() x cols, row per channel
    std::vector<double> scales;      // dequant scale per channel
    std::size_t cols = 0;
};

// Splits an int8 code plane: returns the plane with the o_list rows zeroed
// plus the compact buffer holding exactly those rows. Reassembling the buffer
// into the zeroed plane reproduces the input.
std::pair<std::vector<std::int8_t>, OutlierBuffer> extract_outliers(
    const std::vector<std::int8_t>& codes, std::size_t k, std::size_t c,
    const std::vector<std::size_t>& o_list, const std::vector<double>& scales);

// Quantizes a real K x C activation plane into hybrid operands: rows outside
// o_list get shared-scale codes at act_bits (clipped to the symmetric range),
// o_list rows are zeroed in the plane and carried in the buffer at their own
// per-channel scales at outlier_bits.
struct SplitOperands {
    std::vector<std::int8_t> inlier_codes;  // k x c
    OutlierBuffer outliers;
};
SplitOperands split_quantize(const double* x, std::size_t k, std::size_t c,
                             const std::vector<std::size_t>& o_list, double inlier_scale,
                             unsigned act_bits, unsigned outlier_bits);

// Largest contraction dims for which the int32 accumulators provably cannot
// overflow: |code| <= 7 for packed operands, <= 127 for the outlier buffer.
constexpr std::size_t kMaxInnerI4 = (std::size_t{1} << 31) / (7 * 7);
constexpr std::size_t kMaxInnerI4xI8 = (std::size_t{1} << 31) / (7 * 127);

// Exact int32 products; both check the no-overflow bound on the contraction
// dim. Row ranges may run on several threads; each writes disjoint output
// rows, so results are bit-identical for every thread count.
std::vector<std::int32_t> gemm_i4(const PackedInt4& w, const PackedInt4& x, int threads = 1);
std::vector<std::int32_t> gemm_i4xi8(const PackedInt4& w, const OutlierBuffer& outliers,
                                     int threads = 1);

struct GemmResult {
    std::size_t rows = 0, cols = 0;
    std::vector<std::int32_t> acc_inlier;
    std::vector<std::int32_t> acc_outlier;  // unscaled integer sum over outlier channels
    std::vector<double> output;
};

// output[m][c] = w_scales[m] * (inlier_scale * acc_inlier[m][c]
//              + sum_j outliers.scales[j] * w[m][ch_j] * outlier_codes[j][c])
// assembled in one fused pass per row, outlier terms in ascending channel
// order, no intermediate real matrices. The integer planes come back too;
// with per-channel outlier scales the real output is recomputable from the
// per-channel rank-1 terms, and acc_outlier records their unscaled sum.
// f16_output additionally rounds every output value through IEEE binary16.
GemmResult hybrid_gemm(const PackedInt4& w, const std::vector<double>& w_scales,
                       const PackedInt4& x_inlier, double inlier_scale,
                       const OutlierBuffer& outliers, int threads = 1, bool f16_output = false);

// Real reference with the same row-blocked loop structure as the integer
// kernel, so benchmark comparisons are like for like.
void gemm_f64(const double* a, const double* b, double* y, std::size_t m, std::size_t k,
              std::size_t c, int threads = 1);

// Round-trip a value through IEEE binary16 (round to nearest even).
double round_f16(double v);

struct BenchRecord {
    std::string path;  // "hybrid" or "f64"
    std::size_t size = 0;
    double median_ns = 0.0;
};

struct BenchSettings {
    std::vector<std::size_t> sizes = {64, 128, 256};
    double outlier_fraction = 0.01;
    std::size_t trials = 5;
    int threads = 1;
    std::uint64_t seed = 1;
    bool f16_output = false;
};

// Per cube size: median wall-clock of hybrid_gemm vs gemm_f64 on dequantized
// operands of the same problem. Operand setup happens outside the timers.
std::vector<BenchRecord> bench_gemm(const BenchSettings& s);

// Streaming ablation of the refresh period. Each step runs the full inference
// path: refresh -> dynamic detection -> quantize/pack -> hybrid GEMM, over a
// synthetic activation stream with persistent spike channels (re-detected
// after every refresh) and transient one-step spikes (which go stale in the
// list). Frequent refresh pays for repeated full detection scans; never
// refreshing pays for an ever-growing outlier buffer.
struct SweepSettings {
    std::vector<std::size_t> periods = {1, 5, 10, 20, 0};  // 0 = never refresh
    std::size_t steps = 300;
    std::size_t m = 8, k = 512, c = 32;
    std::size_t persistent_channels = 6;
    double transient_rate = 0.15;  // per-step probability of a one-step spike
    double spike_gain = 40.0;
    std::size_t trials = 5;
    std::uint64_t seed = 1;
};

struct SweepRecord {
    std::size_t period = 0;  // 0 = never
    double median_total_ns = 0.0;
    double mean_o_list = 0.0;    // mean |o_list| after detection, per step
    double scans_per_step = 0.0;
};

std::vector<SweepRecord> bench_refresh_sweep(const SweepSettings& s);

}  // namespace ouro
