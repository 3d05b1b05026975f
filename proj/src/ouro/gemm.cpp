#include "ouro/gemm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <thread>

#include "ouro/quant.hpp"
#include "ouro/rng.hpp"

namespace ouro {

namespace {

// Rows of int32 accumulators kept hot per block; 4 rows x 1024 cols stays
// inside L1 alongside the streamed activation row.
constexpr std::size_t kRowBlock = 4;

void run_rows(std::size_t rows, int threads, const std::function<void(std::size_t, std::size_t)>& fn) {
    std::size_t want = threads < 1 ? 1 : static_cast<std::size_t>(threads);
    std::size_t blocks = (rows + kRowBlock - 1) / kRowBlock;
    want = std::min(want, blocks);
    if (want <= 1) {
        fn(0, rows);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(want);
    for (std::size_t i = 0; i < want; ++i) {
        std::size_t beg = std::min(rows, i * blocks / want * kRowBlock);
        std::size_t end = std::min(rows, (i + 1) * blocks / want * kRowBlock);
        if (beg < end) pool.emplace_back(fn, beg, end);
    }
    for (std::thread& t : pool) t.join();
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double now_ns() {
    return static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                   std::chrono::steady_clock::now().time_since_epoch())
                                   .count());
}

}  // namespace

std::int8_t PackedInt4::get(std::size_t r, std::size_t c) const {
    std::uint8_t byte = bytes[r * stride + c / 2];
    std::uint8_t nib = (c & 1) ? (byte >> 4) : (byte & 0x0F);
    return static_cast<std::int8_t>((nib & 0x08) ? (nib | 0xF0) : nib);
}

PackedInt4 pack_int4(const std::int8_t* codes, std::size_t rows, std::size_t cols) {
    PackedInt4 p;
    p.rows = rows;
    p.cols = cols;
    p.stride = (cols + 1) / 2;
    p.bytes.assign(rows * p.stride, 0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            std::int8_t v = codes[r * cols + c];
            require(v >= -7 && v <= 7, "pack_int4: code outside [-7, 7]");
            std::uint8_t nib = static_cast<std::uint8_t>(v) & 0x0F;
            std::uint8_t& byte = p.bytes[r * p.stride + c / 2];
            byte = (c & 1) ? static_cast<std::uint8_t>(byte | (nib << 4))
                           : static_cast<std::uint8_t>(byte | nib);
        }
    return p;
}

std::vector<std::int8_t> unpack_int4(const PackedInt4& p) {
    std::vector<std::int8_t> out(p.rows * p.cols);
    for (std::size_t r = 0; r < p.rows; ++r)
        for (std::size_t c = 0; c < p.cols; ++c) out[r * p.cols + c] = p.get(r, c);
    return out;
}

std::pair<std::vector<std::int8_t>, OutlierBuffer> extract_outliers(
    const std::vector<std::int8_t>& codes, std::size_t k, std::size_t c,
    const std::vector<std::size_t>& o_list, const std::vector<double>& scales) {
    require(codes.size() == k * c, "extract_outliers: plane size mismatch");
    require(scales.size() == o_list.size(), "extract_outliers: one scale per outlier channel");
    std::vector<std::int8_t> plane = codes;
    OutlierBuffer buf;
    buf.cols = c;
    buf.channels = o_list;
    buf.scales = scales;
    buf.codes.resize(o_list.size() * c);
    for (std::size_t j = 0; j < o_list.size(); ++j) {
        std::size_t ch = o_list[j];
        require(ch < k, "extract_outliers: channel index out of range");
        require(j == 0 || o_list[j - 1] < ch, "extract_outliers: channels must strictly increase");
        std::memcpy(buf.codes.data() + j * c, plane.data() + ch * c, c);
        std::memset(plane.data() + ch * c, 0, c);
    }
    return {std::move(plane), std::move(buf)};
}

SplitOperands split_quantize(const double* x, std::size_t k, std::size_t c,
                             const std::vector<std::size_t>& o_list, double inlier_scale,
                             unsigned act_bits, unsigned outlier_bits) {
    require(inlier_scale > 0.0, "split_quantize: inlier scale must be positive");
    SplitOperands out;
    out.inlier_codes.assign(k * c, 0);
    out.outliers.cols = c;
    out.outliers.channels = o_list;
    out.outliers.scales.resize(o_list.size());
    out.outliers.codes.resize(o_list.size() * c);
    std::size_t j = 0;
    for (std::size_t ch = 0; ch < k; ++ch) {
        const double* row = x + ch * c;
        if (j < o_list.size() && o_list[j] == ch) {
            require(j == 0 || o_list[j - 1] < ch, "split_quantize: channels must strictly increase");
            double s = scale_for(row, c, outlier_bits);
            out.outliers.scales[j] = s;
            for (std::size_t i = 0; i < c; ++i)
                out.outliers.codes[j * c + i] =
                    static_cast<std::int8_t>(quantize_code(row[i], s, outlier_bits));
            ++j;
        } else {
            for (std::size_t i = 0; i < c; ++i)
                out.inlier_codes[ch * c + i] =
                    static_cast<std::int8_t>(quantize_code(row[i], inlier_scale, act_bits));
        }
    }
    require(j == o_list.size(), "split_quantize: channel index out of range");
    return out;
}

std::vector<std::int32_t> gemm_i4(const PackedInt4& w, const PackedInt4& x, int threads) {
    require(w.cols == x.rows, "gemm_i4: inner dimensions disagree");
    require(w.cols <= kMaxInnerI4, "gemm_i4: contraction dim exceeds the no-overflow bound");
    std::size_t m = w.rows, k = w.cols, c = x.cols;
    std::vector<std::int32_t> acc(m * c, 0);
    std::vector<std::int8_t> wk = unpack_int4(w);
    std::vector<std::int8_t> xk = unpack_int4(x);
    run_rows(m, threads, [&](std::size_t m0, std::size_t m1) {
        for (std::size_t mb = m0; mb < m1; mb += kRowBlock) {
            std::size_t mend = std::min(mb + kRowBlock, m1);
            for (std::size_t kk = 0; kk < k; ++kk) {
                const std::int8_t* xrow = xk.data() + kk * c;
                for (std::size_t r = mb; r < mend; ++r) {
                    std::int32_t wv = wk[r * k + kk];
                    std::int32_t* arow = acc.data() + r * c;
                    for (std::size_t col = 0; col < c; ++col) arow[col] += wv * xrow[col];
                }
            }
        }
    });
    return acc;
}

std::vector<std::int32_t> gemm_i4xi8(const PackedInt4& w, const OutlierBuffer& outliers,
                                     int threads) {
    require(outliers.channels.size() <= kMaxInnerI4xI8,
            "gemm_i4xi8: channel count exceeds the no-overflow bound");
    std::size_t m = w.rows, c = outliers.cols, n_o = outliers.channels.size();
    for (std::size_t ch : outliers.channels)
        require(ch < w.cols, "gemm_i4xi8: outlier channel outside the weight contraction dim");
    std::vector<std::int32_t> acc(m * c, 0);
    run_rows(m, threads, [&](std::size_t m0, std::size_t m1) {
        for (std::size_t r = m0; r < m1; ++r) {
            std::int32_t* arow = acc.data() + r * c;
            for (std::size_t j = 0; j < n_o; ++j) {
                std::int32_t wv = w.get(r, outliers.channels[j]);
                const std::int8_t* xrow = outliers.codes.data() + j * c;
                for (std::size_t col = 0; col < c; ++col) arow[col] += wv * xrow[col];
            }
        }
    });
    return acc;
}

GemmResult hybrid_gemm(const PackedInt4& w, const std::vector<double>& w_scales,
                       const PackedInt4& x_inlier, double inlier_scale,
                       const OutlierBuffer& outliers, int threads, bool f16_output) {
    require(w_scales.size() == w.rows, "hybrid_gemm: one weight scale per output row");
    require(outliers.channels.empty() || outliers.cols == x_inlier.cols,
            "hybrid_gemm: outlier buffer width disagrees with the inlier plane");
    require(outliers.scales.size() == outliers.channels.size(),
            "hybrid_gemm: one scale per outlier channel");
    require(outliers.channels.size() <= kMaxInnerI4xI8,
            "hybrid_gemm: outlier channel count exceeds the no-overflow bound");
    require(inlier_scale > 0.0, "hybrid_gemm: inlier scale must be positive");

    GemmResult res;
    res.rows = w.rows;
    res.cols = x_inlier.cols;
    res.acc_inlier = gemm_i4(w, x_inlier, threads);
    res.acc_outlier.assign(res.rows * res.cols, 0);
    res.output.assign(res.rows * res.cols, 0.0);

    std::size_t c = res.cols, n_o = outliers.channels.size();
    run_rows(res.rows, threads, [&](std::size_t m0, std::size_t m1) {
        for (std::size_t r = m0; r < m1; ++r) {
            const std::int32_t* ain = res.acc_inlier.data() + r * c;
            std::int32_t* aout = res.acc_outlier.data() + r * c;
            double* orow = res.output.data() + r * c;
            for (std::size_t col = 0; col < c; ++col)
                orow[col] = inlier_scale * static_cast<double>(ain[col]);
            for (std::size_t j = 0; j < n_o; ++j) {
                std::int32_t wv = w.get(r, outliers.channels[j]);
                double coeff = outliers.scales[j] * static_cast<double>(wv);
                const std::int8_t* xrow = outliers.codes.data() + j * c;
                for (std::size_t col = 0; col < c; ++col) {
                    aout[col] += wv * xrow[col];
                    orow[col] += coeff * static_cast<double>(xrow[col]);
                }
            }
            double ws = w_scales[r];
            for (std::size_t col = 0; col < c; ++col) {
                double v = ws * orow[col];
                orow[col] = f16_output ? round_f16(v) : v;
            }
        }
    });
    return res;
}

void gemm_f64(const double* a, const double* b, double* y, std::size_t m, std::size_t k,
              std::size_t c, int threads) {
    std::fill(y, y + m * c, 0.0);
    run_rows(m, threads, [&](std::size_t m0, std::size_t m1) {
        for (std::size_t mb = m0; mb < m1; mb += kRowBlock) {
            std::size_t mend = std::min(mb + kRowBlock, m1);
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double* brow = b + kk * c;
                for (std::size_t r = mb; r < mend; ++r) {
                    double av = a[r * k + kk];
                    double* yrow = y + r * c;
                    for (std::size_t col = 0; col < c; ++col) yrow[col] += av * brow[col];
                }
            }
        }
    });
}

double round_f16(double v) {
    if (!std::isfinite(v) || v == 0.0) return v;
    double a = std::fabs(v);
    int e = 0;
    std::frexp(a, &e);  // a = f * 2^e with f in [0.5, 1)
    int exp2 = e - 1;
    // Normal halves carry 10 mantissa bits; below 2^-14 the quantum bottoms
    // out at the subnormal ulp 2^-24. Powers of two make the division exact,
    // and nearbyint under the default FP environment rounds to nearest even.
    double q = std::ldexp(1.0, std::max(exp2 - 10, -24));
    double out = std::nearbyint(a / q) * q;
    if (out > 65504.0) return std::copysign(std::numeric_limits<double>::infinity(), v);
    return std::copysign(out, v);
}

std::vector<BenchRecord> bench_gemm(const BenchSettings& s) {
    require(!s.sizes.empty(), "bench_gemm: need at least one size");
    require(s.trials >= 1, "bench_gemm: trials must be >= 1");
    require(s.outlier_fraction >= 0.0 && s.outlier_fraction <= 1.0,
            "bench_gemm: outlier fraction must be in [0, 1]");
    SeededRng rng(s.seed);
    std::vector<BenchRecord> out;
    for (std::size_t n : s.sizes) {
        require(n >= 1 && n <= kMaxInnerI4, "bench_gemm: size out of range");
        std::size_t n_o = static_cast<std::size_t>(std::llround(s.outlier_fraction * n));
        n_o = std::min(n_o, n);

        std::vector<std::int8_t> wc(n * n), xc(n * n);
        for (auto& v : wc) v = static_cast<std::int8_t>(rng.below(15)) - 7;
        for (auto& v : xc) v = static_cast<std::int8_t>(rng.below(15)) - 7;
        std::vector<double> w_scales(n);
        for (auto& v : w_scales) v = rng.uniform(0.005, 0.02);
        double inl_scale = rng.uniform(0.005, 0.02);

        // Distinct outlier channels via partial Fisher-Yates, then sorted.
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        for (std::size_t i = 0; i < n_o; ++i)
            std::swap(all[i], all[i + rng.below(n - i)]);
        std::vector<std::size_t> o_list(all.begin(), all.begin() + n_o);
        std::sort(o_list.begin(), o_list.end());
        std::vector<double> o_scales(n_o);
        for (auto& v : o_scales) v = rng.uniform(0.005, 0.02);

        auto [plane, buf] = extract_outliers(xc, n, n, o_list, o_scales);
        // Outlier channels carry full int8-range codes in the real pipeline.
        for (auto& v : buf.codes) v = static_cast<std::int8_t>(rng.below(255)) - 127;
        PackedInt4 wp = pack_int4(wc.data(), n, n);
        PackedInt4 xp = pack_int4(plane.data(), n, n);

        // Reference operands: dequantized copies of the same problem.
        std::vector<double> a(n * n), b(n * n), y(n * n);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t col = 0; col < n; ++col) a[r * n + col] = w_scales[r] * wc[r * n + col];
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t col = 0; col < n; ++col) b[r * n + col] = inl_scale * plane[r * n + col];
        for (std::size_t j = 0; j < n_o; ++j)
            for (std::size_t col = 0; col < n; ++col)
                b[o_list[j] * n + col] = buf.scales[j] * buf.codes[j * n + col];

        std::vector<double> th(s.trials), tf(s.trials);
        double sink = 0.0;
        for (std::size_t t = 0; t < s.trials; ++t) {
            double t0 = now_ns();
            GemmResult r = hybrid_gemm(wp, w_scales, xp, inl_scale, buf, s.threads, s.f16_output);
            th[t] = now_ns() - t0;
            sink += r.output[0];
        }
        for (std::size_t t = 0; t < s.trials; ++t) {
            double t0 = now_ns();
            gemm_f64(a.data(), b.data(), y.data(), n, n, n, s.threads);
            tf[t] = now_ns() - t0;
            sink += y[0];
        }
        require(std::isfinite(sink), "bench_gemm: non-finite output");
        out.push_back({"hybrid", n, median_of(th)});
        out.push_back({"f64", n, median_of(tf)});
    }
    return out;
}

std::vector<SweepRecord> bench_refresh_sweep(const SweepSettings& s) {
    require(!s.periods.empty(), "refresh sweep: need at least one period");
    require(s.steps >= 2 && s.trials >= 1, "refresh sweep: need steps >= 2 and trials >= 1");
    require(s.persistent_channels <= s.k, "refresh sweep: more persistent channels than channels");
    require(s.transient_rate >= 0.0 && s.transient_rate <= 1.0,
            "refresh sweep: transient rate must be in [0, 1]");
    require(s.spike_gain > 1.0, "refresh sweep: spike gain must exceed 1");
    require(s.k <= kMaxInnerI4 && s.k <= kMaxInnerI4xI8, "refresh sweep: k out of range");

    SeededRng rng(s.seed);
    std::vector<double> clean(s.steps * s.k * s.c);
    rng.fill_normal(clean, 0.0, 1.0);

    // Persistent spike channels: distinct picks, spiking at every step.
    std::vector<std::size_t> all(s.k);
    for (std::size_t i = 0; i < s.k; ++i) all[i] = i;
    for (std::size_t i = 0; i < s.persistent_channels; ++i)
        std::swap(all[i], all[i + rng.below(s.k - i)]);
    std::vector<std::size_t> persistent(all.begin(),
                                        all.begin() + static_cast<std::ptrdiff_t>(s.persistent_channels));

    std::vector<double> spiked = clean;
    for (std::size_t t = 0; t < s.steps; ++t) {
        double* plane = spiked.data() + t * s.k * s.c;
        for (std::size_t ch : persistent)
            for (std::size_t i = 0; i < s.c; ++i) plane[ch * s.c + i] *= s.spike_gain;
        if (rng.uniform() < s.transient_rate) {
            std::size_t ch = rng.below(s.k);
            for (std::size_t i = 0; i < s.c; ++i) plane[ch * s.c + i] *= s.spike_gain;
        }
    }

    // Calibration on the clean stream: per-step shared inlier scale, plus a
    // threshold just above every clean magnitude so only spikes cross it.
    double qmax = 7.0;
    std::vector<double> scale_inlier(s.steps);
    double theta = 0.0;
    for (std::size_t t = 0; t < s.steps; ++t) {
        double mx = 0.0;
        const double* plane = clean.data() + t * s.k * s.c;
        for (std::size_t i = 0; i < s.k * s.c; ++i) mx = std::max(mx, std::fabs(plane[i]));
        scale_inlier[t] = mx == 0.0 ? 1.0 : mx / qmax;
        theta = std::max(theta, mx);
    }
    theta *= 1.05;

    std::vector<std::int8_t> wc(s.m * s.k);
    for (auto& v : wc) v = static_cast<std::int8_t>(rng.below(15)) - 7;
    PackedInt4 wp = pack_int4(wc.data(), s.m, s.k);
    std::vector<double> w_scales(s.m);
    for (auto& v : w_scales) v = rng.uniform(0.005, 0.02);

    std::vector<SweepRecord> out;
    for (std::size_t period : s.periods) {
        std::vector<double> totals(s.trials);
        double o_accum = 0.0;
        std::size_t scans = 0;
        double sink = 0.0;
        for (std::size_t trial = 0; trial < s.trials; ++trial) {
            OutlierState st;
            o_accum = 0.0;
            scans = 0;
            double t0 = now_ns();
            for (std::size_t t = 0; t < s.steps; ++t) {
                const double* xt = spiked.data() + t * s.k * s.c;
                maybe_refresh(st, t, period);
                DetectResult det = detect_outliers(st, xt, s.k, s.c, theta, scale_inlier[t], 4);
                if (det.scanned) ++scans;
                SplitOperands ops = split_quantize(xt, s.k, s.c, st.o_list, scale_inlier[t], 4, 8);
                PackedInt4 xp = pack_int4(ops.inlier_codes.data(), s.k, s.c);
                GemmResult r = hybrid_gemm(wp, w_scales, xp, scale_inlier[t], ops.outliers, 1);
                sink += r.output[0];
                o_accum += static_cast<double>(st.o_list.size());
            }
            totals[trial] = now_ns() - t0;
        }
        require(std::isfinite(sink), "refresh sweep: non-finite output");
        SweepRecord rec;
        rec.period = period;
        rec.median_total_ns = median_of(totals);
        rec.mean_o_list = o_accum / static_cast<double>(s.steps);
        rec.scans_per_step = static_cast<double>(scans) / static_cast<double>(s.steps);
        out.push_back(rec);
    }
    return out;
}

}  // namespace ouro
