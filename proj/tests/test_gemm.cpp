#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "ouro/gemm.hpp"
#include "ouro/quant.hpp"

using namespace ouro;

namespace {

std::vector<std::int8_t> rand_codes(std::mt19937_64& eng, std::size_t n, int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    std::vector<std::int8_t> v(n);
    for (auto& x : v) x = static_cast<std::int8_t>(d(eng));
    return v;
}

// Plain three-loop integer product, the shape every kernel must reproduce.
std::vector<std::int32_t> oracle_i8(const std::vector<std::int8_t>& w,
                                    const std::vector<std::int8_t>& x, std::size_t m,
                                    std::size_t k, std::size_t c) {
    std::vector<std::int32_t> y(m * c, 0);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t kk = 0; kk < k; ++kk)
            for (std::size_t col = 0; col < c; ++col)
                y[r * c + col] += static_cast<std::int32_t>(w[r * k + kk]) *
                                  static_cast<std::int32_t>(x[kk * c + col]);
    return y;
}

}  // namespace

TEST_CASE("int4 packing: nibble layout, sign extension, round trip") {
    std::mt19937_64 eng(3);
    for (auto [rows, cols] : {std::pair<std::size_t, std::size_t>{1, 1},
                              {3, 7},  // odd column count exercises the trailing nibble
                              {4, 8},
                              {5, 2},
                              {2, 15}}) {
        auto codes = rand_codes(eng, rows * cols, -7, 7);
        PackedInt4 p = pack_int4(codes.data(), rows, cols);
        CHECK(p.stride == (cols + 1) / 2);
        CHECK(p.bytes.size() == rows * p.stride);
        auto back = unpack_int4(p);
        REQUIRE(back.size() == codes.size());
        for (std::size_t i = 0; i < codes.size(); ++i) CHECK(back[i] == codes[i]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) CHECK(p.get(r, c) == codes[r * cols + c]);
        if (cols % 2 == 1)
            for (std::size_t r = 0; r < rows; ++r)
                CHECK((p.bytes[r * p.stride + p.stride - 1] & 0xF0) == 0);
    }
    // -8 fits a nibble but is outside the symmetric code range.
    std::int8_t bad = -8;
    CHECK_THROWS_AS(pack_int4(&bad, 1, 1), ValidationError);
    std::int8_t bad2 = 8;
    CHECK_THROWS_AS(pack_int4(&bad2, 1, 1), ValidationError);
}

TEST_CASE("int4 x int4 product is bit-exact against the three-loop oracle") {
    std::mt19937_64 eng(17);
    for (auto [m, k, c] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 1, 1},
                           {2, 3, 5},
                           {4, 4, 4},
                           {5, 9, 3},   // odd contraction dim
                           {8, 16, 7},
                           {13, 6, 11},
                           {6, 31, 2}}) {
        auto wc = rand_codes(eng, m * k, -7, 7);
        auto xc = rand_codes(eng, k * c, -7, 7);
        auto acc = gemm_i4(pack_int4(wc.data(), m, k), pack_int4(xc.data(), k, c));
        CHECK(acc == oracle_i8(wc, xc, m, k, c));
    }
    auto w = pack_int4(rand_codes(eng, 2 * 3, -7, 7).data(), 2, 3);
    auto x = pack_int4(rand_codes(eng, 4 * 2, -7, 7).data(), 4, 2);
    CHECK_THROWS_AS(gemm_i4(w, x), ValidationError);
}

TEST_CASE("int4 x int8 outlier product matches its oracle and checks channels") {
    std::mt19937_64 eng(29);
    std::size_t m = 6, k = 20, c = 9;
    auto wc = rand_codes(eng, m * k, -7, 7);
    PackedInt4 wp = pack_int4(wc.data(), m, k);

    OutlierBuffer buf;
    buf.cols = c;
    buf.channels = {1, 7, 8, 19};
    buf.codes = rand_codes(eng, buf.channels.size() * c, -127, 127);
    buf.scales.assign(buf.channels.size(), 1.0);

    auto acc = gemm_i4xi8(wp, buf);
    std::vector<std::int32_t> want(m * c, 0);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < buf.channels.size(); ++j)
            for (std::size_t col = 0; col < c; ++col)
                want[r * c + col] += static_cast<std::int32_t>(wc[r * k + buf.channels[j]]) *
                                     static_cast<std::int32_t>(buf.codes[j * c + col]);
    CHECK(acc == want);

    // Empty buffer contributes nothing.
    OutlierBuffer none;
    none.cols = c;
    auto zero = gemm_i4xi8(wp, none);
    for (std::int32_t v : zero) CHECK(v == 0);

    OutlierBuffer oob = buf;
    oob.channels.back() = k;  // one past the contraction dim
    CHECK_THROWS_AS(gemm_i4xi8(wp, oob), ValidationError);
}

TEST_CASE("outlier extraction zeroes the plane rows and reassembles exactly") {
    std::mt19937_64 eng(31);
    std::size_t k = 12, c = 5;
    auto codes = rand_codes(eng, k * c, -127, 127);
    std::vector<std::size_t> o_list = {0, 4, 11};
    std::vector<double> scales = {0.5, 0.25, 2.0};

    auto [plane, buf] = extract_outliers(codes, k, c, o_list, scales);
    CHECK(buf.cols == c);
    CHECK(buf.channels == o_list);
    CHECK(buf.scales == scales);
    for (std::size_t j = 0; j < o_list.size(); ++j)
        for (std::size_t col = 0; col < c; ++col) {
            CHECK(plane[o_list[j] * c + col] == 0);
            CHECK(buf.codes[j * c + col] == codes[o_list[j] * c + col]);
        }
    // Reassembly: buffer rows dropped back into the zeroed plane.
    std::vector<std::int8_t> rebuilt = plane;
    for (std::size_t j = 0; j < o_list.size(); ++j)
        for (std::size_t col = 0; col < c; ++col)
            rebuilt[o_list[j] * c + col] = buf.codes[j * c + col];
    CHECK(rebuilt == codes);

    CHECK_THROWS_AS(extract_outliers(codes, k, c, {4, 0}, {1.0, 1.0}), ValidationError);
    CHECK_THROWS_AS(extract_outliers(codes, k, c, {4, 4}, {1.0, 1.0}), ValidationError);
    CHECK_THROWS_AS(extract_outliers(codes, k, c, {12}, {1.0}), ValidationError);
    CHECK_THROWS_AS(extract_outliers(codes, k, c, {1}, {}), ValidationError);
}

TEST_CASE("split quantization: shared-scale inliers, self-scaled outlier rows") {
    std::mt19937_64 eng(41);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::size_t k = 10, c = 6;
    std::vector<double> x(k * c);
    for (auto& v : x) v = nd(eng);
    // Spike two channels well past the inlier range.
    for (std::size_t col = 0; col < c; ++col) {
        x[2 * c + col] *= 80.0;
        x[7 * c + col] *= 120.0;
    }
    std::vector<std::size_t> o_list = {2, 7};
    double s_in = 3.5 / 7.0;  // generous 4-bit inlier scale for N(0,1) data

    SplitOperands ops = split_quantize(x.data(), k, c, o_list, s_in, 4, 8);
    REQUIRE(ops.outliers.channels == o_list);
    REQUIRE(ops.outliers.scales.size() == 2);

    for (std::size_t ch = 0; ch < k; ++ch) {
        bool is_outlier = ch == 2 || ch == 7;
        for (std::size_t col = 0; col < c; ++col) {
            if (is_outlier) {
                CHECK(ops.inlier_codes[ch * c + col] == 0);  // zeroed position
            } else {
                double v = x[ch * c + col];
                double back = static_cast<double>(ops.inlier_codes[ch * c + col]) * s_in;
                if (std::fabs(v) <= 7.0 * s_in) CHECK(std::fabs(back - v) <= s_in / 2 + 1e-12);
            }
        }
    }
    for (std::size_t j = 0; j < 2; ++j) {
        double peak = 0.0;
        for (std::size_t col = 0; col < c; ++col)
            peak = std::max(peak, std::fabs(x[o_list[j] * c + col]));
        CHECK(ops.outliers.scales[j] == doctest::Approx(peak / 127.0).epsilon(1e-15));
        for (std::size_t col = 0; col < c; ++col) {
            double v = x[o_list[j] * c + col];
            double back = static_cast<double>(ops.outliers.codes[j * c + col]) *
                          ops.outliers.scales[j];
            CHECK(std::fabs(back - v) <= ops.outliers.scales[j] / 2 + 1e-12);
        }
    }

    CHECK_THROWS_AS(split_quantize(x.data(), k, c, {10}, s_in, 4, 8), ValidationError);
    CHECK_THROWS_AS(split_quantize(x.data(), k, c, {}, 0.0, 4, 8), ValidationError);
}

TEST_CASE("hybrid output decomposes into its integer planes and scales") {
    std::mt19937_64 eng(53);
    std::size_t m = 7, k = 24, c = 10;
    auto wc = rand_codes(eng, m * k, -7, 7);
    PackedInt4 wp = pack_int4(wc.data(), m, k);
    std::vector<double> w_scales(m);
    std::uniform_real_distribution<double> sd(0.01, 0.1);
    for (auto& v : w_scales) v = sd(eng);

    auto xc = rand_codes(eng, k * c, -7, 7);
    std::vector<std::size_t> o_list = {3, 5, 16};
    std::vector<double> o_scales = {sd(eng), sd(eng), sd(eng)};
    auto [plane, buf] = extract_outliers(xc, k, c, o_list, o_scales);
    for (auto& v : buf.codes) v = static_cast<std::int8_t>(eng() % 255) - 127;
    PackedInt4 xp = pack_int4(plane.data(), k, c);
    double s_in = 0.05;

    GemmResult r = hybrid_gemm(wp, w_scales, xp, s_in, buf);
    REQUIRE(r.rows == m);
    REQUIRE(r.cols == c);

    // Integer planes match the standalone kernels exactly.
    CHECK(r.acc_inlier == gemm_i4(wp, xp));
    CHECK(r.acc_outlier == gemm_i4xi8(wp, buf));

    // Real output equals the scale decomposition, assembled independently.
    double worst = 0.0;
    for (std::size_t row = 0; row < m; ++row)
        for (std::size_t col = 0; col < c; ++col) {
            double want = s_in * static_cast<double>(r.acc_inlier[row * c + col]);
            for (std::size_t j = 0; j < o_list.size(); ++j)
                want += buf.scales[j] * static_cast<double>(wc[row * k + o_list[j]]) *
                        static_cast<double>(buf.codes[j * c + col]);
            want *= w_scales[row];
            worst = std::max(worst, std::fabs(want - r.output[row * c + col]));
        }
    CHECK(worst <= 1e-9);

    CHECK_THROWS_AS(hybrid_gemm(wp, std::vector<double>(m - 1, 1.0), xp, s_in, buf),
                    ValidationError);
    CHECK_THROWS_AS(hybrid_gemm(wp, w_scales, xp, 0.0, buf), ValidationError);
}

TEST_CASE("identity weights pass the activation plane through") {
    std::size_t n = 6, c = 4;
    std::vector<std::int8_t> eye(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1;
    std::mt19937_64 eng(61);
    auto xc = rand_codes(eng, n * c, -7, 7);
    double s_in = 0.125;
    GemmResult r = hybrid_gemm(pack_int4(eye.data(), n, n), std::vector<double>(n, 1.0),
                               pack_int4(xc.data(), n, c), s_in, OutlierBuffer{});
    for (std::size_t row = 0; row < n; ++row)
        for (std::size_t col = 0; col < c; ++col)
            CHECK(r.output[row * c + col] == static_cast<double>(xc[row * c + col]) * s_in);
}

TEST_CASE("contraction bounds reject inputs that could overflow int32") {
    CHECK(kMaxInnerI4 == (std::size_t{1} << 31) / 49);
    CHECK(kMaxInnerI4xI8 == (std::size_t{1} << 31) / 889);

    // Metadata-only operands: the bound check fires before any data access.
    PackedInt4 w;
    w.rows = 1;
    w.cols = kMaxInnerI4 + 1;
    PackedInt4 x;
    x.rows = kMaxInnerI4 + 1;
    x.cols = 1;
    CHECK_THROWS_AS(gemm_i4(w, x), ValidationError);

    PackedInt4 w2;
    w2.rows = 1;
    w2.cols = kMaxInnerI4xI8 + 2;
    OutlierBuffer huge;
    huge.cols = 1;
    huge.channels.resize(kMaxInnerI4xI8 + 1);
    CHECK_THROWS_AS(gemm_i4xi8(w2, huge), ValidationError);
}

TEST_CASE("thread count never changes a bit of any output") {
    std::mt19937_64 eng(67);
    std::size_t m = 13, k = 40, c = 9;
    auto wc = rand_codes(eng, m * k, -7, 7);
    auto xc = rand_codes(eng, k * c, -7, 7);
    PackedInt4 wp = pack_int4(wc.data(), m, k);
    std::vector<double> w_scales(m);
    std::uniform_real_distribution<double> sd(0.01, 0.1);
    for (auto& v : w_scales) v = sd(eng);
    std::vector<std::size_t> o_list = {0, 9, 39};
    auto [plane, buf] = extract_outliers(xc, k, c, o_list, {sd(eng), sd(eng), sd(eng)});
    PackedInt4 xp = pack_int4(plane.data(), k, c);

    GemmResult base = hybrid_gemm(wp, w_scales, xp, 0.03, buf, 1);
    for (int threads : {2, 3, 5, 8}) {
        GemmResult r = hybrid_gemm(wp, w_scales, xp, 0.03, buf, threads);
        CHECK(r.acc_inlier == base.acc_inlier);
        CHECK(r.acc_outlier == base.acc_outlier);
        CHECK(r.output == base.output);  // doubles compare bitwise-equal
    }

    std::vector<double> a(m * k), b(k * c);
    for (auto& v : a) v = sd(eng);
    for (auto& v : b) v = sd(eng);
    std::vector<double> y1(m * c), y4(m * c);
    gemm_f64(a.data(), b.data(), y1.data(), m, k, c, 1);
    gemm_f64(a.data(), b.data(), y4.data(), m, k, c, 4);
    CHECK(y1 == y4);
}

TEST_CASE("binary16 rounding: known values, ties to even, range edges") {
    CHECK(round_f16(0.0) == 0.0);
    CHECK(round_f16(1.0) == 1.0);
    CHECK(round_f16(-2.75) == -2.75);                 // exactly representable
    CHECK(round_f16(0.1) == 0.0999755859375);         // classic f16 value
    CHECK(round_f16(1.0 + std::ldexp(1.0, -11)) == 1.0);  // tie -> even mantissa
    CHECK(round_f16(1.0 + 3 * std::ldexp(1.0, -11)) == 1.0 + std::ldexp(1.0, -9));
    CHECK(round_f16(2049.0) == 2048.0);               // tie at quantum 2
    CHECK(round_f16(2050.0) == 2050.0);
    CHECK(round_f16(65504.0) == 65504.0);             // f16 max
    CHECK(round_f16(65520.0) == std::numeric_limits<double>::infinity());
    CHECK(round_f16(-65520.0) == -std::numeric_limits<double>::infinity());
    CHECK(round_f16(std::ldexp(1.0, -24)) == std::ldexp(1.0, -24));  // smallest subnormal
    CHECK(round_f16(std::ldexp(1.0, -25)) == 0.0);                   // tie -> even -> 0
    CHECK(round_f16(std::ldexp(1.0, -26)) == 0.0);
    double inf = std::numeric_limits<double>::infinity();
    CHECK(round_f16(inf) == inf);

    // Round-tripping the f16 lattice is the identity.
    std::mt19937_64 eng(71);
    std::uniform_real_distribution<double> ud(-100.0, 100.0);
    for (int i = 0; i < 1000; ++i) {
        double v = round_f16(ud(eng));
        CHECK(round_f16(v) == v);
    }

    // Wired through the kernel: outputs land on the f16 lattice.
    std::vector<std::int8_t> wc = {3, -2, 5, 1};
    std::vector<std::int8_t> xc = {7, -7, 2, 4};
    GemmResult r = hybrid_gemm(pack_int4(wc.data(), 2, 2), {0.013, 0.021},
                               pack_int4(xc.data(), 2, 2), 0.017, OutlierBuffer{}, 1, true);
    for (double v : r.output) CHECK(round_f16(v) == v);
}

TEST_CASE("gemm benchmark runs and validates its settings") {
    BenchSettings s;
    s.sizes = {16, 24};
    s.trials = 3;
    s.seed = 5;
    auto recs = bench_gemm(s);
    REQUIRE(recs.size() == 4);  // hybrid + f64 per size
    for (const auto& r : recs) {
        CHECK((r.path == "hybrid" || r.path == "f64"));
        CHECK(r.median_ns > 0.0);
    }
    CHECK(recs[0].size == 16);
    CHECK(recs[2].size == 24);

    BenchSettings bad = s;
    bad.trials = 0;
    CHECK_THROWS_AS(bench_gemm(bad), ValidationError);
    bad = s;
    bad.outlier_fraction = 1.5;
    CHECK_THROWS_AS(bench_gemm(bad), ValidationError);
    bad = s;
    bad.sizes = {};
    CHECK_THROWS_AS(bench_gemm(bad), ValidationError);
}

TEST_CASE("refresh sweep: per-step scans at period 1, stale growth at period 0") {
    SweepSettings s;
    s.periods = {1, 5, 0};
    s.steps = 40;
    s.m = 4;
    s.k = 64;
    s.c = 8;
    s.persistent_channels = 3;
    s.transient_rate = 0.3;
    s.spike_gain = 40.0;
    s.trials = 1;
    s.seed = 13;
    auto recs = bench_refresh_sweep(s);
    REQUIRE(recs.size() == 3);
    CHECK(recs[0].period == 1);
    CHECK(recs[1].period == 5);
    CHECK(recs[2].period == 0);

    // Refreshing every step forces a full detection scan every step (the
    // persistent channels always re-trigger), and keeps the list minimal.
    CHECK(recs[0].scans_per_step == 1.0);
    // Never refreshing accumulates transients forever, so the mean list size
    // exceeds the per-step-refresh one, and scans become rare once the
    // persistent channels are captured.
    CHECK(recs[2].mean_o_list > recs[0].mean_o_list);
    CHECK(recs[2].scans_per_step < recs[0].scans_per_step);
    for (const auto& r : recs) {
        CHECK(r.median_total_ns > 0.0);
        CHECK(r.mean_o_list >= static_cast<double>(s.persistent_channels) - 1e-12);
    }

    SweepSettings bad = s;
    bad.steps = 1;
    CHECK_THROWS_AS(bench_refresh_sweep(bad), ValidationError);
    bad = s;
    bad.spike_gain = 1.0;
    CHECK_THROWS_AS(bench_refresh_sweep(bad), ValidationError);
    bad = s;
    bad.persistent_channels = bad.k + 1;
    CHECK_THROWS_AS(bench_refresh_sweep(bad), ValidationError);
}
