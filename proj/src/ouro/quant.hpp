#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ouro/ssm.hpp"

namespace ouro {

// Symmetric uniform quantization. Codes use the symmetric integer range
// [-(2^{b-1}-1), 2^{b-1}-1]; rounding is half away from zero.
std::int64_t quantize_code(double x, double s, unsigned bits);
// max|x| / (2^{b-1}-1); 1.0 sentinel for an all-zero tensor.
double scale_for(const double* x, std::size_t n, unsigned bits);
std::vector<std::int8_t> quantize_symmetric(const double* x, std::size_t n, double s,
                                            unsigned bits);

struct QuantSpec {
    unsigned weight_bits = 4;
    unsigned act_bits = 8;       // shared-scale inlier activations
    unsigned outlier_bits = 8;   // per-channel outlier codes
    std::size_t n_refresh = 10;  // refresh period; 0 = never (unbounded accumulation)
    double rho = 0.01;           // calibration tail mass excluded as outliers
    void validate() const;
};

// Per-step activation tensors the recurrence consumes; each gets its own
// calibration record and its own outlier list.
enum class ActKind { ABar = 0, BBar = 1, H = 2 };
constexpr std::size_t kActKinds = 3;
const char* act_kind_name(ActKind k);

struct TensorCalib {
    std::string name;  // "block<b>.dir<d>.<kind>"
    double theta = 0.0;
    std::vector<double> scale_inlier;  // S(t) with calibration outlier channels excluded
    std::vector<double> scale_full;    // S(t) over all channels (static baseline)
    std::vector<char> excluded;        // per channel: pooled peak exceeded theta
};

struct CalibrationResult {
    QuantSpec spec;
    std::size_t tokens = 0, embed = 0, state = 0, blocks = 0, ndirs = 0;
    std::vector<TensorCalib> tensors;  // [block][dir][kind] flattened
    const TensorCalib& at(std::size_t block, std::size_t dir, ActKind k) const;
};

// Two-pass statistics over a clean batch: per-channel peaks pooled over steps
// and samples give theta (the 1-rho quantile, linearly interpolated); per-step
// peaks over the surviving channels give the shared inlier scales.
CalibrationResult calibrate(const ToyVmmModel& model, const std::vector<double>& images,
                            std::size_t batch, const QuantSpec& spec);
void save_calibration(const std::filesystem::path& dir, const CalibrationResult& c);
CalibrationResult load_calibration(const std::filesystem::path& dir);

// Outlier bookkeeping for one activation tensor across one scan.
struct OutlierState {
    std::vector<std::size_t> o_list;  // sorted ascending
    std::size_t steps_since_refresh = 0;
    bool contains(std::size_t ch) const;
    void insert(std::size_t ch);
};

// Clears the list at refresh boundaries (t > 0 and t % n_refresh == 0).
// Returns true if a refresh happened. n_refresh = 0 never refreshes.
bool maybe_refresh(OutlierState& st, std::size_t t, std::size_t n_refresh);

struct DetectResult {
    bool scanned = false;
    std::vector<std::size_t> added;
};

// Dynamic detection on x (E x N, channels along rows): if the scale implied by
// the channels outside o_list exceeds the calibrated inlier scale, scan every
// channel and add those whose peak exceeds theta.
DetectResult detect_outliers(OutlierState& st, const double* x, std::size_t e, std::size_t n,
                             double theta, double scale_inlier, unsigned act_bits);

// Fake-quantize x in place: channels in o_list get per-channel scales at
// outlier_bits, the rest share scale_inlier at act_bits.
void fake_quant_step(double* x, std::size_t e, std::size_t n, const OutlierState& st,
                     double scale_inlier, unsigned act_bits, unsigned outlier_bits);

// Weight quantization, one symmetric scale per output row (dim 0).
struct QuantizedRows {
    Shape shape;
    std::vector<std::int8_t> codes;
    std::vector<double> scales;
    unsigned bits = 4;
};
QuantizedRows quantize_weights(const Tensor& w, unsigned bits);
Tensor dequantize_rows(const QuantizedRows& q);
// Copy of the model with every projection weight replaced by its fake-quantized
// value. Biases and the continuous state matrix A stay untouched; A only ever
// reaches the compute path through the discretized activations.
ToyVmmModel quantize_model_weights(const ToyVmmModel& m, unsigned bits);

enum class QuantMode { Dynamic, Static, Bypass };
QuantMode quant_mode_from_name(const std::string& s);
const char* quant_mode_name(QuantMode m);

struct SpikeSettings {
    double rate = 0.0;  // per (sample, block, dir, step) probability
    double gain = 100.0;
    std::size_t channels = 1;
    std::uint64_t salt = 0;
};

// Multiplies chosen b_bar channels at seeded positions. Runs in both the
// reference and the quantized pass so the comparison isolates quantization.
struct SpikeHook : StepHook {
    SpikeSettings cfg;
    explicit SpikeHook(const SpikeSettings& s) : cfg(s) {}
    bool spikes_at(const StepContext& ctx, std::size_t e, std::vector<std::size_t>* channels) const;
    void on_inputs(const StepContext& ctx, double* a_bar, double* b_bar, double* c, double* delta,
                   std::size_t e, std::size_t n) override;
};

struct TimelineEntry {
    std::string tensor;
    std::size_t t = 0;
    std::size_t after_refresh = 0;  // |o_list| post-refresh, pre-detection
    std::size_t after_detect = 0;
};

struct QuantEvalResult {
    std::vector<double> logits_fp, logits_q;
    // Scan-output MSE per (block, dir), teacher-forced: the quantized scan is
    // re-run on the reference pass's scan input so each layer is charged only
    // for its own quantization error, not upstream drift.
    std::vector<std::pair<std::string, double>> layer_mse;
    double logits_mse = 0.0;
    std::size_t argmax_agree = 0;
    std::size_t batch = 0;
    std::vector<TimelineEntry> timeline;  // sample 0, b_bar tensors
};

// Reference pass (spikes only) vs quantized pass (spikes + weight and
// activation quantization) over the same batch.
QuantEvalResult quantized_forward(const ToyVmmModel& model, const std::vector<double>& images,
                                  std::size_t batch, const CalibrationResult& calib,
                                  QuantMode mode, const SpikeSettings& spikes);

}  // namespace ouro
