#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ouro/rng.hpp"
#include "ouro/tensor.hpp"

namespace ouro {

// Traversal order of the square token grid when it is flattened into a scan
// sequence. "row"/"col" pick the fast axis, forward/backward the direction.
enum class ScanOrder { RowForward, RowBackward, ColForward, ColBackward };

std::string scan_order_name(ScanOrder o);
ScanOrder scan_order_from_name(const std::string& s);

// perm[t] = canonical (row-major) token index visited at scan step t.
std::vector<std::size_t> scan_permutation(ScanOrder order, std::size_t grid);
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm);

// Selective state-space parameters for one scan direction. Projections are
// stored out_rows x in_cols and applied as x * W^T.
struct S6Params {
    Tensor a;        // E x N, entries strictly negative
    Tensor w_b;      // N x E
    Tensor w_c;      // N x E
    Tensor w_delta;  // E x E
    Tensor b_delta;  // E
};

struct MambaBlockParams {
    Tensor w_in;      // E x E
    Tensor w_gate;    // E x E
    Tensor conv;      // E x W depthwise causal taps
    Tensor out_proj;  // E x E
    std::vector<S6Params> dirs;  // one per model scan order
};

struct ModelDims {
    std::size_t image = 32;     // square side, pixels
    std::size_t channels = 3;
    std::size_t patch = 4;
    std::size_t embed = 16;     // E
    std::size_t state = 4;      // N
    std::size_t blocks = 2;
    std::size_t classes = 10;
    std::size_t conv_width = 3;

    std::size_t grid() const { return image / patch; }
    std::size_t tokens() const { return grid() * grid(); }
    std::size_t patch_vals() const { return patch * patch * channels; }
    void validate() const;
};

struct ToyVmmModel {
    ModelDims dims;
    std::vector<ScanOrder> orders;
    Tensor patch_embed_w;  // E x (p*p*c)
    Tensor patch_embed_b;  // E
    Tensor head_w;         // classes x E
    Tensor head_b;         // classes
    std::vector<MambaBlockParams> blocks;
};

// Gaussian weights scaled by 1/sqrt(fan-in), zero biases, and state matrices
// A = -exp(uniform[0,1]) so every mode decays. Equal seeds give bit-identical
// models.
ToyVmmModel make_toy_model(const ModelDims& dims, const std::vector<ScanOrder>& orders,
                           std::uint64_t seed);

// Checkpoint directory: one tensor file per weight plus a text manifest with
// dims, scan orders and the file list.
void save_model(const ToyVmmModel& model, const std::filesystem::path& dir);
ToyVmmModel load_model(const std::filesystem::path& dir);

// ---- plain-buffer forward path ----------------------------------------------
//
// Runs one sample at a time so per-step hooks can observe and edit the exact
// values the recurrence consumes (activation quantization, spike injection,
// calibration recording). All buffers are row-major.

struct StepContext {
    std::size_t sample = 0;
    std::size_t block = 0;
    std::size_t dir = 0;   // index into model scan orders
    std::size_t t = 0;     // scan step in permuted order
};

struct StepHook {
    virtual ~StepHook() = default;
    // After discretization of step t, before the state update. a_bar/b_bar are
    // E x N, c is N, delta is E; all may be edited in place.
    virtual void on_inputs(const StepContext&, double* /*a_bar*/, double* /*b_bar*/,
                           double* /*c*/, double* /*delta*/, std::size_t /*e*/,
                           std::size_t /*n*/) {}
    // After the state update, before the output contraction; h is E x N and
    // edits feed back into the next step.
    virtual void on_state(const StepContext&, double* /*h*/, std::size_t /*e*/,
                          std::size_t /*n*/) {}
};

// Runs several hooks in order (e.g. spike injection, then quantization).
struct MultiHook : StepHook {
    std::vector<StepHook*> hooks;
    void on_inputs(const StepContext& ctx, double* ab, double* bb, double* c, double* d,
                   std::size_t e, std::size_t n) override {
        for (StepHook* h : hooks) h->on_inputs(ctx, ab, bb, c, d, e, n);
    }
    void on_state(const StepContext& ctx, double* h_, std::size_t e, std::size_t n) override {
        for (StepHook* h : hooks) h->on_state(ctx, h_, e, n);
    }
};

// Everything one scan produced, in permuted scan order, for one sample and one
// (block, direction). Values are post-hook, i.e. what the recurrence used.
struct ScanTrace {
    std::size_t tokens = 0, embed = 0, state = 0;
    std::vector<double> a_bar;  // M*E*N
    std::vector<double> b_bar;  // M*E*N
    std::vector<double> c;      // M*N
    std::vector<double> delta;  // M*E
    std::vector<double> h;      // M*E*N, post-update state
    std::vector<double> u;      // M*E, scan input
    std::vector<double> o;      // M*E, scan output
};

// One scan of the recurrence. u is M x E in permuted order; returns o (M x E).
std::vector<double> s6_scan(const S6Params& p, const std::vector<double>& u, std::size_t tokens,
                            StepHook* hook, const StepContext& base_ctx, ScanTrace* trace);

struct RawForward {
    std::vector<double> logits;  // B x classes
    // traces[sample][block * ndirs + dir]; filled only when requested.
    std::vector<std::vector<ScanTrace>> traces;
};

// images: B x (image*image*channels), canonical pixel order (row, col, channel).
RawForward vmm_forward_raw(const ToyVmmModel& model, const std::vector<double>& images,
                           std::size_t batch, StepHook* hook, bool want_traces);

// ---- tape-friendly forward path ---------------------------------------------

// Scan products kept as tensors so losses can differentiate through them.
// All are in permuted scan order.
struct ScanTensors {
    Tensor o;          // B x M x E
    Tensor log_a_bar;  // B x M x E x N  (A * delta, before exponentiation)
    Tensor b_bar;      // B x M x E x N
    Tensor c;          // B x M x N
    Tensor delta;      // B x M x E
    Tensor u;          // B x M x E, scan input
};

struct ForwardTensors {
    Tensor logits;  // B x classes
    // scans[block * ndirs + dir]; filled only when requested.
    std::vector<ScanTensors> scans;
};

ForwardTensors vmm_forward_t(const ToyVmmModel& model, const Tensor& images, bool want_scans);

// Single-direction building blocks, exposed for targeted tests.
ScanTensors s6_scan_t(const S6Params& p, const Tensor& u_perm);
Tensor mamba_block_forward_t(const MambaBlockParams& block, const std::vector<ScanOrder>& orders,
                             std::size_t grid, const Tensor& x);

}  // namespace ouro
