#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ouro/ssm.hpp"

namespace ouro {

// Sectioned key=value run configuration. Every key has a default except
// model.seed, which is mandatory; unknown sections or keys are rejected so a
// typo cannot silently fall back to a default.

struct ModelConfig {
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t image = 32, channels = 3, patch = 4, embed = 16, state = 4;
    std::size_t blocks = 2, classes = 10, conv_width = 3;
    std::vector<ScanOrder> scan_orders = {ScanOrder::RowForward, ScanOrder::RowBackward};
    std::string checkpoint;  // load weights from here instead of seeding
};

struct GenConfig {
    std::size_t iterations = 200;
    std::size_t neighborhood = 5;  // spatial window side, odd
    std::size_t positives = 0;     // 0 = auto (half the in-bounds window)
    std::size_t batch = 8;
    double temperature = 0.07;
    double step_size = 0.05;
    std::size_t anchor_stride = 1;
    std::string weighting = "delta";  // or "uniform"
};

struct QuantSectionConfig {
    unsigned weight_bits = 4;
    unsigned act_bits = 8;
    unsigned outlier_bits = 8;
    std::size_t n_refresh = 10;  // 0 = never; spelled "full" in config files
    double outlier_quantile = 0.01;
    double spike_rate = 0.0;
    double spike_gain = 100.0;
    std::size_t spike_channels = 1;
    std::size_t eval_batch = 4;
    std::string mode = "dynamic";  // dynamic | static | bypass
};

struct GemmSectionConfig {
    std::string mode = "sizes";  // sizes | refresh-sweep
    std::vector<std::size_t> sizes = {64, 128, 256};
    double outlier_fraction = 0.01;
    std::size_t trials = 5;
    int threads = 1;
    bool f16_output = false;
    std::vector<std::size_t> refresh_periods = {1, 5, 10, 20, 0};  // 0 = "full"
    std::size_t sweep_steps = 300;
    std::size_t sweep_m = 8, sweep_k = 512, sweep_c = 32;
    std::size_t sweep_persistent = 6;
    double sweep_transient_rate = 0.15;
    double sweep_spike_gain = 40.0;
};

struct RunConfig {
    ModelConfig model;
    GenConfig gen;
    QuantSectionConfig quant;
    GemmSectionConfig gemm;
    std::string seed_source = "config";  // "env" when OURO_SEED overrode it
    void validate() const;
};

// %.17g, enough digits for a lossless f64 round trip.
std::string fmt_double(double v);

RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// "section.key=value", the CLI --set form.
void apply_override(RunConfig& c, const std::string& spec);
// Applies OURO_SEED if present; returns whether it overrode the seed.
bool apply_env_seed(RunConfig& c);

// Canonical echo: every key in fixed order with its resolved value. Feeding
// the text (or a manifest containing it) back through the parser reproduces
// the same configuration.
std::string canonical_config_text(const RunConfig& c);

// FNV-1a hash of the canonical text, as 16 hex digits. Content-derived, so
// identical configs share a run id and reruns are byte-identical.
std::string run_id_of(const RunConfig& c);

// Canonical config plus a [run] section (run_id, stage, seed_source and any
// stage-specific extras). The parser accepts and ignores [run], so a manifest
// is itself a valid config.
std::string manifest_text(const RunConfig& c, const std::string& stage,
                          const std::vector<std::pair<std::string, std::string>>& extra = {});

// Newline-delimited metric records: "run=<id> stage=<stage> k=v ...".
struct MetricsLine {
    std::string run, stage;
    std::vector<std::pair<std::string, std::string>> kv;
};
std::string format_metrics_line(const std::string& run_id, const std::string& stage,
                                const std::vector<std::pair<std::string, std::string>>& kv);
std::vector<MetricsLine> parse_metrics(const std::string& text);

}  // namespace ouro
