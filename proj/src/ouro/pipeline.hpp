#pragma once

#include <filesystem>

#include "ouro/config.hpp"
#include "ouro/gemm.hpp"
#include "ouro/quant.hpp"

namespace ouro {

// Stage drivers behind the CLI commands. Every stage writes a manifest (the
// resolved config echo plus a [run] section) into its output directory, all
// writes are atomic, and nothing records wall-clock time except the GEMM
// benchmarks, so a rerun with the same config is byte-identical.

// Weights from model.checkpoint when set (geometry must match the config),
// otherwise seeded from model.seed.
ToyVmmModel model_from_config(const RunConfig& c);

// Optimizes a synthetic batch; writes synthetic.ouro (B x pixels),
// targets.ouro (B x classes) and manifest.txt into out_dir. When loss_log is
// non-empty, writes "iteration,loss" records there.
void run_gen(const RunConfig& c, const std::filesystem::path& out_dir,
             const std::filesystem::path& loss_log);

// Calibrates activation scales on an image batch file; writes the
// calibration record and per-tensor scale files plus manifest.txt.
void run_calib(const RunConfig& c, const std::filesystem::path& images_file,
               const std::filesystem::path& out_dir);

// Reference-vs-quantized evaluation; writes metrics.txt (per-layer MSE,
// logits agreement, outlier timeline) plus manifest.txt. The calibration's
// recorded bit-widths must match the config.
void run_quant_eval(const RunConfig& c, const std::filesystem::path& calib_dir,
                    const std::filesystem::path& images_file,
                    const std::filesystem::path& out_dir);

// Dumps per (block, direction) attention views for sample 0: per-channel
// attention matrices (plain and neighborhood-enhanced), aggregation weights,
// and the scan inputs/outputs needed to recombine them offline.
void run_attn_dump(const RunConfig& c, const std::filesystem::path& images_file,
                   const std::filesystem::path& out_dir);

// Runs the configured benchmark (gemm.mode): cube sizes or the refresh-period
// sweep. Writes records.csv (what the CLI prints), metrics.txt and
// manifest.txt.
void run_gemm_bench(const RunConfig& c, const std::filesystem::path& out_dir);

}  // namespace ouro
