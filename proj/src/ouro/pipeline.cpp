#include "ouro/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ouro/attention.hpp"
#include "ouro/datagen.hpp"
#include "ouro/tensor_io.hpp"

namespace ouro {

namespace {

ModelDims dims_from_config(const RunConfig& c) {
    return ModelDims{c.model.image,  c.model.channels, c.model.patch,   c.model.embed,
                     c.model.state,  c.model.blocks,   c.model.classes, c.model.conv_width};
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

QuantSpec quant_spec_from_config(const RunConfig& c) {
    QuantSpec spec;
    spec.weight_bits = c.quant.weight_bits;
    spec.act_bits = c.quant.act_bits;
    spec.outlier_bits = c.quant.outlier_bits;
    spec.n_refresh = c.quant.n_refresh;
    spec.rho = c.quant.outlier_quantile;
    spec.validate();
    return spec;
}

// Image batch file: rank-2, rows = samples, cols = flattened pixels.
std::vector<double> load_images(const RunConfig& c, const std::filesystem::path& file,
                                std::size_t* batch_out) {
    Tensor t = read_tensor_f64(file);
    std::size_t pix = dims_from_config(c).image * dims_from_config(c).image * c.model.channels;
    require(t.rank() == 2 && t.shape[1] == pix && t.shape[0] >= 1,
            "image batch " + file.string() + ": expected shape [B," + std::to_string(pix) +
                "], got " + shape_str(t.shape));
    *batch_out = t.shape[0];
    return std::vector<double>(t.ptr(), t.ptr() + t.numel());
}

}  // namespace

ToyVmmModel model_from_config(const RunConfig& c) {
    ModelDims dims = dims_from_config(c);
    dims.validate();
    if (c.model.checkpoint.empty()) return make_toy_model(dims, c.model.scan_orders, c.model.seed);
    ToyVmmModel m = load_model(c.model.checkpoint);
    require(m.dims.image == dims.image && m.dims.channels == dims.channels &&
                m.dims.patch == dims.patch && m.dims.embed == dims.embed &&
                m.dims.state == dims.state && m.dims.blocks == dims.blocks &&
                m.dims.classes == dims.classes && m.dims.conv_width == dims.conv_width &&
                m.orders == c.model.scan_orders,
            "checkpoint " + c.model.checkpoint + " geometry differs from the config");
    return m;
}

void run_gen(const RunConfig& c, const std::filesystem::path& out_dir,
             const std::filesystem::path& loss_log) {
    c.validate();
    ToyVmmModel model = model_from_config(c);
    GenSettings gs;
    gs.iterations = c.gen.iterations;
    gs.batch = c.gen.batch;
    gs.neighborhood = c.gen.neighborhood;
    gs.positives = c.gen.positives;
    gs.anchor_stride = c.gen.anchor_stride;
    gs.temperature = c.gen.temperature;
    gs.step_size = c.gen.step_size;
    gs.uniform_weighting = c.gen.weighting == "uniform";
    GenResult r = generate(model, gs, c.model.seed);

    ensure_dir(out_dir);
    write_tensor_f64(out_dir / "synthetic.ouro", r.images);
    write_tensor_f64(out_dir / "targets.ouro", r.targets);
    if (!loss_log.empty()) {
        std::string log;
        for (std::size_t i = 0; i < r.loss_history.size(); ++i)
            log += std::to_string(i) + "," + fmt_double(r.loss_history[i]) + "\n";
        atomic_write_text(loss_log, log);
    }
    std::vector<std::pair<std::string, std::string>> extra;
    if (!r.loss_history.empty()) {
        extra.emplace_back("loss_initial", fmt_double(r.loss_history.front()));
        extra.emplace_back("loss_final", fmt_double(r.loss_history.back()));
        extra.emplace_back("contrastive_final", fmt_double(r.contrastive_history.back()));
        extra.emplace_back("output_final", fmt_double(r.output_history.back()));
    }
    atomic_write_text(out_dir / "manifest.txt", manifest_text(c, "gen", extra));
}

void run_calib(const RunConfig& c, const std::filesystem::path& images_file,
               const std::filesystem::path& out_dir) {
    c.validate();
    ToyVmmModel model = model_from_config(c);
    std::size_t batch = 0;
    std::vector<double> images = load_images(c, images_file, &batch);
    CalibrationResult calib = calibrate(model, images, batch, quant_spec_from_config(c));
    ensure_dir(out_dir);
    save_calibration(out_dir, calib);
    atomic_write_text(out_dir / "manifest.txt",
                      manifest_text(c, "calib",
                                    {{"images_file", images_file.string()},
                                     {"batch", std::to_string(batch)}}));
}

void run_quant_eval(const RunConfig& c, const std::filesystem::path& calib_dir,
                    const std::filesystem::path& images_file,
                    const std::filesystem::path& out_dir) {
    c.validate();
    ToyVmmModel model = model_from_config(c);
    CalibrationResult calib = load_calibration(calib_dir);
    QuantSpec spec = quant_spec_from_config(c);
    require(calib.spec.weight_bits == spec.weight_bits && calib.spec.act_bits == spec.act_bits &&
                calib.spec.outlier_bits == spec.outlier_bits &&
                calib.spec.n_refresh == spec.n_refresh && calib.spec.rho == spec.rho,
            "calibration at " + calib_dir.string() +
                " was made with different quantization settings than the config");

    std::size_t file_batch = 0;
    std::vector<double> images = load_images(c, images_file, &file_batch);
    std::size_t batch = std::min(file_batch, c.quant.eval_batch);
    std::size_t pix = model.dims.image * model.dims.image * model.dims.channels;
    images.resize(batch * pix);

    SpikeSettings spikes;
    spikes.rate = c.quant.spike_rate;
    spikes.gain = c.quant.spike_gain;
    spikes.channels = c.quant.spike_channels;
    spikes.salt = c.model.seed;
    QuantEvalResult r = quantized_forward(model, images, batch, calib,
                                          quant_mode_from_name(c.quant.mode), spikes);

    std::string run = run_id_of(c);
    std::vector<std::pair<std::string, std::string>> kv = {
        {"mode", c.quant.mode},
        {"weight_bits", std::to_string(c.quant.weight_bits)},
        {"act_bits", std::to_string(c.quant.act_bits)},
        {"outlier_bits", std::to_string(c.quant.outlier_bits)},
        {"batch", std::to_string(batch)},
        {"logits_mse", fmt_double(r.logits_mse)},
        {"argmax_agreement",
         fmt_double(static_cast<double>(r.argmax_agree) / static_cast<double>(batch))},
    };
    for (const auto& [name, mse] : r.layer_mse) kv.emplace_back("mse_" + name, fmt_double(mse));
    std::string metrics = format_metrics_line(run, "quant-eval", kv);
    for (const TimelineEntry& te : r.timeline)
        metrics += format_metrics_line(run, "timeline",
                                       {{"tensor", te.tensor},
                                        {"t", std::to_string(te.t)},
                                        {"after_refresh", std::to_string(te.after_refresh)},
                                        {"after_detect", std::to_string(te.after_detect)}});
    ensure_dir(out_dir);
    atomic_write_text(out_dir / "metrics.txt", metrics);
    atomic_write_text(out_dir / "manifest.txt",
                      manifest_text(c, "quant-eval",
                                    {{"calibration", calib_dir.string()},
                                     {"images_file", images_file.string()}}));
}

void run_attn_dump(const RunConfig& c, const std::filesystem::path& images_file,
                   const std::filesystem::path& out_dir) {
    c.validate();
    ToyVmmModel model = model_from_config(c);
    std::size_t pix = model.dims.image * model.dims.image * model.dims.channels;
    std::vector<double> images;
    if (images_file.empty()) {
        SeededRng rng = SeededRng(c.model.seed).fork(3);
        Tensor noise = init_noise_batch(1, pix, rng);
        images.assign(noise.ptr(), noise.ptr() + pix);
    } else {
        std::size_t batch = 0;
        images = load_images(c, images_file, &batch);
        images.resize(pix);  // sample 0 only
    }

    RawForward fw = vmm_forward_raw(model, images, 1, nullptr, true);
    std::size_t m = model.dims.tokens(), e = model.dims.embed, n = model.dims.state;
    std::size_t ndirs = model.orders.size();
    ensure_dir(out_dir);
    for (std::size_t blk = 0; blk < model.blocks.size(); ++blk)
        for (std::size_t dir = 0; dir < ndirs; ++dir) {
            const ScanTrace& tr = fw.traces[0][blk * ndirs + dir];
            auto nbrs =
                neighbor_scan_lists(model.dims.grid(), c.gen.neighborhood, model.orders[dir]);
            Tensor alpha = Tensor::zeros({e, m, m});
            Tensor alpha_p = Tensor::zeros({e, m, m});
            for (std::size_t ch = 0; ch < e; ++ch) {
                auto mat = attention_matrix(implicit_attention_channel(tr, ch), m, n);
                auto mat_p = attention_matrix(enhanced_attention_channel(tr, nbrs, ch), m, n);
                std::copy(mat.begin(), mat.end(), alpha.mut() + ch * m * m);
                std::copy(mat_p.begin(), mat_p.end(), alpha_p.mut() + ch * m * m);
            }
            PatchedState ps = patched_state(tr, nbrs);
            Tensor delta_mean = Tensor::zeros({m});
            std::copy(ps.w.begin(), ps.w.end(), delta_mean.mut());
            Tensor u = Tensor::zeros({m, e}), o = Tensor::zeros({m, e}), o_p = Tensor::zeros({m, e});
            std::copy(tr.u.begin(), tr.u.end(), u.mut());
            std::copy(tr.o.begin(), tr.o.end(), o.mut());
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t ch = 0; ch < e; ++ch) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s < n; ++s)
                        acc += tr.c[i * n + s] * ps.h_p[(i * e + ch) * n + s];
                    o_p.mut()[i * e + ch] = acc;
                }
            std::string stem = "block" + std::to_string(blk) + "_dir" + std::to_string(dir);
            write_tensor_f64(out_dir / (stem + "_alpha.ouro"), alpha);
            write_tensor_f64(out_dir / (stem + "_alpha_p.ouro"), alpha_p);
            write_tensor_f64(out_dir / (stem + "_delta_mean.ouro"), delta_mean);
            write_tensor_f64(out_dir / (stem + "_u.ouro"), u);
            write_tensor_f64(out_dir / (stem + "_o.ouro"), o);
            write_tensor_f64(out_dir / (stem + "_o_p.ouro"), o_p);
        }
    atomic_write_text(out_dir / "manifest.txt",
                      manifest_text(c, "attn-dump",
                                    {{"images_file",
                                      images_file.empty() ? std::string("-") : images_file.string()}}));
}

void run_gemm_bench(const RunConfig& c, const std::filesystem::path& out_dir) {
    c.validate();
    std::string run = run_id_of(c);
    std::string csv, metrics;
    if (c.gemm.mode == "sizes") {
        BenchSettings bs;
        bs.sizes = c.gemm.sizes;
        bs.outlier_fraction = c.gemm.outlier_fraction;
        bs.trials = c.gemm.trials;
        bs.threads = c.gemm.threads;
        bs.seed = c.model.seed;
        bs.f16_output = c.gemm.f16_output;
        for (const BenchRecord& r : bench_gemm(bs)) {
            csv += std::to_string(r.size) + "," + r.path + "," + fmt_double(r.median_ns) + "\n";
            metrics += format_metrics_line(run, "gemm-bench",
                                           {{"size", std::to_string(r.size)},
                                            {"path", r.path},
                                            {"median_ns", fmt_double(r.median_ns)}});
        }
    } else {
        SweepSettings ss;
        ss.periods = c.gemm.refresh_periods;
        ss.steps = c.gemm.sweep_steps;
        ss.m = c.gemm.sweep_m;
        ss.k = c.gemm.sweep_k;
        ss.c = c.gemm.sweep_c;
        ss.persistent_channels = c.gemm.sweep_persistent;
        ss.transient_rate = c.gemm.sweep_transient_rate;
        ss.spike_gain = c.gemm.sweep_spike_gain;
        ss.trials = c.gemm.trials;
        ss.seed = c.model.seed;
        for (const SweepRecord& r : bench_refresh_sweep(ss)) {
            std::string period = r.period == 0 ? "full" : std::to_string(r.period);
            csv += period + "," + fmt_double(r.median_total_ns) + "," + fmt_double(r.mean_o_list) +
                   "," + fmt_double(r.scans_per_step) + "\n";
            metrics += format_metrics_line(run, "refresh-sweep",
                                           {{"period", period},
                                            {"median_ns", fmt_double(r.median_total_ns)},
                                            {"mean_o_list", fmt_double(r.mean_o_list)},
                                            {"scans_per_step", fmt_double(r.scans_per_step)}});
        }
    }
    ensure_dir(out_dir);
    atomic_write_text(out_dir / "records.csv", csv);
    atomic_write_text(out_dir / "metrics.txt", metrics);
    atomic_write_text(out_dir / "manifest.txt", manifest_text(c, "gemm-bench", {}));
}

}  // namespace ouro
