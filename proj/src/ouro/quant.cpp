#include "ouro/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "ouro/tensor_io.hpp"

namespace ouro {

namespace {

double qmax_for(unsigned bits) {
    require(bits >= 2 && bits <= 62, "bit width must be in [2, 62]");
    return static_cast<double>((std::int64_t{1} << (bits - 1)) - 1);
}

std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

std::int64_t quantize_code(double x, double s, unsigned bits) {
    double q = qmax_for(bits);
    double r = std::round(x / s);  // std::round is half away from zero
    if (r > q) r = q;
    if (r < -q) r = -q;
    return static_cast<std::int64_t>(r);
}

double scale_for(const double* x, std::size_t n, unsigned bits) {
    double mx = 0.0;
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, std::fabs(x[i]));
    if (mx == 0.0) return 1.0;
    return mx / qmax_for(bits);
}

std::vector<std::int8_t> quantize_symmetric(const double* x, std::size_t n, double s,
                                            unsigned bits) {
    require(bits <= 8, "quantize_symmetric: codes wider than 8 bits do not fit int8");
    require(s > 0.0, "quantize_symmetric: scale must be positive");
    std::vector<std::int8_t> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = static_cast<std::int8_t>(quantize_code(x[i], s, bits));
    return out;
}

void QuantSpec::validate() const {
    require(weight_bits >= 2, "weight bits must be >= 2");
    require(act_bits >= 2, "activation bits must be >= 2");
    require(outlier_bits >= 2 && outlier_bits <= 8, "outlier bits must be in [2, 8]");
    require(act_bits <= outlier_bits, "inlier activation bits must not exceed outlier bits");
    require(rho >= 0.0 && rho < 1.0, "rho must be in [0, 1)");
}

const char* act_kind_name(ActKind k) {
    switch (k) {
        case ActKind::ABar: return "a_bar";
        case ActKind::BBar: return "b_bar";
        case ActKind::H: return "h";
    }
    throw ValidationError("unknown activation kind");
}

const TensorCalib& CalibrationResult::at(std::size_t block, std::size_t dir, ActKind k) const {
    std::size_t i = (block * ndirs + dir) * kActKinds + static_cast<std::size_t>(k);
    require(i < tensors.size(), "calibration lookup out of range");
    return tensors[i];
}

// ---- calibration ---------------------------------------------------------------

namespace {

// Records per-channel peaks of every activation tensor, pooled over samples.
struct CalibRecorder : StepHook {
    std::size_t tokens, embed, ndirs, nblocks;
    // peak[tensor][t * E + ch]
    std::vector<std::vector<double>> step_peak;

    CalibRecorder(std::size_t m, std::size_t e, std::size_t blocks, std::size_t dirs)
        : tokens(m), embed(e), ndirs(dirs), nblocks(blocks) {
        step_peak.assign(blocks * dirs * kActKinds, std::vector<double>(m * e, 0.0));
    }

    std::size_t slot(const StepContext& ctx, ActKind k) const {
        return (ctx.block * ndirs + ctx.dir) * kActKinds + static_cast<std::size_t>(k);
    }

    void note(const StepContext& ctx, ActKind k, const double* x, std::size_t e, std::size_t n) {
        std::vector<double>& peaks = step_peak[slot(ctx, k)];
        for (std::size_t ch = 0; ch < e; ++ch) {
            double mx = 0.0;
            for (std::size_t s = 0; s < n; ++s) mx = std::max(mx, std::fabs(x[ch * n + s]));
            double& p = peaks[ctx.t * embed + ch];
            p = std::max(p, mx);
        }
    }

    void on_inputs(const StepContext& ctx, double* a_bar, double* b_bar, double*, double*,
                   std::size_t e, std::size_t n) override {
        note(ctx, ActKind::ABar, a_bar, e, n);
        note(ctx, ActKind::BBar, b_bar, e, n);
    }
    void on_state(const StepContext& ctx, double* h, std::size_t e, std::size_t n) override {
        note(ctx, ActKind::H, h, e, n);
    }
};

// Linearly interpolated quantile of a copy of v.
double quantile(std::vector<double> v, double q) {
    require(!v.empty(), "quantile of empty set");
    std::sort(v.begin(), v.end());
    double pos = q * static_cast<double>(v.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= v.size()) return v.back();
    double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace

CalibrationResult calibrate(const ToyVmmModel& model, const std::vector<double>& images,
                            std::size_t batch, const QuantSpec& spec) {
    spec.validate();
    const ModelDims& d = model.dims;
    CalibRecorder rec(d.tokens(), d.embed, model.blocks.size(), model.orders.size());
    vmm_forward_raw(model, images, batch, &rec, false);

    CalibrationResult out;
    out.spec = spec;
    out.tokens = d.tokens();
    out.embed = d.embed;
    out.state = d.state;
    out.blocks = model.blocks.size();
    out.ndirs = model.orders.size();

    double qa = qmax_for(spec.act_bits);
    for (std::size_t b = 0; b < out.blocks; ++b)
        for (std::size_t dir = 0; dir < out.ndirs; ++dir)
            for (std::size_t k = 0; k < kActKinds; ++k) {
                const auto& peaks = rec.step_peak[(b * out.ndirs + dir) * kActKinds + k];
                TensorCalib tc;
                tc.name = "block" + std::to_string(b) + ".dir" + std::to_string(dir) + "." +
                          act_kind_name(static_cast<ActKind>(k));

                std::vector<double> pooled(out.embed, 0.0);
                for (std::size_t t = 0; t < out.tokens; ++t)
                    for (std::size_t ch = 0; ch < out.embed; ++ch)
                        pooled[ch] = std::max(pooled[ch], peaks[t * out.embed + ch]);
                tc.theta = quantile(pooled, 1.0 - spec.rho);
                tc.excluded.resize(out.embed);
                for (std::size_t ch = 0; ch < out.embed; ++ch)
                    tc.excluded[ch] = pooled[ch] > tc.theta ? 1 : 0;

                tc.scale_inlier.resize(out.tokens);
                tc.scale_full.resize(out.tokens);
                for (std::size_t t = 0; t < out.tokens; ++t) {
                    double mi = 0.0, mf = 0.0;
                    for (std::size_t ch = 0; ch < out.embed; ++ch) {
                        double p = peaks[t * out.embed + ch];
                        mf = std::max(mf, p);
                        if (!tc.excluded[ch]) mi = std::max(mi, p);
                    }
                    tc.scale_inlier[t] = mi == 0.0 ? 1.0 : mi / qa;
                    tc.scale_full[t] = mf == 0.0 ? 1.0 : mf / qa;
                }
                out.tensors.push_back(std::move(tc));
            }
    return out;
}

void save_calibration(const std::filesystem::path& dir, const CalibrationResult& c) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create calibration dir: " + dir.string() + ": " + ec.message());

    std::ostringstream rec;
    rec << "tokens = " << c.tokens << "\n";
    rec << "embed = " << c.embed << "\n";
    rec << "state = " << c.state << "\n";
    rec << "blocks = " << c.blocks << "\n";
    rec << "ndirs = " << c.ndirs << "\n";
    rec << "weight_bits = " << c.spec.weight_bits << "\n";
    rec << "act_bits = " << c.spec.act_bits << "\n";
    rec << "outlier_bits = " << c.spec.outlier_bits << "\n";
    rec << "n_refresh = " << c.spec.n_refresh << "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", c.spec.rho);
    rec << "rho = " << buf << "\n";
    for (const TensorCalib& tc : c.tensors) {
        std::string file = tc.name;
        for (char& ch : file)
            if (ch == '.') ch = '_';
        file += "_scales.ouro";
        // Row 0: per-step inlier scales; row 1: per-step all-channel scales.
        Tensor scales = Tensor::zeros({2, c.tokens});
        std::memcpy(scales.mut(), tc.scale_inlier.data(), c.tokens * sizeof(double));
        std::memcpy(scales.mut() + c.tokens, tc.scale_full.data(), c.tokens * sizeof(double));
        write_tensor_f64(dir / file, scales);

        std::snprintf(buf, sizeof buf, "%.17g", tc.theta);
        rec << "tensor " << tc.name << " " << file << " theta=" << buf << " excluded=";
        bool any = false;
        for (std::size_t ch = 0; ch < tc.excluded.size(); ++ch)
            if (tc.excluded[ch]) {
                rec << (any ? "," : "") << ch;
                any = true;
            }
        if (!any) rec << "-";
        rec << "\n";
    }
    atomic_write_text(dir / "calibration.txt", rec.str());
}

CalibrationResult load_calibration(const std::filesystem::path& dir) {
    std::istringstream in(read_text_file(dir / "calibration.txt"));
    CalibrationResult c;
    std::map<std::string, std::string> kv;
    std::string line;
    std::vector<std::string> tensor_lines;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("tensor ", 0) == 0) {
            tensor_lines.push_back(line);
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("calibration record: malformed line: " + line);
        auto trim = [](std::string s) {
            while (!s.empty() && s.front() == ' ') s.erase(s.begin());
            while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.pop_back();
            return s;
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto get = [&](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw IoError("calibration record: missing key '" + k + "'");
        return it->second;
    };
    c.tokens = std::stoul(get("tokens"));
    c.embed = std::stoul(get("embed"));
    c.state = std::stoul(get("state"));
    c.blocks = std::stoul(get("blocks"));
    c.ndirs = std::stoul(get("ndirs"));
    c.spec.weight_bits = static_cast<unsigned>(std::stoul(get("weight_bits")));
    c.spec.act_bits = static_cast<unsigned>(std::stoul(get("act_bits")));
    c.spec.outlier_bits = static_cast<unsigned>(std::stoul(get("outlier_bits")));
    c.spec.n_refresh = std::stoul(get("n_refresh"));
    c.spec.rho = std::stod(get("rho"));

    for (const std::string& tl : tensor_lines) {
        std::istringstream ls(tl);
        std::string tag, name, file, theta_kv, excl_kv;
        ls >> tag >> name >> file >> theta_kv >> excl_kv;
        if (theta_kv.rfind("theta=", 0) != 0 || excl_kv.rfind("excluded=", 0) != 0)
            throw IoError("calibration record: malformed tensor line: " + tl);
        TensorCalib tc;
        tc.name = name;
        tc.theta = std::stod(theta_kv.substr(6));
        tc.excluded.assign(c.embed, 0);
        std::string ex = excl_kv.substr(9);
        if (ex != "-") {
            std::istringstream es(ex);
            std::string tok;
            while (std::getline(es, tok, ',')) {
                std::size_t ch = std::stoul(tok);
                if (ch >= c.embed) throw IoError("calibration record: excluded channel out of range");
                tc.excluded[ch] = 1;
            }
        }
        Tensor scales = read_tensor_f64(dir / file);
        if (scales.shape != Shape{2, c.tokens})
            throw IoError("calibration scales for " + name + ": unexpected shape " +
                          shape_str(scales.shape));
        tc.scale_inlier.assign(scales.ptr(), scales.ptr() + c.tokens);
        tc.scale_full.assign(scales.ptr() + c.tokens, scales.ptr() + 2 * c.tokens);
        c.tensors.push_back(std::move(tc));
    }
    if (c.tensors.size() != c.blocks * c.ndirs * kActKinds)
        throw IoError("calibration record: tensor count does not match dims");
    return c;
}

// ---- dynamic detection ----------------------------------------------------------

bool OutlierState::contains(std::size_t ch) const {
    return std::binary_search(o_list.begin(), o_list.end(), ch);
}

void OutlierState::insert(std::size_t ch) {
    auto it = std::lower_bound(o_list.begin(), o_list.end(), ch);
    if (it == o_list.end() || *it != ch) o_list.insert(it, ch);
}

bool maybe_refresh(OutlierState& st, std::size_t t, std::size_t n_refresh) {
    if (n_refresh == 0 || t == 0 || t % n_refresh != 0) {
        if (t > 0) ++st.steps_since_refresh;
        return false;
    }
    st.o_list.clear();
    st.steps_since_refresh = 0;
    return true;
}

DetectResult detect_outliers(OutlierState& st, const double* x, std::size_t e, std::size_t n,
                             double theta, double scale_inlier, unsigned act_bits) {
    DetectResult res;
    // Dynamic scale over channels not already flagged.
    double mx = 0.0;
    for (std::size_t ch = 0; ch < e; ++ch) {
        if (st.contains(ch)) continue;
        for (std::size_t s = 0; s < n; ++s) mx = std::max(mx, std::fabs(x[ch * n + s]));
    }
    double s_dyn = mx / qmax_for(act_bits);
    if (s_dyn <= scale_inlier) return res;

    res.scanned = true;
    for (std::size_t ch = 0; ch < e; ++ch) {
        double peak = 0.0;
        for (std::size_t s = 0; s < n; ++s) peak = std::max(peak, std::fabs(x[ch * n + s]));
        if (peak > theta && !st.contains(ch)) {
            st.insert(ch);
            res.added.push_back(ch);
        }
    }
    return res;
}

void fake_quant_step(double* x, std::size_t e, std::size_t n, const OutlierState& st,
                     double scale_inlier, unsigned act_bits, unsigned outlier_bits) {
    for (std::size_t ch = 0; ch < e; ++ch) {
        double* row = x + ch * n;
        if (st.contains(ch)) {
            double s = scale_for(row, n, outlier_bits);
            for (std::size_t i = 0; i < n; ++i)
                row[i] = static_cast<double>(quantize_code(row[i], s, outlier_bits)) * s;
        } else {
            for (std::size_t i = 0; i < n; ++i)
                row[i] = static_cast<double>(quantize_code(row[i], scale_inlier, act_bits)) *
                         scale_inlier;
        }
    }
}

// ---- weights --------------------------------------------------------------------

QuantizedRows quantize_weights(const Tensor& w, unsigned bits) {
    require(w.rank() >= 1, "quantize_weights: empty tensor");
    QuantizedRows q;
    q.shape = w.shape;
    q.bits = bits;
    std::size_t rows = w.shape[0];
    std::size_t cols = w.numel() / rows;
    q.codes.resize(w.numel());
    q.scales.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = w.ptr() + r * cols;
        double s = scale_for(row, cols, bits);
        q.scales[r] = s;
        for (std::size_t c = 0; c < cols; ++c)
            q.codes[r * cols + c] = static_cast<std::int8_t>(quantize_code(row[c], s, bits));
    }
    return q;
}

Tensor dequantize_rows(const QuantizedRows& q) {
    Tensor t = Tensor::zeros(q.shape);
    std::size_t rows = q.shape[0];
    std::size_t cols = t.numel() / rows;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            t.mut()[r * cols + c] = static_cast<double>(q.codes[r * cols + c]) * q.scales[r];
    return t;
}

ToyVmmModel quantize_model_weights(const ToyVmmModel& m, unsigned bits) {
    if (bits >= 16) return m;
    ToyVmmModel q = m;
    auto fq = [&](Tensor& w) { w = dequantize_rows(quantize_weights(w, bits)); };
    fq(q.patch_embed_w);
    fq(q.head_w);
    for (MambaBlockParams& blk : q.blocks) {
        fq(blk.w_in);
        fq(blk.w_gate);
        fq(blk.conv);
        fq(blk.out_proj);
        for (S6Params& p : blk.dirs) {
            fq(p.w_b);
            fq(p.w_c);
            fq(p.w_delta);
        }
    }
    return q;
}

QuantMode quant_mode_from_name(const std::string& s) {
    if (s == "dynamic") return QuantMode::Dynamic;
    if (s == "static") return QuantMode::Static;
    if (s == "bypass") return QuantMode::Bypass;
    throw ValidationError("unknown quantization mode: '" + s + "'");
}

const char* quant_mode_name(QuantMode m) {
    switch (m) {
        case QuantMode::Dynamic: return "dynamic";
        case QuantMode::Static: return "static";
        case QuantMode::Bypass: return "bypass";
    }
    throw ValidationError("unknown quantization mode value");
}

// ---- spike injection --------------------------------------------------------------

bool SpikeHook::spikes_at(const StepContext& ctx, std::size_t e,
                          std::vector<std::size_t>* channels) const {
    if (cfg.rate <= 0.0) return false;
    std::uint64_t key = cfg.salt;
    key = mix64(key ^ (0x5151ull + ctx.sample));
    key = mix64(key ^ (ctx.block * 131ull + ctx.dir));
    key = mix64(key ^ ctx.t);
    double u = static_cast<double>(key >> 11) * 0x1.0p-53;
    if (u >= cfg.rate) return false;
    if (channels) {
        channels->clear();
        std::uint64_t pick = key;
        while (channels->size() < std::min(cfg.channels, e)) {
            pick = mix64(pick);
            std::size_t ch = static_cast<std::size_t>(pick % e);
            if (std::find(channels->begin(), channels->end(), ch) == channels->end())
                channels->push_back(ch);
        }
    }
    return true;
}

void SpikeHook::on_inputs(const StepContext& ctx, double*, double* b_bar, double*, double*,
                          std::size_t e, std::size_t n) {
    std::vector<std::size_t> chans;
    if (!spikes_at(ctx, e, &chans)) return;
    for (std::size_t ch : chans)
        for (std::size_t s = 0; s < n; ++s) b_bar[ch * n + s] *= cfg.gain;
}

// ---- quantized evaluation ----------------------------------------------------------

namespace {

struct QuantHook : StepHook {
    const CalibrationResult& calib;
    QuantMode mode;
    std::vector<OutlierState> states;  // per (block, dir, kind)
    std::size_t cur_sample = static_cast<std::size_t>(-1);
    std::vector<TimelineEntry>* timeline = nullptr;  // sample 0, b_bar only

    QuantHook(const CalibrationResult& c, QuantMode m) : calib(c), mode(m) {
        states.resize(c.blocks * c.ndirs * kActKinds);
    }

    void apply(const StepContext& ctx, ActKind kind, double* x, std::size_t e, std::size_t n) {
        if (mode == QuantMode::Bypass) return;
        const TensorCalib& tc = calib.at(ctx.block, ctx.dir, kind);
        require(ctx.t < tc.scale_inlier.size(), "quantized step beyond calibrated sequence length");
        if (mode == QuantMode::Static) {
            double s = tc.scale_full[ctx.t];
            OutlierState none;
            fake_quant_step(x, e, n, none, s, calib.spec.act_bits, calib.spec.outlier_bits);
            return;
        }
        // Dynamic: fresh state per sample and scan.
        if (ctx.sample != cur_sample) {
            for (OutlierState& st : states) st = OutlierState{};
            cur_sample = ctx.sample;
        }
        OutlierState& st =
            states[(ctx.block * calib.ndirs + ctx.dir) * kActKinds + static_cast<std::size_t>(kind)];
        maybe_refresh(st, ctx.t, calib.spec.n_refresh);
        std::size_t after_refresh = st.o_list.size();
        detect_outliers(st, x, e, n, tc.theta, tc.scale_inlier[ctx.t], calib.spec.act_bits);
        if (timeline && ctx.sample == 0 && kind == ActKind::BBar)
            timeline->push_back({tc.name, ctx.t, after_refresh, st.o_list.size()});
        fake_quant_step(x, e, n, st, tc.scale_inlier[ctx.t], calib.spec.act_bits,
                        calib.spec.outlier_bits);
    }

    void on_inputs(const StepContext& ctx, double* a_bar, double* b_bar, double*, double*,
                   std::size_t e, std::size_t n) override {
        apply(ctx, ActKind::ABar, a_bar, e, n);
        apply(ctx, ActKind::BBar, b_bar, e, n);
    }
    void on_state(const StepContext& ctx, double* h, std::size_t e, std::size_t n) override {
        apply(ctx, ActKind::H, h, e, n);
    }
};

}  // namespace

QuantEvalResult quantized_forward(const ToyVmmModel& model, const std::vector<double>& images,
                                  std::size_t batch, const CalibrationResult& calib,
                                  QuantMode mode, const SpikeSettings& spikes) {
    require(calib.blocks == model.blocks.size() && calib.ndirs == model.orders.size() &&
                calib.tokens == model.dims.tokens() && calib.embed == model.dims.embed,
            "calibration does not match the model geometry");

    QuantEvalResult out;
    out.batch = batch;

    SpikeHook spike_fp(spikes), spike_q(spikes);
    RawForward fp = vmm_forward_raw(model, images, batch, spikes.rate > 0.0 ? &spike_fp : nullptr,
                                    true);

    ToyVmmModel qmodel =
        mode == QuantMode::Bypass ? model : quantize_model_weights(model, calib.spec.weight_bits);
    QuantHook qhook(calib, mode);
    qhook.timeline = &out.timeline;
    MultiHook hooks;
    if (spikes.rate > 0.0) hooks.hooks.push_back(&spike_q);
    hooks.hooks.push_back(&qhook);
    RawForward qf = vmm_forward_raw(qmodel, images, batch, &hooks, false);

    out.logits_fp = fp.logits;
    out.logits_q = qf.logits;

    std::size_t classes = model.dims.classes;
    double lm = 0.0;
    for (std::size_t i = 0; i < out.logits_fp.size(); ++i) {
        double d = out.logits_fp[i] - out.logits_q[i];
        lm += d * d;
    }
    out.logits_mse = lm / static_cast<double>(out.logits_fp.size());
    for (std::size_t b = 0; b < batch; ++b) {
        auto base_fp = out.logits_fp.begin() + static_cast<std::ptrdiff_t>(b * classes);
        auto base_q = out.logits_q.begin() + static_cast<std::ptrdiff_t>(b * classes);
        std::size_t afp = static_cast<std::size_t>(
            std::max_element(base_fp, base_fp + static_cast<std::ptrdiff_t>(classes)) - base_fp);
        std::size_t aq = static_cast<std::size_t>(
            std::max_element(base_q, base_q + static_cast<std::ptrdiff_t>(classes)) - base_q);
        if (afp == aq) ++out.argmax_agree;
    }

    // Per-layer error is measured teacher-forced: each scan re-runs on the
    // reference pass's own scan input, so the number isolates what this
    // layer's quantization does rather than compounding upstream drift (which
    // the heavy-tailed toy activations amplify chaotically across blocks).
    std::size_t ndirs = model.orders.size();
    for (std::size_t blk = 0; blk < model.blocks.size(); ++blk)
        for (std::size_t dir = 0; dir < ndirs; ++dir) {
            double acc = 0.0;
            std::size_t cnt = 0;
            for (std::size_t b = 0; b < batch; ++b) {
                const ScanTrace& tf = fp.traces[b][blk * ndirs + dir];
                SpikeHook spike_tf(spikes);
                QuantHook policy(calib, mode);
                MultiHook tf_hooks;
                if (spikes.rate > 0.0) tf_hooks.hooks.push_back(&spike_tf);
                tf_hooks.hooks.push_back(&policy);
                StepContext ctx{b, blk, dir, 0};
                std::vector<double> o_tf =
                    s6_scan(qmodel.blocks[blk].dirs[dir], tf.u, calib.tokens, &tf_hooks, ctx,
                            nullptr);
                for (std::size_t i = 0; i < tf.o.size(); ++i) {
                    double d = tf.o[i] - o_tf[i];
                    acc += d * d;
                }
                cnt += tf.o.size();
            }
            out.layer_mse.emplace_back(
                "block" + std::to_string(blk) + ".dir" + std::to_string(dir),
                acc / static_cast<double>(cnt));
        }
    return out;
}

}  // namespace ouro
