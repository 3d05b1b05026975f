#include "ouro/ssm.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "ouro/tensor_io.hpp"

namespace ouro {

std::string scan_order_name(ScanOrder o) {
    switch (o) {
        case ScanOrder::RowForward: return "row-forward";
        case ScanOrder::RowBackward: return "row-backward";
        case ScanOrder::ColForward: return "col-forward";
        case ScanOrder::ColBackward: return "col-backward";
    }
    throw ValidationError("unknown scan order value");
}

ScanOrder scan_order_from_name(const std::string& s) {
    if (s == "row-forward") return ScanOrder::RowForward;
    if (s == "row-backward") return ScanOrder::RowBackward;
    if (s == "col-forward") return ScanOrder::ColForward;
    if (s == "col-backward") return ScanOrder::ColBackward;
    throw ValidationError("unknown scan order: '" + s + "'");
}

std::vector<std::size_t> scan_permutation(ScanOrder order, std::size_t grid) {
    std::size_t m = grid * grid;
    std::vector<std::size_t> perm(m);
    for (std::size_t t = 0; t < m; ++t) {
        std::size_t fast = t % grid, slow = t / grid;
        std::size_t canon;
        switch (order) {
            case ScanOrder::RowForward: canon = slow * grid + fast; break;
            case ScanOrder::RowBackward: canon = m - 1 - (slow * grid + fast); break;
            case ScanOrder::ColForward: canon = fast * grid + slow; break;
            case ScanOrder::ColBackward: canon = m - 1 - (fast * grid + slow); break;
            default: throw ValidationError("unknown scan order value");
        }
        perm[t] = canon;
    }
    return perm;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t t = 0; t < perm.size(); ++t) inv[perm[t]] = t;
    return inv;
}

void ModelDims::validate() const {
    require(patch >= 1 && image >= patch && image % patch == 0,
            "image side must be a positive multiple of the patch side");
    require(channels >= 1 && embed >= 1 && state >= 1 && blocks >= 1 && classes >= 2,
            "model dims must be positive (classes >= 2)");
    require(conv_width >= 1, "conv width must be >= 1");
}

namespace {

Tensor gaussian(SeededRng& rng, Shape shape, std::size_t fan_in) {
    Tensor t = Tensor::zeros(std::move(shape));
    double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i) t.mut()[i] = rng.normal(0.0, s);
    return t;
}

// Canonical pixel index for every (token, in-patch value), row-major tokens.
std::vector<std::size_t> patch_gather_indices(const ModelDims& d) {
    std::vector<std::size_t> idx;
    idx.reserve(d.tokens() * d.patch_vals());
    std::size_t g = d.grid();
    for (std::size_t gr = 0; gr < g; ++gr)
        for (std::size_t gc = 0; gc < g; ++gc)
            for (std::size_t pr = 0; pr < d.patch; ++pr)
                for (std::size_t pc = 0; pc < d.patch; ++pc)
                    for (std::size_t ch = 0; ch < d.channels; ++ch)
                        idx.push_back(((gr * d.patch + pr) * d.image + gc * d.patch + pc) * d.channels +
                                      ch);
    return idx;
}

}  // namespace

ToyVmmModel make_toy_model(const ModelDims& dims, const std::vector<ScanOrder>& orders,
                           std::uint64_t seed) {
    dims.validate();
    require(!orders.empty(), "model needs at least one scan order");
    ToyVmmModel m;
    m.dims = dims;
    m.orders = orders;
    SeededRng rng(seed);
    std::size_t e = dims.embed, n = dims.state;
    m.patch_embed_w = gaussian(rng, {e, dims.patch_vals()}, dims.patch_vals());
    m.patch_embed_b = Tensor::zeros({e});
    m.head_w = gaussian(rng, {dims.classes, e}, e);
    m.head_b = Tensor::zeros({dims.classes});
    for (std::size_t b = 0; b < dims.blocks; ++b) {
        MambaBlockParams blk;
        blk.w_in = gaussian(rng, {e, e}, e);
        blk.w_gate = gaussian(rng, {e, e}, e);
        blk.conv = gaussian(rng, {e, dims.conv_width}, dims.conv_width);
        blk.out_proj = gaussian(rng, {e, e}, e);
        for (std::size_t d = 0; d < orders.size(); ++d) {
            S6Params p;
            p.a = Tensor::zeros({e, n});
            for (std::size_t i = 0; i < e * n; ++i) p.a.mut()[i] = -std::exp(rng.uniform(0.0, 1.0));
            p.w_b = gaussian(rng, {n, e}, e);
            p.w_c = gaussian(rng, {n, e}, e);
            p.w_delta = gaussian(rng, {e, e}, e);
            p.b_delta = Tensor::zeros({e});
            blk.dirs.push_back(std::move(p));
        }
        m.blocks.push_back(std::move(blk));
    }
    return m;
}

// ---- plain-buffer forward path ----------------------------------------------

std::vector<double> s6_scan(const S6Params& p, const std::vector<double>& u, std::size_t tokens,
                            StepHook* hook, const StepContext& base_ctx, ScanTrace* trace) {
    std::size_t e = p.w_delta.shape[0];
    std::size_t n = p.w_b.shape[0];
    require(u.size() == tokens * e, "s6_scan: input size does not match tokens x embed");

    if (trace) {
        trace->tokens = tokens;
        trace->embed = e;
        trace->state = n;
        trace->a_bar.resize(tokens * e * n);
        trace->b_bar.resize(tokens * e * n);
        trace->c.resize(tokens * n);
        trace->delta.resize(tokens * e);
        trace->h.resize(tokens * e * n);
        trace->u = u;
        trace->o.resize(tokens * e);
    }

    std::vector<double> h(e * n, 0.0);
    std::vector<double> o(tokens * e);
    std::vector<double> dproj(e), delta(e), bvec(n), cvec(n), a_bar(e * n), b_bar(e * n);

    for (std::size_t t = 0; t < tokens; ++t) {
        const double* ut = u.data() + t * e;
        detail::mm(ut, p.w_delta.ptr(), dproj.data(), 1, e, e, false, true, false);
        for (std::size_t i = 0; i < e; ++i)
            delta[i] = detail::softplus_val(dproj[i] + p.b_delta.ptr()[i]);
        detail::mm(ut, p.w_b.ptr(), bvec.data(), 1, e, n, false, true, false);
        detail::mm(ut, p.w_c.ptr(), cvec.data(), 1, e, n, false, true, false);
        const double* a = p.a.ptr();
        for (std::size_t i = 0; i < e; ++i)
            for (std::size_t m = 0; m < n; ++m) {
                a_bar[i * n + m] = std::exp(delta[i] * a[i * n + m]);
                b_bar[i * n + m] = delta[i] * bvec[m];
            }

        StepContext ctx = base_ctx;
        ctx.t = t;
        if (hook) hook->on_inputs(ctx, a_bar.data(), b_bar.data(), cvec.data(), delta.data(), e, n);

        for (std::size_t i = 0; i < e; ++i)
            for (std::size_t m = 0; m < n; ++m)
                h[i * n + m] = a_bar[i * n + m] * h[i * n + m] + b_bar[i * n + m] * ut[i];
        if (hook) hook->on_state(ctx, h.data(), e, n);

        for (std::size_t i = 0; i < e; ++i) {
            double s = 0.0;
            for (std::size_t m = 0; m < n; ++m) s += cvec[m] * h[i * n + m];
            o[t * e + i] = s;
        }

        if (trace) {
            std::memcpy(trace->a_bar.data() + t * e * n, a_bar.data(), e * n * sizeof(double));
            std::memcpy(trace->b_bar.data() + t * e * n, b_bar.data(), e * n * sizeof(double));
            std::memcpy(trace->c.data() + t * n, cvec.data(), n * sizeof(double));
            std::memcpy(trace->delta.data() + t * e, delta.data(), e * sizeof(double));
            std::memcpy(trace->h.data() + t * e * n, h.data(), e * n * sizeof(double));
        }
    }
    if (trace) trace->o = o;
    return o;
}

namespace {

// One Mamba block over a single sample's token matrix x (M x E), editing it in
// place. Mirrors mamba_block_forward_t op for op so results match bitwise.
void block_forward_raw(const MambaBlockParams& blk, const std::vector<ScanOrder>& orders,
                       std::size_t grid, std::vector<double>& x, std::size_t m, std::size_t e,
                       StepHook* hook, StepContext ctx, std::vector<ScanTrace>* traces) {
    std::vector<double> gate(m * e), u0(m * e), u(m * e, 0.0);
    detail::mm(x.data(), blk.w_gate.ptr(), gate.data(), m, e, e, false, true, false);
    for (double& v : gate) v = detail::silu_val(v);
    detail::mm(x.data(), blk.w_in.ptr(), u0.data(), m, e, e, false, true, false);

    // Depthwise causal conv over tokens, same tap order as the tensor op.
    std::size_t w = blk.conv.shape[1];
    const double* taps = blk.conv.ptr();
    for (std::size_t t = 0; t < m; ++t)
        for (std::size_t c = 0; c < e; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < w; ++k) {
                std::int64_t src = static_cast<std::int64_t>(t) - static_cast<std::int64_t>(w - 1 - k);
                if (src < 0) continue;
                s += taps[c * w + k] * u0[static_cast<std::size_t>(src) * e + c];
            }
            u[t * e + c] = s;
        }

    std::vector<double> merged(m * e, 0.0);
    for (std::size_t d = 0; d < orders.size(); ++d) {
        auto perm = scan_permutation(orders[d], grid);
        std::vector<double> up(m * e);
        for (std::size_t t = 0; t < m; ++t)
            std::memcpy(up.data() + t * e, u.data() + perm[t] * e, e * sizeof(double));
        ctx.dir = d;
        ScanTrace* tr = traces ? &(*traces)[ctx.block * orders.size() + d] : nullptr;
        std::vector<double> o = s6_scan(blk.dirs[d], up, m, hook, ctx, tr);
        // Un-permute and merge by sum.
        for (std::size_t t = 0; t < m; ++t) {
            const double* src = o.data() + t * e;
            double* dst = merged.data() + perm[t] * e;
            for (std::size_t i = 0; i < e; ++i) dst[i] += src[i];
        }
    }

    for (std::size_t i = 0; i < m * e; ++i) merged[i] *= gate[i];
    detail::mm(merged.data(), blk.out_proj.ptr(), x.data(), m, e, e, false, true, false);
}

}  // namespace

RawForward vmm_forward_raw(const ToyVmmModel& model, const std::vector<double>& images,
                           std::size_t batch, StepHook* hook, bool want_traces) {
    const ModelDims& d = model.dims;
    std::size_t pix = d.image * d.image * d.channels;
    require(images.size() == batch * pix, "vmm_forward_raw: image buffer does not match batch size");
    std::size_t m = d.tokens(), e = d.embed, pv = d.patch_vals();
    auto gather = patch_gather_indices(d);

    RawForward out;
    out.logits.resize(batch * d.classes);
    if (want_traces)
        out.traces.assign(batch, std::vector<ScanTrace>(model.blocks.size() * model.orders.size()));

    std::vector<double> patches(m * pv), x(m * e), pooled(e), logits(d.classes);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* img = images.data() + b * pix;
        for (std::size_t i = 0; i < m * pv; ++i) patches[i] = img[gather[i]];
        detail::mm(patches.data(), model.patch_embed_w.ptr(), x.data(), m, pv, e, false, true, false);
        for (std::size_t t = 0; t < m; ++t)
            for (std::size_t i = 0; i < e; ++i) x[t * e + i] += model.patch_embed_b.ptr()[i];

        StepContext ctx;
        ctx.sample = b;
        for (std::size_t blk = 0; blk < model.blocks.size(); ++blk) {
            ctx.block = blk;
            block_forward_raw(model.blocks[blk], model.orders, d.grid(), x, m, e, hook, ctx,
                              want_traces ? &out.traces[b] : nullptr);
        }

        std::fill(pooled.begin(), pooled.end(), 0.0);
        for (std::size_t t = 0; t < m; ++t)
            for (std::size_t i = 0; i < e; ++i) pooled[i] += x[t * e + i];
        double inv_m = 1.0 / static_cast<double>(m);
        for (double& v : pooled) v *= inv_m;
        detail::mm(pooled.data(), model.head_w.ptr(), logits.data(), 1, e, d.classes, false, true,
                   false);
        for (std::size_t c = 0; c < d.classes; ++c)
            out.logits[b * d.classes + c] = logits[c] + model.head_b.ptr()[c];
    }
    return out;
}

// ---- tape-friendly forward path ---------------------------------------------

ScanTensors s6_scan_t(const S6Params& p, const Tensor& u_perm) {
    require(u_perm.rank() == 3, "s6_scan_t: input must be B x M x E");
    std::size_t b = u_perm.shape[0], m = u_perm.shape[1], e = u_perm.shape[2];
    std::size_t n = p.w_b.shape[0];

    Tensor u2 = reshape(u_perm, {b * m, e});
    Tensor dproj = add(matmul(u2, p.w_delta, false, true), p.b_delta);
    Tensor delta = softplus(dproj);                         // (B*M) x E
    Tensor delta3 = reshape(delta, {b * m, e, 1});
    Tensor log_a_bar = mul(delta3, reshape(p.a, {1, e, n}));  // (B*M) x E x N
    Tensor bvec = matmul(u2, p.w_b, false, true);             // (B*M) x N
    Tensor b_bar = mul(delta3, reshape(bvec, {b * m, 1, n}));
    Tensor c_all = matmul(u2, p.w_c, false, true);            // (B*M) x N

    Tensor a_bar = reshape(exp_t(log_a_bar), {b, m, e, n});
    Tensor b_bar4 = reshape(b_bar, {b, m, e, n});
    Tensor c3 = reshape(c_all, {b, m, n});

    Tensor h = Tensor::zeros({b, e, n});
    std::vector<Tensor> outs;
    outs.reserve(m);
    for (std::size_t t = 0; t < m; ++t) {
        Tensor at = slice_index(a_bar, 1, t);                   // B x E x N
        Tensor bt = slice_index(b_bar4, 1, t);                  // B x E x N
        Tensor ut = reshape(slice_index(u_perm, 1, t), {b, e, 1});
        h = add(mul(at, h), mul(bt, ut));
        Tensor ct = reshape(slice_index(c3, 1, t), {b, 1, n});
        outs.push_back(sum_axis(mul(h, ct), 2));                // B x E
    }

    ScanTensors st;
    st.o = stack(outs, 1);  // B x M x E
    st.log_a_bar = reshape(log_a_bar, {b, m, e, n});
    st.b_bar = b_bar4;
    st.c = c3;
    st.delta = reshape(delta, {b, m, e});
    st.u = u_perm;
    return st;
}

namespace {

Tensor block_forward_t(const MambaBlockParams& blk, const std::vector<ScanOrder>& orders,
                       std::size_t grid, const Tensor& x, std::vector<ScanTensors>* scans) {
    std::size_t b = x.shape[0], m = x.shape[1], e = x.shape[2];
    Tensor x2 = reshape(x, {b * m, e});
    Tensor gate = silu(matmul(x2, blk.w_gate, false, true));
    Tensor u0 = reshape(matmul(x2, blk.w_in, false, true), {b, m, e});
    Tensor u = conv1d_depthwise_causal(u0, blk.conv);

    Tensor merged;
    for (std::size_t d = 0; d < orders.size(); ++d) {
        auto perm = scan_permutation(orders[d], grid);
        Tensor up = index_select(u, 1, perm);
        ScanTensors st = s6_scan_t(blk.dirs[d], up);
        if (scans) scans->push_back(st);
        Tensor o_canon = index_select(st.o, 1, inverse_permutation(perm));
        merged = (d == 0) ? o_canon : add(merged, o_canon);
    }

    Tensor y = mul(reshape(merged, {b * m, e}), gate);
    return reshape(matmul(y, blk.out_proj, false, true), {b, m, e});
}

}  // namespace

Tensor mamba_block_forward_t(const MambaBlockParams& block, const std::vector<ScanOrder>& orders,
                             std::size_t grid, const Tensor& x) {
    return block_forward_t(block, orders, grid, x, nullptr);
}

ForwardTensors vmm_forward_t(const ToyVmmModel& model, const Tensor& images, bool want_scans) {
    const ModelDims& d = model.dims;
    std::size_t pix = d.image * d.image * d.channels;
    require(images.rank() == 2 && images.shape[1] == pix,
            "vmm_forward_t: images must be B x " + std::to_string(pix));
    std::size_t b = images.shape[0], m = d.tokens(), e = d.embed, pv = d.patch_vals();

    Tensor patches = reshape(index_select(images, 1, patch_gather_indices(d)), {b * m, pv});
    Tensor x = reshape(add(matmul(patches, model.patch_embed_w, false, true), model.patch_embed_b),
                       {b, m, e});

    ForwardTensors out;
    for (const MambaBlockParams& blk : model.blocks)
        x = block_forward_t(blk, model.orders, d.grid(), x, want_scans ? &out.scans : nullptr);

    Tensor pooled = mean_axis(x, 1);  // B x E
    out.logits = add(matmul(pooled, model.head_w, false, true), model.head_b);
    return out;
}

// ---- checkpoint I/O -----------------------------------------------------------

namespace {

struct NamedTensor {
    std::string name;
    const Tensor* t;
};

std::vector<NamedTensor> weight_list(const ToyVmmModel& m) {
    std::vector<NamedTensor> v;
    v.push_back({"patch_embed.w", &m.patch_embed_w});
    v.push_back({"patch_embed.b", &m.patch_embed_b});
    v.push_back({"head.w", &m.head_w});
    v.push_back({"head.b", &m.head_b});
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        std::string pb = "block" + std::to_string(b) + ".";
        const MambaBlockParams& blk = m.blocks[b];
        v.push_back({pb + "w_in", &blk.w_in});
        v.push_back({pb + "w_gate", &blk.w_gate});
        v.push_back({pb + "conv", &blk.conv});
        v.push_back({pb + "out_proj", &blk.out_proj});
        for (std::size_t d = 0; d < blk.dirs.size(); ++d) {
            std::string pd = pb + "dir" + std::to_string(d) + ".";
            const S6Params& p = blk.dirs[d];
            v.push_back({pd + "a", &p.a});
            v.push_back({pd + "w_b", &p.w_b});
            v.push_back({pd + "w_c", &p.w_c});
            v.push_back({pd + "w_delta", &p.w_delta});
            v.push_back({pd + "b_delta", &p.b_delta});
        }
    }
    return v;
}

std::string tensor_file_name(const std::string& weight_name) {
    std::string f = weight_name;
    for (char& c : f)
        if (c == '.') c = '_';
    return f + ".ouro";
}

}  // namespace

void save_model(const ToyVmmModel& model, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint dir: " + dir.string() + ": " + ec.message());

    std::ostringstream man;
    man << "image = " << model.dims.image << "\n";
    man << "channels = " << model.dims.channels << "\n";
    man << "patch = " << model.dims.patch << "\n";
    man << "embed = " << model.dims.embed << "\n";
    man << "state = " << model.dims.state << "\n";
    man << "blocks = " << model.dims.blocks << "\n";
    man << "classes = " << model.dims.classes << "\n";
    man << "conv_width = " << model.dims.conv_width << "\n";
    man << "scan_orders = ";
    for (std::size_t i = 0; i < model.orders.size(); ++i)
        man << (i ? "," : "") << scan_order_name(model.orders[i]);
    man << "\n";
    for (const NamedTensor& nt : weight_list(model)) {
        std::string file = tensor_file_name(nt.name);
        man << "tensor " << nt.name << " " << file << " " << shape_str(nt.t->shape) << "\n";
        write_tensor_f64(dir / file, *nt.t);
    }
    atomic_write_text(dir / "manifest.txt", man.str());
}

ToyVmmModel load_model(const std::filesystem::path& dir) {
    std::istringstream in(read_text_file(dir / "manifest.txt"));
    std::map<std::string, std::string> kv;
    std::vector<std::pair<std::string, std::string>> tensors;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("tensor ", 0) == 0) {
            std::istringstream ls(line);
            std::string tag, name, file;
            ls >> tag >> name >> file;
            if (name.empty() || file.empty())
                throw IoError("checkpoint manifest: malformed tensor line: " + line);
            tensors.emplace_back(name, file);
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("checkpoint manifest: malformed line: " + line);
        auto trim = [](std::string s) {
            while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
            while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
            return s;
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }

    auto get = [&](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw IoError("checkpoint manifest: missing key '" + k + "'");
        return it->second;
    };
    ModelDims d;
    d.image = std::stoul(get("image"));
    d.channels = std::stoul(get("channels"));
    d.patch = std::stoul(get("patch"));
    d.embed = std::stoul(get("embed"));
    d.state = std::stoul(get("state"));
    d.blocks = std::stoul(get("blocks"));
    d.classes = std::stoul(get("classes"));
    d.conv_width = std::stoul(get("conv_width"));

    std::vector<ScanOrder> orders;
    std::istringstream os(get("scan_orders"));
    std::string tok;
    while (std::getline(os, tok, ',')) orders.push_back(scan_order_from_name(tok));

    // Build an identically-shaped model and overwrite every weight from disk.
    ToyVmmModel m = make_toy_model(d, orders, 0);
    auto names = weight_list(m);
    if (tensors.size() != names.size())
        throw IoError("checkpoint manifest: expected " + std::to_string(names.size()) +
                      " tensors, found " + std::to_string(tensors.size()));
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (tensors[i].first != names[i].name)
            throw IoError("checkpoint manifest: unexpected tensor '" + tensors[i].first +
                          "', wanted '" + names[i].name + "'");
        Tensor t = read_tensor_f64(dir / tensors[i].second);
        if (t.shape != names[i].t->shape)
            throw IoError("checkpoint tensor '" + names[i].name + "': shape " + shape_str(t.shape) +
                          " does not match model shape " + shape_str(names[i].t->shape));
        *const_cast<Tensor*>(names[i].t) = t;
    }
    return m;
}

}  // namespace ouro
