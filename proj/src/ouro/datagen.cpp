#include "ouro/datagen.hpp"

#include <algorithm>
#include <cmath>

namespace ouro {

void GenSettings::validate() const {
    require(neighborhood >= 1 && neighborhood % 2 == 1, "gen: neighborhood side must be odd");
    require(batch >= 1, "gen: batch must be >= 1");
    require(anchor_stride >= 1, "gen: anchor stride must be >= 1");
    require(temperature > 0.0, "gen: temperature must be positive");
    require(step_size > 0.0, "gen: step size must be positive");
}

namespace {

struct RankedNeighbor {
    double cos = 0.0;
    bool finite_norm = false;
    std::size_t flat = 0;  // row-major pair-plane index, the tie breaker
    PairIndex at;
};

double dot_n(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

ContrastiveSelection select_pos_neg(const std::vector<double>& lambda, std::size_t m,
                                    std::size_t n, PairIndex anchor, std::size_t window,
                                    std::size_t n_pos) {
    require(lambda.size() == m * m * n, "select_pos_neg: embedding plane size mismatch");
    require(window >= 1 && window % 2 == 1, "select_pos_neg: window side must be odd");
    require(anchor.x < m && anchor.y < m, "select_pos_neg: anchor outside the pair plane");

    const double* av = lambda.data() + (anchor.x * m + anchor.y) * n;
    double an = std::sqrt(dot_n(av, av, n));
    // A zero-norm anchor means the attention embedding degenerated; that is a
    // numeric failure of the run, not a malformed request.
    if (!(an > 0.0)) throw NumericError("select_pos_neg: anchor embedding has zero norm");

    std::ptrdiff_t r = static_cast<std::ptrdiff_t>(window / 2);
    std::vector<RankedNeighbor> cands;
    std::size_t in_bounds_cells = 0;  // window cells inside the plane, anchor included
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx)
        for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
            std::ptrdiff_t x = static_cast<std::ptrdiff_t>(anchor.x) + dx;
            std::ptrdiff_t y = static_cast<std::ptrdiff_t>(anchor.y) + dy;
            if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(m) ||
                y >= static_cast<std::ptrdiff_t>(m))
                continue;
            ++in_bounds_cells;
            if (dx == 0 && dy == 0) continue;
            RankedNeighbor rn;
            rn.at = {static_cast<std::size_t>(x), static_cast<std::size_t>(y)};
            rn.flat = rn.at.x * m + rn.at.y;
            const double* bv = lambda.data() + rn.flat * n;
            double bn = std::sqrt(dot_n(bv, bv, n));
            if (bn > 0.0) {
                rn.finite_norm = true;
                rn.cos = dot_n(av, bv, n) / (an * bn);
            }
            cands.push_back(rn);
        }

    std::sort(cands.begin(), cands.end(), [](const RankedNeighbor& a, const RankedNeighbor& b) {
        if (a.finite_norm != b.finite_norm) return a.finite_norm;  // zero-norm ranks last
        if (a.cos != b.cos) return a.cos > b.cos;
        return a.flat < b.flat;
    });

    std::size_t n_eff = (n_pos == 0) ? in_bounds_cells / 2 : n_pos;
    n_eff = std::min(n_eff, cands.size());

    ContrastiveSelection sel;
    for (std::size_t i = 0; i < cands.size(); ++i)
        (i < n_eff ? sel.positives : sel.negatives).push_back(cands[i].at);
    return sel;
}

double contrastive_loss(const std::vector<double>& lambda, std::size_t m, std::size_t n,
                        PairIndex anchor, const ContrastiveSelection& sel, double tau) {
    require(lambda.size() == m * m * n, "contrastive_loss: embedding plane size mismatch");
    require(tau > 0.0, "contrastive_loss: temperature must be positive");
    require(!sel.positives.empty() && !sel.negatives.empty(),
            "contrastive_loss: empty positive or negative set");

    const double* av = lambda.data() + (anchor.x * m + anchor.y) * n;
    // log((P+Q)/P) = softplus(logQ - logP), with each log-sum-exp under its
    // own max so neither side can underflow when the dots spread widely.
    auto lse = [&](const std::vector<PairIndex>& ps) {
        std::vector<double> v;
        v.reserve(ps.size());
        for (const PairIndex& p : ps)
            v.push_back(dot_n(av, lambda.data() + (p.x * m + p.y) * n, n) / tau);
        double mx = v[0];
        for (double d : v) mx = std::max(mx, d);
        double s = 0.0;
        for (double d : v) s += std::exp(d - mx);
        return mx + std::log(s);
    };
    return detail::softplus_val(lse(sel.negatives) - lse(sel.positives));
}

Tensor make_targets(std::size_t batch, std::size_t classes, SeededRng& rng) {
    Tensor t = Tensor::zeros({batch, classes});
    for (std::size_t b = 0; b < batch; ++b) {
        double* row = t.mut() + b * classes;
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            // -log of a uniform is Exp(1); normalised Exp(1) draws are Dirichlet(1).
            row[c] = -std::log1p(-rng.uniform());
            sum += row[c];
        }
        for (std::size_t c = 0; c < classes; ++c) row[c] /= sum;
    }
    return t;
}

Tensor init_noise_batch(std::size_t batch, std::size_t pix, SeededRng& rng) {
    Tensor t = Tensor::zeros({batch, pix});
    for (std::size_t i = 0; i < t.numel(); ++i) t.mut()[i] = rng.normal();
    return t;
}

Tensor output_loss(const Tensor& logits, const Tensor& targets) {
    require(logits.shape == targets.shape, "output_loss: logits and targets shapes differ");
    return mean_all(abs_t(sub(softmax_lastdim(logits), targets)));
}

namespace {

struct Offset {
    std::ptrdiff_t dx, dy;
};

// Contrastive term for one scan's embedding tensor. Selection (which neighbor
// is positive vs negative) is recomputed from the current values and enters
// the tape only as constant 0/1 masks. The per-anchor loss
//   log((P+Q)/P) = softplus(log Q - log P)
// is assembled from two log-sum-exps, each shifted by its own set's max so
// neither sum can vanish or overflow; raw dots routinely spread far wider
// than tau, so a single shared shift would underflow the positive side.
Tensor scan_contrastive_term(const Tensor& lam, const GenSettings& gs) {
    std::size_t b = lam.shape[0], m = lam.shape[1], n = lam.shape[3];
    std::ptrdiff_t r = static_cast<std::ptrdiff_t>(gs.neighborhood / 2);
    std::vector<Offset> offsets;
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx)
        for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
            if (dx != 0 || dy != 0) offsets.push_back({dx, dy});

    const double* lv = lam.ptr();
    std::size_t plane = m * m;

    // Embedding norms per pair-plane cell.
    std::vector<double> norm(b * plane);
    for (std::size_t i = 0; i < b * plane; ++i)
        norm[i] = std::sqrt(dot_n(lv + i * n, lv + i * n, n));

    // Raw dot maps per offset, reused for ranking and the stabilizing shifts.
    std::vector<std::vector<double>> dots(offsets.size(), std::vector<double>(b * plane, 0.0));
    std::vector<std::vector<char>> inb(offsets.size(), std::vector<char>(plane, 0));
    for (std::size_t o = 0; o < offsets.size(); ++o) {
        for (std::size_t x = 0; x < m; ++x) {
            std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(x) + offsets[o].dx;
            if (nx < 0 || nx >= static_cast<std::ptrdiff_t>(m)) continue;
            for (std::size_t y = 0; y < m; ++y) {
                std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(y) + offsets[o].dy;
                if (ny < 0 || ny >= static_cast<std::ptrdiff_t>(m)) continue;
                inb[o][x * m + y] = 1;
            }
        }
        for (std::size_t ib = 0; ib < b; ++ib)
            for (std::size_t cell = 0; cell < plane; ++cell) {
                if (!inb[o][cell]) continue;
                std::size_t x = cell / m, y = cell % m;
                std::size_t ncell =
                    static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x) + offsets[o].dx) * m +
                    static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + offsets[o].dy);
                dots[o][ib * plane + cell] =
                    dot_n(lv + (ib * plane + cell) * n, lv + (ib * plane + ncell) * n, n);
            }
    }

    // Per-anchor ranking -> positive/negative masks, validity mask, max shift.
    std::vector<Tensor> pos_masks, neg_masks;
    for (std::size_t o = 0; o < offsets.size(); ++o) {
        pos_masks.push_back(Tensor::zeros({b, m, m}));
        neg_masks.push_back(Tensor::zeros({b, m, m}));
    }
    Tensor valid = Tensor::zeros({b, m, m});
    Tensor skipped = Tensor::zeros({b, m, m});
    Tensor shift_p = Tensor::zeros({b, m, m});
    Tensor shift_n = Tensor::zeros({b, m, m});

    struct Cand {
        double cos;
        double dscaled;
        bool finite_norm;
        std::size_t flat;
        std::size_t offset;
    };
    std::vector<Cand> cands;
    for (std::size_t ib = 0; ib < b; ++ib)
        for (std::size_t x = 0; x < m; ++x)
            for (std::size_t y = 0; y <= x; ++y) {
                std::size_t cell = x * m + y;
                std::size_t at = ib * plane + cell;
                if (cell % gs.anchor_stride != 0) continue;

                cands.clear();
                for (std::size_t o = 0; o < offsets.size(); ++o) {
                    if (!inb[o][cell]) continue;
                    std::size_t nflat =
                        static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x) + offsets[o].dx) * m +
                        static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + offsets[o].dy);
                    double nn = norm[ib * plane + nflat];
                    Cand c;
                    c.dscaled = dots[o][at] / gs.temperature;
                    c.finite_norm = nn > 0.0 && norm[at] > 0.0;
                    c.cos = c.finite_norm ? dots[o][at] / (norm[at] * nn) : 0.0;
                    c.flat = nflat;
                    c.offset = o;
                    cands.push_back(c);
                }

                if (norm[at] == 0.0)
                    throw NumericError("generation: anchor embedding has zero norm");
                std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                    if (a.finite_norm != b.finite_norm) return a.finite_norm;
                    if (a.cos != b.cos) return a.cos > b.cos;
                    return a.flat < b.flat;
                });
                std::size_t n_eff =
                    (gs.positives == 0) ? (cands.size() + 1) / 2 : gs.positives;
                n_eff = std::min(n_eff, cands.size());
                require(n_eff > 0 && n_eff < cands.size(),
                        "generation: anchor has an empty positive or negative set");
                valid.mut()[at] = 1.0;
                for (std::size_t ci = 0; ci < cands.size(); ++ci) {
                    bool is_pos = ci < n_eff;
                    (is_pos ? pos_masks : neg_masks)[cands[ci].offset].mut()[at] = 1.0;
                    double& sh = (is_pos ? shift_p : shift_n).mut()[at];
                    bool first = is_pos ? ci == 0 : ci == n_eff;
                    sh = first ? cands[ci].dscaled : std::max(sh, cands[ci].dscaled);
                }
            }

    // Cells that are not anchors at all (upper triangle, stride skips) stay
    // masked out but need the +1 denominator guard below.
    for (std::size_t i = 0; i < b * plane; ++i)
        if (valid.ptr()[i] == 0.0) skipped.mut()[i] = 1.0;

    // Tape side: masked sums of exponentials, each set under its own shift.
    // Exponents are pre-masked so cells outside a set contribute exp(0)*0 and
    // can never overflow no matter how large their dot is.
    Tensor spos, sneg;
    bool first_p = true, first_n = true;
    for (std::size_t o = 0; o < offsets.size(); ++o) {
        Tensor d = scale(sum_axis(mul(lam, shift2d(lam, offsets[o].dx, offsets[o].dy)), 3),
                         1.0 / gs.temperature);
        Tensor ps = mul(exp_t(mul(pos_masks[o], sub(d, shift_p))), pos_masks[o]);
        Tensor ns = mul(exp_t(mul(neg_masks[o], sub(d, shift_n))), neg_masks[o]);
        spos = first_p ? ps : add(spos, ps);
        sneg = first_n ? ns : add(sneg, ns);
        first_p = first_n = false;
    }
    // Guard skipped cells so both logs see 1; with their shifts at 0 the
    // difference is softplus(0), which the valid mask then zeroes out.
    Tensor lse_p = add(shift_p, log_t(add(spos, skipped)));
    Tensor lse_n = add(shift_n, log_t(add(sneg, skipped)));
    Tensor per_anchor = softplus(sub(lse_n, lse_p));
    return sum_all(mul(valid, per_anchor));
}

}  // namespace

GenLossParts gen_loss(const ToyVmmModel& model, const GenSettings& gs, const Tensor& images,
                      const Tensor& targets, Tape* tape) {
    gs.validate();
    std::vector<std::vector<std::vector<std::size_t>>> nbrs;
    for (ScanOrder o : model.orders)
        nbrs.push_back(neighbor_scan_lists(model.dims.grid(), gs.neighborhood, o));

    GenLossParts parts;
    parts.watched = tape ? watch(*tape, images) : images;
    ForwardTensors ft = vmm_forward_t(model, parts.watched, true);
    Tensor lo = output_loss(ft.logits, targets);
    Tensor lc;
    bool first = true;
    for (std::size_t s = 0; s < ft.scans.size(); ++s) {
        Tensor lam = enhanced_embedding_t(ft.scans[s], nbrs[s % model.orders.size()],
                                          gs.uniform_weighting);
        Tensor term = scan_contrastive_term(lam, gs);
        lc = first ? term : add(lc, term);
        first = false;
    }
    parts.total = add(lc, lo);
    parts.contrastive = lc.scalar_value();
    parts.output = lo.scalar_value();
    return parts;
}

GenResult generate(const ToyVmmModel& model, const GenSettings& gs, std::uint64_t seed) {
    gs.validate();
    const ModelDims& dims = model.dims;
    std::size_t pix = dims.image * dims.image * dims.channels;

    SeededRng root(seed);
    SeededRng rng_targets = root.fork(1);
    SeededRng rng_noise = root.fork(2);

    GenResult res;
    res.targets = make_targets(gs.batch, dims.classes, rng_targets);
    Tensor x = init_noise_batch(gs.batch, pix, rng_noise);

    // One history entry per iteration, measured on the images that iteration
    // starts from. After each step every image is projected back onto the
    // normalized-image domain: zero mean, unit variance, pixels within +-4
    // standard deviations. Descent happens on normalized images throughout,
    // which pins the activation scale; without the projection the contrastive
    // loss rewards inflating the embeddings until the landscape curvature
    // outruns any fixed step, and a single spiked pixel can overflow the
    // polynomially deep forward pass.
    constexpr double kPixelClip = 4.0;
    for (std::size_t it = 0; it < gs.iterations; ++it) {
        Tape tape;
        double lc = 0.0, lo = 0.0;
        auto [total, xin] = eval_loss(&tape, &lc, &lo);
        double lval = total.scalar_value();
        if (!std::isfinite(lval))
            throw NumericError("generation loss became non-finite at iteration " +
                               std::to_string(it));
        res.loss_history.push_back(lval);
        res.contrastive_history.push_back(lc);
        res.output_history.push_back(lo);

        tape.backward(total);
        std::vector<double> g = tape.grad_of(xin);
        Tensor xn = Tensor::zeros(x.shape);
        for (std::size_t i = 0; i < x.numel(); ++i)
            xn.mut()[i] = x.ptr()[i] - gs.step_size * g[i];
        for (std::size_t ib = 0; ib < gs.batch; ++ib) {
            double* img = xn.mut() + ib * pix;
            double mean = 0.0;
            for (std::size_t i = 0; i < pix; ++i) mean += img[i];
            mean /= static_cast<double>(pix);
            double var = 0.0;
            for (std::size_t i = 0; i < pix; ++i) var += (img[i] - mean) * (img[i] - mean);
            double sd = std::sqrt(var / static_cast<double>(pix));
            if (!(sd > 0.0))
                throw NumericError("generated image collapsed to a constant at iteration " +
                                   std::to_string(it));
            for (std::size_t i = 0; i < pix; ++i)
                img[i] = std::clamp((img[i] - mean) / sd, -kPixelClip, kPixelClip);
        }
        x = xn;
    }
    res.images = x;
    return res;
}

}  // namespace ouro
