#include "ouro/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "ouro/tensor_io.hpp"

namespace ouro {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
        std::uint64_t r = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError("config: " + key + ": expected a non-negative integer, got '" + v + "'");
    }
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double r = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ValidationError("config: " + key + ": expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ValidationError("config: " + key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::istringstream in(v);
    std::string tok;
    while (std::getline(in, tok, ',')) out.push_back(trim(tok));
    return out;
}

std::string join_sizes(const std::vector<std::size_t>& v, bool zero_is_full) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += (zero_is_full && v[i] == 0) ? "full" : std::to_string(v[i]);
    }
    return out;
}

std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v,
                                     bool zero_is_full) {
    std::vector<std::size_t> out;
    for (const std::string& tok : split_list(v)) {
        if (zero_is_full && tok == "full")
            out.push_back(0);
        else
            out.push_back(parse_u64(key, tok));
    }
    if (out.empty()) throw ValidationError("config: " + key + ": empty list");
    return out;
}

// One entry per key: how to print the current value and how to assign a
// parsed one. The same table drives parsing, overrides and the canonical echo.
struct KeyDef {
    const char* section;
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<KeyDef>& key_table() {
    auto u64 = [](const std::string& k, const std::string& v, std::size_t lo) {
        std::uint64_t r = parse_u64(k, v);
        if (r < lo) throw ValidationError("config: " + k + ": must be >= " + std::to_string(lo));
        return static_cast<std::size_t>(r);
    };
    static const std::vector<KeyDef> table = {
        {"model", "seed", [](const RunConfig& c) { return std::to_string(c.model.seed); },
         [](RunConfig& c, const std::string& v) {
             c.model.seed = parse_u64("model.seed", v);
             c.model.seed_set = true;
         }},
        {"model", "image", [](const RunConfig& c) { return std::to_string(c.model.image); },
         [u64](RunConfig& c, const std::string& v) { c.model.image = u64("model.image", v, 1); }},
        {"model", "channels", [](const RunConfig& c) { return std::to_string(c.model.channels); },
         [u64](RunConfig& c, const std::string& v) { c.model.channels = u64("model.channels", v, 1); }},
        {"model", "patch", [](const RunConfig& c) { return std::to_string(c.model.patch); },
         [u64](RunConfig& c, const std::string& v) { c.model.patch = u64("model.patch", v, 1); }},
        {"model", "embed", [](const RunConfig& c) { return std::to_string(c.model.embed); },
         [u64](RunConfig& c, const std::string& v) { c.model.embed = u64("model.embed", v, 1); }},
        {"model", "state", [](const RunConfig& c) { return std::to_string(c.model.state); },
         [u64](RunConfig& c, const std::string& v) { c.model.state = u64("model.state", v, 1); }},
        {"model", "blocks", [](const RunConfig& c) { return std::to_string(c.model.blocks); },
         [u64](RunConfig& c, const std::string& v) { c.model.blocks = u64("model.blocks", v, 1); }},
        {"model", "classes", [](const RunConfig& c) { return std::to_string(c.model.classes); },
         [u64](RunConfig& c, const std::string& v) { c.model.classes = u64("model.classes", v, 1); }},
        {"model", "conv_width",
         [](const RunConfig& c) { return std::to_string(c.model.conv_width); },
         [u64](RunConfig& c, const std::string& v) { c.model.conv_width = u64("model.conv_width", v, 1); }},
        {"model", "scan_orders",
         [](const RunConfig& c) {
             std::string out;
             for (std::size_t i = 0; i < c.model.scan_orders.size(); ++i)
                 out += (i ? "," : "") + scan_order_name(c.model.scan_orders[i]);
             return out;
         },
         [](RunConfig& c, const std::string& v) {
             c.model.scan_orders.clear();
             for (const std::string& tok : split_list(v))
                 c.model.scan_orders.push_back(scan_order_from_name(tok));
             if (c.model.scan_orders.empty())
                 throw ValidationError("config: model.scan_orders: need at least one");
         }},
        {"model", "checkpoint", [](const RunConfig& c) { return c.model.checkpoint; },
         [](RunConfig& c, const std::string& v) { c.model.checkpoint = v; }},

        {"gen", "iterations", [](const RunConfig& c) { return std::to_string(c.gen.iterations); },
         [u64](RunConfig& c, const std::string& v) { c.gen.iterations = u64("gen.iterations", v, 1); }},
        {"gen", "neighborhood",
         [](const RunConfig& c) { return std::to_string(c.gen.neighborhood); },
         [u64](RunConfig& c, const std::string& v) { c.gen.neighborhood = u64("gen.neighborhood", v, 1); }},
        {"gen", "positives",
         [](const RunConfig& c) {
             return c.gen.positives == 0 ? std::string("auto") : std::to_string(c.gen.positives);
         },
         [](RunConfig& c, const std::string& v) {
             c.gen.positives = v == "auto" ? 0 : parse_u64("gen.positives", v);
         }},
        {"gen", "batch", [](const RunConfig& c) { return std::to_string(c.gen.batch); },
         [u64](RunConfig& c, const std::string& v) { c.gen.batch = u64("gen.batch", v, 1); }},
        {"gen", "temperature", [](const RunConfig& c) { return fmt_double(c.gen.temperature); },
         [](RunConfig& c, const std::string& v) { c.gen.temperature = parse_f64("gen.temperature", v); }},
        {"gen", "step_size", [](const RunConfig& c) { return fmt_double(c.gen.step_size); },
         [](RunConfig& c, const std::string& v) { c.gen.step_size = parse_f64("gen.step_size", v); }},
        {"gen", "anchor_stride",
         [](const RunConfig& c) { return std::to_string(c.gen.anchor_stride); },
         [u64](RunConfig& c, const std::string& v) { c.gen.anchor_stride = u64("gen.anchor_stride", v, 1); }},
        {"gen", "weighting", [](const RunConfig& c) { return c.gen.weighting; },
         [](RunConfig& c, const std::string& v) { c.gen.weighting = v; }},

        {"quant", "weight_bits",
         [](const RunConfig& c) { return std::to_string(c.quant.weight_bits); },
         [u64](RunConfig& c, const std::string& v) {
             c.quant.weight_bits = static_cast<unsigned>(u64("quant.weight_bits", v, 2));
         }},
        {"quant", "act_bits", [](const RunConfig& c) { return std::to_string(c.quant.act_bits); },
         [u64](RunConfig& c, const std::string& v) {
             c.quant.act_bits = static_cast<unsigned>(u64("quant.act_bits", v, 2));
         }},
        {"quant", "outlier_bits",
         [](const RunConfig& c) { return std::to_string(c.quant.outlier_bits); },
         [u64](RunConfig& c, const std::string& v) {
             c.quant.outlier_bits = static_cast<unsigned>(u64("quant.outlier_bits", v, 2));
         }},
        {"quant", "n_refresh",
         [](const RunConfig& c) {
             return c.quant.n_refresh == 0 ? std::string("full") : std::to_string(c.quant.n_refresh);
         },
         [](RunConfig& c, const std::string& v) {
             c.quant.n_refresh = v == "full" ? 0 : parse_u64("quant.n_refresh", v);
         }},
        {"quant", "outlier_quantile",
         [](const RunConfig& c) { return fmt_double(c.quant.outlier_quantile); },
         [](RunConfig& c, const std::string& v) {
             c.quant.outlier_quantile = parse_f64("quant.outlier_quantile", v);
         }},
        {"quant", "spike_rate", [](const RunConfig& c) { return fmt_double(c.quant.spike_rate); },
         [](RunConfig& c, const std::string& v) { c.quant.spike_rate = parse_f64("quant.spike_rate", v); }},
        {"quant", "spike_gain", [](const RunConfig& c) { return fmt_double(c.quant.spike_gain); },
         [](RunConfig& c, const std::string& v) { c.quant.spike_gain = parse_f64("quant.spike_gain", v); }},
        {"quant", "spike_channels",
         [](const RunConfig& c) { return std::to_string(c.quant.spike_channels); },
         [u64](RunConfig& c, const std::string& v) {
             c.quant.spike_channels = u64("quant.spike_channels", v, 1);
         }},
        {"quant", "eval_batch",
         [](const RunConfig& c) { return std::to_string(c.quant.eval_batch); },
         [u64](RunConfig& c, const std::string& v) { c.quant.eval_batch = u64("quant.eval_batch", v, 1); }},
        {"quant", "mode", [](const RunConfig& c) { return c.quant.mode; },
         [](RunConfig& c, const std::string& v) { c.quant.mode = v; }},

        {"gemm", "mode", [](const RunConfig& c) { return c.gemm.mode; },
         [](RunConfig& c, const std::string& v) { c.gemm.mode = v; }},
        {"gemm", "sizes", [](const RunConfig& c) { return join_sizes(c.gemm.sizes, false); },
         [](RunConfig& c, const std::string& v) { c.gemm.sizes = parse_sizes("gemm.sizes", v, false); }},
        {"gemm", "outlier_fraction",
         [](const RunConfig& c) { return fmt_double(c.gemm.outlier_fraction); },
         [](RunConfig& c, const std::string& v) {
             c.gemm.outlier_fraction = parse_f64("gemm.outlier_fraction", v);
         }},
        {"gemm", "trials", [](const RunConfig& c) { return std::to_string(c.gemm.trials); },
         [u64](RunConfig& c, const std::string& v) { c.gemm.trials = u64("gemm.trials", v, 1); }},
        {"gemm", "threads", [](const RunConfig& c) { return std::to_string(c.gemm.threads); },
         [u64](RunConfig& c, const std::string& v) {
             c.gemm.threads = static_cast<int>(u64("gemm.threads", v, 1));
         }},
        {"gemm", "f16_output",
         [](const RunConfig& c) { return std::string(c.gemm.f16_output ? "true" : "false"); },
         [](RunConfig& c, const std::string& v) { c.gemm.f16_output = parse_bool("gemm.f16_output", v); }},
        {"gemm", "refresh_periods",
         [](const RunConfig& c) { return join_sizes(c.gemm.refresh_periods, true); },
         [](RunConfig& c, const std::string& v) {
             c.gemm.refresh_periods = parse_sizes("gemm.refresh_periods", v, true);
         }},
        {"gemm", "sweep_steps",
         [](const RunConfig& c) { return std::to_string(c.gemm.sweep_steps); },
         [u64](RunConfig& c, const std::string& v) { c.gemm.sweep_steps = u64("gemm.sweep_steps", v, 2); }},
        {"gemm", "sweep_m", [](const RunConfig& c) { return std::to_string(c.gemm.sweep_m); },
         [u64](RunConfig& c, const std::string& v) { c.gemm.sweep_m = u64("gemm.sweep_m", v, 1); }},
        {"gemm", "sweep_k", [](const RunConfig& c) { return std::to_string(c.gemm.sweep_k); },
         [u64](RunConfig& c, const std::string& v) { c.gemm.sweep_k = u64("gemm.sweep_k", v, 1); }},
        {"gemm", "sweep_c", [](const RunConfig& c) { return std::to_string(c.gemm.sweep_c); },
         [u64](RunConfig& c, const std::string& v) { c.gemm.sweep_c = u64("gemm.sweep_c", v, 1); }},
        {"gemm", "sweep_persistent",
         [](const RunConfig& c) { return std::to_string(c.gemm.sweep_persistent); },
         [u64](RunConfig& c, const std::string& v) {
             c.gemm.sweep_persistent = u64("gemm.sweep_persistent", v, 0);
         }},
        {"gemm", "sweep_transient_rate",
         [](const RunConfig& c) { return fmt_double(c.gemm.sweep_transient_rate); },
         [](RunConfig& c, const std::string& v) {
             c.gemm.sweep_transient_rate = parse_f64("gemm.sweep_transient_rate", v);
         }},
        {"gemm", "sweep_spike_gain",
         [](const RunConfig& c) { return fmt_double(c.gemm.sweep_spike_gain); },
         [](RunConfig& c, const std::string& v) {
             c.gemm.sweep_spike_gain = parse_f64("gemm.sweep_spike_gain", v);
         }},
    };
    return table;
}

const KeyDef* find_key(const std::string& section, const std::string& key) {
    for (const KeyDef& d : key_table())
        if (section == d.section && key == d.key) return &d;
    return nullptr;
}

}  // namespace

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void RunConfig::validate() const {
    require(model.seed_set, "config: model.seed is required");
    ModelDims dims{model.image,  model.channels, model.patch,   model.embed,
                   model.state,  model.blocks,   model.classes, model.conv_width};
    dims.validate();
    require(gen.neighborhood % 2 == 1, "config: gen.neighborhood must be odd");
    require(gen.temperature > 0.0, "config: gen.temperature must be positive");
    require(gen.step_size > 0.0, "config: gen.step_size must be positive");
    require(gen.weighting == "delta" || gen.weighting == "uniform",
            "config: gen.weighting must be delta or uniform");
    require(quant.outlier_bits <= 8, "config: quant.outlier_bits must be <= 8");
    require(quant.act_bits <= quant.outlier_bits,
            "config: quant.act_bits must not exceed quant.outlier_bits");
    require(quant.outlier_quantile >= 0.0 && quant.outlier_quantile < 1.0,
            "config: quant.outlier_quantile must be in [0, 1)");
    require(quant.spike_rate >= 0.0 && quant.spike_rate <= 1.0,
            "config: quant.spike_rate must be in [0, 1]");
    require(quant.mode == "dynamic" || quant.mode == "static" || quant.mode == "bypass",
            "config: quant.mode must be dynamic, static or bypass");
    require(gemm.mode == "sizes" || gemm.mode == "refresh-sweep",
            "config: gemm.mode must be sizes or refresh-sweep");
    require(gemm.outlier_fraction >= 0.0 && gemm.outlier_fraction <= 1.0,
            "config: gemm.outlier_fraction must be in [0, 1]");
    require(gemm.sweep_transient_rate >= 0.0 && gemm.sweep_transient_rate <= 1.0,
            "config: gemm.sweep_transient_rate must be in [0, 1]");
    require(gemm.sweep_spike_gain > 1.0, "config: gemm.sweep_spike_gain must exceed 1");
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            if (section != "model" && section != "gen" && section != "quant" &&
                section != "gemm" && section != "run")
                throw ValidationError("config line " + std::to_string(lineno) +
                                      ": unknown section [" + section + "]");
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(lineno) +
                                  ": expected key = value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw ValidationError("config line " + std::to_string(lineno) +
                                  ": key '" + key + "' appears before any [section]");
        if (section == "run") {
            // Manifests carry a [run] section describing how they were made;
            // it is informational, not configuration, so any key passes.
            continue;
        }
        const KeyDef* def = find_key(section, key);
        if (!def)
            throw ValidationError("config line " + std::to_string(lineno) + ": unknown key " +
                                  section + "." + key);
        def->set(c, value);
    }
    // Cross-field validation happens when a stage runs, so a base config can
    // be loaded first and completed through overrides.
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    return parse_config_text(read_text_file(path));
}

void apply_override(RunConfig& c, const std::string& spec) {
    std::size_t eq = spec.find('=');
    require(eq != std::string::npos, "override '" + spec + "': expected section.key=value");
    std::string path = trim(spec.substr(0, eq));
    std::string value = trim(spec.substr(eq + 1));
    std::size_t dot = path.find('.');
    require(dot != std::string::npos, "override '" + spec + "': expected section.key=value");
    const KeyDef* def = find_key(path.substr(0, dot), path.substr(dot + 1));
    if (!def) throw ValidationError("override: unknown key " + path);
    def->set(c, value);
}

bool apply_env_seed(RunConfig& c) {
    const char* env = std::getenv("OURO_SEED");
    if (!env || !*env) return false;
    c.model.seed = parse_u64("OURO_SEED", env);
    c.model.seed_set = true;
    c.seed_source = "env";
    return true;
}

std::string canonical_config_text(const RunConfig& c) {
    std::string out;
    std::string section;
    for (const KeyDef& d : key_table()) {
        if (section != d.section) {
            if (!section.empty()) out += "\n";
            section = d.section;
            out += "[" + section + "]\n";
        }
        out += std::string(d.key) + " = " + d.get(c) + "\n";
    }
    return out;
}

std::string run_id_of(const RunConfig& c) {
    std::string text = canonical_config_text(c);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string manifest_text(const RunConfig& c, const std::string& stage,
                          const std::vector<std::pair<std::string, std::string>>& extra) {
    std::string out = canonical_config_text(c);
    out += "\n[run]\n";
    out += "run_id = " + run_id_of(c) + "\n";
    out += "stage = " + stage + "\n";
    out += "seed_source = " + c.seed_source + "\n";
    for (const auto& [k, v] : extra) out += k + " = " + v + "\n";
    return out;
}

std::string format_metrics_line(const std::string& run_id, const std::string& stage,
                                const std::vector<std::pair<std::string, std::string>>& kv) {
    std::string out = "run=" + run_id + " stage=" + stage;
    for (const auto& [k, v] : kv) {
        require(k.find_first_of(" =\n") == std::string::npos &&
                    v.find_first_of(" \n") == std::string::npos,
                "metrics: keys and values must not contain spaces or newlines");
        out += " " + k + "=" + v;
    }
    return out + "\n";
}

std::vector<MetricsLine> parse_metrics(const std::string& text) {
    std::vector<MetricsLine> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        MetricsLine ml;
        std::istringstream ls(line);
        std::string tok;
        while (ls >> tok) {
            std::size_t eq = tok.find('=');
            if (eq == std::string::npos)
                throw IoError("metrics: malformed token '" + tok + "' in line: " + line);
            std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
            if (k == "run")
                ml.run = v;
            else if (k == "stage")
                ml.stage = v;
            else
                ml.kv.emplace_back(k, v);
        }
        if (ml.run.empty() || ml.stage.empty())
            throw IoError("metrics: line missing run or stage tag: " + line);
        out.push_back(std::move(ml));
    }
    return out;
}

}  // namespace ouro
