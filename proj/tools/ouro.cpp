// Command-line front end for the quantization lab. Talks to the core purely
// through the C API so it doubles as a smoke test of the shared library.

#include <ouromamba.h>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace {

struct ConfigDeleter {
    void operator()(ouro_config* c) const { ouro_config_free(c); }
};
using ConfigPtr = std::unique_ptr<ouro_config, ConfigDeleter>;

int fail(const char* stage, ouro_status st) {
    std::cerr << "ouro " << stage << ": " << ouro_last_error() << "\n";
    return static_cast<int>(st);
}

// Loads the config file (or defaults), applies --set/--seed/--threads in
// command-line order, then lets OURO_SEED have the final word.
int build_config(const std::string& path, const std::vector<std::string>& sets,
                 ConfigPtr& out) {
    ouro_config* raw = nullptr;
    ouro_status st = ouro_config_load(path.empty() ? nullptr : path.c_str(), &raw);
    if (st != OURO_OK) return fail("config", st);
    out.reset(raw);
    for (const auto& s : sets) {
        st = ouro_config_set(out.get(), s.c_str());
        if (st != OURO_OK) return fail("config", st);
    }
    st = ouro_config_apply_env(out.get(), nullptr);
    if (st != OURO_OK) return fail("config", st);
    return 0;
}

void print_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return;
    std::cout << in.rdbuf();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"data-free quantization lab for selective-scan vision models"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(ouro_version()));

    std::string config_path;
    std::vector<std::string> sets;
    std::string seed_arg;
    std::string threads_arg;

    // Shared options are registered per subcommand so help stays local.
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("-c,--config", config_path, "config file (defaults when omitted)");
        cmd->add_option("--set", sets, "override, section.key=value (repeatable)")
            ->take_all();
        cmd->add_option("--seed", seed_arg, "shorthand for --set model.seed=N");
        cmd->add_option("--threads", threads_arg, "shorthand for --set gemm.threads=N");
    };

    std::string out_dir;
    std::string images_file;
    std::string calib_dir;
    std::string loss_log;

    CLI::App* gen = app.add_subcommand("gen", "generate synthetic calibration images");
    add_common(gen);
    gen->add_option("-o,--out", out_dir, "output directory")->required();
    gen->add_option("--loss-log", loss_log, "write per-iteration losses to this file");

    CLI::App* calib = app.add_subcommand("calib", "calibrate activation scales on an image file");
    add_common(calib);
    calib->add_option("--images", images_file, "input image tensor file")->required();
    calib->add_option("-o,--out", out_dir, "output directory")->required();

    CLI::App* qe = app.add_subcommand("quant-eval", "compare quantized against full-precision forward");
    add_common(qe);
    qe->add_option("--calib", calib_dir, "calibration directory from the calib stage")->required();
    qe->add_option("--images", images_file, "input image tensor file")->required();
    qe->add_option("-o,--out", out_dir, "output directory")->required();

    CLI::App* attn = app.add_subcommand("attn-dump", "dump implicit attention maps");
    add_common(attn);
    attn->add_option("--images", images_file, "image tensor file (seeded noise when omitted)");
    attn->add_option("-o,--out", out_dir, "output directory")->required();

    CLI::App* bench = app.add_subcommand("gemm-bench", "time the hybrid kernel against a float baseline");
    add_common(bench);
    bench->add_option("-o,--out", out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        // CLI11 returns 0 for --help/--version; treat real parse errors as
        // validation failures.
        return code == 0 ? 0 : static_cast<int>(OURO_ERR_VALIDATION);
    }

    if (!seed_arg.empty()) sets.push_back("model.seed=" + seed_arg);
    if (!threads_arg.empty()) sets.push_back("gemm.threads=" + threads_arg);

    ConfigPtr cfg;
    if (int rc = build_config(config_path, sets, cfg); rc != 0) return rc;

    ouro_status st = OURO_OK;
    if (gen->parsed()) {
        st = ouro_gen(cfg.get(), out_dir.c_str(), loss_log.empty() ? nullptr : loss_log.c_str());
        if (st != OURO_OK) return fail("gen", st);
    } else if (calib->parsed()) {
        st = ouro_calib(cfg.get(), images_file.c_str(), out_dir.c_str());
        if (st != OURO_OK) return fail("calib", st);
    } else if (qe->parsed()) {
        st = ouro_quant_eval(cfg.get(), calib_dir.c_str(), images_file.c_str(), out_dir.c_str());
        if (st != OURO_OK) return fail("quant-eval", st);
        print_file(out_dir + "/metrics.txt");
    } else if (attn->parsed()) {
        st = ouro_attn_dump(cfg.get(), images_file.empty() ? nullptr : images_file.c_str(),
                            out_dir.c_str());
        if (st != OURO_OK) return fail("attn-dump", st);
    } else if (bench->parsed()) {
        st = ouro_gemm_bench(cfg.get(), out_dir.c_str());
        if (st != OURO_OK) return fail("gemm-bench", st);
        print_file(out_dir + "/records.csv");
    }
    return 0;
}
