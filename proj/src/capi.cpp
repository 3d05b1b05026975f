#include "ouromamba.h"

#include "ouro/common.hpp"
#include "ouro/config.hpp"
#include "ouro/pipeline.hpp"
#include "ouro/ssm.hpp"

#include <exception>
#include <string>
#include <utility>

namespace {

thread_local std::string g_last_error;

// Wraps a callable, mapping exceptions to status codes and stashing the
// message for ouro_last_error().
template <typename Fn>
ouro_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return OURO_OK;
    } catch (const ouro::ValidationError& e) {
        g_last_error = e.what();
        return OURO_ERR_VALIDATION;
    } catch (const ouro::NumericError& e) {
        g_last_error = e.what();
        return OURO_ERR_NUMERIC;
    } catch (const ouro::IoError& e) {
        g_last_error = e.what();
        return OURO_ERR_IO;
    } catch (const std::exception& e) {
        g_last_error = std::string("internal error: ") + e.what();
        return OURO_ERR_VALIDATION;
    }
}

} // namespace

struct ouro_config {
    ouro::RunConfig cfg;
    // Backing stores for the const char* accessors.
    std::string text;
    std::string run_id;
};

struct ouro_model {
    ouro::ToyVmmModel model;
};

extern "C" {

const char* ouro_version(void) { return "1.0.0"; }

const char* ouro_last_error(void) { return g_last_error.c_str(); }

ouro_status ouro_config_load(const char* path, ouro_config** out) {
    return guarded([&] {
        ouro::require(out != nullptr, "config_load: out is NULL");
        auto* h = new ouro_config{};
        if (path != nullptr) {
            try {
                h->cfg = ouro::load_config(path);
            } catch (...) {
                delete h;
                throw;
            }
        }
        *out = h;
    });
}

ouro_status ouro_config_parse(const char* text, ouro_config** out) {
    return guarded([&] {
        ouro::require(text != nullptr, "config_parse: text is NULL");
        ouro::require(out != nullptr, "config_parse: out is NULL");
        auto* h = new ouro_config{};
        try {
            h->cfg = ouro::parse_config_text(text);
        } catch (...) {
            delete h;
            throw;
        }
        *out = h;
    });
}

void ouro_config_free(ouro_config* cfg) { delete cfg; }

ouro_status ouro_config_set(ouro_config* cfg, const char* spec) {
    return guarded([&] {
        ouro::require(cfg != nullptr, "config_set: cfg is NULL");
        ouro::require(spec != nullptr, "config_set: spec is NULL");
        ouro::apply_override(cfg->cfg, spec);
    });
}

ouro_status ouro_config_apply_env(ouro_config* cfg, int* overrode) {
    return guarded([&] {
        ouro::require(cfg != nullptr, "config_apply_env: cfg is NULL");
        bool hit = ouro::apply_env_seed(cfg->cfg);
        if (overrode != nullptr) *overrode = hit ? 1 : 0;
    });
}

const char* ouro_config_text(ouro_config* cfg) {
    if (cfg == nullptr) return "";
    ouro_status st = guarded([&] { cfg->text = ouro::canonical_config_text(cfg->cfg); });
    return st == OURO_OK ? cfg->text.c_str() : "";
}

const char* ouro_config_run_id(ouro_config* cfg) {
    if (cfg == nullptr) return "";
    ouro_status st = guarded([&] { cfg->run_id = ouro::run_id_of(cfg->cfg); });
    return st == OURO_OK ? cfg->run_id.c_str() : "";
}

ouro_status ouro_model_create(const ouro_config* cfg, ouro_model** out) {
    return guarded([&] {
        ouro::require(cfg != nullptr, "model_create: cfg is NULL");
        ouro::require(out != nullptr, "model_create: out is NULL");
        auto* h = new ouro_model{};
        try {
            h->model = ouro::model_from_config(cfg->cfg);
        } catch (...) {
            delete h;
            throw;
        }
        *out = h;
    });
}

ouro_status ouro_model_load(const char* dir, ouro_model** out) {
    return guarded([&] {
        ouro::require(dir != nullptr, "model_load: dir is NULL");
        ouro::require(out != nullptr, "model_load: out is NULL");
        auto* h = new ouro_model{};
        try {
            h->model = ouro::load_model(dir);
        } catch (...) {
            delete h;
            throw;
        }
        *out = h;
    });
}

ouro_status ouro_model_save(const ouro_model* m, const char* dir) {
    return guarded([&] {
        ouro::require(m != nullptr, "model_save: model is NULL");
        ouro::require(dir != nullptr, "model_save: dir is NULL");
        ouro::save_model(m->model, dir);
    });
}

void ouro_model_free(ouro_model* m) { delete m; }

ouro_status ouro_gen(const ouro_config* cfg, const char* out_dir, const char* loss_log) {
    return guarded([&] {
        ouro::require(cfg != nullptr, "gen: cfg is NULL");
        ouro::require(out_dir != nullptr, "gen: out_dir is NULL");
        ouro::run_gen(cfg->cfg, out_dir, loss_log != nullptr ? loss_log : "");
    });
}

ouro_status ouro_calib(const ouro_config* cfg, const char* images_file, const char* out_dir) {
    return guarded([&] {
        ouro::require(cfg != nullptr, "calib: cfg is NULL");
        ouro::require(images_file != nullptr, "calib: images_file is NULL");
        ouro::require(out_dir != nullptr, "calib: out_dir is NULL");
        ouro::run_calib(cfg->cfg, images_file, out_dir);
    });
}

ouro_status ouro_quant_eval(const ouro_config* cfg, const char* calib_dir,
                            const char* images_file, const char* out_dir) {
    return guarded([&] {
        ouro::require(cfg != nullptr, "quant_eval: cfg is NULL");
        ouro::require(calib_dir != nullptr, "quant_eval: calib_dir is NULL");
        ouro::require(images_file != nullptr,
                      "quant_eval: images_file is NULL");
        ouro::require(out_dir != nullptr, "quant_eval: out_dir is NULL");
        ouro::run_quant_eval(cfg->cfg, calib_dir, images_file, out_dir);
    });
}

ouro_status ouro_attn_dump(const ouro_config* cfg, const char* images_file, const char* out_dir) {
    return guarded([&] {
        ouro::require(cfg != nullptr, "attn_dump: cfg is NULL");
        ouro::require(out_dir != nullptr, "attn_dump: out_dir is NULL");
        ouro::run_attn_dump(cfg->cfg, images_file != nullptr ? images_file : "", out_dir);
    });
}

ouro_status ouro_gemm_bench(const ouro_config* cfg, const char* out_dir) {
    return guarded([&] {
        ouro::require(cfg != nullptr, "gemm_bench: cfg is NULL");
        ouro::require(out_dir != nullptr, "gemm_bench: out_dir is NULL");
        ouro::run_gemm_bench(cfg->cfg, out_dir);
    });
}

} // extern "C"
