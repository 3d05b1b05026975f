#ifndef OUROMAMBA_H
#define OUROMAMBA_H

/*
 * C interface to the quantization-lab core. All functions return a status
 * code; on failure, ouro_last_error() describes what went wrong. Handles are
 * opaque and freed with their matching _free call. The library keeps no
 * global state besides the per-thread error message, so independent handles
 * may be used from different threads.
 */

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ouro_status {
    OURO_OK = 0,
    OURO_ERR_VALIDATION = 2, /* bad arguments, config or file contents */
    OURO_ERR_NUMERIC = 3,    /* non-finite values or numeric failure */
    OURO_ERR_IO = 4          /* missing, unreadable or unwritable files */
} ouro_status;

typedef struct ouro_config ouro_config;
typedef struct ouro_model ouro_model;

const char* ouro_version(void);

/* Message from the most recent failing call on this thread; "" if none. */
const char* ouro_last_error(void);

/* A NULL path yields the built-in defaults (a seed must still be set before
 * any stage runs). */
ouro_status ouro_config_load(const char* path, ouro_config** out);
ouro_status ouro_config_parse(const char* text, ouro_config** out);
void ouro_config_free(ouro_config* cfg);

/* "section.key=value", e.g. "model.seed=7". */
ouro_status ouro_config_set(ouro_config* cfg, const char* spec);
/* Applies the OURO_SEED environment variable if present; *overrode reports
 * whether it did (may be NULL). */
ouro_status ouro_config_apply_env(ouro_config* cfg, int* overrode);
/* Canonical echo of the resolved config / its content hash. The returned
 * pointers stay owned by the handle and are invalidated by the next call on
 * it. */
const char* ouro_config_text(ouro_config* cfg);
const char* ouro_config_run_id(ouro_config* cfg);

/* Builds weights from the config: from model.checkpoint when set, otherwise
 * seeded from model.seed. */
ouro_status ouro_model_create(const ouro_config* cfg, ouro_model** out);
ouro_status ouro_model_load(const char* dir, ouro_model** out);
ouro_status ouro_model_save(const ouro_model* m, const char* dir);
void ouro_model_free(ouro_model* m);

/* Pipeline stages. Each writes its artifacts plus a manifest into out_dir;
 * reruns with identical configs produce byte-identical files. loss_log and
 * images_file may be NULL where marked. */
ouro_status ouro_gen(const ouro_config* cfg, const char* out_dir,
                     const char* loss_log /* nullable */);
ouro_status ouro_calib(const ouro_config* cfg, const char* images_file, const char* out_dir);
ouro_status ouro_quant_eval(const ouro_config* cfg, const char* calib_dir,
                            const char* images_file, const char* out_dir);
ouro_status ouro_attn_dump(const ouro_config* cfg, const char* images_file /* nullable */,
                           const char* out_dir);
ouro_status ouro_gemm_bench(const ouro_config* cfg, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif /* OUROMAMBA_H */
