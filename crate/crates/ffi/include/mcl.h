/* C interface for the mcl semi-supervised domain adaptation lab.
 *
 * Link against the `mcl_ffi` cdylib or staticlib. All handles are opaque;
 * fallible calls return an mcl_status and leave a thread-local message
 * readable through mcl_last_error().
 *
 * Kept in sync with crates/ffi/src/lib.rs by hand; the Rust test suite
 * exercises every declaration below.
 */

#ifndef MCL_H
#define MCL_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mcl_status {
    MCL_OK = 0,
    MCL_ERR = 1,
    MCL_ERR_CONFIG = 2,
    MCL_ERR_RUNTIME = 3
} mcl_status;

/* Opaque run configuration (flat key = value model). */
typedef struct mcl_config mcl_config;

/* Opaque finished training run. */
typedef struct mcl_run mcl_run;

/* Library version string; static storage, do not free. */
const char *mcl_version(void);

/* Last error message for this thread; valid until the next failing call. */
const char *mcl_last_error(void);

/* --- configuration ------------------------------------------------ */

mcl_config *mcl_config_new(void);
void mcl_config_free(mcl_config *cfg);

/* Set one key (e.g. "dataset", "two_moons"). Unknown keys are rejected
 * with MCL_ERR_CONFIG. */
mcl_status mcl_config_set(mcl_config *cfg, const char *key, const char *value);

/* Replace the handle's contents with a parsed config file. */
mcl_status mcl_config_load(mcl_config *cfg, const char *path);

/* --- datasets ------------------------------------------------------ */

/* Generate the configured benchmark and write
 * <out_prefix>_source.csv and <out_prefix>_target.csv. */
mcl_status mcl_generate_csv(const mcl_config *cfg, const char *out_prefix);

/* --- training ------------------------------------------------------ */

/* Run a full training; on MCL_OK, *out owns the run handle. */
mcl_status mcl_train(const mcl_config *cfg, mcl_run **out);
void mcl_run_free(mcl_run *run);

/* Final overall accuracy / mean class-wise accuracy on the evaluation
 * pool. NaN if run is NULL. */
double mcl_run_accuracy(const mcl_run *run);
double mcl_run_mean_class_accuracy(const mcl_run *run);

/* 1 if the run stopped early on a non-finite loss. */
int mcl_run_diverged(const mcl_run *run);

/* Metrics table: row count, and the CSV rendering (free the string with
 * mcl_string_free). */
size_t mcl_run_metrics_rows(const mcl_run *run);
char *mcl_run_metrics_csv(const mcl_run *run);
void mcl_string_free(char *s);

#ifdef __cplusplus
}
#endif

#endif /* MCL_H */
