/* C interface for the flatsurr library.
 *
 * Every constructor writes an owned handle through its out-parameter; release
 * it with the matching fs_*_free. Out-parameters are written only when the
 * call returns FS_OK. Error details for the current thread are available via
 * fs_last_error.
 */

#ifndef FLATSURR_H
#define FLATSURR_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fs_status {
  FS_OK = 0,
  FS_ERR_INVALID_ARGUMENT = 1,
  FS_ERR_CONFIG = 2,
  FS_ERR_RUN = 3,
  FS_ERR_IO = 4,
  FS_ERR_FORMAT = 5,
  FS_ERR_NULL_POINTER = 6,
  FS_ERR_UTF8 = 7
} fs_status;

typedef struct fs_dataset fs_dataset;
typedef struct fs_model fs_model;
typedef struct fs_batch fs_batch;

/* Architecture description for model constructors. kind is "mlp",
 * "smallcnn", or "miniresnet". hidden may be NULL when hidden_len is 0. */
typedef struct fs_arch_desc {
  const char *kind;
  size_t width;
  const size_t *hidden;
  size_t hidden_len;
  size_t blocks;
} fs_arch_desc;

/* Library version as a static NUL-terminated string. */
const char *fs_version(void);

/* Copies the current thread's last error message into buf (truncated, always
 * NUL-terminated when cap > 0) and returns the full message length in bytes.
 * Zero means the last call on this thread succeeded. */
size_t fs_last_error(char *buf, size_t cap);

/* ---- datasets ---- */

/* kind is "blobs", "spirals", or "patterned-images". */
fs_status fs_dataset_generate(const char *kind, size_t n, size_t classes,
                              double noise, uint64_t seed, fs_dataset **out);
fs_status fs_dataset_load(const char *path, fs_dataset **out);
fs_status fs_dataset_save(const fs_dataset *ds, const char *path);
fs_status fs_dataset_len(const fs_dataset *ds, size_t *out);

/* rank always receives the number of per-example dimensions; dims is filled
 * only when cap is large enough (pass cap = 0 to query the rank alone). */
fs_status fs_dataset_shape(const fs_dataset *ds, size_t *dims, size_t cap,
                           size_t *rank);

/* Rows [start, start+len) as a new dataset. */
fs_status fs_dataset_slice(const fs_dataset *ds, size_t start, size_t len,
                           fs_dataset **out);
void fs_dataset_free(fs_dataset *ds);

/* ---- models ---- */

fs_status fs_model_new(const fs_arch_desc *desc, const fs_dataset *ds,
                       uint64_t seed, fs_model **out);

/* Trains in place with a named optimizer preset: "sgd", "sam", "l-sam",
 * "asam", "gsam", "agsam", "looksam", "wasam", and their "l-" variants. */
fs_status fs_model_train(fs_model *model, const fs_dataset *ds,
                         const char *optimizer, size_t epochs,
                         size_t batch_size, uint64_t seed);
fs_status fs_model_accuracy(const fs_model *model, const fs_dataset *ds,
                            double *out);
fs_status fs_model_save(const fs_model *model, const char *path);

/* Rebuilds the graph from desc + the dataset's shape/classes and loads the
 * stored parameters, verifying that they fit the architecture. */
fs_status fs_model_load(const fs_arch_desc *desc, const fs_dataset *ds,
                        const char *path, fs_model **out);

/* Curvature measurements at the current parameters, on the first
 * max_examples rows of the dataset. */
fs_status fs_model_sharpness(const fs_model *model, const fs_dataset *ds,
                             size_t max_examples, size_t probes, uint64_t seed,
                             double *lambda_max, double *trace,
                             double *trace_se, double *worst_gap);
void fs_model_free(fs_model *model);

/* ---- attacks ---- */

/* Crafts adversarial examples for every row of ds against model. spec_json
 * is a JSON document with epsilon, iterations, step_size, and optional
 * targeted / techniques fields, e.g.
 *   {"epsilon": 0.03, "iterations": 50, "step_size": 0.003,
 *    "techniques": {"mi": {"decay": 1.2}}}
 */
fs_status fs_attack_run(const fs_model *model, const fs_dataset *ds,
                        const char *spec_json, uint64_t seed, fs_batch **out);
fs_status fs_batch_len(const fs_batch *batch, size_t *out);

/* Fraction of the batch that fools model (or hits the stored target class,
 * for a targeted batch). */
fs_status fs_batch_success_rate(const fs_batch *batch, const fs_model *model,
                                double *out);
fs_status fs_batch_save(const fs_batch *batch, const char *path);
fs_status fs_batch_load(const char *path, fs_batch **out);
void fs_batch_free(fs_batch *batch);

/* ---- statistics ---- */

/* Welch's unequal-variance t-test. alternative: 0 = greater, 1 = less,
 * 2 = two-sided. */
fs_status fs_welch_t_test(const double *a, size_t na, const double *b,
                          size_t nb, int32_t alternative, double *t,
                          double *df, double *p);

/* ---- experiments ---- */

/* Full staged experiment from a configuration file; out_dir may be NULL to
 * use the directory named in the config. */
fs_status fs_run_experiment(const char *config_path, const char *out_dir,
                            size_t threads);

#ifdef __cplusplus
}
#endif

#endif /* FLATSURR_H */
