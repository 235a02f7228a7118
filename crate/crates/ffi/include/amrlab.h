#ifndef AMRLAB_H
#define AMRLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every exported call. Values 2..=4 match the CLI exit codes.
typedef enum AmrlabStatus {
  AMRLAB_STATUS_OK = 0,
  // Null pointer, bad length or non-UTF-8 string.
  AMRLAB_STATUS_INVALID_ARGUMENT = 1,
  AMRLAB_STATUS_CONFIG = 2,
  AMRLAB_STATUS_DATA = 3,
  AMRLAB_STATUS_NUMERIC = 4,
  // A Rust panic was caught at the boundary.
  AMRLAB_STATUS_PANIC = 5,
} AmrlabStatus;

// Loaded AMRDATA dataset.
typedef struct AmrlabDataset AmrlabDataset;

// Loaded model checkpoint.
typedef struct AmrlabModel AmrlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *amrlab_last_error(void);

// Loads an AMRDATA file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum AmrlabStatus amrlab_dataset_load(const char *path, struct AmrlabDataset **out);

// # Safety
// `ds` must come from [`amrlab_dataset_load`] and not be used afterwards.
void amrlab_dataset_free(struct AmrlabDataset *ds);

// Writes sample count, modality count and class count.
//
// # Safety
// `ds` must be a live handle; the out pointers must be writable.
enum AmrlabStatus amrlab_dataset_shape(const struct AmrlabDataset *ds,
                                       size_t *samples,
                                       size_t *modalities,
                                       size_t *classes);

// Feature width of modality `m`.
//
// # Safety
// `ds` must be a live handle; `dim` must be writable.
enum AmrlabStatus amrlab_dataset_modality_dim(const struct AmrlabDataset *ds,
                                              size_t m,
                                              size_t *dim);

// Loads a model checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum AmrlabStatus amrlab_model_load(const char *path, struct AmrlabModel **out);

// # Safety
// `model` must come from [`amrlab_model_load`] and not be used afterwards.
void amrlab_model_free(struct AmrlabModel *model);

// Number of modalities the model expects.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum AmrlabStatus amrlab_model_num_modalities(const struct AmrlabModel *model, size_t *out);

// Batch-mean attribution of `model` on all of `ds`, written to `out[0..len]`
// where `len` must equal the number of modalities.
//
// # Safety
// Handles must be live; `out` must hold `len` doubles.
enum AmrlabStatus amrlab_attribution(const struct AmrlabModel *model,
                                     const struct AmrlabDataset *ds,
                                     double *out,
                                     size_t len);

// L1 distance between normalized `a` and normalized `ratios`.
//
// # Safety
// `a` and `ratios` must hold `m` doubles; `out` must be writable.
enum AmrlabStatus amrlab_amr_loss(const double *a, const double *ratios, size_t m, double *out);

// OGM update coefficients for attribution `a` of length `m`.
//
// # Safety
// `a` and `out` must hold `m` doubles.
enum AmrlabStatus amrlab_ogm_coefficients(const double *a, size_t m, double alpha, double *out);

// mAP of row-major `scores` (`n × c`) against `labels`.
//
// # Safety
// `scores` must hold `n * c` doubles, `labels` `n` entries, `out` one double.
enum AmrlabStatus amrlab_mean_average_precision(const double *scores,
                                                size_t n,
                                                size_t c,
                                                const uint32_t *labels,
                                                double *out);

// Trains one model from a TOML config, as `amrlab train` does. `out_dir`
// may be null to use the directory named in the config.
//
// # Safety
// `config_path` must be a NUL-terminated string; `out_dir` null or one.
enum AmrlabStatus amrlab_train(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMRLAB_H */
