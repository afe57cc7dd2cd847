#ifndef PURIFY_H
#define PURIFY_H

/* Generated by cbindgen from the purify-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a library call. Every function stores the status of its most
// recent invocation per thread, readable via [`purify_last_status`].
typedef enum PurifyStatus {
  PURIFY_STATUS_OK = 0,
  // A required pointer argument was null.
  PURIFY_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  PURIFY_STATUS_INVALID_UTF8 = 2,
  // A configuration value is out of range or inconsistent.
  PURIFY_STATUS_CONFIG_ERROR = 3,
  // Buffer or matrix dimensions do not line up.
  PURIFY_STATUS_SHAPE_ERROR = 4,
  // A dataset violates a structural requirement.
  PURIFY_STATUS_DATA_ERROR = 5,
  // Reading or writing a file failed.
  PURIFY_STATUS_IO_ERROR = 6,
  // A persisted artifact could not be parsed.
  PURIFY_STATUS_PARSE_ERROR = 7,
  // Training diverged or produced non-finite values.
  PURIFY_STATUS_NUMERIC_ERROR = 8,
  // A pipeline stage failed.
  PURIFY_STATUS_STAGE_ERROR = 9,
  // The call panicked inside the library; state may be inconsistent.
  PURIFY_STATUS_PANIC = 10,
} PurifyStatus;

// A trained classifier loaded from a saved network file.
typedef struct PurifyModel PurifyModel;

// A trained purifier loaded from its bundle directory.
typedef struct PurifyPurifier PurifyPurifier;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Returns the library version as a static NUL-terminated string.
const char *purify_version(void);

// Returns the status of the current thread's most recent library call.
enum PurifyStatus purify_last_status(void);

// Returns the error message of the current thread's most recent failed
// call, or null if that call succeeded. The pointer stays valid until this
// thread's next library call.
const char *purify_last_error(void);

// Loads a trained classifier from a network file saved by the `purify`
// tool. Returns null on failure; destroy the handle with
// [`purify_model_free`].
//
// # Safety
// `path` must be null or point to a NUL-terminated string.
struct PurifyModel *purify_model_load(const char *path);

// Destroys a model handle. Null is ignored.
//
// # Safety
// `model` must be null or a pointer returned by [`purify_model_load`] that
// has not been freed; it must not be used afterwards.
void purify_model_free(struct PurifyModel *model);

// Returns the number of input features the model consumes, or 0 if the
// handle is null.
//
// # Safety
// `model` must be null or a live pointer from [`purify_model_load`].
uintptr_t purify_model_input_dim(const struct PurifyModel *model);

// Returns the number of classes the model predicts, or 0 if the handle is
// null.
//
// # Safety
// `model` must be null or a live pointer from [`purify_model_load`].
uintptr_t purify_model_num_classes(const struct PurifyModel *model);

// Predicts confidence vectors for `rows` samples of `cols` features each,
// row-major in `features`. Writes `rows * num_classes` values to `out`.
//
// # Safety
// `model` must be a live pointer from [`purify_model_load`]; `features`
// must point to `rows * cols` doubles; `out` must have room for
// `rows * purify_model_num_classes(model)` doubles.
enum PurifyStatus purify_model_predict(const struct PurifyModel *model,
                                       const double *features,
                                       uintptr_t rows,
                                       uintptr_t cols,
                                       double *out);

// Loads a trained purifier from the bundle directory written by
// `purify train-purifier`. Returns null on failure; destroy the handle
// with [`purify_purifier_free`].
//
// # Safety
// `dir` must be null or point to a NUL-terminated string.
struct PurifyPurifier *purify_purifier_load(const char *dir);

// Destroys a purifier handle. Null is ignored.
//
// # Safety
// `purifier` must be null or a pointer returned by
// [`purify_purifier_load`] that has not been freed; it must not be used
// afterwards.
void purify_purifier_free(struct PurifyPurifier *purifier);

// Returns the confidence-vector width the purifier was trained for, or 0
// if the handle is null.
//
// # Safety
// `purifier` must be null or a live pointer from [`purify_purifier_load`].
uintptr_t purify_purifier_num_classes(const struct PurifyPurifier *purifier);

// Purifies `rows` confidence vectors of width `cols`, row-major in `conf`.
// Writes the purified vectors, same shape, to `out`.
//
// # Safety
// `purifier` must be a live pointer from [`purify_purifier_load`]; `conf`
// must point to `rows * cols` doubles; `out` must have room for the same
// count.
enum PurifyStatus purify_purifier_apply(const struct PurifyPurifier *purifier,
                                        const double *conf,
                                        uintptr_t rows,
                                        uintptr_t cols,
                                        double *out);

// Predicts confidence vectors and purifies them in one call: the defended
// oracle an attacker would face. Writes `rows * num_classes` values to
// `out`.
//
// # Safety
// `model` and `purifier` must be live pointers from their load functions;
// `features` must point to `rows * cols` doubles; `out` must have room for
// `rows * purify_model_num_classes(model)` doubles.
enum PurifyStatus purify_model_predict_defended(const struct PurifyModel *model,
                                                const struct PurifyPurifier *purifier,
                                                const double *features,
                                                uintptr_t rows,
                                                uintptr_t cols,
                                                double *out);

// Runs the full experiment a config file describes, writing every artifact
// under the config's output directory.
//
// # Safety
// `config_path` must be null or point to a NUL-terminated string.
enum PurifyStatus purify_run_experiment(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PURIFY_H */
