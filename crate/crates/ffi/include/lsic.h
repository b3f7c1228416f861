#ifndef LSIC_H
#define LSIC_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LsicStatus {
  LSIC_STATUS_OK = 0,
  LSIC_STATUS_NULL_POINTER = 1,
  LSIC_STATUS_INVALID_UTF8 = 2,
  LSIC_STATUS_IO = 3,
  LSIC_STATUS_PARSE = 4,
  LSIC_STATUS_CONFIG = 5,
  LSIC_STATUS_INVALID_ARGUMENT = 6,
  LSIC_STATUS_CHECKPOINT = 7,
  LSIC_STATUS_TRAINING = 8,
  LSIC_STATUS_INTERNAL = 9,
} LsicStatus;

typedef struct LsicConfig LsicConfig;

typedef struct LsicData LsicData;

typedef struct LsicModel LsicModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the library.
 */
const char *lsic_last_error(void);

/**
 * A configuration with every key at its default.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LsicStatus lsic_config_new(struct LsicConfig **out);

/**
 * Reads a `key = value` configuration file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum LsicStatus lsic_config_load(const char *path, struct LsicConfig **out);

/**
 * Sets one key; the configuration is revalidated afterwards.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` must be nul-terminated.
 */
enum LsicStatus lsic_config_set(struct LsicConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must be null or come from this library, and not be used afterwards.
 */
void lsic_config_free(struct LsicConfig *cfg);

/**
 * Parses, labels, splits and sessionizes the configured data.
 *
 * # Safety
 * `cfg` must come from this library and `out` be a valid pointer.
 */
enum LsicStatus lsic_data_load(const struct LsicConfig *cfg, struct LsicData **out);

/**
 * Numbers of users, movies and ratings; any output may be null.
 *
 * # Safety
 * `data` must come from this library; non-null outputs must be valid.
 */
enum LsicStatus lsic_data_counts(const struct LsicData *data,
                                 size_t *users,
                                 size_t *movies,
                                 size_t *ratings);

/**
 * # Safety
 * `data` must be null or come from this library, and not be used afterwards.
 */
void lsic_data_free(struct LsicData *data);

/**
 * Runs the full training pipeline, writing outputs under the configured `out_dir`.
 *
 * # Safety
 * `cfg` and `data` must come from this library and `out` be a valid pointer.
 */
enum LsicStatus lsic_model_train(const struct LsicConfig *cfg,
                                 const struct LsicData *data,
                                 struct LsicModel **out);

/**
 * Loads a checkpoint written for `data`.
 *
 * # Safety
 * `cfg` and `data` must come from this library, `path` must be nul-terminated
 * and `out` a valid pointer.
 */
enum LsicStatus lsic_model_load(const struct LsicConfig *cfg,
                                const struct LsicData *data,
                                const char *path,
                                struct LsicModel **out);

/**
 * # Safety
 * `model` must be null or come from this library, and not be used afterwards.
 */
void lsic_model_free(struct LsicModel *model);

/**
 * Up to `n` recommendations for raw user id `user`, best first.
 *
 * Fills `movies[..*written]` with raw movie ids and `scores[..*written]` with
 * probabilities; both arrays must hold `n` elements.
 *
 * # Safety
 * `model` and `data` must come from this library; the arrays must have room
 * for `n` elements and `written` must be valid.
 */
enum LsicStatus lsic_recommend(const struct LsicModel *model,
                               const struct LsicData *data,
                               int64_t user,
                               size_t n,
                               int64_t *movies,
                               double *scores,
                               size_t *written);

/**
 * Precision at cutoff `n` of a ranked list given as relevance flags.
 *
 * # Safety
 * `relevant` must hold `len` elements and `out` be valid.
 */
enum LsicStatus lsic_precision_at_n(const bool *relevant, size_t len, size_t n, double *out);

/**
 * NDCG at cutoff `n`; `total_relevant` counts relevant items inside and outside the list.
 *
 * # Safety
 * `relevant` must hold `len` elements and `out` be valid.
 */
enum LsicStatus lsic_ndcg_at_n(const bool *relevant,
                               size_t len,
                               size_t total_relevant,
                               size_t n,
                               double *out);

/**
 * Average precision over the whole list.
 *
 * # Safety
 * `relevant` must hold `len` elements and `out` be valid.
 */
enum LsicStatus lsic_average_precision(const bool *relevant,
                                       size_t len,
                                       size_t total_relevant,
                                       double *out);

/**
 * Reciprocal rank of the first relevant entry, 0 when there is none.
 *
 * # Safety
 * `relevant` must hold `len` elements and `out` be valid.
 */
enum LsicStatus lsic_reciprocal_rank(const bool *relevant, size_t len, double *out);

/**
 * Standardizes `rewards` into `out` (both of length `len`; they may alias).
 *
 * # Safety
 * Both arrays must hold `len` elements.
 */
enum LsicStatus lsic_normalize_rewards(const double *rewards, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LSIC_H */
