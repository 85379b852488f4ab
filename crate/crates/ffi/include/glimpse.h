#ifndef GLIMPSE_H
#define GLIMPSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlimpseStatus {
  GLIMPSE_STATUS_OK = 0,
  GLIMPSE_STATUS_NULL_POINTER = 1,
  GLIMPSE_STATUS_INVALID_ARGUMENT = 2,
  GLIMPSE_STATUS_MISSING_FILE = 3,
  GLIMPSE_STATUS_SHAPE_MISMATCH = 4,
  GLIMPSE_STATUS_CORRUPT_MANIFEST = 5,
  GLIMPSE_STATUS_VERSION_UNSUPPORTED = 6,
  GLIMPSE_STATUS_INVALID_SPEC = 7,
  GLIMPSE_STATUS_DEGENERATE = 8,
  GLIMPSE_STATUS_INVALID_K = 9,
  GLIMPSE_STATUS_ORACLE = 10,
  GLIMPSE_STATUS_IO = 11,
  GLIMPSE_STATUS_BUFFER_TOO_SMALL = 12,
  GLIMPSE_STATUS_PANIC = 13,
} GlimpseStatus;

/**
 * Saliency outputs for one trace.
 */
typedef struct GlimpseExplanation GlimpseExplanation;

/**
 * A loaded or synthesized trace bundle.
 */
typedef struct GlimpseTrace GlimpseTrace;

/**
 * Engine and token-weighting settings. Start from [`glimpse_config_default`].
 */
typedef struct GlimpseConfig {
  double fusion_temperature;
  double depth_temperature;
  double layer_fraction;
  bool use_depth_prior;
  bool use_layer_relevance;
  bool use_head_weighting;
  /**
   * Use `R + (I + aE)R` instead of the additive `R + aER` update.
   */
  bool literal_update;
  bool use_token_confidence;
  bool use_prompt_weighting;
  double flow_strength;
  bool apply_flow;
  bool flow_all_pairs;
  bool drop_punctuation;
} GlimpseConfig;

typedef struct GlimpseDims {
  size_t layers;
  size_t heads;
  size_t visual;
  size_t prompt;
  size_t generated;
  size_t grid_rows;
  size_t grid_cols;
} GlimpseDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *glimpse_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *glimpse_version(void);

enum GlimpseStatus glimpse_config_default(struct GlimpseConfig *out);

/**
 * Loads the trace directory `dir` (containing `manifest.json`).
 */
enum GlimpseStatus glimpse_trace_load(const char *dir, struct GlimpseTrace **out);

/**
 * Builds a synthetic trace from a JSON synthesis spec.
 */
enum GlimpseStatus glimpse_trace_synth(const char *spec_json, struct GlimpseTrace **out);

enum GlimpseStatus glimpse_trace_save(const struct GlimpseTrace *trace, const char *dir);

/**
 * Frees a trace. NULL is ignored.
 */
void glimpse_trace_free(struct GlimpseTrace *trace);

enum GlimpseStatus glimpse_trace_dims(const struct GlimpseTrace *trace, struct GlimpseDims *out);

/**
 * Checks trace invariants. `*ok` is false when violations were found; their
 * count goes to `*violations` and the first one to [`glimpse_last_error`].
 */
enum GlimpseStatus glimpse_trace_validate(const struct GlimpseTrace *trace,
                                          double row_tol,
                                          bool *ok,
                                          size_t *violations);

/**
 * Runs the engine. `config` may be NULL for defaults.
 */
enum GlimpseStatus glimpse_explain(const struct GlimpseTrace *trace,
                                   const struct GlimpseConfig *config,
                                   struct GlimpseExplanation **out);

void glimpse_explanation_free(struct GlimpseExplanation *explanation);

/**
 * Visual saliency, row-major over the patch grid (K values).
 */
enum GlimpseStatus glimpse_explanation_visual(const struct GlimpseExplanation *explanation,
                                              double *buf,
                                              size_t cap,
                                              size_t *len_out);

/**
 * Prompt-token saliency (M values).
 */
enum GlimpseStatus glimpse_explanation_prompt(const struct GlimpseExplanation *explanation,
                                              double *buf,
                                              size_t cap,
                                              size_t *len_out);

/**
 * Joint token relevance per generated token (T values).
 */
enum GlimpseStatus glimpse_explanation_token_relevance(const struct GlimpseExplanation *explanation,
                                                       double *buf,
                                                       size_t cap,
                                                       size_t *len_out);

/**
 * Full token weight table as a JSON string; free it with [`glimpse_string_free`].
 */
enum GlimpseStatus glimpse_explanation_tokens_json(const struct GlimpseExplanation *explanation,
                                                   char **out);

void glimpse_string_free(char *s);

/**
 * Baseline visual map (K values, row-major). `kind` is `raw`, `rollout`,
 * `gradcam`, `tmme` or `tmme-last-<k>`.
 */
enum GlimpseStatus glimpse_baseline(const struct GlimpseTrace *trace,
                                    const char *kind,
                                    double *buf,
                                    size_t cap,
                                    size_t *len_out);

/**
 * Normalized scanpath saliency of `saliency` against `human` (both rows x cols).
 */
enum GlimpseStatus glimpse_nss(const double *saliency,
                               const double *human,
                               size_t rows,
                               size_t cols,
                               double theta,
                               double *out);

/**
 * Spearman rank correlation between two rows x cols grids.
 */
enum GlimpseStatus glimpse_spearman(const double *saliency,
                                    const double *human,
                                    size_t rows,
                                    size_t cols,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLIMPSE_H */
