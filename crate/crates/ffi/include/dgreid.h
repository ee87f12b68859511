#ifndef DGREID_H
#define DGREID_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum dg_status {
  DG_STATUS_OK = 0,
  DG_STATUS_NULL_POINTER = 1,
  DG_STATUS_INVALID_ARGUMENT = 2,
  DG_STATUS_DATA = 3,
  DG_STATUS_NUMERIC = 4,
  DG_STATUS_CHECKPOINT = 5,
  DG_STATUS_SHAPE = 6,
  DG_STATUS_IO = 7,
  DG_STATUS_PANIC = 8,
} dg_status;

/*
 Loaded global model (extractor and encoder) plus its input geometry.
 */
typedef struct dg_model dg_model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next call into this library on the same thread.
 */
const char *dg_last_error(void);

/*
 Load a stage-2 checkpoint. Images passed to [`dg_model_embed_rgb8`] are
 resized to the backbone input and normalized with the default channel
 statistics.

 # Safety
 `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum dg_status dg_model_load(const char *path, struct dg_model **out);

/*
 # Safety
 `model` must come from [`dg_model_load`] and not be used afterwards.
 */
void dg_model_free(struct dg_model *model);

/*
 Embedding width and expected input height/width.

 # Safety
 All pointers must be valid.
 */
enum dg_status dg_model_info(const struct dg_model *model,
                             size_t *embedding_dim,
                             size_t *input_height,
                             size_t *input_width);

/*
 Embed `n` preprocessed images laid out as `[n, 3, H, W]` doubles into
 `out` (`n × embedding_dim`).

 # Safety
 Buffers must hold the stated number of elements.
 */
enum dg_status dg_model_embed(const struct dg_model *model,
                              const double *images,
                              size_t n,
                              double *out,
                              size_t out_len);

/*
 Embed `n` 8-bit RGB images of `height × width` pixels (interleaved,
 row-major, one image after another).

 # Safety
 Buffers must hold the stated number of elements.
 */
enum dg_status dg_model_embed_rgb8(const struct dg_model *model,
                                   const uint8_t *pixels,
                                   size_t n,
                                   size_t height,
                                   size_t width,
                                   double *out,
                                   size_t out_len);

/*
 Order gallery rows (`rows × dim`) by Euclidean distance to `probe`;
 ties keep the lower index first. Writes `rows` indices to `order`.

 # Safety
 Buffers must hold the stated number of elements.
 */
enum dg_status dg_rank_gallery(const double *probe,
                               size_t dim,
                               const double *gallery,
                               size_t rows,
                               size_t *order);

/*
 CMC curve from ranked gallery identities (`n_probes × gallery_len`,
 one row per probe) and the probe identities. Writes `gallery_len` values.

 # Safety
 Buffers must hold the stated number of elements.
 */
enum dg_status dg_cmc(const size_t *ranked_ids,
                      size_t n_probes,
                      size_t gallery_len,
                      const size_t *probe_ids,
                      double *curve);

/*
 Mean row-wise Euclidean distance between two `n × dim` batches.

 # Safety
 Buffers must hold the stated number of elements.
 */
enum dg_status dg_consistency_loss(const double *v_j,
                                   const double *v_k,
                                   size_t n,
                                   size_t dim,
                                   double *out);

/*
 Batch-hard triplet loss over `n × dim` embeddings with integer labels.

 # Safety
 Buffers must hold the stated number of elements.
 */
enum dg_status dg_triplet_loss(const double *embeddings,
                               const size_t *labels,
                               size_t n,
                               size_t dim,
                               double margin,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DGREID_H */
