#ifndef SFXGAN_H
#define SFXGAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SfxStatus {
  SFX_STATUS_OK = 0,
  SFX_STATUS_NULL_POINTER = 1,
  // Rejected input: bad parameters, manifest or audio files.
  SFX_STATUS_INVALID_ARGUMENT = 2,
  SFX_STATUS_IO = 3,
  // Missing, truncated or inconsistent checkpoint.
  SFX_STATUS_CHECKPOINT = 4,
  // Training produced non-finite values. The last completed stage is on disk.
  SFX_STATUS_DIVERGENCE = 5,
  SFX_STATUS_OUT_OF_RANGE = 6,
  SFX_STATUS_PANIC = 7,
  SFX_STATUS_INTERNAL = 8,
} SfxStatus;

// Synthesized variations.
typedef struct SfxBatch SfxBatch;

// A trained model loaded from a checkpoint directory.
typedef struct SfxCheckpoint SfxCheckpoint;

// Synthesis parameters. Start from [`sfx_synth_params_default`].
typedef struct SfxSynthParams {
  size_t num_variations;
  // Width multipliers are drawn from `[1 - r, 1 + r]`.
  double retarget_fraction;
  // Widths are clamped to `[ceil((1 - b) T), floor((1 + b) T)]`.
  double retarget_bound;
  bool shuffle_layers;
  double delay_min_ms;
  double delay_max_ms;
  double gain_min_db;
  double gain_max_db;
  size_t gl_iters;
  uint64_t seed;
  // Replay the training reconstruction instead of fresh noise; needs `retarget_fraction == 0`.
  bool use_reconstruction_noise;
} SfxSynthParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next
// call into this library on the same thread.
const char *sfx_last_error(void);

// Library version as a static NUL-terminated string.
const char *sfx_version(void);

// Load the checkpoint directory at `path` into `*out`.
//
// # Safety
// `path` is a NUL-terminated string; `out` is a valid pointer.
enum SfxStatus sfx_checkpoint_load(const char *path, struct SfxCheckpoint **out);

// # Safety
// `ckpt` is null or a handle from [`sfx_checkpoint_load`] not yet freed.
void sfx_checkpoint_free(struct SfxCheckpoint *ckpt);

// Layer count, or 0 for a null handle.
//
// # Safety
// `ckpt` is null or a live handle.
size_t sfx_checkpoint_num_layers(const struct SfxCheckpoint *ckpt);

// Sample rate in Hz, or 0 for a null handle.
//
// # Safety
// `ckpt` is null or a live handle.
uint32_t sfx_checkpoint_sample_rate(const struct SfxCheckpoint *ckpt);

// Number of trained stages, or 0 for a null handle.
//
// # Safety
// `ckpt` is null or a live handle.
size_t sfx_checkpoint_num_stages(const struct SfxCheckpoint *ckpt);

struct SfxSynthParams sfx_synth_params_default(void);

// Synthesize a batch from `ckpt` into `*out`.
//
// # Safety
// `ckpt` is a live handle, `params` and `out` are valid pointers.
enum SfxStatus sfx_synthesize(const struct SfxCheckpoint *ckpt,
                              const struct SfxSynthParams *params,
                              struct SfxBatch **out);

// Number of variations, or 0 for a null handle.
//
// # Safety
// `batch` is null or a live handle.
size_t sfx_batch_len(const struct SfxBatch *batch);

// Borrow the mixdown of variation `index`: `*samples` points at `*len` floats owned
// by the batch and valid until [`sfx_batch_free`].
//
// # Safety
// `batch` is a live handle; `samples` and `len` are valid pointers.
enum SfxStatus sfx_batch_mix(const struct SfxBatch *batch,
                             size_t index,
                             const float **samples,
                             size_t *len);

// Borrow output layer `layer` of variation `index`, after its delay and gain. Same
// lifetime rules as [`sfx_batch_mix`].
//
// # Safety
// `batch` is a live handle; `samples` and `len` are valid pointers.
enum SfxStatus sfx_batch_stem(const struct SfxBatch *batch,
                              size_t index,
                              size_t layer,
                              const float **samples,
                              size_t *len);

// # Safety
// `batch` is null or a handle from [`sfx_synthesize`] not yet freed.
void sfx_batch_free(struct SfxBatch *batch);

// Train from the experiment manifest at `manifest` and write the checkpoint directory
// `checkpoint_dir`, updated after every stage.
//
// # Safety
// Both arguments are NUL-terminated strings.
enum SfxStatus sfx_train(const char *manifest, const char *checkpoint_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFXGAN_H */
