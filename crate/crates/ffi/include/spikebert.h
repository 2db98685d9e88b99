#ifndef SPIKEBERT_H
#define SPIKEBERT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a C API call.
typedef enum SbStatus {
  SB_STATUS_OK = 0,
  SB_STATUS_NULL_POINTER = 1,
  SB_STATUS_INVALID_ARGUMENT = 2,
  SB_STATUS_IO = 3,
  SB_STATUS_FORMAT = 4,
  SB_STATUS_DATA = 5,
  SB_STATUS_CONFIG = 6,
  SB_STATUS_INTERNAL = 7,
} SbStatus;

// A parsed teacher dump.
typedef struct SbDump SbDump;

// A loaded checkpoint ready for inference.
typedef struct SbModel SbModel;

// Header fields of a teacher dump.
typedef struct SbDumpInfo {
  // 0 for feature-only dumps, 1 for dumps with logits and labels.
  uint32_t kind;
  uint32_t layers;
  uint32_t dim;
  uint32_t max_len;
  uint32_t num_classes;
  int32_t pad_id;
  uint64_t vocab_hash;
  uint64_t records;
} SbDumpInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null when the last
// call succeeded. Valid until the next call on the same thread.
const char *sb_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *sb_version(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SbStatus sb_model_load(const char *path, struct SbModel **out);

// Loads a checkpoint from memory.
//
// # Safety
// `bytes` must point to `len` readable bytes and `out` must be writable.
enum SbStatus sb_model_from_bytes(const uint8_t *bytes, size_t len, struct SbModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from a model constructor and not be freed twice.
void sb_model_free(struct SbModel *model);

// Number of output classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint32_t sb_model_num_classes(const struct SbModel *model);

// Longest accepted sequence, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint32_t sb_model_max_len(const struct SbModel *model);

// Class logits for a row-major `[batch, seq_len]` block of token ids,
// written row-major into `out` (`batch * num_classes` floats).
//
// # Safety
// `ids` must hold `batch * seq_len` values and `out` must hold `out_len`.
enum SbStatus sb_model_logits(const struct SbModel *model,
                              const uint32_t *ids,
                              size_t batch,
                              size_t seq_len,
                              float *out,
                              size_t out_len);

// Predicted class per row of a row-major `[batch, seq_len]` id block.
//
// # Safety
// `ids` must hold `batch * seq_len` values and `out` must hold `batch`.
enum SbStatus sb_model_predict(const struct SbModel *model,
                               const uint32_t *ids,
                               size_t batch,
                               size_t seq_len,
                               uint32_t *out);

// Opens and validates a teacher dump.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SbStatus sb_dump_open(const char *path, struct SbDump **out);

// Releases a dump. Null is ignored.
//
// # Safety
// `dump` must come from [`sb_dump_open`] and not be freed twice.
void sb_dump_free(struct SbDump *dump);

// Copies the dump header into `info`.
//
// # Safety
// `dump` must be a live handle and `info` writable.
enum SbStatus sb_dump_info(const struct SbDump *dump, struct SbDumpInfo *info);

// Teacher logits of record `index` (`num_classes` floats).
//
// # Safety
// `dump` must be a live handle and `out` must hold `out_len` floats.
enum SbStatus sb_dump_logits(const struct SbDump *dump, uint64_t index, float *out, size_t out_len);

// Energy in millijoules of `flops` multiply-accumulates on dense hardware.
double sb_ann_energy_mj(double flops);

// Synaptic operations of a spiking layer with the given dense FLOPs,
// firing rate in `[0, 1]` and time steps.
//
// # Safety
// `out` must be writable.
enum SbStatus sb_sops(uint64_t flops, double firing_rate, uint32_t time_steps, uint64_t *out);

// Hash of an ordered token list, as stored in dump headers.
//
// # Safety
// `tokens` must point to `count` NUL-terminated strings and `out` be writable.
enum SbStatus sb_vocab_hash(const char *const *tokens, size_t count, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPIKEBERT_H */
