#ifndef CEDIT_H
#define CEDIT_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define CEDIT_HEADER_LEN 30

typedef enum {
  CEDIT_LATENT_Z = 0,
  CEDIT_LATENT_Y = 1,
} CeditLatent;

typedef enum {
  CEDIT_RELAXATION_SGA = 0,
  CEDIT_RELAXATION_AUN = 1,
} CeditRelaxation;

typedef enum {
  CEDIT_STATUS_OK = 0,
  CEDIT_STATUS_NULL_POINTER = 1,
  CEDIT_STATUS_INVALID_ARGUMENT = 2,
  CEDIT_STATUS_IO = 3,
  CEDIT_STATUS_FORMAT = 4,
  CEDIT_STATUS_MODEL_MISMATCH = 5,
  CEDIT_STATUS_NUMERIC = 6,
  CEDIT_STATUS_CODER = 7,
  CEDIT_STATUS_ACCOUNTING = 8,
  CEDIT_STATUS_PANIC = 9,
} CeditStatus;

typedef enum {
  /**
   * One symbol per latent; out-of-range values carry the escape symbol.
   */
  CEDIT_STREAM_KIND_PRIMARY = 0,
  /**
   * Nibbles of escaped values, coded with the uniform table 0.
   */
  CEDIT_STREAM_KIND_ESCAPES = 1,
} CeditStreamKind;

typedef struct CeditCoder CeditCoder;

typedef struct CeditModel CeditModel;

typedef struct CeditResult CeditResult;

typedef struct CeditSink CeditSink;

typedef struct CeditTables CeditTables;

/**
 * Library-owned bytes.
 */
typedef struct {
  uint8_t *data;
  size_t len;
} CeditBytes;

/**
 * Callback that codes `n` symbols; writes its payload with
 * [`cedit_sink_write`] and returns 0 on success.
 */
typedef int32_t (*CeditEncodeFn)(void *ctx,
                                 const uint8_t *tables,
                                 size_t tables_len,
                                 const int32_t *symbols,
                                 const uint32_t *table_ids,
                                 size_t n,
                                 CeditSink *sink);

/**
 * Callback that decodes `n` symbols (the i-th with table `table_ids[i]`)
 * into `symbols_out`; returns 0 on success.
 */
typedef int32_t (*CeditDecodeFn)(void *ctx,
                                 const uint8_t *tables,
                                 size_t tables_len,
                                 const uint8_t *payload,
                                 size_t payload_len,
                                 const uint32_t *table_ids,
                                 size_t n,
                                 int32_t *symbols_out);

typedef struct {
  double lambda;
  uint32_t iterations;
  double learning_rate;
  uint64_t seed;
  bool grid_search;
  bool adapt_delta_y;
  CeditRelaxation relaxation;
  /**
   * Start from the fine-tuned encoder.
   */
  bool finetuned_encoder;
  /**
   * Compress the full-budget temperature schedule into `iterations`.
   */
  bool rescale_schedule;
} CeditEditParams;

typedef struct {
  double bpp;
  double mse;
  double psnr;
  double rd_cost;
  double delta_y;
  double delta_z;
} CeditMetrics;

typedef struct {
  uint8_t version;
  uint8_t model_id[8];
  uint16_t height;
  uint16_t width;
  uint8_t delta_z_index;
  float delta_y;
  uint32_t z_payload_len;
  uint32_t y_payload_len;
} CeditHeader;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *cedit_last_error(void);

void cedit_bytes_free(CeditBytes *bytes);

CeditStatus cedit_model_load(const char *path, CeditModel **out);

CeditStatus cedit_model_from_bytes(const uint8_t *data, size_t len, CeditModel **out);

void cedit_model_free(CeditModel *model);

/**
 * Writes the 8-byte identifier a bitstream records (the decoder hash).
 */
CeditStatus cedit_model_decoder_id(const CeditModel *model, uint8_t *out);

CeditStatus cedit_sink_write(CeditSink *sink, const uint8_t *data, size_t len);

/**
 * Registers an entropy coder. `version` is the stream version byte it
 * produces (1 for range-coded streams). `ctx` is passed back unchanged.
 */
CeditStatus cedit_coder_new(uint8_t version,
                            CeditEncodeFn encode,
                            CeditDecodeFn decode,
                            void *ctx,
                            CeditCoder **out);

void cedit_coder_free(CeditCoder *coder);

CeditStatus cedit_edit_params_default(CeditEditParams *out);

/**
 * Edits an interleaved 8-bit RGB image (`height * width * 3` bytes).
 */
CeditStatus cedit_edit(const CeditModel *model,
                       const uint8_t *rgb,
                       size_t height,
                       size_t width,
                       const CeditEditParams *params,
                       CeditResult **out);

void cedit_result_free(CeditResult *result);

CeditStatus cedit_result_metrics(const CeditResult *result, CeditMetrics *out);

/**
 * Interleaved RGB reconstruction, `height * width * 3` bytes.
 */
CeditStatus cedit_result_reconstruction(const CeditResult *result, CeditBytes *out);

/**
 * Symbol file (`SYMS` format) of one stream of a result, as handed to an
 * entropy coder, plus the table blob those table ids refer to.
 */
CeditStatus cedit_result_stream(const CeditResult *result,
                                const CeditModel *model,
                                CeditLatent latent,
                                CeditStreamKind kind,
                                CeditBytes *symbols_out,
                                CeditBytes *tables_out);

/**
 * Writes the container for `result`; `coder` may be null for the raw
 * varint coding.
 */
CeditStatus cedit_result_encode(const CeditResult *result,
                                const CeditModel *model,
                                const CeditCoder *coder,
                                CeditBytes *out);

/**
 * Edit and encode in one call.
 */
CeditStatus cedit_compress(const CeditModel *model,
                           const uint8_t *rgb,
                           size_t height,
                           size_t width,
                           const CeditEditParams *params,
                           const CeditCoder *coder,
                           CeditBytes *out);

/**
 * Decodes a container to interleaved RGB.
 */
CeditStatus cedit_decompress(const CeditModel *model,
                             const uint8_t *data,
                             size_t len,
                             const CeditCoder *coder,
                             CeditBytes *rgb_out,
                             size_t *height,
                             size_t *width);

/**
 * Writes `CEDIT_HEADER_LEN` bytes to `out`.
 */
CeditStatus cedit_header_serialize(const CeditHeader *header, uint8_t *out);

CeditStatus cedit_header_parse(const uint8_t *data, size_t len, CeditHeader *out);

/**
 * Tables for a model at the steps a header stores.
 */
CeditStatus cedit_tables_build(const CeditModel *model,
                               float delta_y,
                               uint8_t delta_z_index,
                               CeditTables **out);

CeditStatus cedit_tables_from_blob(const uint8_t *data, size_t len, CeditTables **out);

CeditStatus cedit_tables_blob(const CeditTables *tables, CeditBytes *out);

CeditStatus cedit_tables_count(const CeditTables *tables, size_t *out);

void cedit_tables_free(CeditTables *tables);

/**
 * Ideal code length in bits of `n` symbols under their tables.
 */
CeditStatus cedit_theoretical_bits(const CeditTables *tables,
                                   const int32_t *symbols,
                                   const uint32_t *table_ids,
                                   size_t n,
                                   double *bits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CEDIT_H */
