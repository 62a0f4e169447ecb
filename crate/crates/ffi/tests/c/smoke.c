#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "cedit.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    CeditStatus st_ = (call);                                              \
    if (st_ != CEDIT_STATUS_OK) {                                          \
      fprintf(stderr, "%s:%d %s -> %d: %s\n", __FILE__, __LINE__, #call,   \
              (int)st_, cedit_last_error() ? cedit_last_error() : "");     \
      return 1;                                                            \
    }                                                                      \
  } while (0)

/* Identity "coder": symbols stored as 4 bytes each. */
static int32_t enc(void *ctx, const uint8_t *tables, size_t tables_len,
                   const int32_t *symbols, const uint32_t *ids, size_t n,
                   CeditSink *sink) {
  (void)tables; (void)tables_len; (void)ids;
  ++*(int *)ctx;
  return cedit_sink_write(sink, (const uint8_t *)symbols, n * 4) == CEDIT_STATUS_OK ? 0 : 1;
}

static int32_t dec(void *ctx, const uint8_t *tables, size_t tables_len,
                   const uint8_t *payload, size_t len, const uint32_t *ids,
                   size_t n, int32_t *out) {
  (void)ctx; (void)tables; (void)tables_len; (void)ids;
  if (len != n * 4) return 2;
  memcpy(out, payload, len);
  return 0;
}

int main(int argc, char **argv) {
  if (argc != 2) return 2;
  CeditModel *model = NULL;
  CHECK(cedit_model_load(argv[1], &model));

  size_t h = 64, w = 64;
  uint8_t *rgb = malloc(h * w * 3);
  for (size_t i = 0; i < h * w * 3; ++i) rgb[i] = (uint8_t)((i * 13) % 251);

  CeditEditParams p;
  CHECK(cedit_edit_params_default(&p));
  p.iterations = 10;
  p.grid_search = false;

  CeditBytes raw = {0};
  CHECK(cedit_compress(model, rgb, h, w, &p, NULL, &raw));
  CeditHeader hdr;
  CHECK(cedit_header_parse(raw.data, raw.len, &hdr));
  if (hdr.width != 64 || hdr.height != 64 || hdr.version != 2) return 3;
  if (raw.len != CEDIT_HEADER_LEN + hdr.z_payload_len + hdr.y_payload_len) return 4;

  CeditBytes img = {0};
  size_t oh = 0, ow = 0;
  CHECK(cedit_decompress(model, raw.data, raw.len, NULL, &img, &oh, &ow));
  if (oh != h || ow != w || img.len != h * w * 3) return 5;
  cedit_bytes_free(&img);

  int calls = 0;
  CeditCoder *coder = NULL;
  CHECK(cedit_coder_new(1, enc, dec, &calls, &coder));
  CeditBytes coded = {0};
  CHECK(cedit_compress(model, rgb, h, w, &p, coder, &coded));
  CHECK(cedit_decompress(model, coded.data, coded.len, coder, &img, &oh, &ow));
  if (calls < 2) return 6;

  if (cedit_model_load(NULL, &model) != CEDIT_STATUS_NULL_POINTER) return 7;
  if (cedit_last_error() == NULL) return 8;

  cedit_bytes_free(&img);
  cedit_bytes_free(&coded);
  cedit_bytes_free(&raw);
  cedit_coder_free(coder);
  cedit_model_free(model);
  free(rgb);
  printf("ok\n");
  return 0;
}
