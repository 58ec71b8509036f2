#ifndef SEALMR_H
#define SEALMR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum SealmrStatus {
  SEALMR_STATUS_OK = 0,
  SEALMR_STATUS_NULL_POINTER = 1,
  SEALMR_STATUS_INVALID_UTF8 = 2,
  SEALMR_STATUS_INVALID_JSON = 3,
  SEALMR_STATUS_INVALID_KEY = 4,
  SEALMR_STATUS_INVALID_HEADER = 5,
  SEALMR_STATUS_AUTH_FAILURE = 6,
  SEALMR_STATUS_MALFORMED_FRAME = 7,
  SEALMR_STATUS_MISSING_PAYLOAD_KEY = 8,
  SEALMR_STATUS_INVALID_SUBSCRIPTION = 9,
  SEALMR_STATUS_NOT_FOUND = 10,
  SEALMR_STATUS_BUFFER_TOO_SMALL = 11,
  SEALMR_STATUS_PANIC = 12,
} SealmrStatus;

/**
 * Keys plus a nonce source for sealing and opening envelopes.
 */
typedef struct SealmrCodec SealmrCodec;

/**
 * Subscription store with the router's matching semantics.
 */
typedef struct SealmrStore SealmrStore;

/**
 * Heap bytes handed to the caller. Release with [`sealmr_buffer_free`].
 */
typedef struct SealmrBuffer {
  uint8_t *data;
  size_t len;
} SealmrBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or NULL. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *sealmr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sealmr_version(void);

/**
 * # Safety
 * `buf` must be NULL or point to a buffer filled by this library.
 */
void sealmr_buffer_free(struct SealmrBuffer *buf);

/**
 * Creates a codec from hex keys. `payload_key_hex` may be NULL for a
 * header-only codec that can route but not read payloads.
 *
 * # Safety
 * String arguments must be NULL or NUL-terminated; `out` must be writable.
 */
enum SealmrStatus sealmr_codec_new(const char *header_key_hex,
                                   const char *payload_key_hex,
                                   struct SealmrCodec **out);

/**
 * # Safety
 * `codec` must be NULL or a handle from [`sealmr_codec_new`] not yet freed.
 */
void sealmr_codec_free(struct SealmrCodec *codec);

/**
 * Seals `payload` under `header_json` into a wire frame.
 *
 * # Safety
 * `codec` must be live, `header_json` NUL-terminated, `payload` readable
 * for `payload_len` bytes (or NULL when the length is 0), `out` writable.
 */
enum SealmrStatus sealmr_codec_seal(const struct SealmrCodec *codec,
                                    const char *header_json,
                                    const uint8_t *payload,
                                    size_t payload_len,
                                    struct SealmrBuffer *out);

/**
 * Verifies and decrypts a frame. On success `header_json_out` holds the
 * header as JSON (not NUL-terminated) and `payload_out` the payload.
 *
 * # Safety
 * `codec` must be live, `frame` readable for `frame_len` bytes, and both
 * output pointers writable.
 */
enum SealmrStatus sealmr_codec_open(const struct SealmrCodec *codec,
                                    const uint8_t *frame,
                                    size_t frame_len,
                                    struct SealmrBuffer *header_json_out,
                                    struct SealmrBuffer *payload_out);

/**
 * Verifies a frame and decrypts only its header.
 *
 * # Safety
 * As for [`sealmr_codec_open`].
 */
enum SealmrStatus sealmr_codec_open_header(const struct SealmrCodec *codec,
                                           const uint8_t *frame,
                                           size_t frame_len,
                                           struct SealmrBuffer *header_json_out);

/**
 * Applies the AES-128-CTR keystream in place. `key` and `counter` are
 * 16 bytes each; the counter block is incremented big-endian.
 *
 * # Safety
 * `key` and `counter` must be readable for 16 bytes and `data` writable
 * for `len` bytes.
 */
enum SealmrStatus sealmr_aes_ctr_apply(const uint8_t *key,
                                       const uint8_t *counter,
                                       uint8_t *data,
                                       size_t len);

/**
 * # Safety
 * `out` must be writable.
 */
enum SealmrStatus sealmr_store_new(struct SealmrStore **out);

/**
 * # Safety
 * `store` must be NULL or a handle from [`sealmr_store_new`] not yet freed.
 */
void sealmr_store_free(struct SealmrStore *store);

/**
 * Registers a subscription for `owner`. `constraints_json` is an array of
 * `{"attr": name, "op": "EQ"|"LT"|"LE"|"GT"|"GE", "value": int|string}`
 * and must include a `msg_type` constraint.
 *
 * # Safety
 * `store` must be live, `constraints_json` NUL-terminated, `sub_id_out`
 * writable.
 */
enum SealmrStatus sealmr_store_register(struct SealmrStore *store,
                                        uint64_t owner,
                                        const char *constraints_json,
                                        uint64_t *sub_id_out);

/**
 * # Safety
 * `store` must be live.
 */
enum SealmrStatus sealmr_store_unregister(struct SealmrStore *store, uint64_t sub_id);

/**
 * Number of live subscriptions, or 0 for a NULL store.
 *
 * # Safety
 * `store` must be NULL or live.
 */
size_t sealmr_store_len(const struct SealmrStore *store);

/**
 * Writes the distinct owners whose subscriptions match `header_json`, in
 * ascending order, into `owners` (capacity `cap`). `count_out` receives
 * the number of matches; if it exceeds `cap` the call returns
 * `BufferTooSmall` and nothing is written.
 *
 * # Safety
 * `store` must be live, `header_json` NUL-terminated, `owners` writable
 * for `cap` elements (may be NULL when `cap` is 0), `count_out` writable.
 */
enum SealmrStatus sealmr_store_match(const struct SealmrStore *store,
                                     const char *header_json,
                                     uint64_t *owners,
                                     size_t cap,
                                     size_t *count_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEALMR_H */
