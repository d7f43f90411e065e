#ifndef COAVOID_H
#define COAVOID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CoavoidStatus {
  COAVOID_STATUS_OK = 0,
  COAVOID_STATUS_NULL_ARGUMENT = 1,
  COAVOID_STATUS_INVALID_ARGUMENT = 2,
  COAVOID_STATUS_CONSTRAINT_VIOLATION = 3,
  COAVOID_STATUS_IO = 4,
  COAVOID_STATUS_PARSE = 5,
  COAVOID_STATUS_INTERNAL = 6,
} CoavoidStatus;

typedef struct CoavoidGrid CoavoidGrid;

typedef struct CoavoidLog CoavoidLog;

typedef struct CoavoidParams CoavoidParams;

typedef struct CoavoidServer CoavoidServer;

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *coavoid_last_error(void);

/**
 * Library version, static storage.
 */
const char *coavoid_version(void);

/**
 * Releases a string returned through an `out` parameter.
 *
 * # Safety
 * `s` must come from this library or be null.
 */
void coavoid_string_free(char *s);

/**
 * Writes the 16-byte identifier broadcast in `interval` (1..=96) under the
 * daily key `dtk` (16 bytes).
 *
 * # Safety
 * `dtk` must point to 16 readable bytes and `out` to 16 writable bytes.
 */
enum CoavoidStatus coavoid_rpi(const uint8_t *dtk, uint32_t interval, uint8_t *out);

/**
 * Splits a UTC timestamp into a day index and an interval in 1..=96.
 *
 * # Safety
 * `day` and `interval` must be writable.
 */
enum CoavoidStatus coavoid_interval_of(uint64_t timestamp, uint32_t *day, uint32_t *interval);

/**
 * Sets `*valid` to whether an identifier issued for (`day`, `interval`)
 * may have been heard at `heard_at`.
 *
 * # Safety
 * `valid` must be writable.
 */
enum CoavoidStatus coavoid_validate_timestamp(uint64_t heard_at,
                                              uint32_t day,
                                              uint32_t interval,
                                              bool *valid);

/**
 * Creates a hexagonal grid over a square region of `extent_deg` degrees.
 *
 * # Safety
 * `out` must be writable.
 */
enum CoavoidStatus coavoid_grid_new(double lat,
                                    double lon,
                                    double extent_deg,
                                    struct CoavoidGrid **out);

/**
 * # Safety
 * `grid` must come from `coavoid_grid_new` or be null.
 */
void coavoid_grid_free(struct CoavoidGrid *grid);

/**
 * Writes the 32-byte digest of the cell holding (`lat`, `lon`).
 *
 * # Safety
 * `grid` must be a live handle and `out` must have 32 writable bytes.
 */
enum CoavoidStatus coavoid_grid_digest(const struct CoavoidGrid *grid,
                                       double lat,
                                       double lon,
                                       uint8_t resolution,
                                       uint8_t *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum CoavoidStatus coavoid_log_new(struct CoavoidLog **out);

/**
 * # Safety
 * `log` must come from `coavoid_log_new` or be null.
 */
void coavoid_log_free(struct CoavoidLog *log);

/**
 * Records one of the device's own broadcasts.
 *
 * # Safety
 * `log` must be live; `rpi` must point to 16 bytes.
 */
enum CoavoidStatus coavoid_log_broadcast(struct CoavoidLog *log,
                                         uint64_t timestamp,
                                         const uint8_t *rpi);

/**
 * Records a received beacon together with the cell it was heard in.
 *
 * # Safety
 * `log` must be live; `rpi` must point to 16 bytes and `digest` to 32.
 */
enum CoavoidStatus coavoid_log_exchange(struct CoavoidLog *log,
                                        uint64_t timestamp,
                                        const uint8_t *rpi,
                                        const uint8_t *digest,
                                        int32_t rssi);

/**
 * Number of records (broadcasts plus exchanges) currently held.
 *
 * # Safety
 * `log` must be live and `len` writable.
 */
enum CoavoidStatus coavoid_log_len(const struct CoavoidLog *log, size_t *len);

/**
 * Builds the patient upload for this log: one line per distinct
 * (time, cell, own identifier). Release with `coavoid_string_free`.
 *
 * # Safety
 * `log` must be live and `out` writable.
 */
enum CoavoidStatus coavoid_log_upload(const struct CoavoidLog *log, char **out);

/**
 * Generates fresh public parameters. Fails with
 * `COAVOID_STATUS_CONSTRAINT_VIOLATION` when the bit lengths cannot
 * guarantee recovery.
 *
 * # Safety
 * `out` must be writable.
 */
enum CoavoidStatus coavoid_params_generate(uint32_t k1,
                                           uint32_t k2,
                                           uint32_t k3,
                                           uint32_t k4,
                                           uint32_t coord_bits,
                                           uint64_t seed,
                                           struct CoavoidParams **out);

/**
 * # Safety
 * `params` must come from `coavoid_params_generate` or be null.
 */
void coavoid_params_free(struct CoavoidParams *params);

/**
 * Runs both sides of the encrypted point-in-circle check in process and
 * sets `*inside` when the user lies strictly within `radius` of the anchor.
 * Coordinates are non-negative fixed-point units below 2^coord_bits.
 *
 * # Safety
 * `params` must be live and `inside` writable.
 */
enum CoavoidStatus coavoid_fine_check(const struct CoavoidParams *params,
                                      uint64_t anchor_x,
                                      uint64_t anchor_y,
                                      uint64_t radius,
                                      uint64_t user_x,
                                      uint64_t user_y,
                                      uint64_t seed,
                                      bool *inside);

/**
 * Starts the edge server on `port` (0 picks a free port) on all
 * interfaces, publishing every `epoch_seconds`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CoavoidStatus coavoid_server_start(uint16_t port,
                                        uint64_t epoch_seconds,
                                        uint32_t retention_days,
                                        struct CoavoidServer **out);

/**
 * Port the server is listening on, or 0 for a null handle.
 *
 * # Safety
 * `server` must be live or null.
 */
uint16_t coavoid_server_port(const struct CoavoidServer *server);

/**
 * Stops the server and releases the handle.
 *
 * # Safety
 * `server` must come from `coavoid_server_start` or be null.
 */
void coavoid_server_stop(struct CoavoidServer *server);

/**
 * Runs a simulation configured by the TOML file at `config_path` (null for
 * defaults), writes the metrics files into `out_dir` and hands back the
 * totals as JSON through `summary` (may be null).
 *
 * # Safety
 * String arguments must be NUL-terminated; `summary` writable or null.
 */
enum CoavoidStatus coavoid_sim_run(const char *config_path, const char *out_dir, char **summary);

#endif  /* COAVOID_H */
