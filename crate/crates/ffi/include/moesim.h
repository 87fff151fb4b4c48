#ifndef MOESIM_H
#define MOESIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MoesimStatus {
  MOESIM_STATUS_OK = 0,
  MOESIM_STATUS_NULL_POINTER = 1,
  MOESIM_STATUS_INVALID_UTF8 = 2,
  MOESIM_STATUS_INVALID_INPUT = 3,
  MOESIM_STATUS_CONFIG_ERROR = 4,
  MOESIM_STATUS_CAPACITY_ERROR = 5,
  MOESIM_STATUS_INDEX_OUT_OF_RANGE = 6,
  MOESIM_STATUS_IO_ERROR = 7,
  MOESIM_STATUS_INTERNAL = 8,
} MoesimStatus;

typedef enum MoesimArch {
  MOESIM_ARCH_XPU = 0,
  MOESIM_ARCH_XPU_PIM = 1,
  MOESIM_ARCH_XPU_LOGIC_PIM = 2,
  MOESIM_ARCH_XPU_NMP = 3,
  MOESIM_ARCH_HB_XPU = 4,
  MOESIM_ARCH_OURS = 5,
} MoesimArch;

typedef enum MoesimScheme {
  MOESIM_SCHEME_AR_ONLY = 0,
  MOESIM_SCHEME_ELASTIC_SD = 1,
  MOESIM_SCHEME_RANDOM_POOL_SD = 2,
  MOESIM_SCHEME_EAGLE_SD = 3,
  MOESIM_SCHEME_SLM_SD = 4,
  MOESIM_SCHEME_QUANT_SD = 5,
} MoesimScheme;

typedef enum MoesimMode {
  MOESIM_MODE_AR = 0,
  MOESIM_MODE_SD = 1,
} MoesimMode;

// Parsed scenario list.
typedef struct MoesimConfig MoesimConfig;

// Rows of a completed sweep.
typedef struct MoesimResults MoesimResults;

// Numeric view of one result row. Missing SD values are NaN.
typedef struct MoesimRow {
  size_t batch;
  enum MoesimArch arch;
  enum MoesimScheme scheme;
  enum MoesimMode mode;
  double accept_length;
  double ar_hit_rate;
  double verify_hit_rate;
  double ar_per_token_s;
  double sd_per_token_s;
  double per_token_latency_s;
  double energy_compute_j;
  double energy_ext_mem_j;
  double energy_hb_mem_j;
  double energy_comm_j;
  double energy_static_j;
  double energy_total_j;
  double sd_speedup;
  double speedup_vs_xpu;
  bool comm_warning;
} MoesimRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call into this library on the same thread.
const char *moesim_last_error(void);

// Library version as a static NUL-terminated string.
const char *moesim_version(void);

// Parses TOML scenario text. `origin` names the source in error messages and may be null.
//
// # Safety
// `text` and `origin` must be null or NUL-terminated; `out` must be writable.
enum MoesimStatus moesim_config_parse(const char *text,
                                      const char *origin,
                                      struct MoesimConfig **out);

// Loads and validates a TOML scenario file.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum MoesimStatus moesim_config_load(const char *path, struct MoesimConfig **out);

// Number of scenarios in a parsed config.
//
// # Safety
// `config` must come from `moesim_config_parse` or `moesim_config_load`.
enum MoesimStatus moesim_config_len(const struct MoesimConfig *config, size_t *out);

// # Safety
// `config` must be null or a handle not yet freed.
void moesim_config_free(struct MoesimConfig *config);

// Runs every scenario. Rows are sorted by scenario id either way.
//
// # Safety
// `config` must be a live handle; `out` must be writable.
enum MoesimStatus moesim_run(const struct MoesimConfig *config,
                             bool concurrent,
                             struct MoesimResults **out);

// # Safety
// `results` must be a live handle; `out` must be writable.
enum MoesimStatus moesim_results_len(const struct MoesimResults *results, size_t *out);

// Copies row `index` into `out`.
//
// # Safety
// `results` must be a live handle; `out` must be writable.
enum MoesimStatus moesim_results_row(const struct MoesimResults *results,
                                     size_t index,
                                     struct MoesimRow *out);

// Renders the rows as CSV. Free the string with `moesim_string_free`.
//
// # Safety
// `results` must be a live handle; `out` must be writable.
enum MoesimStatus moesim_results_csv(const struct MoesimResults *results, char **out);

// Renders the rows as JSON. Free the string with `moesim_string_free`.
//
// # Safety
// `results` must be a live handle; `out` must be writable.
enum MoesimStatus moesim_results_json(const struct MoesimResults *results, char **out);

// # Safety
// `results` must be null or a handle not yet freed.
void moesim_results_free(struct MoesimResults *results);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void moesim_string_free(char *s);

// `(1 + accept) * lat_ar / (depth * lat_draft + lat_verify)`.
//
// # Safety
// `out` must be writable.
enum MoesimStatus moesim_sd_speedup(double accept_length,
                                    double lat_ar,
                                    size_t depth,
                                    double lat_draft,
                                    double lat_verify,
                                    double *out);

// LRU hit rate of `capacity_items` slots under Zipf popularity.
//
// # Safety
// `out` must be writable.
enum MoesimStatus moesim_lru_hit_rate(size_t n_items,
                                      double zipf_exponent,
                                      double capacity_items,
                                      double *out);

// Expected distinct experts touched by `batch` tokens under Zipf popularity.
//
// # Safety
// `out` must be writable.
enum MoesimStatus moesim_expected_unique_experts(size_t batch,
                                                 size_t top_k,
                                                 size_t n_experts,
                                                 double zipf_exponent,
                                                 double *out);

// HB and external rooflines of the default system with `hb_banks` banks, in
// bytes/s and MAC/s.
//
// # Safety
// All out pointers must be writable.
enum MoesimStatus moesim_rooflines(uint32_t hb_banks,
                                   double active_pe_fraction,
                                   double *hb_bw,
                                   double *ext_bw,
                                   double *compute);

// Per-token AR latency at `batch` on the default geometry and system.
// `arch` takes a `MoesimArch` value.
//
// # Safety
// `out` must be writable.
enum MoesimStatus moesim_ar_per_token_latency(uint32_t arch, size_t batch, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOESIM_H */
