#ifndef SHARDGRAPH_H
#define SHARDGRAPH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgProgram {
  SG_PROGRAM_MAIN = 0,
  SG_PROGRAM_SHARD = 1,
  SG_PROGRAM_UNSHARD = 2,
} SgProgram;

typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_ARGUMENT = 1,
  SG_STATUS_INVALID_UTF8 = 2,
  SG_STATUS_PARSE = 3,
  SG_STATUS_VERIFY = 4,
  SG_STATUS_SIMULATION = 5,
  SG_STATUS_TRANSFORM = 6,
  SG_STATUS_INVALID = 7,
  SG_STATUS_IO = 8,
  SG_STATUS_PANIC = 9,
} SgStatus;

// A parsed, verified module.
typedef struct SgModule SgModule;

// The three programs and manifest produced by a transform.
typedef struct SgTransform SgTransform;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next failing call on this thread.
const char *sg_last_error(void);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void sg_string_free(char *s);

// Parses and verifies module text.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a writable pointer.
enum SgStatus sg_module_parse(const char *text, struct SgModule **out);

// # Safety
// `m` must be null or a handle from this library, not yet freed.
void sg_module_free(struct SgModule *m);

// Prints a module in its text form.
//
// # Safety
// `m` must be a live module handle and `out` a writable pointer.
enum SgStatus sg_module_print(const struct SgModule *m, char **out);

// Number of replicas the module runs on, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live module handle.
size_t sg_module_replicas(const struct SgModule *m);

// Redundancy verdicts as JSON. With `profit`, the sharding decisions under
// `cost_model` (JSON, null for defaults) instead.
//
// # Safety
// `m` must be a live module handle, `cost_model` null or a NUL-terminated
// string, and `out` a writable pointer.
enum SgStatus sg_analyze(const struct SgModule *m,
                         bool profit,
                         const char *cost_model_json,
                         char **out);

// Shards the weight updates the cost model finds profitable, or every
// supported one with `force`.
//
// # Safety
// `m` must be a live module handle, `cost_model` null or a NUL-terminated
// string, and `out` a writable pointer.
enum SgStatus sg_transform(const struct SgModule *m,
                           bool force,
                           const char *cost_model_json,
                           struct SgTransform **out);

// # Safety
// `t` must be null or a handle from this library, not yet freed.
void sg_transform_free(struct SgTransform *t);

// Copies one of the transformed programs out as a new module handle.
//
// # Safety
// `t` must be a live transform handle and `out` a writable pointer.
enum SgStatus sg_transform_program(const struct SgTransform *t,
                                   enum SgProgram which,
                                   struct SgModule **out);

// The transform manifest as JSON.
//
// # Safety
// `t` must be a live transform handle and `out` a writable pointer.
enum SgStatus sg_transform_manifest(const struct SgTransform *t, char **out);

// Runs the module on every replica. Inputs are JSON in the CLI's format, or
// null for seeded random inputs.
//
// # Safety
// `m` must be a live module handle, `inputs_json` null or a NUL-terminated
// string, and `out` a writable pointer.
enum SgStatus sg_simulate(const struct SgModule *m,
                          const char *inputs_json,
                          uint64_t seed,
                          char **out);

// Modeled run time and peak memory as JSON.
//
// # Safety
// `m` must be a live module handle, `cost_model` null or a NUL-terminated
// string, and `out` a writable pointer.
enum SgStatus sg_cost(const struct SgModule *m, const char *cost_model_json, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHARDGRAPH_H */
