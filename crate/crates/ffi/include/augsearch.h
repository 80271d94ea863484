#ifndef AUGSEARCH_H
#define AUGSEARCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

#define FAUG_OK 0

/*
 A required pointer argument was null.
 */
#define FAUG_ERR_NULL 1

/*
 An argument was out of range or a buffer was too small.
 */
#define FAUG_ERR_INVALID_ARGUMENT 2

/*
 The policy file could not be read.
 */
#define FAUG_ERR_IO 3

/*
 The policy document was malformed.
 */
#define FAUG_ERR_PARSE 4

/*
 Augmentation failed inside the library.
 */
#define FAUG_ERR_INTERNAL 5

/*
 A Rust panic was caught at the boundary.
 */
#define FAUG_ERR_PANIC 6

/*
 Opaque handle to a loaded policy.
 */
typedef struct FaugPolicy FaugPolicy;

/*
 Load a policy JSON file. On success `*out` owns a handle that must be
 released with [`faug_policy_free`].

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
int faug_policy_load(const char *path, struct FaugPolicy **out);

/*
 Parse a policy from an in-memory JSON document.

 # Safety
 `json` must be a NUL-terminated string and `out` a writable pointer.
 */
int faug_policy_from_json(const char *json, struct FaugPolicy **out);

/*
 Release a handle. Null is ignored.

 # Safety
 `policy` must come from a load function and not have been freed.
 */
void faug_policy_free(struct FaugPolicy *policy);

/*
 Number of transform types and maximum depth of the policy.

 # Safety
 `policy` must be a live handle; the output pointers must be writable.
 */
int faug_policy_dims(const struct FaugPolicy *policy, size_t *num_types, size_t *max_depth);

/*
 Write the depth distribution (`max_depth + 1` probabilities) into `out`.

 # Safety
 `out` must point to at least `len` writable doubles.
 */
int faug_policy_depth_probs(const struct FaugPolicy *policy, double *out, size_t len);

/*
 Name of transform `index` in the fixed search-space order, or null when
 out of range. The string is static.
 */
const char *faug_transform_name(size_t index);

/*
 Draw one hard policy at the stored evaluation temperature and apply it to
 an image of `c * h * w` doubles. The draw is a pure function of `seed`.
 On success `*depth_out` (if non-null) receives the number of applied
 transforms. `input` and `output` may alias.

 # Safety
 `input` and `output` must each point to `c * h * w` doubles.
 */
int faug_augment_image(const struct FaugPolicy *policy,
                       const double *input,
                       size_t c,
                       size_t h,
                       size_t w,
                       uint64_t seed,
                       double *output,
                       size_t *depth_out);

/*
 Message for the last failed call on this thread, or null after a
 successful call. Valid until the next call on the same thread.
 */
const char *faug_last_error_message(void);

#endif  /* AUGSEARCH_H */
