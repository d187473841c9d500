/* C interface to the elastic supernet library. Every function returns an
 * ofa_status; on failure ofa_last_error() describes the problem. Strings
 * returned through char** are owned by the caller and released with
 * ofa_free_string. JSON documents use the same schemas as the CLI files. */
#ifndef OFA_OFA_H
#define OFA_OFA_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define OFA_API __declspec(dllexport)
#else
#define OFA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ofa_status {
  OFA_OK = 0,
  OFA_ERR_INVALID_ARGUMENT = 1,
  OFA_ERR_DIMENSION = 2,
  OFA_ERR_CONFIG = 3,
  OFA_ERR_IO = 4,
  OFA_ERR_FORMAT = 5,
  OFA_ERR_VERSION = 6,
  OFA_ERR_INTERNAL = 7
} ofa_status;

OFA_API const char* ofa_version(void);
OFA_API const char* ofa_status_name(ofa_status status);
/* Message of the most recent failure on the calling thread. */
OFA_API const char* ofa_last_error(void);
OFA_API void ofa_free_string(char* s);

/* Architecture documents look like the "arch" section of a run config:
 * {"preset": "ofa_mbv3", "variant": "SE_B", "width_multiplier": 1.0,
 *  "n_classes": 8}. Subnet configs accept scalars or per-block arrays. */
OFA_API ofa_status ofa_cost(const char* arch_json, const char* subnet_json, int64_t* params, int64_t* macs);
OFA_API ofa_status ofa_phase_sequence(const char* arch_json, char** out_json);
OFA_API ofa_status ofa_enumerate(const char* arch_json, const char* phase, char** out_json);

/* Named preset ("desk", "reference") as a run config document. */
OFA_API ofa_status ofa_preset(const char* name, char** out_json);
/* Validates a run config and returns it with every default filled in. */
OFA_API ofa_status ofa_resolve_run_config(const char* run_config_json, char** out_json);

/* Receives one JSON event per training step, phase end and log line. */
typedef void (*ofa_progress_fn)(void* user, const char* event_json);

/* Runs the pipeline; resume_path (may be NULL) names a run checkpoint, or
 * "auto" for the newest checkpoint in the run's output directory. */
OFA_API ofa_status ofa_train(const char* run_config_json, const char* resume_path, ofa_progress_fn progress,
                             void* user, char** out_report_json);

typedef struct ofa_supernet ofa_supernet;

OFA_API ofa_status ofa_supernet_load(const char* checkpoint_path, ofa_supernet** out);
OFA_API void ofa_supernet_free(ofa_supernet* net);
/* {"arch": ..., "run_config": ..., "phase": ...} */
OFA_API ofa_status ofa_supernet_info(const ofa_supernet* net, char** out_json);
/* Test-set evaluation. run_config_json may be NULL to reuse the config the
 * checkpoint was trained with. With subnet_json, scores that one config;
 * otherwise sweeps `phase` (NULL: the checkpoint's phase). */
OFA_API ofa_status ofa_supernet_evaluate(const ofa_supernet* net, const char* run_config_json, const char* phase,
                                         const char* subnet_json, char** out_json);
OFA_API ofa_status ofa_supernet_extract(const ofa_supernet* net, const char* subnet_json, const char* out_path);
/* input: (batch, 3, r, r) floats, normalized. out_logits receives every
 * produced exit back to back, batch x n_classes each; with out_logits NULL
 * only *n_written is set. */
OFA_API ofa_status ofa_supernet_forward(const ofa_supernet* net, const char* subnet_json, const float* input,
                                        int64_t batch, int64_t resolution, float* out_logits, int64_t capacity,
                                        int64_t* n_written);

typedef struct ofa_subnet ofa_subnet;

OFA_API ofa_status ofa_subnet_load(const char* path, ofa_subnet** out);
OFA_API void ofa_subnet_free(ofa_subnet* net);
OFA_API ofa_status ofa_subnet_info(const ofa_subnet* net, char** out_json);
OFA_API ofa_status ofa_subnet_param_count(const ofa_subnet* net, int64_t* out);
OFA_API ofa_status ofa_subnet_forward(const ofa_subnet* net, const float* input, int64_t batch, int64_t resolution,
                                      float* out_logits, int64_t capacity, int64_t* n_written);

/* Aligned-text table of one or more run reports. */
OFA_API ofa_status ofa_report_render(const char* const* report_jsons, size_t n, char** out_text);

#ifdef __cplusplus
}
#endif

#endif
