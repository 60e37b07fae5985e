/* C interface to the cvaet library.
 *
 * Conventions:
 *  - Every fallible call returns a cvaet_status; CVAET_OK is 0.
 *  - On failure, cvaet_last_error() gives a message for the calling thread,
 *    valid until that thread's next call into the library.
 *  - Strings handed out through char** parameters are owned by the caller and
 *    released with cvaet_string_free(). Those parameters may be NULL when the
 *    result is not wanted.
 *  - Handles are opaque; destroy functions accept NULL.
 *  - Reports and structured values are JSON text.
 */
#ifndef CVAET_CVAET_H
#define CVAET_CVAET_H

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define CVAET_API __declspec(dllexport)
#else
#define CVAET_API __attribute__((visibility("default")))
#endif

typedef enum cvaet_status {
  CVAET_OK = 0,
  CVAET_ERR_INVALID_ARGUMENT = 1,
  CVAET_ERR_IO = 2,
  CVAET_ERR_PARSE = 3,
  CVAET_ERR_VALIDATION = 4,
  CVAET_ERR_CONFIG = 5,
  CVAET_ERR_NUMERIC = 6,
  CVAET_ERR_VERSION = 7,
  CVAET_ERR_BACKEND = 8,
  CVAET_ERR_PRECONDITION = 9,
  CVAET_ERR_INTERNAL = 10
} cvaet_status;

typedef struct cvaet_settings cvaet_settings;
typedef struct cvaet_model cvaet_model;

/* Receives one JSON line per training step and per validation record. */
typedef void (*cvaet_progress_fn)(const char* json_line, void* user_data);

CVAET_API const char* cvaet_version(void);
CVAET_API const char* cvaet_status_name(cvaet_status status);
CVAET_API const char* cvaet_last_error(void);
CVAET_API void cvaet_string_free(char* s);

/* ---- settings: defaults, then a key = value file, then individual keys ---- */

CVAET_API cvaet_status cvaet_settings_create(cvaet_settings** out);
CVAET_API void cvaet_settings_destroy(cvaet_settings* settings);
CVAET_API cvaet_status cvaet_settings_load_file(cvaet_settings* settings, const char* path);
CVAET_API cvaet_status cvaet_settings_set(cvaet_settings* settings, const char* key, const char* value);
CVAET_API cvaet_status cvaet_settings_get(const cvaet_settings* settings, const char* key, char** value);
CVAET_API cvaet_status cvaet_settings_validate(const cvaet_settings* settings);
CVAET_API cvaet_status cvaet_settings_to_json(const cvaet_settings* settings, char** json);
/* The same settings as `key = value` lines, loadable by cvaet_settings_load_file. */
CVAET_API cvaet_status cvaet_settings_to_text(const cvaet_settings* settings, char** text);

/* ---- pipeline stages; each writes a JSON report to *report ----
 * report may be NULL when the caller does not want it. Output pointers of
 * the getters above must not be NULL. */

/* Raw episodes -> processed examples and a vocabulary file. With
 * reuse_vocab != 0 the vocabulary file is read instead of written. */
CVAET_API cvaet_status cvaet_prepare(const cvaet_settings* settings, const char* in_path, const char* out_path,
                                     const char* vocab_path, int reuse_vocab, char** report);
CVAET_API cvaet_status cvaet_keywords(const cvaet_settings* settings, const char* in_path, const char* out_path,
                                      char** report);
CVAET_API cvaet_status cvaet_negatives(const cvaet_settings* settings, const char* in_path, const char* out_path,
                                       char** report);
/* valid_path may be NULL. progress may be NULL. Resumes from out_dir/last. */
CVAET_API cvaet_status cvaet_train(const cvaet_settings* settings, const char* data_path, const char* valid_path,
                                   const char* out_dir, cvaet_progress_fn progress, void* user_data,
                                   char** report);
CVAET_API cvaet_status cvaet_generate(const cvaet_settings* settings, const char* checkpoint_path,
                                      const char* in_path, const char* out_path, char** report);
CVAET_API cvaet_status cvaet_eval(const cvaet_settings* settings, const char* checkpoint_path,
                                  const char* test_path, char** report);
CVAET_API cvaet_status cvaet_plot(const cvaet_settings* settings, const char* steps_path, const char* svg_path,
                                  char** report);

/* ---- a loaded model ---- */

CVAET_API cvaet_status cvaet_model_load(const char* checkpoint_path, cvaet_model** out);
CVAET_API void cvaet_model_destroy(cvaet_model* model);
/* {"step":..,"model":{..},"vocab_size":..,"settings":{..}} */
CVAET_API cvaet_status cvaet_model_info(const cvaet_model* model, char** json);
/* context_json is a JSON array of utterance strings, oldest first. Decoding
 * options come from `settings` (NULL for defaults). *responses_json receives
 * a JSON array of strings. */
CVAET_API cvaet_status cvaet_model_respond(const cvaet_model* model, const cvaet_settings* settings,
                                           const char* context_json, char** responses_json);

#ifdef __cplusplus
}
#endif

#endif /* CVAET_CVAET_H */
