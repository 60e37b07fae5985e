#include "cvaet/cvaet.h"

#include <cstring>
#include <exception>
#include <filesystem>
#include <new>
#include <string>

#include "cvaet/config.hpp"
#include "cvaet/error.hpp"
#include "cvaet/pipeline.hpp"

struct cvaet_settings {
  cvaet::Settings value;
};

struct cvaet_model {
  cvaet::Responder responder;
};

namespace {

thread_local std::string g_last_error;

cvaet_status to_status(cvaet::ErrorKind kind) {
  using cvaet::ErrorKind;
  switch (kind) {
    case ErrorKind::invalid_argument: return CVAET_ERR_INVALID_ARGUMENT;
    case ErrorKind::io: return CVAET_ERR_IO;
    case ErrorKind::parse: return CVAET_ERR_PARSE;
    case ErrorKind::validation: return CVAET_ERR_VALIDATION;
    case ErrorKind::config: return CVAET_ERR_CONFIG;
    case ErrorKind::numeric: return CVAET_ERR_NUMERIC;
    case ErrorKind::version: return CVAET_ERR_VERSION;
    case ErrorKind::backend: return CVAET_ERR_BACKEND;
    case ErrorKind::precondition: return CVAET_ERR_PRECONDITION;
    case ErrorKind::internal: return CVAET_ERR_INTERNAL;
  }
  return CVAET_ERR_INTERNAL;
}

cvaet_status set_error(cvaet_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

// Runs `body`, translating any exception into a status and message.
template <class F>
cvaet_status guarded(F&& body) {
  try {
    g_last_error.clear();
    body();
    return CVAET_OK;
  } catch (const cvaet::Error& e) {
    return set_error(to_status(e.kind()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return set_error(CVAET_ERR_PARSE, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return set_error(CVAET_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return set_error(CVAET_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(CVAET_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(CVAET_ERR_INTERNAL, "unknown exception");
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void emit(char** out, const std::string& s) {
  if (out != nullptr) *out = copy_string(s);
}

void need(const void* p, const char* name) {
  if (p == nullptr) cvaet::fail(cvaet::ErrorKind::invalid_argument, std::string(name) + " is NULL");
}

}  // namespace

extern "C" {

const char* cvaet_version(void) { return "1.0.0"; }

const char* cvaet_status_name(cvaet_status status) {
  switch (status) {
    case CVAET_OK: return "ok";
    case CVAET_ERR_INVALID_ARGUMENT: return cvaet::error_kind_name(cvaet::ErrorKind::invalid_argument);
    case CVAET_ERR_IO: return cvaet::error_kind_name(cvaet::ErrorKind::io);
    case CVAET_ERR_PARSE: return cvaet::error_kind_name(cvaet::ErrorKind::parse);
    case CVAET_ERR_VALIDATION: return cvaet::error_kind_name(cvaet::ErrorKind::validation);
    case CVAET_ERR_CONFIG: return cvaet::error_kind_name(cvaet::ErrorKind::config);
    case CVAET_ERR_NUMERIC: return cvaet::error_kind_name(cvaet::ErrorKind::numeric);
    case CVAET_ERR_VERSION: return cvaet::error_kind_name(cvaet::ErrorKind::version);
    case CVAET_ERR_BACKEND: return cvaet::error_kind_name(cvaet::ErrorKind::backend);
    case CVAET_ERR_PRECONDITION: return cvaet::error_kind_name(cvaet::ErrorKind::precondition);
    case CVAET_ERR_INTERNAL: return cvaet::error_kind_name(cvaet::ErrorKind::internal);
  }
  return "unknown status";
}

const char* cvaet_last_error(void) { return g_last_error.c_str(); }

void cvaet_string_free(char* s) { std::free(s); }

cvaet_status cvaet_settings_create(cvaet_settings** out) {
  return guarded([&] {
    need(out, "out");
    *out = new cvaet_settings();
  });
}

void cvaet_settings_destroy(cvaet_settings* settings) { delete settings; }

cvaet_status cvaet_settings_load_file(cvaet_settings* settings, const char* path) {
  return guarded([&] {
    need(settings, "settings");
    need(path, "path");
    settings->value.load_file(path);
  });
}

cvaet_status cvaet_settings_set(cvaet_settings* settings, const char* key, const char* value) {
  return guarded([&] {
    need(settings, "settings");
    need(key, "key");
    need(value, "value");
    settings->value.set(key, value);
  });
}

cvaet_status cvaet_settings_get(const cvaet_settings* settings, const char* key, char** value) {
  return guarded([&] {
    need(settings, "settings");
    need(key, "key");
    need(value, "value");
    emit(value, settings->value.get(key));
  });
}

cvaet_status cvaet_settings_validate(const cvaet_settings* settings) {
  return guarded([&] {
    need(settings, "settings");
    settings->value.validate();
  });
}

cvaet_status cvaet_settings_to_json(const cvaet_settings* settings, char** json) {
  return guarded([&] {
    need(settings, "settings");
    need(json, "json");
    emit(json, settings->value.to_json().dump());
  });
}

cvaet_status cvaet_settings_to_text(const cvaet_settings* settings, char** text) {
  return guarded([&] {
    need(settings, "settings");
    need(text, "text");
    emit(text, settings->value.to_text());
  });
}

cvaet_status cvaet_prepare(const cvaet_settings* settings, const char* in_path, const char* out_path,
                           const char* vocab_path, int reuse_vocab, char** report) {
  return guarded([&] {
    need(settings, "settings");
    need(in_path, "in_path");
    need(out_path, "out_path");
    need(vocab_path, "vocab_path");
    emit(report, cvaet::prepare_data(settings->value, in_path, out_path, vocab_path, reuse_vocab != 0).dump());
  });
}

cvaet_status cvaet_keywords(const cvaet_settings* settings, const char* in_path, const char* out_path,
                            char** report) {
  return guarded([&] {
    need(settings, "settings");
    need(in_path, "in_path");
    need(out_path, "out_path");
    emit(report, cvaet::keywords_file(settings->value, in_path, out_path).dump());
  });
}

cvaet_status cvaet_negatives(const cvaet_settings* settings, const char* in_path, const char* out_path,
                             char** report) {
  return guarded([&] {
    need(settings, "settings");
    need(in_path, "in_path");
    need(out_path, "out_path");
    emit(report, cvaet::negatives_file(settings->value, in_path, out_path).dump());
  });
}

cvaet_status cvaet_train(const cvaet_settings* settings, const char* data_path, const char* valid_path,
                         const char* out_dir, cvaet_progress_fn progress, void* user_data, char** report) {
  return guarded([&] {
    need(settings, "settings");
    need(data_path, "data_path");
    need(out_dir, "out_dir");
    cvaet::TrainingCallbacks cb;
    if (progress != nullptr) {
      cb.on_step = [&](std::int64_t step, const cvaet::LossBreakdown& loss) {
        nlohmann::json j = loss.to_json();
        j["step"] = step;
        j["split"] = "train";
        progress(j.dump().c_str(), user_data);
      };
      cb.on_validation = [&](const cvaet::ValidationRecord& v) { progress(v.to_json().dump().c_str(), user_data); };
    }
    const std::filesystem::path valid = valid_path != nullptr ? valid_path : "";
    emit(report, cvaet::train_files(settings->value, data_path, valid, out_dir, cb).dump());
  });
}

cvaet_status cvaet_generate(const cvaet_settings* settings, const char* checkpoint_path, const char* in_path,
                            const char* out_path, char** report) {
  return guarded([&] {
    need(settings, "settings");
    need(checkpoint_path, "checkpoint_path");
    need(in_path, "in_path");
    need(out_path, "out_path");
    emit(report, cvaet::generate_file(settings->value, checkpoint_path, in_path, out_path).dump());
  });
}

cvaet_status cvaet_eval(const cvaet_settings* settings, const char* checkpoint_path, const char* test_path,
                        char** report) {
  return guarded([&] {
    need(settings, "settings");
    need(checkpoint_path, "checkpoint_path");
    need(test_path, "test_path");
    emit(report, cvaet::evaluate(settings->value, checkpoint_path, test_path).dump());
  });
}

cvaet_status cvaet_plot(const cvaet_settings* settings, const char* steps_path, const char* svg_path,
                        char** report) {
  return guarded([&] {
    need(settings, "settings");
    need(steps_path, "steps_path");
    need(svg_path, "svg_path");
    emit(report, cvaet::plot_steps(settings->value, steps_path, svg_path).dump());
  });
}

cvaet_status cvaet_model_load(const char* checkpoint_path, cvaet_model** out) {
  return guarded([&] {
    need(checkpoint_path, "checkpoint_path");
    need(out, "out");
    *out = new cvaet_model{cvaet::Responder(checkpoint_path)};
  });
}

void cvaet_model_destroy(cvaet_model* model) { delete model; }

cvaet_status cvaet_model_info(const cvaet_model* model, char** json) {
  return guarded([&] {
    need(model, "model");
    const cvaet::Checkpoint& ck = model->responder.checkpoint();
    need(json, "json");
    emit(json, nlohmann::json{{"step", ck.state.step},
                              {"model", ck.model.config().to_json()},
                              {"vocab_size", ck.vocab.size()},
                              {"settings", ck.settings.to_json()}}
                   .dump());
  });
}

cvaet_status cvaet_model_respond(const cvaet_model* model, const cvaet_settings* settings, const char* context_json,
                                 char** responses_json) {
  return guarded([&] {
    need(model, "model");
    need(context_json, "context_json");
    need(responses_json, "responses_json");
    const auto j = nlohmann::json::parse(context_json);
    if (!j.is_array()) cvaet::fail(cvaet::ErrorKind::invalid_argument, "context must be a JSON array of strings");
    const cvaet::DecodeConfig dc = settings != nullptr ? settings->value.decode : cvaet::DecodeConfig{};
    emit(responses_json, nlohmann::json(model->responder.respond(j.get<std::vector<std::string>>(), dc)).dump());
  });
}

}  // extern "C"
