#include "ofa/ofa.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <string>

#include <nlohmann/json.hpp>

#include "ofa/checkpoint.hpp"
#include "ofa/cost.hpp"
#include "ofa/elastic.hpp"
#include "ofa/error.hpp"
#include "ofa/harness.hpp"
#include "ofa/report.hpp"
#include "ofa/scheduler.hpp"

using nlohmann::json;

struct ofa_supernet {
  ofa::Supernet net;
  json meta;
};

struct ofa_subnet {
  ofa::elastic::StandaloneNet net;
};

namespace {

thread_local std::string g_last_error;

ofa_status status_of(ofa::ErrorKind k) {
  switch (k) {
    case ofa::ErrorKind::invalid_argument: return OFA_ERR_INVALID_ARGUMENT;
    case ofa::ErrorKind::dimension: return OFA_ERR_DIMENSION;
    case ofa::ErrorKind::config: return OFA_ERR_CONFIG;
    case ofa::ErrorKind::io: return OFA_ERR_IO;
    case ofa::ErrorKind::format: return OFA_ERR_FORMAT;
    case ofa::ErrorKind::version: return OFA_ERR_VERSION;
    case ofa::ErrorKind::internal: return OFA_ERR_INTERNAL;
  }
  return OFA_ERR_INTERNAL;
}

template <class F>
ofa_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return OFA_OK;
  } catch (const ofa::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return OFA_ERR_FORMAT;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return OFA_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return OFA_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown exception";
    return OFA_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (!p) throw ofa::Error(ofa::ErrorKind::invalid_argument, std::string(what) + " must not be NULL");
}

json parse(const char* text, const char* what) {
  need(text, what);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ofa::FormatError(std::string(what) + ": " + e.what());
  }
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

ofa::ArchSpec arch_of(const char* arch_json) {
  return ofa::arch_choice_from_json(parse(arch_json, "arch_json")).build();
}

ofa::Tensor input_tensor(const float* input, int64_t batch, int64_t r) {
  need(input, "input");
  if (batch < 1 || r < 1) throw ofa::Error(ofa::ErrorKind::invalid_argument, "batch and resolution must be positive");
  ofa::Tensor x(ofa::Shape{batch, 3, r, r});
  std::memcpy(x.data().data(), input, sizeof(float) * static_cast<size_t>(x.numel()));
  return x;
}

void copy_logits(const std::vector<ofa::Tensor>& logits, float* out, int64_t capacity, int64_t* n_written) {
  int64_t n = 0;
  for (const auto& t : logits) n += t.numel();
  if (n_written) *n_written = n;
  if (!out) return;
  if (capacity < n)
    throw ofa::Error(ofa::ErrorKind::invalid_argument, "output buffer holds " + std::to_string(capacity) +
                                                           " floats, " + std::to_string(n) + " needed");
  for (const auto& t : logits) {
    auto d = t.data();
    std::memcpy(out, d.data(), sizeof(float) * d.size());
    out += d.size();
  }
}

json phase_json(const ofa::PhaseSpec& p) {
  const auto& u = p.unlocked;
  return {{"name", p.name},
          {"lr", p.lr},
          {"epochs", p.epochs},
          {"warmup_epochs", p.warmup_epochs},
          {"n_subnets", p.n_subnets},
          {"unlocked",
           {{"resolution", u.resolution},
            {"kernel", u.kernel},
            {"level", u.level},
            {"height", u.height},
            {"depth", u.depth},
            {"width", u.width}}}};
}

}  // namespace

extern "C" {

const char* ofa_version(void) { return OFA_VERSION_STRING; }

const char* ofa_status_name(ofa_status s) {
  switch (s) {
    case OFA_OK: return "ok";
    case OFA_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case OFA_ERR_DIMENSION: return "dimension";
    case OFA_ERR_CONFIG: return "config";
    case OFA_ERR_IO: return "io";
    case OFA_ERR_FORMAT: return "format";
    case OFA_ERR_VERSION: return "version";
    case OFA_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* ofa_last_error(void) { return g_last_error.c_str(); }

void ofa_free_string(char* s) { std::free(s); }

ofa_status ofa_cost(const char* arch_json, const char* subnet_json, int64_t* params, int64_t* macs) {
  return guarded([&] {
    const auto arch = arch_of(arch_json);
    const auto cfg = ofa::subnet_from_json(parse(subnet_json, "subnet_json"), arch);
    cfg.validate(arch);
    const auto c = ofa::count_cost(arch, cfg);
    if (params) *params = c.params;
    if (macs) *macs = c.macs;
  });
}

ofa_status ofa_phase_sequence(const char* arch_json, char** out_json) {
  return guarded([&] {
    need(out_json, "out_json");
    json out = json::array();
    for (const auto& p : ofa::phase_sequence(arch_of(arch_json))) out.push_back(phase_json(p));
    *out_json = dup(out.dump());
  });
}

ofa_status ofa_enumerate(const char* arch_json, const char* phase, char** out_json) {
  return guarded([&] {
    need(phase, "phase");
    need(out_json, "out_json");
    const auto arch = arch_of(arch_json);
    json out = json::array();
    for (const auto& cfg : ofa::enumerate_space(phase, arch)) {
      const auto c = ofa::count_cost(arch, cfg);
      json cj;
      to_json(cj, cfg);
      out.push_back({{"key", cfg.key()}, {"config", cj}, {"params", c.params}, {"flops", c.macs}});
    }
    *out_json = dup(out.dump());
  });
}

ofa_status ofa_preset(const char* name, char** out_json) {
  return guarded([&] {
    need(name, "name");
    need(out_json, "out_json");
    json j;
    to_json(j, ofa::preset_config(name));
    *out_json = dup(j.dump(2));
  });
}

ofa_status ofa_resolve_run_config(const char* run_config_json, char** out_json) {
  return guarded([&] {
    need(out_json, "out_json");
    json j;
    to_json(j, ofa::run_config_from_json(parse(run_config_json, "run_config_json")));
    *out_json = dup(j.dump(2));
  });
}

ofa_status ofa_train(const char* run_config_json, const char* resume_path, ofa_progress_fn progress, void* user,
                     char** out_report_json) {
  return guarded([&] {
    const auto cfg = ofa::run_config_from_json(parse(run_config_json, "run_config_json"));
    std::optional<std::filesystem::path> resume;
    if (resume_path && *resume_path) {
      if (std::string(resume_path) == "auto") {
        resume = ofa::latest_checkpoint(cfg.output_dir.empty() ? "." : cfg.output_dir);
      } else {
        resume = std::filesystem::path(resume_path);
      }
    }
    ofa::RunHooks hooks;
    if (progress) {
      hooks.on_step = [&](const std::string& phase, int64_t it, int64_t total, double loss, double lr) {
        const json e = {{"event", "step"}, {"phase", phase}, {"iteration", it},
                        {"total", total},  {"loss", loss},   {"lr", lr}};
        progress(user, e.dump().c_str());
      };
      hooks.on_phase = [&](const ofa::PhaseReport& r) {
        const json e = {{"event", "phase"},  {"phase", r.phase},       {"avg", r.avg},
                        {"best", r.best},    {"best_key", r.best_key}, {"maximal_accuracy", r.maximal_accuracy},
                        {"train_loss", r.train_loss}, {"wall_clock_s", r.wall_clock_s}};
        progress(user, e.dump().c_str());
      };
      hooks.log = [&](const std::string& s) {
        const json e = {{"event", "log"}, {"message", s}};
        progress(user, e.dump().c_str());
      };
    }
    auto result = ofa::run_eps(cfg, hooks, resume);
    if (out_report_json) {
      json r = ofa::to_json(result.report);
      r["completed"] = result.completed;
      r["last_checkpoint"] = result.last_checkpoint.string();
      *out_report_json = dup(r.dump(2));
    }
  });
}

ofa_status ofa_supernet_load(const char* checkpoint_path, ofa_supernet** out) {
  return guarded([&] {
    need(checkpoint_path, "checkpoint_path");
    need(out, "out");
    *out = nullptr;
    const auto c = ofa::checkpoint::read(checkpoint_path);
    auto net = ofa::load_supernet(checkpoint_path);
    json meta = {{"arch", net.arch()},
                 {"run_config", c.meta.value("run_config", json())},
                 {"phase", c.meta.value("phase", std::string())},
                 {"path", checkpoint_path}};
    *out = new ofa_supernet{std::move(net), std::move(meta)};
  });
}

void ofa_supernet_free(ofa_supernet* net) { delete net; }

ofa_status ofa_supernet_info(const ofa_supernet* net, char** out_json) {
  return guarded([&] {
    need(net, "net");
    need(out_json, "out_json");
    json j = net->meta;
    j["total_parameters"] = net->net.total_parameters();
    *out_json = dup(j.dump(2));
  });
}

ofa_status ofa_supernet_evaluate(const ofa_supernet* net, const char* run_config_json, const char* phase,
                                 const char* subnet_json, char** out_json) {
  return guarded([&] {
    need(net, "net");
    need(out_json, "out_json");
    json cj = run_config_json ? parse(run_config_json, "run_config_json") : net->meta.at("run_config");
    if (cj.is_null()) throw ofa::ConfigError("checkpoint carries no run config; pass one explicitly");
    const auto cfg = ofa::run_config_from_json(cj);
    const auto splits = ofa::data::load_dataset(cfg.dataset);
    const auto& arch = net->net.arch();
    if (subnet_json) {
      const auto sub = ofa::subnet_from_json(parse(subnet_json, "subnet_json"), arch);
      sub.validate(arch);
      const double acc = ofa::evaluate_config(net->net, sub, splits.test, splits.norm, cfg.eval,
                                              cfg.distill.exit_weights, &splits.train);
      const auto c = ofa::count_cost(arch, sub);
      json sj;
      to_json(sj, sub);
      *out_json = dup(json{{"key", sub.key()}, {"config", sj}, {"accuracy", acc}, {"params", c.params},
                           {"flops", c.macs}}
                          .dump(2));
      return;
    }
    std::string ph = phase ? phase : net->meta.value("phase", std::string());
    if (ph.empty()) ph = ofa::phase_names(arch).back();
    const auto rep = ofa::evaluate_sweep(net->net, ph, splits.test, splits.norm, cfg.eval, cfg.distill.exit_weights,
                                         &splits.train);
    *out_json = dup(ofa::to_json(rep).dump(2));
  });
}

ofa_status ofa_supernet_extract(const ofa_supernet* net, const char* subnet_json, const char* out_path) {
  return guarded([&] {
    need(net, "net");
    need(out_path, "out_path");
    const auto& arch = net->net.arch();
    const auto cfg = ofa::subnet_from_json(parse(subnet_json, "subnet_json"), arch);
    auto sub = ofa::elastic::extract_subnet(net->net, cfg);
    ofa::checkpoint::save_subnet(out_path, sub);
  });
}

ofa_status ofa_supernet_forward(const ofa_supernet* net, const char* subnet_json, const float* input, int64_t batch,
                                int64_t resolution, float* out_logits, int64_t capacity, int64_t* n_written) {
  return guarded([&] {
    need(net, "net");
    const auto& arch = net->net.arch();
    auto cfg = ofa::subnet_from_json(parse(subnet_json, "subnet_json"), arch);
    const auto x = input_tensor(input, batch, resolution);
    ofa::NoGradGuard ng;
    copy_logits(net->net.forward(x, cfg), out_logits, capacity, n_written);
  });
}

ofa_status ofa_subnet_load(const char* path, ofa_subnet** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    *out = new ofa_subnet{ofa::checkpoint::load_subnet(path)};
  });
}

void ofa_subnet_free(ofa_subnet* net) { delete net; }

ofa_status ofa_subnet_info(const ofa_subnet* net, char** out_json) {
  return guarded([&] {
    need(net, "net");
    need(out_json, "out_json");
    const auto& s = net->net;
    json cj;
    to_json(cj, s.config());
    const auto c = ofa::count_cost(s.arch(), s.config());
    *out_json = dup(json{{"arch", s.arch()}, {"config", cj}, {"key", s.config().key()}, {"params", c.params},
                         {"flops", c.macs}}
                        .dump(2));
  });
}

ofa_status ofa_subnet_param_count(const ofa_subnet* net, int64_t* out) {
  return guarded([&] {
    need(net, "net");
    need(out, "out");
    *out = const_cast<ofa_subnet*>(net)->net.parameter_count();
  });
}

ofa_status ofa_subnet_forward(const ofa_subnet* net, const float* input, int64_t batch, int64_t resolution,
                              float* out_logits, int64_t capacity, int64_t* n_written) {
  return guarded([&] {
    need(net, "net");
    const auto x = input_tensor(input, batch, resolution);
    ofa::NoGradGuard ng;
    copy_logits(net->net.forward(x), out_logits, capacity, n_written);
  });
}

ofa_status ofa_report_render(const char* const* report_jsons, size_t n, char** out_text) {
  return guarded([&] {
    need(out_text, "out_text");
    if (n > 0) need(report_jsons, "report_jsons");
    std::vector<ofa::RunReport> runs;
    for (size_t i = 0; i < n; ++i) runs.push_back(ofa::run_report_from_json(parse(report_jsons[i], "report_json")));
    *out_text = dup(ofa::render_table(runs));
  });
}

}  // extern "C"
